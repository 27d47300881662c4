#include "qattack/net.hpp"

#include <algorithm>
#include <cmath>

namespace qattack {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using CMapRow = Eigen::Map<const RowMat>;

Shape3 conv_out_shape(const Shape3& in, int k, int out_c) {
  return Shape3{out_c, in.height - k + 1, in.width - k + 1};
}

Shape3 pool_out_shape(const Shape3& in, int w) {
  return Shape3{in.channels, in.height / w, in.width / w};
}

// Gathers k x k patches of a CHW image into a (c*k*k) x (OH*OW) column-major
// block with leading dimension `rows`, starting at `out`.
void im2col_into(const double* in, const Shape3& is, int k, double* out, Eigen::Index rows) {
  const int oh = is.height - k + 1;
  const int ow = is.width - k + 1;
  const int hw = is.height * is.width;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* col = out + static_cast<Eigen::Index>(oy * ow + ox) * rows;
      Eigen::Index r = 0;
      for (int ci = 0; ci < is.channels; ++ci) {
        const double* plane = in + ci * hw;
        for (int ky = 0; ky < k; ++ky) {
          const double* row = plane + (oy + ky) * is.width + ox;
          for (int kx = 0; kx < k; ++kx) col[r++] = row[kx];
        }
      }
    }
  }
}

// Scatter-adds a (c*k*k) x (OH*OW) patch-gradient block back onto a CHW image.
void col2im_add(const double* cols, const Shape3& is, int k, double* out, Eigen::Index rows) {
  const int oh = is.height - k + 1;
  const int ow = is.width - k + 1;
  const int hw = is.height * is.width;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const double* col = cols + static_cast<Eigen::Index>(oy * ow + ox) * rows;
      Eigen::Index r = 0;
      for (int ci = 0; ci < is.channels; ++ci) {
        double* plane = out + ci * hw;
        for (int ky = 0; ky < k; ++ky) {
          double* row = plane + (oy + ky) * is.width + ox;
          for (int kx = 0; kx < k; ++kx) row[kx] += col[r++];
        }
      }
    }
  }
}

void compute_pool_argmax(const double* in, const Shape3& is, int w, std::vector<int>& idx) {
  const Shape3 os = pool_out_shape(is, w);
  idx.resize(os.size());
  const int hw = is.height * is.width;
  int p = 0;
  for (int c = 0; c < is.channels; ++c) {
    for (int oy = 0; oy < os.height; ++oy) {
      for (int ox = 0; ox < os.width; ++ox) {
        int best = -1;
        double bv = -std::numeric_limits<double>::infinity();
        for (int ky = 0; ky < w; ++ky) {
          for (int kx = 0; kx < w; ++kx) {
            const int q = c * hw + (oy * w + ky) * is.width + ox * w + kx;
            if (in[q] > bv) {  // strict: ties keep the first row-major element
              bv = in[q];
              best = q;
            }
          }
        }
        idx[p++] = best;
      }
    }
  }
}

Vec stable_softmax(const Vec& z, double temperature) {
  const double m = z.maxCoeff();
  Vec e = ((z.array() - m) / temperature).exp();
  return e / e.sum();
}

double sigmoid_scalar(double a) {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

}  // namespace

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

LayerSpec conv_layer(int kernel, int out_channels) {
  LayerSpec s;
  s.kind = LayerKind::conv;
  s.kernel = kernel;
  s.out_channels = out_channels;
  return s;
}

LayerSpec maxpool_layer(int window) {
  LayerSpec s;
  s.kind = LayerKind::maxpool;
  s.kernel = window;
  return s;
}

LayerSpec dense_layer(int units) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.units = units;
  return s;
}

LayerSpec relu_layer() { return LayerSpec{LayerKind::relu}; }
LayerSpec sigmoid_layer() { return LayerSpec{LayerKind::sigmoid}; }
LayerSpec softmax_layer() { return LayerSpec{LayerKind::softmax}; }

Network::Network(Shape3 input_shape, std::vector<LayerSpec> layers)
    : input_(input_shape), layers_(std::move(layers)) {
  if (input_.size() <= 0) throw std::invalid_argument("Network: empty input shape");
  Shape3 cur = input_;
  shapes_.reserve(layers_.size());
  for (auto& l : layers_) {
    switch (l.kind) {
      case LayerKind::conv: {
        if (l.kernel < 1 || l.kernel > std::min(cur.height, cur.width) || l.out_channels < 1)
          throw std::invalid_argument("Network: bad conv geometry");
        l.in_channels = cur.channels;
        const Eigen::Index rows = l.out_channels;
        const Eigen::Index cols = static_cast<Eigen::Index>(l.in_channels) * l.kernel * l.kernel;
        if (l.weights.size() == 0) l.weights = Mat::Zero(rows, cols);
        if (l.bias.size() == 0) l.bias = Vec::Zero(rows);
        if (l.weights.rows() != rows || l.weights.cols() != cols || l.bias.size() != rows)
          throw std::invalid_argument("Network: conv weight shape mismatch");
        cur = conv_out_shape(cur, l.kernel, l.out_channels);
        break;
      }
      case LayerKind::maxpool: {
        if (l.kernel < 1 || cur.height < l.kernel || cur.width < l.kernel)
          throw std::invalid_argument("Network: bad pool geometry");
        cur = pool_out_shape(cur, l.kernel);
        break;
      }
      case LayerKind::dense: {
        if (l.units < 1) throw std::invalid_argument("Network: bad dense units");
        l.in_dim = cur.size();
        if (l.weights.size() == 0) l.weights = Mat::Zero(l.units, l.in_dim);
        if (l.bias.size() == 0) l.bias = Vec::Zero(l.units);
        if (l.weights.rows() != l.units || l.weights.cols() != l.in_dim || l.bias.size() != l.units)
          throw std::invalid_argument("Network: dense weight shape mismatch");
        cur = Shape3{l.units, 1, 1};
        break;
      }
      case LayerKind::relu:
      case LayerKind::sigmoid:
      case LayerKind::softmax:
        break;
    }
    shapes_.push_back(cur);
  }
  const size_t n = layers_.size();
  if (n < 2 || layers_[n - 1].kind != LayerKind::softmax || layers_[n - 2].kind != LayerKind::dense)
    throw std::invalid_argument("Network: final stages must be dense then softmax");
  for (size_t i = 0; i + 1 < n; ++i)
    if (layers_[i].kind == LayerKind::softmax)
      throw std::invalid_argument("Network: softmax must be the last layer");
  classes_ = layers_[n - 2].units;
  if (classes_ < 2) throw std::invalid_argument("Network: need at least 2 classes");
}

ForwardTrace forward(const Network& net, const Vec& x, double temperature) {
  if (x.size() != net.input_dim())
    throw ShapeMismatch("forward: input length " + std::to_string(x.size()) + " != " +
                        std::to_string(net.input_dim()));
  if (!(temperature > 0.0)) throw std::invalid_argument("forward: temperature must be > 0");

  ForwardTrace t;
  t.temperature = temperature;
  t.input_in_box = (x.minCoeff() >= 0.0 && x.maxCoeff() <= 1.0);
  const auto& layers = net.layers();
  t.activations.resize(layers.size() + 1);
  t.pool_argmax.resize(layers.size());
  t.activations[0] = x;

  Shape3 cur = net.input_shape();
  for (size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const Vec& a = t.activations[i];
    Vec& out = t.activations[i + 1];
    switch (l.kind) {
      case LayerKind::conv: {
        const Shape3 os = conv_out_shape(cur, l.kernel, l.out_channels);
        const Eigen::Index rows = l.weights.cols();
        const Eigen::Index s = static_cast<Eigen::Index>(os.height) * os.width;
        Mat patches(rows, s);
        im2col_into(a.data(), cur, l.kernel, patches.data(), rows);
        out.resize(os.size());
        MapRow o(out.data(), l.out_channels, s);
        o = l.weights * patches;
        o.colwise() += l.bias;
        cur = os;
        break;
      }
      case LayerKind::maxpool: {
        compute_pool_argmax(a.data(), cur, l.kernel, t.pool_argmax[i]);
        const auto& idx = t.pool_argmax[i];
        out.resize(static_cast<Eigen::Index>(idx.size()));
        for (size_t p = 0; p < idx.size(); ++p) out[static_cast<Eigen::Index>(p)] = a[idx[p]];
        cur = pool_out_shape(cur, l.kernel);
        break;
      }
      case LayerKind::dense:
        out = l.weights * a + l.bias;
        cur = Shape3{l.units, 1, 1};
        break;
      case LayerKind::relu:
        out = a.cwiseMax(0.0);
        break;
      case LayerKind::sigmoid:
        out = a.unaryExpr([](double v) { return sigmoid_scalar(v); });
        break;
      case LayerKind::softmax:
        out = stable_softmax(a, temperature);
        break;
    }
  }
  t.logits = t.activations[layers.size() - 1];
  t.confidences = t.activations[layers.size()];
  return t;
}

int predict(const Network& net, const Vec& x) {
  const ForwardTrace t = forward(net, x);
  int best = 0;
  for (int i = 1; i < t.logits.size(); ++i)
    if (t.logits[i] > t.logits[best]) best = i;
  return best;
}

void WeightGradients::resize_like(const Network& net) {
  const auto& layers = net.layers();
  w.resize(layers.size());
  b.resize(layers.size());
  for (size_t i = 0; i < layers.size(); ++i) {
    w[i] = Mat::Zero(layers[i].weights.rows(), layers[i].weights.cols());
    b[i] = Vec::Zero(layers[i].bias.size());
  }
}

void WeightGradients::set_zero() {
  for (auto& m : w) m.setZero();
  for (auto& v : b) v.setZero();
}

void WeightGradients::add_scaled(const WeightGradients& other, double s) {
  for (size_t i = 0; i < w.size(); ++i) {
    if (other.w[i].size()) w[i] += s * other.w[i];
    if (other.b[i].size()) b[i] += s * other.b[i];
  }
}

void backprop(const Network& net, const ForwardTrace& trace, const Vec& logit_cotangent,
              Vec* input_grad, WeightGradients* wgrads) {
  const auto& layers = net.layers();
  const size_t n = layers.size();
  if (logit_cotangent.size() != net.class_count())
    throw ShapeMismatch("backprop: cotangent length mismatch");

  Vec cot = logit_cotangent;
  // Walk from the logits-producing dense layer (index n-2) down to the input.
  for (size_t i = n - 1; i-- > 0;) {
    const LayerSpec& l = layers[i];
    const Vec& a = trace.activations[i];
    Shape3 in_shape = (i == 0) ? net.input_shape() : net.shape_after(i - 1);
    switch (l.kind) {
      case LayerKind::dense: {
        if (wgrads) {
          wgrads->w[i].noalias() += cot * a.transpose();
          wgrads->b[i] += cot;
        }
        cot = l.weights.transpose() * cot;
        break;
      }
      case LayerKind::conv: {
        const Shape3 os = conv_out_shape(in_shape, l.kernel, l.out_channels);
        const Eigen::Index s = static_cast<Eigen::Index>(os.height) * os.width;
        CMapRow cot_img(cot.data(), l.out_channels, s);
        if (wgrads) {
          const Eigen::Index rows = l.weights.cols();
          Mat patches(rows, s);
          im2col_into(a.data(), in_shape, l.kernel, patches.data(), rows);
          wgrads->w[i].noalias() += cot_img * patches.transpose();
          wgrads->b[i] += cot_img.rowwise().sum();
        }
        Mat gcols = l.weights.transpose() * cot_img;
        Vec down = Vec::Zero(in_shape.size());
        col2im_add(gcols.data(), in_shape, l.kernel, down.data(), gcols.rows());
        cot = std::move(down);
        break;
      }
      case LayerKind::maxpool: {
        const auto& idx = trace.pool_argmax[i];
        Vec down = Vec::Zero(in_shape.size());
        for (size_t p = 0; p < idx.size(); ++p) down[idx[p]] += cot[static_cast<Eigen::Index>(p)];
        cot = std::move(down);
        break;
      }
      case LayerKind::relu:
        cot = (a.array() > 0.0).select(cot, 0.0);
        break;
      case LayerKind::sigmoid: {
        const Vec& y = trace.activations[i + 1];
        cot = (y.array() * (1.0 - y.array()) * cot.array()).matrix();
        break;
      }
      case LayerKind::softmax:
        throw std::logic_error("backprop: cotangent is seeded below the softmax layer");
    }
  }
  if (input_grad) *input_grad = cot;
}

namespace {

Vec softmax_tap_cotangent(const Vec& s, int cls) {
  // d S_cls / d Z at G = 1: S_cls * (e_cls − S).
  Vec c = -s[cls] * s;
  c[cls] += s[cls];
  return c;
}

// Seeds the tangent of the softmax-tap cotangent for a block of logit
// tangents zt (m x B): column b gets (∂²S_cls/∂Z²)·zt_b.
Mat softmax_tap_cotangent_tangent(const Vec& s, int cls, const Mat& zt) {
  const Eigen::Index m = s.size();
  const Eigen::Index b = zt.cols();
  Mat out(m, b);
  for (Eigen::Index col = 0; col < b; ++col) {
    const double sz = s.dot(zt.col(col));
    const double zc = zt(cls, col) - sz;
    for (Eigen::Index j = 0; j < m; ++j) {
      const double kron = (j == cls) ? 1.0 : 0.0;
      out(j, col) = s[cls] * ((kron - s[j]) * zc - s[j] * (zt(j, col) - sz));
    }
  }
  return out;
}

// Forward-over-reverse sweep: returns H·V for the tapped scalar, where V is a
// block of input tangent directions (n x B). The cotangent itself is shared
// across the block; only its tangent varies per column.
Mat hvp_block(const Network& net, const ForwardTrace& trace, int cls, Tap tap, const Mat& v) {
  const auto& layers = net.layers();
  const size_t n = layers.size();
  const Eigen::Index b = v.cols();

  // Forward tangent sweep, keeping tangents of every activation.
  std::vector<Mat> tb(n + 1);
  tb[0] = v;
  Shape3 cur = net.input_shape();
  for (size_t i = 0; i < n; ++i) {
    const LayerSpec& l = layers[i];
    const Mat& at = tb[i];
    switch (l.kind) {
      case LayerKind::conv: {
        const Shape3 os = conv_out_shape(cur, l.kernel, l.out_channels);
        const Eigen::Index rows = l.weights.cols();
        const Eigen::Index s = static_cast<Eigen::Index>(os.height) * os.width;
        Mat patches(rows, s * b);
        for (Eigen::Index col = 0; col < b; ++col)
          im2col_into(at.col(col).data(), cur, l.kernel, patches.data() + col * s * rows, rows);
        Mat prod = l.weights * patches;  // out_c x (s*b)
        tb[i + 1].resize(os.size(), b);
        for (Eigen::Index col = 0; col < b; ++col)
          MapRow(tb[i + 1].col(col).data(), l.out_channels, s) = prod.middleCols(col * s, s);
        cur = os;
        break;
      }
      case LayerKind::maxpool: {
        const auto& idx = trace.pool_argmax[i];
        tb[i + 1].resize(static_cast<Eigen::Index>(idx.size()), b);
        for (size_t p = 0; p < idx.size(); ++p)
          tb[i + 1].row(static_cast<Eigen::Index>(p)) = at.row(idx[p]);
        cur = pool_out_shape(cur, l.kernel);
        break;
      }
      case LayerKind::dense:
        tb[i + 1].noalias() = l.weights * at;
        cur = Shape3{l.units, 1, 1};
        break;
      case LayerKind::relu: {
        const Vec& a = trace.activations[i];
        tb[i + 1] = (a.array() > 0.0).replicate(1, b).select(at, 0.0);
        break;
      }
      case LayerKind::sigmoid: {
        const Vec& y = trace.activations[i + 1];
        tb[i + 1] = (at.array().colwise() * (y.array() * (1.0 - y.array()))).matrix();
        break;
      }
      case LayerKind::softmax:
        tb[i + 1] = Mat();  // tangent past the logits is never needed
        break;
    }
  }

  // Seed the reverse sweep at the logits.
  Vec cot;
  Mat cott;
  if (tap == Tap::logits) {
    cot = Vec::Zero(net.class_count());
    cot[cls] = 1.0;
    cott = Mat::Zero(net.class_count(), b);
  } else {
    const Vec& s = trace.confidences;
    cot = softmax_tap_cotangent(s, cls);
    cott = softmax_tap_cotangent_tangent(s, cls, tb[n - 1]);
  }

  for (size_t i = n - 1; i-- > 0;) {
    const LayerSpec& l = layers[i];
    const Shape3 in_shape = (i == 0) ? net.input_shape() : net.shape_after(i - 1);
    switch (l.kind) {
      case LayerKind::dense:
        cot = l.weights.transpose() * cot;
        cott = l.weights.transpose() * cott;
        break;
      case LayerKind::conv: {
        const Shape3 os = conv_out_shape(in_shape, l.kernel, l.out_channels);
        const Eigen::Index s = static_cast<Eigen::Index>(os.height) * os.width;
        {
          CMapRow cot_img(cot.data(), l.out_channels, s);
          Mat gcols = l.weights.transpose() * cot_img;
          Vec down = Vec::Zero(in_shape.size());
          col2im_add(gcols.data(), in_shape, l.kernel, down.data(), gcols.rows());
          cot = std::move(down);
        }
        Mat big(l.out_channels, s * b);
        for (Eigen::Index col = 0; col < b; ++col)
          big.middleCols(col * s, s) = CMapRow(cott.col(col).data(), l.out_channels, s);
        Mat gcols = l.weights.transpose() * big;  // (in_c*k*k) x (s*b)
        Mat down = Mat::Zero(in_shape.size(), b);
        for (Eigen::Index col = 0; col < b; ++col)
          col2im_add(gcols.data() + col * s * gcols.rows(), in_shape, l.kernel,
                     down.col(col).data(), gcols.rows());
        cott = std::move(down);
        break;
      }
      case LayerKind::maxpool: {
        const auto& idx = trace.pool_argmax[i];
        Vec down = Vec::Zero(in_shape.size());
        Mat downt = Mat::Zero(in_shape.size(), b);
        for (size_t p = 0; p < idx.size(); ++p) {
          down[idx[p]] += cot[static_cast<Eigen::Index>(p)];
          downt.row(idx[p]) += cott.row(static_cast<Eigen::Index>(p));
        }
        cot = std::move(down);
        cott = std::move(downt);
        break;
      }
      case LayerKind::relu: {
        const Vec& a = trace.activations[i];
        cot = (a.array() > 0.0).select(cot, 0.0);
        cott = (a.array() > 0.0).replicate(1, b).select(cott, 0.0);
        break;
      }
      case LayerKind::sigmoid: {
        const Vec& y = trace.activations[i + 1];
        const Eigen::ArrayXd sp = y.array() * (1.0 - y.array());
        const Eigen::ArrayXd spp = sp * (1.0 - 2.0 * y.array());
        Mat downt = (cott.array().colwise() * sp).matrix();
        downt.array() += tb[i].array().colwise() * (spp * cot.array());
        cot = (sp * cot.array()).matrix();
        cott = std::move(downt);
        break;
      }
      case LayerKind::softmax:
        throw std::logic_error("hvp: unexpected softmax in reverse sweep");
    }
  }
  return cott;
}

}  // namespace

Vec input_gradient(const Network& net, const Vec& x, int cls, Tap tap) {
  if (cls < 0 || cls >= net.class_count()) throw ShapeMismatch("input_gradient: class out of range");
  const ForwardTrace t = forward(net, x);
  Vec seed;
  if (tap == Tap::logits) {
    seed = Vec::Zero(net.class_count());
    seed[cls] = 1.0;
  } else {
    seed = softmax_tap_cotangent(t.confidences, cls);
  }
  Vec g;
  backprop(net, t, seed, &g, nullptr);
  return g;
}

Vec hessian_vector_product(const Network& net, const Vec& x, int cls, Tap tap, const Vec& v) {
  if (cls < 0 || cls >= net.class_count()) throw ShapeMismatch("hvp: class out of range");
  if (v.size() != net.input_dim()) throw ShapeMismatch("hvp: tangent length mismatch");
  const ForwardTrace t = forward(net, x);
  return hvp_block(net, t, cls, tap, v);
}

linalg::SymMatrix input_hessian(const Network& net, const Vec& x, int cls, Tap tap) {
  if (cls < 0 || cls >= net.class_count()) throw ShapeMismatch("input_hessian: class out of range");
  const ForwardTrace t = forward(net, x);
  const Eigen::Index n = net.input_dim();

  // Block size bounded so the per-layer tangent storage stays modest.
  Eigen::Index total = 0;
  for (const auto& a : t.activations) total += a.size();
  Eigen::Index block = std::clamp<Eigen::Index>((Eigen::Index{1} << 25) / std::max<Eigen::Index>(total, 1), 16, 128);

  Mat h(n, n);
  for (Eigen::Index c0 = 0; c0 < n; c0 += block) {
    const Eigen::Index w = std::min(block, n - c0);
    Mat v = Mat::Zero(n, w);
    for (Eigen::Index j = 0; j < w; ++j) v(c0 + j, j) = 1.0;
    h.middleCols(c0, w) = hvp_block(net, t, cls, tap, v);
  }
  return linalg::SymMatrix::from_dense(h);
}

}  // namespace qattack
