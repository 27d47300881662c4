#pragma once

#include "qattack/linalg.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace qattack {

struct ShapeMismatch : std::runtime_error {
  explicit ShapeMismatch(const std::string& what) : std::runtime_error(what) {}
};

enum class LayerKind { conv, maxpool, dense, relu, sigmoid, softmax };

const char* layer_kind_name(LayerKind k);

/// CHW tensor shape; dense outputs use {units, 1, 1}.
struct Shape3 {
  int channels = 0, height = 0, width = 0;
  int size() const { return channels * height * width; }
  bool operator==(const Shape3&) const = default;
};

struct LayerSpec {
  LayerKind kind{};
  int kernel = 0;        // conv: square kernel, stride 1, valid padding; maxpool: window, stride = window
  int out_channels = 0;  // conv only
  int units = 0;         // dense only
  int in_channels = 0;   // conv, resolved from the shape chain
  int in_dim = 0;        // dense, resolved from the shape chain
  Mat weights;           // conv: out_channels x (in_channels*k*k); dense: units x in_dim
  Vec bias;              // conv: out_channels; dense: units
};

LayerSpec conv_layer(int kernel, int out_channels);
LayerSpec maxpool_layer(int window);
LayerSpec dense_layer(int units);
LayerSpec relu_layer();
LayerSpec sigmoid_layer();
LayerSpec softmax_layer();

/// An ordered feed-forward layer stack with immutable weights.
/// The last two stages must be dense (producing the logits) and softmax.
class Network {
 public:
  Network(Shape3 input_shape, std::vector<LayerSpec> layers);

  int input_dim() const { return input_.size(); }
  int class_count() const { return classes_; }
  const Shape3& input_shape() const { return input_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::vector<LayerSpec>& mutable_layers() { return layers_; }
  /// Output shape of layer i (input shape chain is validated at construction).
  const Shape3& shape_after(size_t i) const { return shapes_.at(i); }

 private:
  Shape3 input_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape3> shapes_;
  int classes_ = 0;
};

struct ForwardTrace {
  /// activations[0] is the input; activations[i+1] is the output of layer i.
  std::vector<Vec> activations;
  Vec logits;       // Z, the pre-softmax activation
  Vec confidences;  // S = softmax(Z / G)
  double temperature = 1.0;
  bool input_in_box = true;  // x within [0,1]^n (out-of-box inputs are accepted but flagged)
  /// argmax index maps for each maxpool layer (empty entry otherwise); ties
  /// resolve to the first maximal element in row-major order.
  std::vector<std::vector<int>> pool_argmax;

  const Vec& input() const { return activations.front(); }
};

enum class Tap { logits, softmax };

ForwardTrace forward(const Network& net, const Vec& x, double temperature = 1.0);

/// argmax over the network output; ties break to the lowest class index.
int predict(const Network& net, const Vec& x);

/// ∇x Z_i(x) for tap=logits, ∇x S_i(x) for tap=softmax (softmax at G=1).
Vec input_gradient(const Network& net, const Vec& x, int cls, Tap tap);

/// ∇²x of the tapped scalar, symmetrized as (A+Aᵀ)/2.
linalg::SymMatrix input_hessian(const Network& net, const Vec& x, int cls, Tap tap);

/// ∇²x f · v without forming the Hessian (single forward-over-reverse pass).
Vec hessian_vector_product(const Network& net, const Vec& x, int cls, Tap tap, const Vec& v);

struct WeightGradients {
  std::vector<Mat> w;
  std::vector<Vec> b;
  void resize_like(const Network& net);
  void set_zero();
  void add_scaled(const WeightGradients& other, double s);
};

/// Reverse pass from a cotangent seeded on the logits. Writes the gradient
/// with respect to the input into *input_grad (if non-null) and accumulates
/// parameter gradients into *wgrads (if non-null).
void backprop(const Network& net, const ForwardTrace& trace, const Vec& logit_cotangent,
              Vec* input_grad, WeightGradients* wgrads);

}  // namespace qattack
