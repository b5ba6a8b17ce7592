#pragma once

// Reverse-mode automatic differentiation over a closed set of dense-tensor
// operations. A Graph records nodes as they are declared; forward() evaluates
// every node in declaration order from the current input bindings and
// backward() propagates the gradient of a scalar root to every node that
// depends on a named input.

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gpr/tensor.hpp"

namespace gpr {

enum class OpKind {
  input,
  dense,
  conv2d,
  conv2d_transpose,
  upsample_nearest,
  downsample_avg,
  leaky_relu,
  tanh,
  add,
  mul,
  scale,
  sum,
  mean,
  square,
  sqrt,
  pixelnorm,
  minibatch_stddev,
  fourier_linear,
  gather_masked,
};

const char* op_name(OpKind kind);

/// A real-linear map with a known adjoint. The fourier_linear node uses
/// adjoint() as its gradient rule, so the map itself is never differentiated.
class LinearOperator {
 public:
  virtual ~LinearOperator() = default;
  virtual Shape in_shape() const = 0;
  virtual Shape out_shape() const = 0;
  virtual void apply(std::span<const double> in, std::span<double> out) const = 0;
  virtual void adjoint(std::span<const double> in, std::span<double> out) const = 0;
};

/// Handle to a node of a Graph. Only meaningful for the graph that made it.
struct Var {
  std::size_t id = 0;
};

/// Thrown on misuse of the graph (unbound input, backward before forward...).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Bindings = std::map<std::string, Tensor>;

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kNormEpsilon = 1e-8;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // Leaves. Named inputs take part in differentiation; constants do not.
  Var input(const std::string& name);
  Var input(const std::string& name, Tensor value);
  Var constant(Tensor value);

  /// x is (B, ...) flattened to (B, in); w is (out, in); the result has shape
  /// (B, out_shape...) where out_shape defaults to {out}.
  Var dense(Var x, Var w, std::optional<Var> bias = std::nullopt, Shape out_shape = {});
  /// x (B,Cin,H,W), w (Cout,Cin,k,k), optional bias (Cout).
  Var conv2d(Var x, Var w, std::optional<Var> bias = std::nullopt, std::size_t stride = 1,
             std::size_t pad = 0);
  /// Exact adjoint of conv2d with the same kernel, stride and padding:
  /// x (B,Cout,Ho,Wo) -> (B,Cin,out_h,out_w). Optional bias has Cin entries.
  Var conv2d_transpose(Var x, Var w, std::size_t out_h, std::size_t out_w,
                       std::optional<Var> bias = std::nullopt, std::size_t stride = 1,
                       std::size_t pad = 0);
  Var upsample_nearest(Var x);
  Var downsample_avg(Var x);
  Var leaky_relu(Var x, double slope = kLeakySlope);
  Var tanh(Var x);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var x, double factor);
  Var sum(Var x);
  Var mean(Var x);
  Var square(Var x);
  Var sqrt(Var x);
  /// Normalizes dimension 1 to unit RMS at every other index.
  Var pixelnorm(Var x, double eps = kNormEpsilon);
  /// Appends one channel holding the batch standard deviation averaged over
  /// all features. x is (B,C,H,W); group is the whole batch.
  Var minibatch_stddev(Var x, double eps = kNormEpsilon);
  /// Applies op to x (any shape with op's element count).
  Var fourier_linear(Var x, std::shared_ptr<const LinearOperator> op);
  /// Picks entries where mask != 0. x.numel() must be a multiple of
  /// mask.numel(); the mask is applied to each consecutive plane.
  Var gather_masked(Var x, const Tensor& mask);

  void bind(const std::string& name, Tensor value);
  bool has_input(const std::string& name) const;
  Var named(const std::string& name) const;

  /// Evaluates every node up to and including root. Without a root the last
  /// declared node is used.
  const Tensor& forward(std::optional<Var> root = std::nullopt);
  const Tensor& forward(const Bindings& inputs, std::optional<Var> root = std::nullopt);

  /// Gradient of the scalar root with respect to every dependent node.
  void backward(std::optional<Var> root = std::nullopt);

  /// While frozen, leaky-relu nodes keep the on/off pattern of their last
  /// unfrozen evaluation, so the graph is linear in its piecewise inputs.
  void freeze_activations(bool frozen) noexcept { freeze_activations_ = frozen; }

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  const Tensor& grad(const std::string& name) const;
  bool has_grad(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
  std::vector<std::string> input_names() const;

 private:
  struct Node {
    OpKind kind = OpKind::input;
    std::vector<std::size_t> parents;
    Tensor value;
    Tensor grad;
    bool has_value = false;
    bool has_grad = false;
    bool requires_grad = false;
    bool has_bias = false;
    double param = 0.0;
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t out_h = 0;
    std::size_t out_w = 0;
    Shape out_shape;
    std::string name;
    std::shared_ptr<const LinearOperator> linear;
    std::shared_ptr<const std::vector<std::size_t>> gather_index;
    std::size_t gather_plane = 0;
    std::vector<unsigned char> active;  // leaky-relu pattern
  };

  Var push(Node node);
  void eval_node(std::size_t id);
  void backprop_node(std::size_t id);
  Tensor& grad_slot(std::size_t id);
  std::size_t root_id(std::optional<Var> root) const;

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> inputs_;
  std::size_t evaluated_upto_ = 0;  // number of nodes with current values
  bool freeze_activations_ = false;
};

/// Central-difference check of backward() on every coordinate of the named
/// inputs. Returns the largest relative error, using
/// max(|analytic|, |numeric|, 1e-8) as denominator. Leaves the graph
/// evaluated at the original bindings.
double grad_check(Graph& graph, Var root, const std::vector<std::string>& inputs, double h = 1e-5);

}  // namespace gpr
