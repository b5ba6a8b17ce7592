#include "gpr/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace gpr {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

struct ConvGeom {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
  std::size_t rows() const { return cin * k * k; }
  std::size_t cols() const { return ho * wo; }
};

void im2col(const double* img, const ConvGeom& g, double* cols) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * ncols;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w);
            row[oy * g.wo + ox] = inside ? img[(c * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeom& g, double* img) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * ncols;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(c * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

[[noreturn]] void shape_fail(std::size_t id, OpKind kind, const std::string& what, const Shape& expected,
                             const Shape& actual) {
  throw ShapeError("node " + std::to_string(id) + " (" + op_name(kind) + "): " + what + " expected " +
                   shape_str(expected) + ", got " + shape_str(actual));
}

void expect_rank(std::size_t id, OpKind kind, const Tensor& t, std::size_t rank) {
  if (t.ndim() != rank) {
    throw ShapeError("node " + std::to_string(id) + " (" + op_name(kind) + "): expected rank " +
                     std::to_string(rank) + " input, got " + shape_str(t.shape()));
  }
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::input: return "input";
    case OpKind::dense: return "dense";
    case OpKind::conv2d: return "conv2d";
    case OpKind::conv2d_transpose: return "conv2d-transpose";
    case OpKind::upsample_nearest: return "upsample-nearest";
    case OpKind::downsample_avg: return "downsample-avg";
    case OpKind::leaky_relu: return "leaky-relu";
    case OpKind::tanh: return "tanh";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::square: return "square";
    case OpKind::sqrt: return "sqrt";
    case OpKind::pixelnorm: return "pixelnorm";
    case OpKind::minibatch_stddev: return "minibatch-stddev";
    case OpKind::fourier_linear: return "fourier-linear";
    case OpKind::gather_masked: return "gather-masked";
  }
  return "unknown";
}

Var Graph::push(Node node) {
  for (auto p : node.parents) {
    if (p >= nodes_.size()) throw GraphError("parent node does not belong to this graph");
    node.requires_grad = node.requires_grad || nodes_[p].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Graph::input(const std::string& name) {
  if (inputs_.count(name)) throw GraphError("duplicate input name '" + name + "'");
  Node n;
  n.kind = OpKind::input;
  n.name = name;
  n.requires_grad = true;
  Var v = push(std::move(n));
  inputs_[name] = v.id;
  return v;
}

Var Graph::input(const std::string& name, Tensor value) {
  Var v = input(name);
  nodes_[v.id].value = std::move(value);
  nodes_[v.id].has_value = true;
  return v;
}

Var Graph::constant(Tensor value) {
  Node n;
  n.kind = OpKind::input;
  n.value = std::move(value);
  n.has_value = true;
  return push(std::move(n));
}

Var Graph::dense(Var x, Var w, std::optional<Var> bias, Shape out_shape) {
  Node n;
  n.kind = OpKind::dense;
  n.parents = {x.id, w.id};
  if (bias) {
    n.parents.push_back(bias->id);
    n.has_bias = true;
  }
  n.out_shape = std::move(out_shape);
  return push(std::move(n));
}

Var Graph::conv2d(Var x, Var w, std::optional<Var> bias, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw GraphError("conv2d stride must be positive");
  Node n;
  n.kind = OpKind::conv2d;
  n.parents = {x.id, w.id};
  if (bias) {
    n.parents.push_back(bias->id);
    n.has_bias = true;
  }
  n.stride = stride;
  n.pad = pad;
  return push(std::move(n));
}

Var Graph::conv2d_transpose(Var x, Var w, std::size_t out_h, std::size_t out_w, std::optional<Var> bias,
                            std::size_t stride, std::size_t pad) {
  if (stride == 0) throw GraphError("conv2d-transpose stride must be positive");
  Node n;
  n.kind = OpKind::conv2d_transpose;
  n.parents = {x.id, w.id};
  if (bias) {
    n.parents.push_back(bias->id);
    n.has_bias = true;
  }
  n.stride = stride;
  n.pad = pad;
  n.out_h = out_h;
  n.out_w = out_w;
  return push(std::move(n));
}

Var Graph::upsample_nearest(Var x) {
  Node n;
  n.kind = OpKind::upsample_nearest;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::downsample_avg(Var x) {
  Node n;
  n.kind = OpKind::downsample_avg;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::leaky_relu(Var x, double slope) {
  Node n;
  n.kind = OpKind::leaky_relu;
  n.parents = {x.id};
  n.param = slope;
  return push(std::move(n));
}

Var Graph::tanh(Var x) {
  Node n;
  n.kind = OpKind::tanh;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) {
  Node n;
  n.kind = OpKind::add;
  n.parents = {a.id, b.id};
  return push(std::move(n));
}

Var Graph::mul(Var a, Var b) {
  Node n;
  n.kind = OpKind::mul;
  n.parents = {a.id, b.id};
  return push(std::move(n));
}

Var Graph::scale(Var x, double factor) {
  Node n;
  n.kind = OpKind::scale;
  n.parents = {x.id};
  n.param = factor;
  return push(std::move(n));
}

Var Graph::sum(Var x) {
  Node n;
  n.kind = OpKind::sum;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::mean(Var x) {
  Node n;
  n.kind = OpKind::mean;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::square(Var x) {
  Node n;
  n.kind = OpKind::square;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::sqrt(Var x) {
  Node n;
  n.kind = OpKind::sqrt;
  n.parents = {x.id};
  return push(std::move(n));
}

Var Graph::pixelnorm(Var x, double eps) {
  Node n;
  n.kind = OpKind::pixelnorm;
  n.parents = {x.id};
  n.param = eps;
  return push(std::move(n));
}

Var Graph::minibatch_stddev(Var x, double eps) {
  Node n;
  n.kind = OpKind::minibatch_stddev;
  n.parents = {x.id};
  n.param = eps;
  return push(std::move(n));
}

Var Graph::fourier_linear(Var x, std::shared_ptr<const LinearOperator> op) {
  if (!op) throw GraphError("fourier-linear requires an operator");
  Node n;
  n.kind = OpKind::fourier_linear;
  n.parents = {x.id};
  n.linear = std::move(op);
  return push(std::move(n));
}

Var Graph::gather_masked(Var x, const Tensor& mask) {
  auto index = std::make_shared<std::vector<std::size_t>>();
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    if (mask[i] != 0.0) index->push_back(i);
  }
  Node n;
  n.kind = OpKind::gather_masked;
  n.parents = {x.id};
  n.gather_index = std::move(index);
  n.gather_plane = mask.numel();
  return push(std::move(n));
}

void Graph::bind(const std::string& name, Tensor value) {
  auto it = inputs_.find(name);
  if (it == inputs_.end()) throw GraphError("no input named '" + name + "'");
  Node& n = nodes_[it->second];
  n.value = std::move(value);
  n.has_value = true;
  evaluated_upto_ = std::min(evaluated_upto_, it->second);
}

bool Graph::has_input(const std::string& name) const { return inputs_.count(name) != 0; }

Var Graph::named(const std::string& name) const {
  auto it = inputs_.find(name);
  if (it == inputs_.end()) throw GraphError("no input named '" + name + "'");
  return Var{it->second};
}

std::vector<std::string> Graph::input_names() const {
  std::vector<std::string> names;
  for (const auto& [name, id] : inputs_) names.push_back(name);
  return names;
}

std::size_t Graph::root_id(std::optional<Var> root) const {
  if (nodes_.empty()) throw GraphError("empty graph");
  const std::size_t id = root ? root->id : nodes_.size() - 1;
  if (id >= nodes_.size()) throw GraphError("root does not belong to this graph");
  return id;
}

const Tensor& Graph::forward(const Bindings& inputs, std::optional<Var> root) {
  for (const auto& [name, value] : inputs) bind(name, value);
  return forward(root);
}

const Tensor& Graph::forward(std::optional<Var> root) {
  const std::size_t rid = root_id(root);
  for (std::size_t id = evaluated_upto_; id <= rid; ++id) {
    eval_node(id);
    nodes_[id].has_grad = false;
  }
  evaluated_upto_ = std::max(evaluated_upto_, rid + 1);
  return nodes_[rid].value;
}

const Tensor& Graph::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (v.id >= evaluated_upto_ && n.kind != OpKind::input) throw GraphError("node has not been evaluated");
  return n.value;
}

bool Graph::has_grad(Var v) const { return nodes_.at(v.id).has_grad; }

const Tensor& Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (!n.has_grad) throw GraphError("node " + std::to_string(v.id) + " has no gradient");
  return n.grad;
}

const Tensor& Graph::grad(const std::string& name) const { return grad(named(name)); }

void Graph::eval_node(std::size_t id) {
  Node& n = nodes_[id];
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[n.parents[i]].value; };
  switch (n.kind) {
    case OpKind::input: {
      if (!n.has_value) throw GraphError("input '" + n.name + "' is not bound");
      return;
    }
    case OpKind::dense: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      expect_rank(id, n.kind, w, 2);
      const std::size_t batch = x.dim(0);
      const std::size_t fin = w.dim(1), fout = w.dim(0);
      if (x.numel() != batch * fin) shape_fail(id, n.kind, "input", {batch, fin}, x.shape());
      Shape out{batch};
      if (n.out_shape.empty()) {
        out.push_back(fout);
      } else {
        if (shape_numel(n.out_shape) != fout) shape_fail(id, n.kind, "output shape", {fout}, n.out_shape);
        out.insert(out.end(), n.out_shape.begin(), n.out_shape.end());
      }
      Tensor y(out);
      MapR ym(y.data().data(), batch, fout);
      ym.noalias() = CMapR(x.data().data(), batch, fin) * CMapR(w.data().data(), fout, fin).transpose();
      if (n.has_bias) {
        const Tensor& b = in(2);
        if (b.numel() != fout) shape_fail(id, n.kind, "bias", {fout}, b.shape());
        for (std::size_t r = 0; r < batch; ++r)
          for (std::size_t c = 0; c < fout; ++c) ym(r, c) += b[c];
      }
      n.value = std::move(y);
      return;
    }
    case OpKind::conv2d: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      expect_rank(id, n.kind, x, 4);
      expect_rank(id, n.kind, w, 4);
      const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
      const std::size_t cout = w.dim(0), k = w.dim(2);
      if (w.dim(1) != cin || w.dim(3) != k) shape_fail(id, n.kind, "kernel", {cout, cin, k, k}, w.shape());
      if (h + 2 * n.pad < k || wd + 2 * n.pad < k) throw ShapeError("node " + std::to_string(id) + ": kernel larger than padded input");
      ConvGeom g{cin, h, wd, k, n.stride, n.pad, (h + 2 * n.pad - k) / n.stride + 1, (wd + 2 * n.pad - k) / n.stride + 1};
      Tensor y({batch, cout, g.ho, g.wo});
      std::vector<double> cols(g.rows() * g.cols());
      CMapR wm(w.data().data(), cout, g.rows());
      for (std::size_t b = 0; b < batch; ++b) {
        im2col(x.data().data() + b * cin * h * wd, g, cols.data());
        MapR(y.data().data() + b * cout * g.cols(), cout, g.cols()).noalias() =
            wm * CMapR(cols.data(), g.rows(), g.cols());
      }
      if (n.has_bias) {
        const Tensor& bias = in(2);
        if (bias.numel() != cout) shape_fail(id, n.kind, "bias", {cout}, bias.shape());
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < cout; ++c) {
            double* p = y.data().data() + (b * cout + c) * g.cols();
            for (std::size_t i = 0; i < g.cols(); ++i) p[i] += bias[c];
          }
      }
      n.value = std::move(y);
      return;
    }
    case OpKind::conv2d_transpose: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      expect_rank(id, n.kind, x, 4);
      expect_rank(id, n.kind, w, 4);
      const std::size_t batch = x.dim(0), cout = w.dim(0), cin = w.dim(1), k = w.dim(2);
      ConvGeom g{cin, n.out_h, n.out_w, k, n.stride, n.pad, 0, 0};
      if (n.out_h + 2 * n.pad < k || n.out_w + 2 * n.pad < k) throw ShapeError("node " + std::to_string(id) + ": kernel larger than padded output");
      g.ho = (n.out_h + 2 * n.pad - k) / n.stride + 1;
      g.wo = (n.out_w + 2 * n.pad - k) / n.stride + 1;
      if (x.dim(1) != cout || x.dim(2) != g.ho || x.dim(3) != g.wo)
        shape_fail(id, n.kind, "input", {batch, cout, g.ho, g.wo}, x.shape());
      Tensor y({batch, cin, n.out_h, n.out_w});
      std::vector<double> cols(g.rows() * g.cols());
      CMapR wm(w.data().data(), cout, g.rows());
      for (std::size_t b = 0; b < batch; ++b) {
        MapR(cols.data(), g.rows(), g.cols()).noalias() =
            wm.transpose() * CMapR(x.data().data() + b * cout * g.cols(), cout, g.cols());
        col2im(cols.data(), g, y.data().data() + b * cin * n.out_h * n.out_w);
      }
      if (n.has_bias) {
        const Tensor& bias = in(2);
        if (bias.numel() != cin) shape_fail(id, n.kind, "bias", {cin}, bias.shape());
        const std::size_t plane = n.out_h * n.out_w;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < cin; ++c) {
            double* p = y.data().data() + (b * cin + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) p[i] += bias[c];
          }
      }
      n.value = std::move(y);
      return;
    }
    case OpKind::upsample_nearest: {
      const Tensor& x = in(0);
      expect_rank(id, n.kind, x, 4);
      const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
      Tensor y({x.dim(0), x.dim(1), 2 * h, 2 * w});
      for (std::size_t p = 0; p < bc; ++p)
        for (std::size_t i = 0; i < 2 * h; ++i)
          for (std::size_t j = 0; j < 2 * w; ++j)
            y[(p * 2 * h + i) * 2 * w + j] = x[(p * h + i / 2) * w + j / 2];
      n.value = std::move(y);
      return;
    }
    case OpKind::downsample_avg: {
      const Tensor& x = in(0);
      expect_rank(id, n.kind, x, 4);
      const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
      if (h % 2 || w % 2) throw ShapeError("node " + std::to_string(id) + " (downsample-avg): odd spatial size " + shape_str(x.shape()));
      const std::size_t ho = h / 2, wo = w / 2;
      Tensor y({x.dim(0), x.dim(1), ho, wo});
      for (std::size_t p = 0; p < bc; ++p)
        for (std::size_t i = 0; i < ho; ++i)
          for (std::size_t j = 0; j < wo; ++j) {
            const double* r0 = x.data().data() + (p * h + 2 * i) * w + 2 * j;
            const double* r1 = r0 + w;
            y[(p * ho + i) * wo + j] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
          }
      n.value = std::move(y);
      return;
    }
    case OpKind::leaky_relu: {
      Tensor y = in(0);
      if (!freeze_activations_ || n.active.size() != y.numel()) {
        n.active.resize(y.numel());
        for (std::size_t i = 0; i < y.numel(); ++i) n.active[i] = y[i] > 0.0;
      }
      for (std::size_t i = 0; i < y.numel(); ++i) {
        if (!n.active[i]) y[i] *= n.param;
      }
      n.value = std::move(y);
      return;
    }
    case OpKind::tanh: {
      Tensor y = in(0);
      for (auto& v : y.data()) v = std::tanh(v);
      n.value = std::move(y);
      return;
    }
    case OpKind::add:
    case OpKind::mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.shape() != b.shape()) shape_fail(id, n.kind, "second operand", a.shape(), b.shape());
      Tensor y = a;
      if (n.kind == OpKind::add) {
        for (std::size_t i = 0; i < y.numel(); ++i) y[i] += b[i];
      } else {
        for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= b[i];
      }
      n.value = std::move(y);
      return;
    }
    case OpKind::scale: {
      Tensor y = in(0);
      for (auto& v : y.data()) v *= n.param;
      n.value = std::move(y);
      return;
    }
    case OpKind::sum:
    case OpKind::mean: {
      const Tensor& x = in(0);
      double acc = gpr::sum(x);
      if (n.kind == OpKind::mean) acc /= static_cast<double>(x.numel());
      n.value = Tensor::scalar(acc);
      return;
    }
    case OpKind::square: {
      Tensor y = in(0);
      for (auto& v : y.data()) v *= v;
      n.value = std::move(y);
      return;
    }
    case OpKind::sqrt: {
      Tensor y = in(0);
      for (auto& v : y.data()) {
        if (v < 0.0) throw std::domain_error("node " + std::to_string(id) + " (sqrt): negative input");
        v = std::sqrt(v);
      }
      n.value = std::move(y);
      return;
    }
    case OpKind::pixelnorm: {
      const Tensor& x = in(0);
      if (x.ndim() < 2) shape_fail(id, n.kind, "input rank >= 2", {1, 1}, x.shape());
      const std::size_t batch = x.dim(0), ch = x.dim(1), inner = x.numel() / (batch * ch);
      Tensor y = x;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t s = 0; s < inner; ++s) {
          double ms = 0.0;
          for (std::size_t c = 0; c < ch; ++c) {
            const double v = x[(b * ch + c) * inner + s];
            ms += v * v;
          }
          const double r = 1.0 / std::sqrt(ms / static_cast<double>(ch) + n.param);
          for (std::size_t c = 0; c < ch; ++c) y[(b * ch + c) * inner + s] *= r;
        }
      n.value = std::move(y);
      return;
    }
    case OpKind::minibatch_stddev: {
      const Tensor& x = in(0);
      expect_rank(id, n.kind, x, 4);
      const std::size_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
      const std::size_t feat = ch * plane;
      double avg_sd = 0.0;
      for (std::size_t f = 0; f < feat; ++f) {
        double mu = 0.0;
        for (std::size_t b = 0; b < batch; ++b) mu += x[b * feat + f];
        mu /= static_cast<double>(batch);
        double var = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
          const double d = x[b * feat + f] - mu;
          var += d * d;
        }
        avg_sd += std::sqrt(var / static_cast<double>(batch) + n.param);
      }
      avg_sd /= static_cast<double>(feat);
      Tensor y({batch, ch + 1, x.dim(2), x.dim(3)});
      for (std::size_t b = 0; b < batch; ++b) {
        std::copy_n(x.data().data() + b * feat, feat, y.data().data() + b * (feat + plane));
        std::fill_n(y.data().data() + b * (feat + plane) + feat, plane, avg_sd);
      }
      n.value = std::move(y);
      return;
    }
    case OpKind::fourier_linear: {
      const Tensor& x = in(0);
      const Shape ishape = n.linear->in_shape();
      if (x.numel() != shape_numel(ishape)) shape_fail(id, n.kind, "input", ishape, x.shape());
      Tensor y(n.linear->out_shape());
      n.linear->apply(x.data(), y.data());
      n.value = std::move(y);
      return;
    }
    case OpKind::gather_masked: {
      const Tensor& x = in(0);
      if (x.numel() % n.gather_plane != 0) shape_fail(id, n.kind, "input multiple of mask", {n.gather_plane}, x.shape());
      const std::size_t planes = x.numel() / n.gather_plane;
      const auto& idx = *n.gather_index;
      Tensor y({std::max<std::size_t>(planes * idx.size(), 1)});
      if (idx.empty()) y.fill(0.0);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < idx.size(); ++i) y[p * idx.size() + i] = x[p * n.gather_plane + idx[i]];
      n.value = std::move(y);
      return;
    }
  }
}

Tensor& Graph::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::backward(std::optional<Var> root) {
  const std::size_t rid = root_id(root);
  if (rid >= evaluated_upto_) throw GraphError("backward() called before forward()");
  if (nodes_[rid].value.numel() != 1) {
    throw GraphError("backward() requires a scalar root, got " + shape_str(nodes_[rid].value.shape()));
  }
  for (auto& n : nodes_) n.has_grad = false;
  grad_slot(rid)[0] = 1.0;
  for (std::size_t id = rid + 1; id-- > 0;) {
    if (nodes_[id].has_grad && nodes_[id].kind != OpKind::input) backprop_node(id);
  }
}

void Graph::backprop_node(std::size_t id) {
  // Parent gradients are accumulated, which makes fan-out additive.
  Node& n = nodes_[id];
  const Tensor& gy = n.grad;
  auto want = [&](std::size_t i) { return nodes_[n.parents[i]].requires_grad; };
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[n.parents[i]].value; };
  switch (n.kind) {
    case OpKind::input:
      return;
    case OpKind::dense: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const std::size_t batch = x.dim(0), fin = w.dim(1), fout = w.dim(0);
      CMapR gm(gy.data().data(), batch, fout);
      if (want(0)) {
        Tensor& gx = grad_slot(n.parents[0]);
        MapR(gx.data().data(), batch, fin).noalias() += gm * CMapR(w.data().data(), fout, fin);
      }
      if (want(1)) {
        Tensor& gw = grad_slot(n.parents[1]);
        MapR(gw.data().data(), fout, fin).noalias() += gm.transpose() * CMapR(x.data().data(), batch, fin);
      }
      if (n.has_bias && want(2)) {
        Tensor& gb = grad_slot(n.parents[2]);
        for (std::size_t r = 0; r < batch; ++r)
          for (std::size_t c = 0; c < fout; ++c) gb[c] += gm(r, c);
      }
      return;
    }
    case OpKind::conv2d: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
      const std::size_t cout = w.dim(0), k = w.dim(2);
      ConvGeom g{cin, h, wd, k, n.stride, n.pad, gy.dim(2), gy.dim(3)};
      std::vector<double> cols(g.rows() * g.cols());
      CMapR wm(w.data().data(), cout, g.rows());
      Tensor* gx = want(0) ? &grad_slot(n.parents[0]) : nullptr;
      Tensor* gw = want(1) ? &grad_slot(n.parents[1]) : nullptr;
      for (std::size_t b = 0; b < batch; ++b) {
        CMapR gyb(gy.data().data() + b * cout * g.cols(), cout, g.cols());
        if (gw) {
          im2col(x.data().data() + b * cin * h * wd, g, cols.data());
          MapR(gw->data().data(), cout, g.rows()).noalias() += gyb * CMapR(cols.data(), g.rows(), g.cols()).transpose();
        }
        if (gx) {
          MapR(cols.data(), g.rows(), g.cols()).noalias() = wm.transpose() * gyb;
          col2im(cols.data(), g, gx->data().data() + b * cin * h * wd);
        }
      }
      if (n.has_bias && want(2)) {
        Tensor& gb = grad_slot(n.parents[2]);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < cout; ++c) {
            const double* p = gy.data().data() + (b * cout + c) * g.cols();
            double acc = 0.0;
            for (std::size_t i = 0; i < g.cols(); ++i) acc += p[i];
            gb[c] += acc;
          }
      }
      return;
    }
    case OpKind::conv2d_transpose: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const std::size_t batch = x.dim(0), cout = w.dim(0), cin = w.dim(1), k = w.dim(2);
      ConvGeom g{cin, n.out_h, n.out_w, k, n.stride, n.pad, x.dim(2), x.dim(3)};
      std::vector<double> cols(g.rows() * g.cols());
      CMapR wm(w.data().data(), cout, g.rows());
      Tensor* gx = want(0) ? &grad_slot(n.parents[0]) : nullptr;
      Tensor* gw = want(1) ? &grad_slot(n.parents[1]) : nullptr;
      const std::size_t plane = n.out_h * n.out_w;
      for (std::size_t b = 0; b < batch; ++b) {
        im2col(gy.data().data() + b * cin * plane, g, cols.data());
        CMapR cm(cols.data(), g.rows(), g.cols());
        if (gx) MapR(gx->data().data() + b * cout * g.cols(), cout, g.cols()).noalias() += wm * cm;
        if (gw) {
          MapR(gw->data().data(), cout, g.rows()).noalias() +=
              CMapR(x.data().data() + b * cout * g.cols(), cout, g.cols()) * cm.transpose();
        }
      }
      if (n.has_bias && want(2)) {
        Tensor& gb = grad_slot(n.parents[2]);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < cin; ++c) {
            const double* p = gy.data().data() + (b * cin + c) * plane;
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) acc += p[i];
            gb[c] += acc;
          }
      }
      return;
    }
    case OpKind::upsample_nearest: {
      if (!want(0)) return;
      const Tensor& x = in(0);
      Tensor& gx = grad_slot(n.parents[0]);
      const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
      for (std::size_t p = 0; p < bc; ++p)
        for (std::size_t i = 0; i < 2 * h; ++i)
          for (std::size_t j = 0; j < 2 * w; ++j) gx[(p * h + i / 2) * w + j / 2] += gy[(p * 2 * h + i) * 2 * w + j];
      return;
    }
    case OpKind::downsample_avg: {
      if (!want(0)) return;
      const Tensor& x = in(0);
      Tensor& gx = grad_slot(n.parents[0]);
      const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), ho = h / 2, wo = w / 2;
      for (std::size_t p = 0; p < bc; ++p)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) gx[(p * h + i) * w + j] += 0.25 * gy[(p * ho + i / 2) * wo + j / 2];
      return;
    }
    case OpKind::leaky_relu: {
      if (!want(0)) return;
      Tensor& gx = grad_slot(n.parents[0]);
      for (std::size_t i = 0; i < gy.numel(); ++i) gx[i] += n.active[i] ? gy[i] : n.param * gy[i];
      return;
    }
    case OpKind::tanh: {
      if (!want(0)) return;
      Tensor& gx = grad_slot(n.parents[0]);
      for (std::size_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i] * (1.0 - n.value[i] * n.value[i]);
      return;
    }
    case OpKind::add: {
      for (std::size_t p = 0; p < 2; ++p) {
        if (!want(p)) continue;
        Tensor& g = grad_slot(n.parents[p]);
        for (std::size_t i = 0; i < gy.numel(); ++i) g[i] += gy[i];
      }
      return;
    }
    case OpKind::mul: {
      for (std::size_t p = 0; p < 2; ++p) {
        if (!want(p)) continue;
        const Tensor& other = in(1 - p);
        Tensor& g = grad_slot(n.parents[p]);
        for (std::size_t i = 0; i < gy.numel(); ++i) g[i] += gy[i] * other[i];
      }
      return;
    }
    case OpKind::scale: {
      if (!want(0)) return;
      Tensor& gx = grad_slot(n.parents[0]);
      for (std::size_t i = 0; i < gy.numel(); ++i) gx[i] += n.param * gy[i];
      return;
    }
    case OpKind::sum:
    case OpKind::mean: {
      if (!want(0)) return;
      Tensor& gx = grad_slot(n.parents[0]);
      double g = gy[0];
      if (n.kind == OpKind::mean) g /= static_cast<double>(gx.numel());
      for (auto& v : gx.data()) v += g;
      return;
    }
    case OpKind::square: {
      if (!want(0)) return;
      const Tensor& x = in(0);
      Tensor& gx = grad_slot(n.parents[0]);
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += 2.0 * x[i] * gy[i];
      return;
    }
    case OpKind::sqrt: {
      if (!want(0)) return;
      Tensor& gx = grad_slot(n.parents[0]);
      for (std::size_t i = 0; i < gy.numel(); ++i) gx[i] += 0.5 * gy[i] / n.value[i];
      return;
    }
    case OpKind::pixelnorm: {
      if (!want(0)) return;
      const Tensor& x = in(0);
      Tensor& gx = grad_slot(n.parents[0]);
      const std::size_t batch = x.dim(0), ch = x.dim(1), inner = x.numel() / (batch * ch);
      const double inv_c = 1.0 / static_cast<double>(ch);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t s = 0; s < inner; ++s) {
          double ms = 0.0, gdotx = 0.0;
          for (std::size_t c = 0; c < ch; ++c) {
            const std::size_t i = (b * ch + c) * inner + s;
            ms += x[i] * x[i];
            gdotx += gy[i] * x[i];
          }
          const double r = 1.0 / std::sqrt(ms * inv_c + n.param);
          const double r3 = r * r * r * inv_c * gdotx;
          for (std::size_t c = 0; c < ch; ++c) {
            const std::size_t i = (b * ch + c) * inner + s;
            gx[i] += r * gy[i] - r3 * x[i];
          }
        }
      return;
    }
    case OpKind::minibatch_stddev: {
      if (!want(0)) return;
      const Tensor& x = in(0);
      Tensor& gx = grad_slot(n.parents[0]);
      const std::size_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
      const std::size_t feat = ch * plane;
      double g_avg = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* src = gy.data().data() + b * (feat + plane);
        double* dst = gx.data().data() + b * feat;
        for (std::size_t f = 0; f < feat; ++f) dst[f] += src[f];
        for (std::size_t p = 0; p < plane; ++p) g_avg += src[feat + p];
      }
      const double bd = static_cast<double>(batch);
      for (std::size_t f = 0; f < feat; ++f) {
        double mu = 0.0;
        for (std::size_t b = 0; b < batch; ++b) mu += x[b * feat + f];
        mu /= bd;
        double var = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
          const double d = x[b * feat + f] - mu;
          var += d * d;
        }
        const double sd = std::sqrt(var / bd + n.param);
        const double coef = g_avg / (static_cast<double>(feat) * bd * sd);
        for (std::size_t b = 0; b < batch; ++b) gx[b * feat + f] += coef * (x[b * feat + f] - mu);
      }
      return;
    }
    case OpKind::fourier_linear: {
      if (!want(0)) return;
      Tensor& gx = grad_slot(n.parents[0]);
      std::vector<double> tmp(gx.numel());
      n.linear->adjoint(gy.data(), tmp);
      for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
      return;
    }
    case OpKind::gather_masked: {
      if (!want(0)) return;
      Tensor& gx = grad_slot(n.parents[0]);
      const auto& idx = *n.gather_index;
      const std::size_t planes = gx.numel() / n.gather_plane;
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < idx.size(); ++i) gx[p * n.gather_plane + idx[i]] += gy[p * idx.size() + i];
      return;
    }
  }
}

double grad_check(Graph& graph, Var root, const std::vector<std::string>& inputs, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: perturbation must be positive");
  graph.forward(root);
  graph.backward(root);
  std::vector<Tensor> analytic;
  for (const auto& name : inputs) {
    Var v = graph.named(name);
    analytic.push_back(graph.has_grad(v) ? graph.grad(v) : Tensor(graph.value(v).shape(), 0.0));
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor base = graph.value(graph.named(inputs[k]));
    Tensor probe = base;
    for (std::size_t i = 0; i < base.numel(); ++i) {
      probe[i] = base[i] + h;
      graph.bind(inputs[k], probe);
      const double fp = graph.forward(root).item();
      probe[i] = base[i] - h;
      graph.bind(inputs[k], probe);
      const double fm = graph.forward(root).item();
      probe[i] = base[i];
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    graph.bind(inputs[k], base);
  }
  graph.forward(root);
  graph.backward(root);
  return worst;
}

}  // namespace gpr
