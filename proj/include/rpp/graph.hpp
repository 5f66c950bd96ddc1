// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rpp/params.hpp"
#include "rpp/tensor.hpp"

namespace rpp {

enum class Op {
  kInput,
  kParam,
  kConst,
  kMatMul,
  kAdd,
  kScale,
  kSoftmax,
  kLayerNorm,
  kGelu,
  kTanh,
  kEmbed,
  kCrossEntropy,
  kReshape,
  kTranspose,
  kSliceLast,
  kConcatLast,
  kGatherRows,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kParam: return "param";
    case Op::kConst: return "const";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kScale: return "scale";
    case Op::kSoftmax: return "softmax";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kGelu: return "gelu";
    case Op::kTanh: return "tanh";
    case Op::kEmbed: return "embed";
    case Op::kCrossEntropy: return "cross_entropy";
    case Op::kReshape: return "reshape";
    case Op::kTranspose: return "transpose";
    case Op::kSliceLast: return "slice_last";
    case Op::kConcatLast: return "concat_last";
    case Op::kGatherRows: return "gather_rows";
  }
  return "?";
}

// Acyclic op tape. Nodes reference earlier nodes only, so insertion order
// is a topological order and evaluation is a single forward sweep.
class ComputeGraph {
 public:
  struct Node {
    Op op;
    std::vector<int> args;
    std::string name;              // kInput / kParam binding name
    double factor = 0.0;           // kScale
    Shape shape;                   // kInput decl, kReshape target, kEmbed id grid
    int64_t start = 0, len = 0;    // kSliceLast
    std::vector<int64_t> indices;  // kEmbed ids, kCrossEntropy targets, kGatherRows rows
    Tensor literal;                // kConst
  };

  int input(std::string name, Shape shape) {
    Node n{Op::kInput};
    n.name = std::move(name);
    n.shape = std::move(shape);
    return push(std::move(n));
  }

  int param(std::string name) {
    Node n{Op::kParam};
    n.name = std::move(name);
    return push(std::move(n));
  }

  int constant(Tensor value) {
    Node n{Op::kConst};
    n.literal = std::move(value);
    return push(std::move(n));
  }

  int matmul(int a, int b) { return push(Node{Op::kMatMul, {a, b}}); }
  int add(int a, int b) { return push(Node{Op::kAdd, {a, b}}); }

  int scale(int a, double factor) {
    Node n{Op::kScale, {a}};
    n.factor = factor;
    return push(std::move(n));
  }

  int softmax(int a) { return push(Node{Op::kSoftmax, {a}}); }
  int layer_norm(int x, int gain, int bias) { return push(Node{Op::kLayerNorm, {x, gain, bias}}); }
  int gelu(int a) { return push(Node{Op::kGelu, {a}}); }
  int tanh_act(int a) { return push(Node{Op::kTanh, {a}}); }

  // Row lookup: out[..ids..] = table[id]. `grid` is the shape of `ids`.
  int embed(int table, std::vector<int64_t> ids, Shape grid) {
    Node n{Op::kEmbed, {table}};
    n.indices = std::move(ids);
    n.shape = std::move(grid);
    return push(std::move(n));
  }

  // Mean cross-entropy of row-wise logits against integer class targets.
  int cross_entropy(int logits, std::vector<int64_t> targets) {
    Node n{Op::kCrossEntropy, {logits}};
    n.indices = std::move(targets);
    return push(std::move(n));
  }

  int reshape(int a, Shape target) {
    Node n{Op::kReshape, {a}};
    n.shape = std::move(target);
    return push(std::move(n));
  }

  int transpose(int a) { return push(Node{Op::kTranspose, {a}}); }

  int slice_last(int a, int64_t start, int64_t len) {
    Node n{Op::kSliceLast, {a}};
    n.start = start;
    n.len = len;
    return push(std::move(n));
  }

  int concat_last(std::vector<int> parts) {
    Node n{Op::kConcatLast, std::move(parts)};
    return push(std::move(n));
  }

  // Select rows of the input viewed as [leading, last_dim].
  int gather_rows(int a, std::vector<int64_t> rows) {
    Node n{Op::kGatherRows, {a}};
    n.indices = std::move(rows);
    return push(std::move(n));
  }

  void mark_output(const std::string& name, int node) { outputs_[name] = node; }

  const std::vector<Node>& nodes() const { return nodes_; }
  const std::map<std::string, int>& outputs() const { return outputs_; }

  int output_node(const std::string& name) const {
    auto it = outputs_.find(name);
    if (it == outputs_.end()) throw RuntimeFailure("graph has no output '" + name + "'");
    return it->second;
  }

  std::string describe(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    std::string s = "node " + std::to_string(id) + " (" + op_name(n.op);
    if (!n.name.empty()) s += " '" + n.name + "'";
    s += ")";
    return s;
  }

 private:
  int push(Node n) {
    int id = static_cast<int>(nodes_.size());
    for (int a : n.args) {
      if (a < 0 || a >= id) throw RuntimeFailure("graph: node argument out of order");
    }
    nodes_.push_back(std::move(n));
    return id;
  }

  std::vector<Node> nodes_;
  std::map<std::string, int> outputs_;
};

struct Evaluation {
  std::vector<Tensor> values;
  const Tensor& at(int node) const { return values[static_cast<size_t>(node)]; }
};

namespace detail {

constexpr double kLayerNormEps = 1e-12;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double gauss_cdf(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }
inline double gauss_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

}  // namespace detail

// Forward sweep. Every produced tensor is checked finite; failures name the
// offending node. Pure: identical inputs give bit-identical outputs.
inline Evaluation evaluate_graph(const ComputeGraph& g, const ParamSet& params,
                                 const std::map<std::string, Tensor>& inputs = {}) {
  const auto& nodes = g.nodes();
  Evaluation eval;
  eval.values.resize(nodes.size());
  size_t used_inputs = 0;

  for (size_t id = 0; id < nodes.size(); ++id) {
    const ComputeGraph::Node& n = nodes[id];
    auto arg = [&](int k) -> const Tensor& { return eval.values[static_cast<size_t>(n.args[static_cast<size_t>(k)])]; };
    Tensor out;
    try {
      switch (n.op) {
        case Op::kInput: {
          auto it = inputs.find(n.name);
          if (it == inputs.end()) throw RuntimeFailure("input '" + n.name + "' not bound");
          if (it->second.shape() != n.shape) {
            throw RuntimeFailure("input '" + n.name + "' expects " + shape_str(n.shape) + " got " +
                                 shape_str(it->second.shape()));
          }
          out = it->second;
          ++used_inputs;
          break;
        }
        case Op::kParam:
          out = params.value(n.name);
          break;
        case Op::kConst:
          out = n.literal;
          break;
        case Op::kMatMul:
          out = matmul(arg(0), arg(1));
          break;
        case Op::kAdd: {
          const Tensor& a = arg(0);
          const Tensor& b = arg(1);
          if (a.same_shape(b)) {
            out = a;
            for (int64_t i = 0; i < out.numel(); ++i) out[i] += b[i];
          } else if (is_suffix_shape(a.shape(), b.shape())) {
            out = a;
            int64_t span = b.numel();
            int64_t reps = a.numel() / span;
            for (int64_t r = 0; r < reps; ++r) {
              double* dst = out.data() + r * span;
              for (int64_t j = 0; j < span; ++j) dst[j] += b[j];
            }
          } else {
            throw RuntimeFailure("add: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
          }
          break;
        }
        case Op::kScale: {
          out = arg(0);
          for (int64_t i = 0; i < out.numel(); ++i) out[i] *= n.factor;
          break;
        }
        case Op::kSoftmax:
          out = softmax_last_axis(arg(0));
          break;
        case Op::kLayerNorm: {
          const Tensor& x = arg(0);
          const Tensor& gain = arg(1);
          const Tensor& bias = arg(2);
          int64_t h = x.last_dim();
          if (gain.numel() != h || bias.numel() != h) {
            throw RuntimeFailure("layer_norm: gain/bias length must equal last dim " + std::to_string(h));
          }
          out = Tensor(x.shape());
          int64_t rows = x.leading_rows();
          for (int64_t r = 0; r < rows; ++r) {
            const double* in = x.data() + r * h;
            double* o = out.data() + r * h;
            double mean = 0.0;
            for (int64_t j = 0; j < h; ++j) mean += in[j];
            mean /= static_cast<double>(h);
            double var = 0.0;
            for (int64_t j = 0; j < h; ++j) {
              double d = in[j] - mean;
              var += d * d;
            }
            var /= static_cast<double>(h);
            double inv = 1.0 / std::sqrt(var + detail::kLayerNormEps);
            for (int64_t j = 0; j < h; ++j) o[j] = gain[j] * ((in[j] - mean) * inv) + bias[j];
          }
          break;
        }
        case Op::kGelu: {
          const Tensor& x = arg(0);
          out = Tensor(x.shape());
          for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * detail::gauss_cdf(x[i]);
          break;
        }
        case Op::kTanh: {
          const Tensor& x = arg(0);
          out = Tensor(x.shape());
          for (int64_t i = 0; i < x.numel(); ++i) out[i] = std::tanh(x[i]);
          break;
        }
        case Op::kEmbed: {
          const Tensor& table = arg(0);
          if (table.rank() != 2) throw RuntimeFailure("embed: table must be rank 2");
          int64_t vocab = table.dim(0), width = table.dim(1);
          Shape out_shape = n.shape;
          out_shape.push_back(width);
          out = Tensor(out_shape);
          for (size_t r = 0; r < n.indices.size(); ++r) {
            int64_t id_tok = n.indices[r];
            if (id_tok < 0 || id_tok >= vocab) {
              throw RuntimeFailure("embed: id " + std::to_string(id_tok) + " outside vocab " +
                                   std::to_string(vocab));
            }
            const double* src = table.data() + id_tok * width;
            double* dst = out.data() + static_cast<int64_t>(r) * width;
            for (int64_t j = 0; j < width; ++j) dst[j] = src[j];
          }
          break;
        }
        case Op::kCrossEntropy: {
          const Tensor& logits = arg(0);
          if (logits.rank() != 2) throw RuntimeFailure("cross_entropy: logits must be rank 2");
          int64_t rows = logits.dim(0), classes = logits.dim(1);
          if (static_cast<int64_t>(n.indices.size()) != rows) {
            throw RuntimeFailure("cross_entropy: " + std::to_string(n.indices.size()) + " targets for " +
                                 std::to_string(rows) + " rows");
          }
          double total = 0.0;
          for (int64_t r = 0; r < rows; ++r) {
            int64_t t = n.indices[static_cast<size_t>(r)];
            if (t < 0 || t >= classes) {
              throw RuntimeFailure("cross_entropy: target " + std::to_string(t) + " outside " +
                                   std::to_string(classes) + " classes");
            }
            const double* l = logits.data() + r * classes;
            double mx = l[0];
            for (int64_t c = 1; c < classes; ++c) mx = std::max(mx, l[c]);
            double sum = 0.0;
            for (int64_t c = 0; c < classes; ++c) sum += std::exp(l[c] - mx);
            total += std::log(sum) + mx - l[t];
          }
          out = Tensor::scalar(total / static_cast<double>(rows));
          break;
        }
        case Op::kReshape: {
          const Tensor& x = arg(0);
          if (shape_numel(n.shape) != x.numel()) {
            throw RuntimeFailure("reshape: " + shape_str(x.shape()) + " to " + shape_str(n.shape));
          }
          out = Tensor(n.shape, x.values());
          break;
        }
        case Op::kTranspose:
          out = transpose_last2(arg(0));
          break;
        case Op::kSliceLast: {
          const Tensor& x = arg(0);
          int64_t d = x.last_dim();
          if (n.start < 0 || n.len <= 0 || n.start + n.len > d) {
            throw RuntimeFailure("slice_last: [" + std::to_string(n.start) + "," +
                                 std::to_string(n.start + n.len) + ") outside width " + std::to_string(d));
          }
          Shape s = x.shape();
          s.back() = n.len;
          out = Tensor(s);
          int64_t rows = x.leading_rows();
          for (int64_t r = 0; r < rows; ++r) {
            const double* src = x.data() + r * d + n.start;
            double* dst = out.data() + r * n.len;
            for (int64_t j = 0; j < n.len; ++j) dst[j] = src[j];
          }
          break;
        }
        case Op::kConcatLast: {
          if (n.args.empty()) throw RuntimeFailure("concat_last: no inputs");
          Shape lead = arg(0).shape();
          lead.pop_back();
          int64_t width = 0;
          for (size_t k = 0; k < n.args.size(); ++k) {
            Shape s = arg(static_cast<int>(k)).shape();
            int64_t w = s.back();
            s.pop_back();
            if (s != lead) throw RuntimeFailure("concat_last: leading dims differ");
            width += w;
          }
          Shape s = lead;
          s.push_back(width);
          out = Tensor(s);
          int64_t rows = out.leading_rows();
          int64_t off = 0;
          for (size_t k = 0; k < n.args.size(); ++k) {
            const Tensor& part = arg(static_cast<int>(k));
            int64_t w = part.last_dim();
            for (int64_t r = 0; r < rows; ++r) {
              const double* src = part.data() + r * w;
              double* dst = out.data() + r * width + off;
              for (int64_t j = 0; j < w; ++j) dst[j] = src[j];
            }
            off += w;
          }
          break;
        }
        case Op::kGatherRows: {
          const Tensor& x = arg(0);
          int64_t width = x.last_dim();
          int64_t rows = x.leading_rows();
          int64_t m = static_cast<int64_t>(n.indices.size());
          if (m == 0) throw RuntimeFailure("gather_rows: empty row list");
          out = Tensor({m, width});
          for (int64_t r = 0; r < m; ++r) {
            int64_t src_row = n.indices[static_cast<size_t>(r)];
            if (src_row < 0 || src_row >= rows) {
              throw RuntimeFailure("gather_rows: row " + std::to_string(src_row) + " outside " +
                                   std::to_string(rows));
            }
            const double* src = x.data() + src_row * width;
            double* dst = out.data() + r * width;
            for (int64_t j = 0; j < width; ++j) dst[j] = src[j];
          }
          break;
        }
      }
    } catch (const RuntimeFailure& e) {
      throw RuntimeFailure(g.describe(static_cast<int>(id)) + ": " + e.what());
    }
    if (!out.all_finite()) {
      throw RuntimeFailure(g.describe(static_cast<int>(id)) + ": non-finite value produced");
    }
    eval.values[id] = std::move(out);
  }

  if (used_inputs != inputs.size()) {
    throw RuntimeFailure("evaluate_graph: " + std::to_string(inputs.size() - used_inputs) +
                         " bound input(s) are not graph inputs");
  }
  return eval;
}

inline std::map<std::string, Tensor> output_map(const ComputeGraph& g, const Evaluation& eval) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, node] : g.outputs()) out[name] = eval.at(node);
  return out;
}

// Reverse-mode sweep from a scalar loss node. Returns gradients as a
// ParamSet mirror; parameters the loss never reaches keep zero gradients.
inline ParamSet backprop(const ComputeGraph& g, const Evaluation& eval, int loss_node,
                         const ParamSet& params) {
  const auto& nodes = g.nodes();
  if (loss_node < 0 || loss_node >= static_cast<int>(nodes.size())) {
    throw RuntimeFailure("backprop: loss node out of range");
  }
  if (!eval.at(loss_node).is_scalar()) {
    throw RuntimeFailure("backprop: " + g.describe(loss_node) + " is not scalar-valued");
  }

  std::vector<Tensor> adj(nodes.size());
  std::vector<bool> live(nodes.size(), false);
  adj[static_cast<size_t>(loss_node)] = Tensor::scalar(1.0);
  live[static_cast<size_t>(loss_node)] = true;

  auto accum = [&](int node, const Tensor& contrib) {
    size_t i = static_cast<size_t>(node);
    if (!live[i]) {
      adj[i] = contrib;
      live[i] = true;
    } else {
      for (int64_t k = 0; k < contrib.numel(); ++k) adj[i][k] += contrib[k];
    }
  };

  for (int id = loss_node; id >= 0; --id) {
    size_t i = static_cast<size_t>(id);
    if (!live[i]) continue;
    const ComputeGraph::Node& n = nodes[i];
    const Tensor& d = adj[i];
    auto val = [&](int k) -> const Tensor& { return eval.values[static_cast<size_t>(n.args[static_cast<size_t>(k)])]; };

    switch (n.op) {
      case Op::kInput:
      case Op::kParam:
      case Op::kConst:
        break;
      case Op::kMatMul: {
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        if (a.rank() == 2 && b.rank() == 2) {
          int64_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
          Tensor da({m, k});
          detail::gemm_nt_acc(d.data(), b.data(), da.data(), m, nn, k);
          Tensor db({k, nn});
          detail::gemm_tn_acc(a.data(), d.data(), db.data(), k, m, nn);
          accum(n.args[0], da);
          accum(n.args[1], db);
        } else if (a.rank() == 3 && b.rank() == 2) {
          int64_t m = a.dim(0) * a.dim(1), k = a.dim(2), nn = b.dim(1);
          Tensor da(a.shape());
          detail::gemm_nt_acc(d.data(), b.data(), da.data(), m, nn, k);
          Tensor db(b.shape());
          detail::gemm_tn_acc(a.data(), d.data(), db.data(), k, m, nn);
          accum(n.args[0], da);
          accum(n.args[1], db);
        } else {
          int64_t bt = a.dim(0), m = a.dim(1), k = a.dim(2), nn = b.dim(2);
          Tensor da(a.shape());
          Tensor db(b.shape());
          for (int64_t q = 0; q < bt; ++q) {
            detail::gemm_nt_acc(d.data() + q * m * nn, b.data() + q * k * nn, da.data() + q * m * k, m, nn, k);
            detail::gemm_tn_acc(a.data() + q * m * k, d.data() + q * m * nn, db.data() + q * k * nn, k, m, nn);
          }
          accum(n.args[0], da);
          accum(n.args[1], db);
        }
        break;
      }
      case Op::kAdd: {
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        accum(n.args[0], d);
        if (a.same_shape(b)) {
          accum(n.args[1], d);
        } else {
          Tensor db(b.shape());
          int64_t span = b.numel();
          int64_t reps = a.numel() / span;
          for (int64_t r = 0; r < reps; ++r) {
            const double* src = d.data() + r * span;
            for (int64_t j = 0; j < span; ++j) db[j] += src[j];
          }
          accum(n.args[1], db);
        }
        break;
      }
      case Op::kScale: {
        Tensor dx = d;
        for (int64_t k = 0; k < dx.numel(); ++k) dx[k] *= n.factor;
        accum(n.args[0], dx);
        break;
      }
      case Op::kSoftmax: {
        const Tensor& y = eval.values[i];
        Tensor dx(y.shape());
        int64_t rows = y.leading_rows(), cols = y.last_dim();
        for (int64_t r = 0; r < rows; ++r) {
          const double* yr = y.data() + r * cols;
          const double* dr = d.data() + r * cols;
          double* o = dx.data() + r * cols;
          double dot = 0.0;
          for (int64_t j = 0; j < cols; ++j) dot += dr[j] * yr[j];
          for (int64_t j = 0; j < cols; ++j) o[j] = yr[j] * (dr[j] - dot);
        }
        accum(n.args[0], dx);
        break;
      }
      case Op::kLayerNorm: {
        const Tensor& x = val(0);
        const Tensor& gain = val(1);
        int64_t h = x.last_dim();
        int64_t rows = x.leading_rows();
        Tensor dx(x.shape());
        Tensor dgain(gain.shape());
        Tensor dbias(gain.shape());
        for (int64_t r = 0; r < rows; ++r) {
          const double* in = x.data() + r * h;
          const double* dr = d.data() + r * h;
          double* o = dx.data() + r * h;
          double mean = 0.0;
          for (int64_t j = 0; j < h; ++j) mean += in[j];
          mean /= static_cast<double>(h);
          double var = 0.0;
          for (int64_t j = 0; j < h; ++j) {
            double dd = in[j] - mean;
            var += dd * dd;
          }
          var /= static_cast<double>(h);
          double inv = 1.0 / std::sqrt(var + detail::kLayerNormEps);
          double sum1 = 0.0, sum2 = 0.0;
          for (int64_t j = 0; j < h; ++j) {
            double xhat = (in[j] - mean) * inv;
            double dxhat = dr[j] * gain[j];
            sum1 += dxhat;
            sum2 += dxhat * xhat;
            dgain[j] += dr[j] * xhat;
            dbias[j] += dr[j];
          }
          double invh = 1.0 / static_cast<double>(h);
          for (int64_t j = 0; j < h; ++j) {
            double xhat = (in[j] - mean) * inv;
            double dxhat = dr[j] * gain[j];
            o[j] = inv * (dxhat - sum1 * invh - xhat * sum2 * invh);
          }
        }
        accum(n.args[0], dx);
        accum(n.args[1], dgain);
        accum(n.args[2], dbias);
        break;
      }
      case Op::kGelu: {
        const Tensor& x = val(0);
        Tensor dx(x.shape());
        for (int64_t k = 0; k < x.numel(); ++k) {
          dx[k] = d[k] * (detail::gauss_cdf(x[k]) + x[k] * detail::gauss_pdf(x[k]));
        }
        accum(n.args[0], dx);
        break;
      }
      case Op::kTanh: {
        const Tensor& y = eval.values[i];
        Tensor dx(y.shape());
        for (int64_t k = 0; k < y.numel(); ++k) dx[k] = d[k] * (1.0 - y[k] * y[k]);
        accum(n.args[0], dx);
        break;
      }
      case Op::kEmbed: {
        const Tensor& table = val(0);
        int64_t width = table.dim(1);
        Tensor dt(table.shape());
        for (size_t r = 0; r < n.indices.size(); ++r) {
          const double* src = d.data() + static_cast<int64_t>(r) * width;
          double* dst = dt.data() + n.indices[r] * width;
          for (int64_t j = 0; j < width; ++j) dst[j] += src[j];
        }
        accum(n.args[0], dt);
        break;
      }
      case Op::kCrossEntropy: {
        const Tensor& logits = val(0);
        int64_t rows = logits.dim(0), classes = logits.dim(1);
        double scale = d[0] / static_cast<double>(rows);
        Tensor dl(logits.shape());
        for (int64_t r = 0; r < rows; ++r) {
          const double* l = logits.data() + r * classes;
          double* o = dl.data() + r * classes;
          double mx = l[0];
          for (int64_t c = 1; c < classes; ++c) mx = std::max(mx, l[c]);
          double sum = 0.0;
          for (int64_t c = 0; c < classes; ++c) sum += std::exp(l[c] - mx);
          for (int64_t c = 0; c < classes; ++c) o[c] = std::exp(l[c] - mx) / sum * scale;
          o[n.indices[static_cast<size_t>(r)]] -= scale;
        }
        accum(n.args[0], dl);
        break;
      }
      case Op::kReshape: {
        const Tensor& x = val(0);
        accum(n.args[0], Tensor(x.shape(), d.values()));
        break;
      }
      case Op::kTranspose:
        accum(n.args[0], transpose_last2(d));
        break;
      case Op::kSliceLast: {
        const Tensor& x = val(0);
        Tensor dx(x.shape());
        int64_t w = x.last_dim();
        int64_t rows = x.leading_rows();
        for (int64_t r = 0; r < rows; ++r) {
          const double* src = d.data() + r * n.len;
          double* dst = dx.data() + r * w + n.start;
          for (int64_t j = 0; j < n.len; ++j) dst[j] += src[j];
        }
        accum(n.args[0], dx);
        break;
      }
      case Op::kConcatLast: {
        int64_t width = eval.values[i].last_dim();
        int64_t rows = eval.values[i].leading_rows();
        int64_t off = 0;
        for (size_t k = 0; k < n.args.size(); ++k) {
          const Tensor& part = val(static_cast<int>(k));
          int64_t w = part.last_dim();
          Tensor dp(part.shape());
          for (int64_t r = 0; r < rows; ++r) {
            const double* src = d.data() + r * width + off;
            double* dst = dp.data() + r * w;
            for (int64_t j = 0; j < w; ++j) dst[j] = src[j];
          }
          accum(n.args[static_cast<size_t>(k)], dp);
          off += w;
        }
        break;
      }
      case Op::kGatherRows: {
        const Tensor& x = val(0);
        int64_t width = x.last_dim();
        Tensor dx(x.shape());
        for (size_t r = 0; r < n.indices.size(); ++r) {
          const double* src = d.data() + static_cast<int64_t>(r) * width;
          double* dst = dx.data() + n.indices[r] * width;
          for (int64_t j = 0; j < width; ++j) dst[j] += src[j];
        }
        accum(n.args[0], dx);
        break;
      }
    }
  }

  ParamSet grads = params.zeros_like();
  for (size_t id = 0; id < nodes.size(); ++id) {
    const ComputeGraph::Node& n = nodes[id];
    if (n.op != Op::kParam || !live[id]) continue;
    Tensor& slot = grads.value(n.name);
    const Tensor& a = adj[id];
    for (int64_t k = 0; k < slot.numel(); ++k) slot[k] += a[k];
  }
  return grads;
}

// Central-difference gradient oracle: (f(w+h) - f(w-h)) / 2h per coordinate.
// Touches only the forward path, never backprop.
inline ParamSet finite_diff_gradient(const std::function<double(const ParamSet&)>& loss_fn,
                                     const ParamSet& params, double h) {
  if (!(h > 0.0)) throw RuntimeFailure("finite_diff: step must be positive");
  ParamSet work = params;
  ParamSet grads = params.zeros_like();
  for (size_t e = 0; e < work.size(); ++e) {
    Tensor& t = work.entry(e).value;
    Tensor& gt = grads.entry(e).value;
    for (int64_t i = 0; i < t.numel(); ++i) {
      double keep = t[i];
      t[i] = keep + h;
      double up = loss_fn(work);
      t[i] = keep - h;
      double down = loss_fn(work);
      t[i] = keep;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw RuntimeFailure("finite_diff: non-finite loss probing '" + work.entry(e).name + "'[" +
                             std::to_string(i) + "]");
      }
      gt[i] = (up - down) / (2.0 * h);
    }
  }
  return grads;
}

inline double finite_diff_coordinate(const std::function<double(const ParamSet&)>& loss_fn,
                                     const ParamSet& params, const std::string& name, int64_t index,
                                     double h) {
  if (!(h > 0.0)) throw RuntimeFailure("finite_diff: step must be positive");
  ParamSet work = params;
  Tensor& t = work.value(name);
  if (index < 0 || index >= t.numel()) throw RuntimeFailure("finite_diff: index out of range");
  double keep = t[index];
  t[index] = keep + h;
  double up = loss_fn(work);
  t[index] = keep - h;
  double down = loss_fn(work);
  if (!std::isfinite(up) || !std::isfinite(down)) {
    throw RuntimeFailure("finite_diff: non-finite loss probing '" + name + "'[" + std::to_string(index) +
                         "]");
  }
  return (up - down) / (2.0 * h);
}

}  // namespace rpp
