#include "rp/graph.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>

namespace rp {

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Input: return "input";
    case OpKind::Param: return "param";
    case OpKind::Dense: return "dense";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::TConv2d: return "tconv2d";
    case OpKind::Relu: return "relu";
    case OpKind::Clamp01: return "clamp01";
    case OpKind::Reshape: return "reshape";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::ScalarAffine: return "scalar_affine";
    case OpKind::Square: return "square";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::ExpNeg: return "expneg";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::RowSum: return "row_sum";
    case OpKind::RowL2Norm: return "row_l2norm";
    case OpKind::GatherRows: return "gather_rows";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) shape_fail(op, detail);
}

std::int64_t conv_out_dim(std::int64_t in, int k, int s, int p) {
  return (in + 2 * p - k) / s + 1;
}

std::int64_t tconv_out_dim(std::int64_t in, int k, int s, int p) {
  return (in - 1) * s - 2 * p + k;
}

}  // namespace

int Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Graph::input(Shape shape) {
  Node n;
  n.kind = OpKind::Input;
  n.shape = std::move(shape);
  return push(std::move(n));
}

int Graph::param(std::shared_ptr<Tensor> store, bool trainable) {
  require(static_cast<bool>(store), "param", "null storage");
  Node n;
  n.kind = OpKind::Param;
  n.shape = store->shape;
  n.store = std::move(store);
  n.trainable = trainable;
  return push(std::move(n));
}

int Graph::dense(int x, int w, int b) {
  const auto& xs = node(x).shape;
  const auto& ws = node(w).shape;
  const auto& bs = node(b).shape;
  require(xs.size() == 2 && ws.size() == 2 && bs.size() == 1, "dense", "ranks must be (2,2,1)");
  require(xs[1] == ws[0], "dense", "inner dims differ: x" + shape_str(xs) + " w" + shape_str(ws));
  require(bs[0] == ws[1], "dense", "bias dim mismatch");
  Node n;
  n.kind = OpKind::Dense;
  n.in = {x, w, b};
  n.nin = 3;
  n.shape = {xs[0], ws[1]};
  return push(std::move(n));
}

int Graph::conv2d(int x, int w, int b, int stride, int pad) {
  const auto& xs = node(x).shape;
  const auto& ws = node(w).shape;
  const auto& bs = node(b).shape;
  require(xs.size() == 4 && ws.size() == 4 && bs.size() == 1, "conv2d", "ranks must be (4,4,1)");
  require(ws[2] == ws[3], "conv2d", "only square kernels");
  require(xs[1] == ws[1], "conv2d", "channel mismatch: x" + shape_str(xs) + " w" + shape_str(ws));
  require(bs[0] == ws[0], "conv2d", "bias dim mismatch");
  require(stride >= 1 && pad >= 0, "conv2d", "bad stride/pad");
  int k = static_cast<int>(ws[2]);
  std::int64_t ho = conv_out_dim(xs[2], k, stride, pad);
  std::int64_t wo = conv_out_dim(xs[3], k, stride, pad);
  require(ho >= 1 && wo >= 1, "conv2d", "output would be empty");
  Node n;
  n.kind = OpKind::Conv2d;
  n.in = {x, w, b};
  n.nin = 3;
  n.stride = stride;
  n.pad = pad;
  n.shape = {xs[0], ws[0], ho, wo};
  return push(std::move(n));
}

int Graph::tconv2d(int x, int w, int b, int stride, int pad) {
  const auto& xs = node(x).shape;
  const auto& ws = node(w).shape;
  const auto& bs = node(b).shape;
  require(xs.size() == 4 && ws.size() == 4 && bs.size() == 1, "tconv2d", "ranks must be (4,4,1)");
  require(ws[2] == ws[3], "tconv2d", "only square kernels");
  require(xs[1] == ws[0], "tconv2d", "channel mismatch: x" + shape_str(xs) + " w" + shape_str(ws));
  require(bs[0] == ws[1], "tconv2d", "bias dim mismatch");
  require(stride >= 1 && pad >= 0, "tconv2d", "bad stride/pad");
  int k = static_cast<int>(ws[2]);
  std::int64_t ho = tconv_out_dim(xs[2], k, stride, pad);
  std::int64_t wo = tconv_out_dim(xs[3], k, stride, pad);
  require(ho >= 1 && wo >= 1, "tconv2d", "output would be empty");
  Node n;
  n.kind = OpKind::TConv2d;
  n.in = {x, w, b};
  n.nin = 3;
  n.stride = stride;
  n.pad = pad;
  n.shape = {xs[0], ws[1], ho, wo};
  return push(std::move(n));
}

namespace {
Node unary(OpKind k, int x, Shape shape) {
  Node n;
  n.kind = k;
  n.in = {x, -1, -1};
  n.nin = 1;
  n.shape = std::move(shape);
  return n;
}
}  // namespace

int Graph::relu(int x) { return push(unary(OpKind::Relu, x, node(x).shape)); }
int Graph::clamp01(int x) { return push(unary(OpKind::Clamp01, x, node(x).shape)); }

int Graph::reshape(int x, Shape shape) {
  require(shape_numel(shape) == shape_numel(node(x).shape), "reshape",
          "numel mismatch " + shape_str(node(x).shape) + " -> " + shape_str(shape));
  return push(unary(OpKind::Reshape, x, std::move(shape)));
}

namespace {
Node binary(OpKind k, int x, int y, const Shape& shape) {
  Node n;
  n.kind = k;
  n.in = {x, y, -1};
  n.nin = 2;
  n.shape = shape;
  return n;
}
}  // namespace

int Graph::add(int x, int y) {
  require(node(x).shape == node(y).shape, "add", "shape mismatch");
  return push(binary(OpKind::Add, x, y, node(x).shape));
}
int Graph::sub(int x, int y) {
  require(node(x).shape == node(y).shape, "sub", "shape mismatch");
  return push(binary(OpKind::Sub, x, y, node(x).shape));
}
int Graph::mul(int x, int y) {
  require(node(x).shape == node(y).shape, "mul", "shape mismatch");
  return push(binary(OpKind::Mul, x, y, node(x).shape));
}

int Graph::scalar_affine(int x, float alpha, float beta) {
  Node n = unary(OpKind::ScalarAffine, x, node(x).shape);
  n.alpha = alpha;
  n.beta = beta;
  return push(std::move(n));
}

int Graph::square(int x) { return push(unary(OpKind::Square, x, node(x).shape)); }
int Graph::sqrt(int x) { return push(unary(OpKind::Sqrt, x, node(x).shape)); }
int Graph::expneg(int x) { return push(unary(OpKind::ExpNeg, x, node(x).shape)); }
int Graph::sum(int x) { return push(unary(OpKind::Sum, x, {1})); }
int Graph::mean(int x) { return push(unary(OpKind::Mean, x, {1})); }

int Graph::row_sum(int x) {
  require(node(x).shape.size() == 2, "row_sum", "rank-2 input required");
  return push(unary(OpKind::RowSum, x, {node(x).shape[0]}));
}

int Graph::row_l2norm(int x) {
  require(node(x).shape.size() == 2, "row_l2norm", "rank-2 input required");
  return push(unary(OpKind::RowL2Norm, x, {node(x).shape[0]}));
}

int Graph::gather_rows(int x, std::vector<std::int32_t> idx) {
  const auto& xs = node(x).shape;
  require(xs.size() == 2, "gather_rows", "rank-2 input required");
  for (auto i : idx)
    require(i >= 0 && i < xs[0], "gather_rows", "index out of range");
  Node n = unary(OpKind::GatherRows, x, {static_cast<std::int64_t>(idx.size()), xs[1]});
  n.indices = std::move(idx);
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// kernels (templated on scalar type so the finite-difference oracle can run
// the same graph in f64)

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using MapCM = Eigen::Map<const Mat<T>>;

// col has shape (C*k*k, ho*wo), row-major.
template <typename T>
void im2col(const T* src, std::int64_t C, std::int64_t H, std::int64_t W, int k, int s, int p,
            std::int64_t ho, std::int64_t wo, T* col) {
  const std::int64_t hw = ho * wo;
  for (std::int64_t c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* crow = col + ((c * k + ki) * k + kj) * hw;
        for (std::int64_t i = 0; i < ho; ++i) {
          std::int64_t hi = i * s - p + ki;
          if (hi < 0 || hi >= H) {
            std::fill(crow + i * wo, crow + (i + 1) * wo, T(0));
            continue;
          }
          const T* srow = src + (c * H + hi) * W;
          for (std::int64_t j = 0; j < wo; ++j) {
            std::int64_t wj = j * s - p + kj;
            crow[i * wo + j] = (wj < 0 || wj >= W) ? T(0) : srow[wj];
          }
        }
      }
    }
  }
}

// adjoint of im2col: scatter-add col back into (C,H,W)
template <typename T>
void col2im_add(const T* col, std::int64_t C, std::int64_t H, std::int64_t W, int k, int s, int p,
                std::int64_t ho, std::int64_t wo, T* dst) {
  const std::int64_t hw = ho * wo;
  for (std::int64_t c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* crow = col + ((c * k + ki) * k + kj) * hw;
        for (std::int64_t i = 0; i < ho; ++i) {
          std::int64_t hi = i * s - p + ki;
          if (hi < 0 || hi >= H) continue;
          T* drow = dst + (c * H + hi) * W;
          for (std::int64_t j = 0; j < wo; ++j) {
            std::int64_t wj = j * s - p + kj;
            if (wj >= 0 && wj < W) drow[wj] += crow[i * wo + j];
          }
        }
      }
    }
  }
}

template <typename T>
struct Vals {
  std::vector<std::vector<T>> v;
};

// Provider returns the data of a leaf node (Input binding or Param store).
template <typename T>
using LeafFn = std::function<void(int id, std::vector<T>&)>;

template <typename T>
void forward_node(const Graph& g, int id, Vals<T>& vals, const LeafFn<T>& leaf) {
  const Node& n = g.node(id);
  std::vector<T>& out = vals.v[static_cast<size_t>(id)];
  out.assign(static_cast<size_t>(shape_numel(n.shape)), T(0));
  auto in = [&](int slot) -> const std::vector<T>& {
    return vals.v[static_cast<size_t>(n.in[static_cast<size_t>(slot)])];
  };
  switch (n.kind) {
    case OpKind::Input:
    case OpKind::Param:
      leaf(id, out);
      break;
    case OpKind::Dense: {
      const auto& xs = g.node(n.in[0]).shape;
      const auto& wsz = g.node(n.in[1]).shape;
      std::int64_t N = xs[0], K = xs[1], M = wsz[1];
      MapCM<T> X(in(0).data(), N, K), W(in(1).data(), K, M);
      MapM<T> O(out.data(), N, M);
      O.noalias() = X * W;
      const auto& b = in(2);
      for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t j = 0; j < M; ++j) O(i, j) += b[static_cast<size_t>(j)];
      break;
    }
    case OpKind::Conv2d: {
      const auto& xs = g.node(n.in[0]).shape;
      const auto& wsz = g.node(n.in[1]).shape;
      std::int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
      std::int64_t OC = wsz[0];
      int k = static_cast<int>(wsz[2]);
      std::int64_t ho = n.shape[2], wo = n.shape[3], hw = ho * wo;
      std::vector<T> col(static_cast<size_t>(C * k * k * hw));
      MapCM<T> Wm(in(1).data(), OC, C * k * k);
      const auto& b = in(2);
      for (std::int64_t i = 0; i < N; ++i) {
        im2col(in(0).data() + i * C * H * W, C, H, W, k, n.stride, n.pad, ho, wo, col.data());
        MapCM<T> Col(col.data(), C * k * k, hw);
        MapM<T> O(out.data() + i * OC * hw, OC, hw);
        O.noalias() = Wm * Col;
        for (std::int64_t oc = 0; oc < OC; ++oc) O.row(oc).array() += b[static_cast<size_t>(oc)];
      }
      break;
    }
    case OpKind::TConv2d: {
      const auto& xs = g.node(n.in[0]).shape;
      const auto& wsz = g.node(n.in[1]).shape;
      std::int64_t N = xs[0], IC = xs[1], Hi = xs[2], Wi = xs[3];
      std::int64_t OC = wsz[1];
      int k = static_cast<int>(wsz[2]);
      std::int64_t ho = n.shape[2], wo = n.shape[3];
      std::int64_t ihw = Hi * Wi;
      std::vector<T> col(static_cast<size_t>(OC * k * k * ihw));
      MapCM<T> Wm(in(1).data(), IC, OC * k * k);
      const auto& b = in(2);
      for (std::int64_t i = 0; i < N; ++i) {
        MapCM<T> X(in(0).data() + i * IC * ihw, IC, ihw);
        MapM<T> Col(col.data(), OC * k * k, ihw);
        Col.noalias() = Wm.transpose() * X;
        T* oimg = out.data() + i * OC * ho * wo;
        col2im_add(col.data(), OC, ho, wo, k, n.stride, n.pad, Hi, Wi, oimg);
        for (std::int64_t oc = 0; oc < OC; ++oc) {
          T* orow = oimg + oc * ho * wo;
          for (std::int64_t q = 0; q < ho * wo; ++q) orow[q] += b[static_cast<size_t>(oc)];
        }
      }
      break;
    }
    case OpKind::Relu: {
      const auto& x = in(0);
      for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    }
    case OpKind::Clamp01: {
      const auto& x = in(0);
      for (size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i], T(0), T(1));
      break;
    }
    case OpKind::Reshape:
      out = in(0);
      break;
    case OpKind::Add: {
      const auto& x = in(0);
      const auto& y = in(1);
      for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
      break;
    }
    case OpKind::Sub: {
      const auto& x = in(0);
      const auto& y = in(1);
      for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
      break;
    }
    case OpKind::Mul: {
      const auto& x = in(0);
      const auto& y = in(1);
      for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
      break;
    }
    case OpKind::ScalarAffine: {
      const auto& x = in(0);
      for (size_t i = 0; i < x.size(); ++i) out[i] = T(n.alpha) * x[i] + T(n.beta);
      break;
    }
    case OpKind::Square: {
      const auto& x = in(0);
      for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * x[i];
      break;
    }
    case OpKind::Sqrt: {
      const auto& x = in(0);
      for (size_t i = 0; i < x.size(); ++i) out[i] = std::sqrt(x[i]);
      break;
    }
    case OpKind::ExpNeg: {
      const auto& x = in(0);
      for (size_t i = 0; i < x.size(); ++i) out[i] = std::exp(-x[i]);
      break;
    }
    case OpKind::Sum: {
      const auto& x = in(0);
      T acc(0);
      for (T v : x) acc += v;
      out[0] = acc;
      break;
    }
    case OpKind::Mean: {
      const auto& x = in(0);
      T acc(0);
      for (T v : x) acc += v;
      out[0] = acc / T(x.size());
      break;
    }
    case OpKind::RowSum: {
      const auto& xs = g.node(n.in[0]).shape;
      std::int64_t N = xs[0], D = xs[1];
      const auto& x = in(0);
      for (std::int64_t i = 0; i < N; ++i) {
        T acc(0);
        for (std::int64_t j = 0; j < D; ++j) acc += x[static_cast<size_t>(i * D + j)];
        out[static_cast<size_t>(i)] = acc;
      }
      break;
    }
    case OpKind::RowL2Norm: {
      const auto& xs = g.node(n.in[0]).shape;
      std::int64_t N = xs[0], D = xs[1];
      const auto& x = in(0);
      for (std::int64_t i = 0; i < N; ++i) {
        T acc(0);
        for (std::int64_t j = 0; j < D; ++j) {
          T v = x[static_cast<size_t>(i * D + j)];
          acc += v * v;
        }
        out[static_cast<size_t>(i)] = std::sqrt(acc);
      }
      break;
    }
    case OpKind::GatherRows: {
      std::int64_t D = n.shape[1];
      const auto& x = in(0);
      for (size_t r = 0; r < n.indices.size(); ++r)
        std::copy_n(x.data() + static_cast<std::int64_t>(n.indices[r]) * D, D,
                    out.data() + static_cast<std::int64_t>(r) * D);
      break;
    }
  }
}

template <typename T>
void check_finite(const std::vector<T>& v, const Node& n, int id) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x)))
      throw numeric_error(std::string("non-finite value produced by ") + op_name(n.kind) +
                          " node " + std::to_string(id));
}

const Tensor* find_binding(const Bindings& b, int id) {
  for (const auto& [node, t] : b)
    if (node == id) return t;
  return nullptr;
}

}  // namespace

void evaluate(const Graph& g, const Bindings& bindings, Workspace& ws) {
  Vals<float> vals;
  vals.v.resize(static_cast<size_t>(g.size()));
  LeafFn<float> leaf = [&](int id, std::vector<float>& out) {
    const Node& n = g.node(id);
    if (n.kind == OpKind::Param) {
      out = n.store->data;
      return;
    }
    const Tensor* t = find_binding(bindings, id);
    if (!t) throw std::invalid_argument("evaluate: input node " + std::to_string(id) + " not bound");
    if (t->shape != n.shape)
      throw std::invalid_argument("evaluate: binding shape " + shape_str(t->shape) +
                                  " does not match input " + shape_str(n.shape));
    out = t->data;
  };
  for (int id = 0; id < g.size(); ++id) {
    forward_node(g, id, vals, leaf);
    check_finite(vals.v[static_cast<size_t>(id)], g.node(id), id);
  }
  ws.value.clear();
  ws.value.reserve(static_cast<size_t>(g.size()));
  for (int id = 0; id < g.size(); ++id)
    ws.value.emplace_back(g.node(id).shape, std::move(vals.v[static_cast<size_t>(id)]));
}

GradMap gradient(const Graph& g, int out, const Workspace& ws) {
  const Node& on = g.node(out);
  if (shape_numel(on.shape) != 1)
    throw std::invalid_argument("gradient: output node must be scalar");
  if (ws.value.size() != static_cast<size_t>(g.size()))
    throw std::invalid_argument("gradient: workspace does not match graph (run evaluate first)");

  std::vector<Tensor> grad(static_cast<size_t>(g.size()));
  std::vector<bool> needed(static_cast<size_t>(g.size()), false);
  needed[static_cast<size_t>(out)] = true;
  for (int id = out; id >= 0; --id) {
    if (!needed[static_cast<size_t>(id)]) continue;
    const Node& n = g.node(id);
    for (int s = 0; s < n.nin; ++s) needed[static_cast<size_t>(n.in[static_cast<size_t>(s)])] = true;
  }

  auto ensure = [&](int id) -> Tensor& {
    Tensor& t = grad[static_cast<size_t>(id)];
    if (t.shape.empty() && shape_numel(g.node(id).shape) > 0) t = Tensor::zeros(g.node(id).shape);
    return t;
  };
  ensure(out).data[0] = 1.0f;

  for (int id = out; id >= 0; --id) {
    if (!needed[static_cast<size_t>(id)]) continue;
    const Node& n = g.node(id);
    const Tensor& go = grad[static_cast<size_t>(id)];
    if (go.shape.empty()) continue;  // no gradient flowed here
    auto val = [&](int slot) -> const Tensor& { return ws.value[static_cast<size_t>(n.in[static_cast<size_t>(slot)])]; };
    switch (n.kind) {
      case OpKind::Input:
      case OpKind::Param:
        break;
      case OpKind::Dense: {
        const auto& xs = g.node(n.in[0]).shape;
        std::int64_t N = xs[0], K = xs[1], M = n.shape[1];
        Tensor& dx = ensure(n.in[0]);
        Tensor& dw = ensure(n.in[1]);
        Tensor& db = ensure(n.in[2]);
        MapCM<float> G(go.ptr(), N, M), X(val(0).ptr(), N, K), W(val(1).ptr(), K, M);
        MapM<float> DX(dx.ptr(), N, K), DW(dw.ptr(), K, M);
        DX.noalias() += G * W.transpose();
        DW.noalias() += X.transpose() * G;
        for (std::int64_t i = 0; i < N; ++i)
          for (std::int64_t j = 0; j < M; ++j) db.data[static_cast<size_t>(j)] += G(i, j);
        break;
      }
      case OpKind::Conv2d: {
        const auto& xs = g.node(n.in[0]).shape;
        const auto& wsz = g.node(n.in[1]).shape;
        std::int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
        std::int64_t OC = wsz[0];
        int k = static_cast<int>(wsz[2]);
        std::int64_t ho = n.shape[2], wo = n.shape[3], hw = ho * wo;
        Tensor& dx = ensure(n.in[0]);
        Tensor& dw = ensure(n.in[1]);
        Tensor& db = ensure(n.in[2]);
        std::vector<float> col(static_cast<size_t>(C * k * k * hw));
        std::vector<float> dcol(col.size());
        MapCM<float> Wm(val(1).ptr(), OC, C * k * k);
        MapM<float> DW(dw.ptr(), OC, C * k * k);
        for (std::int64_t i = 0; i < N; ++i) {
          im2col(val(0).ptr() + i * C * H * W, C, H, W, k, n.stride, n.pad, ho, wo, col.data());
          MapCM<float> Col(col.data(), C * k * k, hw);
          MapCM<float> G(go.ptr() + i * OC * hw, OC, hw);
          DW.noalias() += G * Col.transpose();
          MapM<float> DCol(dcol.data(), C * k * k, hw);
          DCol.noalias() = Wm.transpose() * G;
          col2im_add(dcol.data(), C, H, W, k, n.stride, n.pad, ho, wo, dx.ptr() + i * C * H * W);
          for (std::int64_t oc = 0; oc < OC; ++oc) db.data[static_cast<size_t>(oc)] += G.row(oc).sum();
        }
        break;
      }
      case OpKind::TConv2d: {
        const auto& xs = g.node(n.in[0]).shape;
        const auto& wsz = g.node(n.in[1]).shape;
        std::int64_t N = xs[0], IC = xs[1], Hi = xs[2], Wi = xs[3];
        std::int64_t OC = wsz[1];
        int k = static_cast<int>(wsz[2]);
        std::int64_t ho = n.shape[2], wo = n.shape[3];
        std::int64_t ihw = Hi * Wi;
        Tensor& dx = ensure(n.in[0]);
        Tensor& dw = ensure(n.in[1]);
        Tensor& db = ensure(n.in[2]);
        std::vector<float> dcol(static_cast<size_t>(OC * k * k * ihw));
        MapCM<float> Wm(val(1).ptr(), IC, OC * k * k);
        MapM<float> DW(dw.ptr(), IC, OC * k * k);
        for (std::int64_t i = 0; i < N; ++i) {
          const float* gimg = go.ptr() + i * OC * ho * wo;
          im2col(gimg, OC, ho, wo, k, n.stride, n.pad, Hi, Wi, dcol.data());
          MapCM<float> DCol(dcol.data(), OC * k * k, ihw);
          MapCM<float> X(val(0).ptr() + i * IC * ihw, IC, ihw);
          MapM<float> DX(dx.ptr() + i * IC * ihw, IC, ihw);
          DX.noalias() += Wm * DCol;
          DW.noalias() += X * DCol.transpose();
          for (std::int64_t oc = 0; oc < OC; ++oc) {
            const float* grow = gimg + oc * ho * wo;
            float acc = 0.0f;
            for (std::int64_t q = 0; q < ho * wo; ++q) acc += grow[q];
            db.data[static_cast<size_t>(oc)] += acc;
          }
        }
        break;
      }
      case OpKind::Relu: {
        Tensor& dx = ensure(n.in[0]);
        const Tensor& x = val(0);
        for (size_t i = 0; i < x.data.size(); ++i)
          if (x.data[i] > 0.0f) dx.data[i] += go.data[i];
        break;
      }
      case OpKind::Clamp01: {
        Tensor& dx = ensure(n.in[0]);
        const Tensor& x = val(0);
        for (size_t i = 0; i < x.data.size(); ++i)
          if (x.data[i] > 0.0f && x.data[i] < 1.0f) dx.data[i] += go.data[i];
        break;
      }
      case OpKind::Reshape: {
        Tensor& dx = ensure(n.in[0]);
        for (size_t i = 0; i < go.data.size(); ++i) dx.data[i] += go.data[i];
        break;
      }
      case OpKind::Add: {
        Tensor& dx = ensure(n.in[0]);
        Tensor& dy = ensure(n.in[1]);
        for (size_t i = 0; i < go.data.size(); ++i) {
          dx.data[i] += go.data[i];
          dy.data[i] += go.data[i];
        }
        break;
      }
      case OpKind::Sub: {
        Tensor& dx = ensure(n.in[0]);
        Tensor& dy = ensure(n.in[1]);
        for (size_t i = 0; i < go.data.size(); ++i) {
          dx.data[i] += go.data[i];
          dy.data[i] -= go.data[i];
        }
        break;
      }
      case OpKind::Mul: {
        Tensor& dx = ensure(n.in[0]);
        Tensor& dy = ensure(n.in[1]);
        const Tensor& x = val(0);
        const Tensor& y = val(1);
        for (size_t i = 0; i < go.data.size(); ++i) {
          dx.data[i] += go.data[i] * y.data[i];
          dy.data[i] += go.data[i] * x.data[i];
        }
        break;
      }
      case OpKind::ScalarAffine: {
        Tensor& dx = ensure(n.in[0]);
        for (size_t i = 0; i < go.data.size(); ++i) dx.data[i] += n.alpha * go.data[i];
        break;
      }
      case OpKind::Square: {
        Tensor& dx = ensure(n.in[0]);
        const Tensor& x = val(0);
        for (size_t i = 0; i < go.data.size(); ++i) dx.data[i] += 2.0f * x.data[i] * go.data[i];
        break;
      }
      case OpKind::Sqrt: {
        Tensor& dx = ensure(n.in[0]);
        const Tensor& y = ws.value[static_cast<size_t>(id)];
        for (size_t i = 0; i < go.data.size(); ++i)
          dx.data[i] += go.data[i] / (2.0f * std::max(y.data[i], 1e-12f));
        break;
      }
      case OpKind::ExpNeg: {
        Tensor& dx = ensure(n.in[0]);
        const Tensor& y = ws.value[static_cast<size_t>(id)];
        for (size_t i = 0; i < go.data.size(); ++i) dx.data[i] -= y.data[i] * go.data[i];
        break;
      }
      case OpKind::Sum: {
        Tensor& dx = ensure(n.in[0]);
        float gs = go.data[0];
        for (auto& v : dx.data) v += gs;
        break;
      }
      case OpKind::Mean: {
        Tensor& dx = ensure(n.in[0]);
        float gs = go.data[0] / static_cast<float>(dx.data.size());
        for (auto& v : dx.data) v += gs;
        break;
      }
      case OpKind::RowSum: {
        Tensor& dx = ensure(n.in[0]);
        const auto& xs = g.node(n.in[0]).shape;
        std::int64_t N = xs[0], D = xs[1];
        for (std::int64_t i = 0; i < N; ++i)
          for (std::int64_t j = 0; j < D; ++j)
            dx.data[static_cast<size_t>(i * D + j)] += go.data[static_cast<size_t>(i)];
        break;
      }
      case OpKind::RowL2Norm: {
        Tensor& dx = ensure(n.in[0]);
        const Tensor& x = val(0);
        const Tensor& nr = ws.value[static_cast<size_t>(id)];
        const auto& xs = g.node(n.in[0]).shape;
        std::int64_t N = xs[0], D = xs[1];
        for (std::int64_t i = 0; i < N; ++i) {
          float inv = go.data[static_cast<size_t>(i)] / std::max(nr.data[static_cast<size_t>(i)], 1e-12f);
          for (std::int64_t j = 0; j < D; ++j)
            dx.data[static_cast<size_t>(i * D + j)] += inv * x.data[static_cast<size_t>(i * D + j)];
        }
        break;
      }
      case OpKind::GatherRows: {
        Tensor& dx = ensure(n.in[0]);
        std::int64_t D = n.shape[1];
        for (size_t r = 0; r < n.indices.size(); ++r) {
          const float* src = go.ptr() + static_cast<std::int64_t>(r) * D;
          float* dst = dx.ptr() + static_cast<std::int64_t>(n.indices[r]) * D;
          for (std::int64_t j = 0; j < D; ++j) dst[j] += src[j];
        }
        break;
      }
    }
  }

  GradMap result;
  for (int id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    if (n.kind != OpKind::Param || !n.trainable) continue;
    Tensor& gt = grad[static_cast<size_t>(id)];
    if (gt.shape.empty()) gt = Tensor::zeros(n.shape);
    check_finite(gt.data, n, id);
    auto [it, inserted] = result.try_emplace(n.store.get(), std::move(gt));
    if (!inserted)
      for (size_t i = 0; i < it->second.data.size(); ++i) it->second.data[i] += gt.data[i];
  }
  return result;
}

double evaluate_f64(const Graph& g, const Bindings& bindings, int out,
                    const std::unordered_map<int, std::vector<double>>& leaf_override) {
  Vals<double> vals;
  vals.v.resize(static_cast<size_t>(g.size()));
  LeafFn<double> leaf = [&](int id, std::vector<double>& o) {
    auto it = leaf_override.find(id);
    if (it != leaf_override.end()) {
      o = it->second;
      return;
    }
    const Node& n = g.node(id);
    const std::vector<float>* src = nullptr;
    if (n.kind == OpKind::Param) {
      src = &n.store->data;
    } else {
      const Tensor* t = find_binding(bindings, id);
      if (!t) throw std::invalid_argument("evaluate_f64: input node not bound");
      src = &t->data;
    }
    o.assign(src->begin(), src->end());
  };
  for (int id = 0; id <= out; ++id) forward_node(g, id, vals, leaf);
  return vals.v[static_cast<size_t>(out)][0];
}

FiniteDiffReport finite_diff_check(const Graph& g, const Bindings& bindings, int out,
                                   double h, std::int64_t max_per_param) {
  Workspace ws;
  evaluate(g, bindings, ws);
  GradMap grads = gradient(g, out, ws);

  std::unordered_map<int, std::vector<double>> leaves;
  for (int id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    if (n.kind == OpKind::Param)
      leaves[id].assign(n.store->data.begin(), n.store->data.end());
    else if (n.kind == OpKind::Input) {
      const Tensor* t = find_binding(bindings, id);
      if (!t) throw std::invalid_argument("finite_diff_check: input node not bound");
      leaves[id].assign(t->data.begin(), t->data.end());
    }
  }

  FiniteDiffReport rep;
  for (int id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    if (n.kind != OpKind::Param || !n.trainable) continue;
    const Tensor& ad = grads.at(n.store.get());
    std::vector<double>& buf = leaves[id];
    std::int64_t total = static_cast<std::int64_t>(buf.size());
    std::int64_t stride = 1;
    if (max_per_param > 0 && total > max_per_param) stride = (total + max_per_param - 1) / max_per_param;
    for (std::int64_t i = 0; i < total; i += stride) {
      double saved = buf[static_cast<size_t>(i)];
      buf[static_cast<size_t>(i)] = saved + h;
      double fp = evaluate_f64(g, bindings, out, leaves);
      buf[static_cast<size_t>(i)] = saved - h;
      double fm = evaluate_f64(g, bindings, out, leaves);
      buf[static_cast<size_t>(i)] = saved;
      double fd = (fp - fm) / (2.0 * h);
      double gv = static_cast<double>(ad.data[static_cast<size_t>(i)]);
      double rel = std::abs(fd - gv) / std::max({std::abs(fd), std::abs(gv), 1e-6});
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.param_node = id;
        rep.flat_index = i;
      }
    }
  }
  return rep;
}

}  // namespace rp
