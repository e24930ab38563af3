#pragma once

#include <array>
#include <memory>
#include <unordered_map>
#include <vector>

#include "rp/tensor.hpp"

namespace rp {

enum class OpKind {
  Input,
  Param,
  Dense,
  Conv2d,
  TConv2d,
  Relu,
  Clamp01,
  Reshape,
  Add,
  Sub,
  Mul,
  ScalarAffine,
  Square,
  Sqrt,
  ExpNeg,
  Sum,
  Mean,
  RowSum,
  RowL2Norm,
  GatherRows,
};

const char* op_name(OpKind k);

struct Node {
  OpKind kind;
  std::array<int, 3> in{-1, -1, -1};
  int nin = 0;
  Shape shape;  // output shape
  int stride = 1;
  int pad = 0;
  float alpha = 1.0f;  // ScalarAffine: alpha*x + beta
  float beta = 0.0f;
  std::vector<std::int32_t> indices;    // GatherRows
  std::shared_ptr<Tensor> store;        // Param storage (shared across graphs)
  bool trainable = false;
};

// Computation graph built in topological order. Parameters live outside the
// graph as shared tensors, so several graphs (or several branches of one
// graph) can reference the same storage; their gradients accumulate.
class Graph {
 public:
  int input(Shape shape);
  int param(std::shared_ptr<Tensor> store, bool trainable = true);

  // x:(N,K) w:(K,M) b:(M) -> (N,M)
  int dense(int x, int w, int b);
  // x:(N,C,H,W) w:(OC,C,kh,kw) b:(OC) -> (N,OC,Ho,Wo), zero padding
  int conv2d(int x, int w, int b, int stride, int pad);
  // x:(N,IC,H,W) w:(IC,OC,kh,kw) b:(OC) -> (N,OC,(H-1)s-2p+k,...)
  int tconv2d(int x, int w, int b, int stride, int pad);
  int relu(int x);
  int clamp01(int x);
  int reshape(int x, Shape shape);
  int add(int x, int y);
  int sub(int x, int y);
  int mul(int x, int y);
  int scalar_affine(int x, float alpha, float beta);
  int square(int x);
  int sqrt(int x);
  int expneg(int x);  // e^{-x}
  int sum(int x);     // -> (1)
  int mean(int x);    // -> (1)
  int row_sum(int x);       // (N,D) -> (N)
  int row_l2norm(int x);    // (N,D) -> (N)
  int gather_rows(int x, std::vector<std::int32_t> idx);  // -> (M,D)

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  int push(Node n);
  std::vector<Node> nodes_;
};

using Bindings = std::vector<std::pair<int, const Tensor*>>;

// Forward values for every node. Inputs must be bound with correctly shaped
// tensors; any non-finite result raises numeric_error naming the node.
struct Workspace {
  std::vector<Tensor> value;
};

void evaluate(const Graph& g, const Bindings& bindings, Workspace& ws);

// Reverse-mode gradients of the scalar node `out` with respect to every
// trainable parameter, accumulated by parameter storage identity.
using GradMap = std::unordered_map<const Tensor*, Tensor>;
GradMap gradient(const Graph& g, int out, const Workspace& ws);

// f64 forward pass used by the finite-difference oracle. `leaf_override`
// maps node id -> f64 copy of that leaf's contents.
double evaluate_f64(const Graph& g, const Bindings& bindings, int out,
                    const std::unordered_map<int, std::vector<double>>& leaf_override);

struct FiniteDiffReport {
  double max_rel_err = 0.0;
  int param_node = -1;
  std::int64_t flat_index = -1;
  std::int64_t checked = 0;
  bool pass(double tol) const { return max_rel_err <= tol; }
};

// Central differences (step h, f64-promoted leaves) on trainable scalars of
// the scalar node `out`, against the reverse-mode result. `max_per_param`
// limits how many scalars are probed per tensor (0 = all), sampled on an
// even stride so every tensor is covered.
FiniteDiffReport finite_diff_check(const Graph& g, const Bindings& bindings, int out,
                                   double h = 1e-3, std::int64_t max_per_param = 0);

}  // namespace rp
