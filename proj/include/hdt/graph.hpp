#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hdt/rng.hpp"
#include "hdt/tensor.hpp"

namespace hdt {

// Reverse-mode tape over whole tensors. Ops evaluate eagerly on construction;
// backward() walks the tape in reverse. One Graph instance per forward pass,
// recorded from a single thread (kernels may still fan out with OpenMP).
class Graph {
 public:
  using Id = int32_t;

  static constexpr double kMaskFill = -1e9;
  static constexpr double kLayerNormEps = 1e-5;

  explicit Graph(bool check_finite = true) : check_finite_(check_finite) {}

  Id constant(Tensor t);
  Id param(const Tensor& t);  // leaf that receives a gradient

  // a (..., k) @ b (k, n) -> (..., n)
  Id matmul(Id a, Id b);
  // a (g, m, k) @ b (g, k, n) -> (g, m, n)
  Id bmm(Id a, Id b);
  // a (g, m, k) @ b (g, n, k)^T -> (g, m, n)
  Id bmm_nt(Id a, Id b);
  Id add(Id a, Id b);          // same shape
  Id add_bias(Id x, Id bias);  // bias over last dim
  Id scale(Id x, double c);
  Id layer_norm(Id x, Id gamma, Id beta);  // over last dim
  Id softmax_lastdim(Id x);
  Id gelu(Id x);  // tanh approximation
  Id tanh_act(Id x);
  // table (v, e) indexed by ids (one per output row) -> lead_shape + (e)
  Id embedding_lookup(Id table, const std::vector<int64_t>& ids,
                      std::vector<int64_t> lead_shape);
  Id concat_lastdim(Id a, Id b);
  // x (b, t, e) -> (b, count, e) taking positions offset, offset+stride, ...
  Id slice_positions(Id x, int64_t offset, int64_t stride);
  // p tensors (b, k, e) -> (b, k*p, e), step-major interleave
  Id interleave_positions(const std::vector<Id>& xs);
  // adds -1e9 where mask == 0; mask shape equals x, or x is (b*h, t, t) with
  // mask (b, t, t) broadcast across heads
  Id masked_fill(Id x, Tensor mask);
  // (b, t, h*d) -> (b*h, t, d) and back
  Id split_heads(Id x, int64_t n_heads);
  Id merge_heads(Id x, int64_t n_heads);
  Id dropout(Id x, double rate, Prng& rng);
  // mean over weighted elements of squared error; target/weight are constants
  Id mean_squared_error(Id pred, Tensor target, Tensor weight);

  const Tensor& val(Id id) const { return nodes_[static_cast<size_t>(id)].value; }
  void backward(Id loss);
  // zero tensor if the loss never touched this node
  Tensor grad(Id id) const;

  size_t node_count() const { return nodes_.size(); }

 private:
  enum class Op : uint8_t {
    kConst,
    kParam,
    kMatmul,
    kBmm,
    kBmmNT,
    kAdd,
    kAddBias,
    kScale,
    kLayerNorm,
    kSoftmax,
    kGelu,
    kTanh,
    kEmbed,
    kConcat,
    kSlicePos,
    kInterleave,
    kMaskedFill,
    kSplitHeads,
    kMergeHeads,
    kDropout,
    kMse,
  };

  struct Node {
    Op op;
    Id a = -1;
    Id b = -1;
    Id c = -1;
    std::vector<Id> list;
    Tensor value;
    Tensor grad;
    Tensor aux;   // ln mean/rstd, dropout mask, mse target
    Tensor aux2;  // masked_fill mask, mse weight
    std::vector<int64_t> ints;
    double scalar = 0.0;
    bool needs_grad = false;
  };

  Id push(Node n);
  Node& at(Id id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& at(Id id) const { return nodes_[static_cast<size_t>(id)]; }
  bool wants(Id id) const { return id >= 0 && at(id).needs_grad; }
  Tensor& grad_buf(Id id);
  void backprop(Id id);

  std::vector<Node> nodes_;
  bool check_finite_;
};

// Central-difference gradient check. build() must reconstruct the loss from
// the current contents of `params` on every call; ids of the registered
// params are appended to `out_ids` in registration order.
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;  // "tensor#i[j]"
  int64_t checked = 0;
};

GradCheckReport grad_check(
    const std::function<Graph::Id(Graph&, std::vector<Graph::Id>&)>& build,
    const std::vector<Tensor*>& params, double eps = 1e-5, int64_t subsample = 200,
    uint64_t seed = 0, bool full_sweep = false);

}  // namespace hdt
