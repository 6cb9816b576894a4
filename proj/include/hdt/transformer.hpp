#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hdt/graph.hpp"
#include "hdt/rng.hpp"
#include "hdt/tensor.hpp"
#include "hdt/trajectory.hpp"

namespace hdt {

// Input token kinds. A layout is the within-step token order, e.g. the
// low-level controller reads (subgoal, state, action) triplets.
enum class Modality { kState, kSubgoal, kAction, kReturn };

std::string modality_name(Modality m);
Modality modality_from_name(const std::string& name);

struct ModelConfig {
  int64_t embed_dim = 128;
  int64_t n_layers = 3;
  int64_t n_heads = 1;
  int64_t context_K = 20;
  std::vector<Modality> layout;  // token order within one timestep
  int64_t state_dim = 0;
  int64_t action_dim = 0;
  int64_t head_dim = 0;  // width of the prediction head output
  int64_t max_timestep = 1024;
  double dropout = 0.1;

  int64_t tokens_per_step() const { return static_cast<int64_t>(layout.size()); }
  int64_t modality_width(Modality m) const;
  // position of the state token within a step: predictions are read there
  int64_t read_offset() const;
  void validate() const;
};

struct TransformerBlockParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor fc1, fb1, fc2, fb2;
};

struct ModelParams {
  std::vector<Tensor> embed_w, embed_b;  // one linear map per modality
  Tensor pos;                            // (max_timestep, embed_dim)
  std::vector<TransformerBlockParams> blocks;
  Tensor lnf_g, lnf_b;
  Tensor head_w, head_b;

  // enumerates every tensor in a fixed order; decay marks tensors subject to
  // weight decay (matrices yes; biases, gains and the position table no)
  template <typename F>
  void visit(F&& f) {
    for (size_t i = 0; i < embed_w.size(); ++i) {
      f("embed" + std::to_string(i) + ".w", embed_w[i], true);
      f("embed" + std::to_string(i) + ".b", embed_b[i], false);
    }
    f("pos", pos, false);
    for (size_t l = 0; l < blocks.size(); ++l) {
      auto& b = blocks[l];
      const std::string p = "block" + std::to_string(l) + ".";
      f(p + "ln1.g", b.ln1_g, false);
      f(p + "ln1.b", b.ln1_b, false);
      f(p + "attn.wq", b.wq, true);
      f(p + "attn.bq", b.bq, false);
      f(p + "attn.wk", b.wk, true);
      f(p + "attn.bk", b.bk, false);
      f(p + "attn.wv", b.wv, true);
      f(p + "attn.bv", b.bv, false);
      f(p + "attn.wo", b.wo, true);
      f(p + "attn.bo", b.bo, false);
      f(p + "ln2.g", b.ln2_g, false);
      f(p + "ln2.b", b.ln2_b, false);
      f(p + "mlp.fc1", b.fc1, true);
      f(p + "mlp.fb1", b.fb1, false);
      f(p + "mlp.fc2", b.fc2, true);
      f(p + "mlp.fb2", b.fb2, false);
    }
    f("lnf.g", lnf_g, false);
    f("lnf.b", lnf_b, false);
    f("head.w", head_w, true);
    f("head.b", head_b, false);
  }

  int64_t param_count();
};

// weights ~ N(0, 0.02), biases zero, layer-norm gains one
ModelParams init_params(const ModelConfig& config, Prng& rng);

// channel tensors (B, K, width) in layout order; returns become the scaled
// rtg channel when the layout carries one
std::vector<Tensor> layout_channels(const SubTrajectoryBatch& batch,
                                    const std::vector<Modality>& layout, double rtg_scale);

// Binds one parameter set into a graph and runs the forward pass. One
// instance per Graph; parameters are registered as trainable leaves.
class TransformerModel {
 public:
  TransformerModel(Graph& g, const ModelConfig& config, ModelParams& params);

  // interleaves per-modality embeddings into (B, K*P, E), adding one shared
  // timestep embedding per step
  Graph::Id embed_tokens(const std::vector<Tensor>& channels,
                         const std::vector<int64_t>& timesteps);

  // causal self-attention stack; returns head outputs (B, K, head_dim) read
  // at the state-token position of each step. dropout_rng null = eval mode.
  Graph::Id predict(Graph::Id tokens, const Tensor& step_mask, Prng* dropout_rng = nullptr);

  // registration order matches ModelParams::visit
  const std::vector<Graph::Id>& param_ids() const { return ids_; }
  const std::vector<Tensor*>& param_ptrs() const { return ptrs_; }

 private:
  Graph& g_;
  const ModelConfig& cfg_;
  std::vector<Graph::Id> ids_;
  std::vector<Tensor*> ptrs_;
  std::vector<Graph::Id> embed_w_, embed_b_;
  Graph::Id pos_ = -1;
  struct BlockIds {
    Graph::Id ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Graph::Id ln2_g, ln2_b, fc1, fb1, fc2, fb2;
  };
  std::vector<BlockIds> blocks_;
  Graph::Id lnf_g_ = -1, lnf_b_ = -1, head_w_ = -1, head_b_ = -1;
};

}  // namespace hdt
