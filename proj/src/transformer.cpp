#include "hdt/transformer.hpp"

#include <cmath>
#include <stdexcept>

namespace hdt {

std::string modality_name(Modality m) {
  switch (m) {
    case Modality::kState:
      return "state";
    case Modality::kSubgoal:
      return "subgoal";
    case Modality::kAction:
      return "action";
    case Modality::kReturn:
      return "rtg";
  }
  return "";
}

Modality modality_from_name(const std::string& name) {
  if (name == "state") return Modality::kState;
  if (name == "subgoal") return Modality::kSubgoal;
  if (name == "action") return Modality::kAction;
  if (name == "rtg") return Modality::kReturn;
  throw std::invalid_argument("unknown modality '" + name + "'");
}

int64_t ModelConfig::modality_width(Modality m) const {
  switch (m) {
    case Modality::kState:
    case Modality::kSubgoal:
      return state_dim;
    case Modality::kAction:
      return action_dim;
    case Modality::kReturn:
      return 1;
  }
  return 0;
}

int64_t ModelConfig::read_offset() const {
  for (size_t i = 0; i < layout.size(); ++i) {
    if (layout[i] == Modality::kState) return static_cast<int64_t>(i);
  }
  throw std::logic_error("model layout has no state token");
}

void ModelConfig::validate() const {
  if (embed_dim < 1 || n_heads < 1 || embed_dim % n_heads != 0) {
    throw std::invalid_argument("model config: embed_dim must be a positive multiple of n_heads");
  }
  if (n_layers < 0) throw std::invalid_argument("model config: n_layers must be >= 0");
  if (context_K < 1) throw std::invalid_argument("model config: context_K must be >= 1");
  if (layout.size() < 2 || layout.size() > 4) {
    throw std::invalid_argument("model config: layout must hold 2..4 tokens per step");
  }
  read_offset();  // throws when the layout lacks a state token
  if (state_dim < 1 || action_dim < 1 || head_dim < 1) {
    throw std::invalid_argument("model config: state/action/head widths must be positive");
  }
  if (max_timestep < 1) throw std::invalid_argument("model config: max_timestep must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) {
    throw std::invalid_argument("model config: dropout must be in [0, 1)");
  }
}

int64_t ModelParams::param_count() {
  int64_t n = 0;
  visit([&](const std::string&, Tensor& t, bool) { n += t.size(); });
  return n;
}

ModelParams init_params(const ModelConfig& config, Prng& rng) {
  config.validate();
  const int64_t e = config.embed_dim;
  ModelParams p;
  for (Modality m : config.layout) {
    p.embed_w.push_back(Tensor({config.modality_width(m), e}));
    p.embed_b.push_back(Tensor({e}));
  }
  p.pos = Tensor({config.max_timestep, e});
  p.blocks.resize(static_cast<size_t>(config.n_layers));
  for (auto& b : p.blocks) {
    b.ln1_g = Tensor({e}, 1.0);
    b.ln1_b = Tensor({e});
    b.wq = Tensor({e, e});
    b.bq = Tensor({e});
    b.wk = Tensor({e, e});
    b.bk = Tensor({e});
    b.wv = Tensor({e, e});
    b.bv = Tensor({e});
    b.wo = Tensor({e, e});
    b.bo = Tensor({e});
    b.ln2_g = Tensor({e}, 1.0);
    b.ln2_b = Tensor({e});
    b.fc1 = Tensor({e, 4 * e});
    b.fb1 = Tensor({4 * e});
    b.fc2 = Tensor({4 * e, e});
    b.fb2 = Tensor({e});
  }
  p.lnf_g = Tensor({e}, 1.0);
  p.lnf_b = Tensor({e});
  p.head_w = Tensor({e, config.head_dim});
  p.head_b = Tensor({config.head_dim});

  // draw in visit order so the layout fully determines the stream
  p.visit([&](const std::string& name, Tensor& t, bool) {
    const bool gain = name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    const bool bias = !gain && t.shape.size() == 1;
    if (gain || bias) return;  // ones / zeros as constructed
    for (auto& x : t.v) x = 0.02 * rng.normal();
  });
  return p;
}

std::vector<Tensor> layout_channels(const SubTrajectoryBatch& batch,
                                    const std::vector<Modality>& layout, double rtg_scale) {
  std::vector<Tensor> out;
  out.reserve(layout.size());
  for (Modality m : layout) {
    switch (m) {
      case Modality::kState:
        out.push_back(batch.states);
        break;
      case Modality::kSubgoal:
        out.push_back(batch.subgoals);
        break;
      case Modality::kAction:
        out.push_back(batch.actions);
        break;
      case Modality::kReturn: {
        Tensor r = batch.returns_to_go;
        for (auto& x : r.v) x *= rtg_scale;
        out.push_back(std::move(r));
        break;
      }
    }
  }
  return out;
}

TransformerModel::TransformerModel(Graph& g, const ModelConfig& config, ModelParams& params)
    : g_(g), cfg_(config) {
  cfg_.validate();
  params.visit([&](const std::string&, Tensor& t, bool) {
    ids_.push_back(g_.param(t));
    ptrs_.push_back(&t);
  });

  // mirror the flat id list back into named members (same order as visit)
  size_t k = 0;
  const size_t p = config.layout.size();
  for (size_t i = 0; i < p; ++i) {
    embed_w_.push_back(ids_[k++]);
    embed_b_.push_back(ids_[k++]);
  }
  pos_ = ids_[k++];
  for (int64_t l = 0; l < config.n_layers; ++l) {
    BlockIds b{};
    b.ln1_g = ids_[k++];
    b.ln1_b = ids_[k++];
    b.wq = ids_[k++];
    b.bq = ids_[k++];
    b.wk = ids_[k++];
    b.bk = ids_[k++];
    b.wv = ids_[k++];
    b.bv = ids_[k++];
    b.wo = ids_[k++];
    b.bo = ids_[k++];
    b.ln2_g = ids_[k++];
    b.ln2_b = ids_[k++];
    b.fc1 = ids_[k++];
    b.fb1 = ids_[k++];
    b.fc2 = ids_[k++];
    b.fb2 = ids_[k++];
    blocks_.push_back(b);
  }
  lnf_g_ = ids_[k++];
  lnf_b_ = ids_[k++];
  head_w_ = ids_[k++];
  head_b_ = ids_[k++];
}

Graph::Id TransformerModel::embed_tokens(const std::vector<Tensor>& channels,
                                         const std::vector<int64_t>& timesteps) {
  if (channels.size() != cfg_.layout.size()) {
    throw std::invalid_argument("embed_tokens: channel count does not match layout");
  }
  const int64_t K = cfg_.context_K;
  for (size_t i = 0; i < channels.size(); ++i) {
    const Tensor& c = channels[i];
    if (c.shape.size() != 3 || c.shape[1] != K ||
        c.shape[2] != cfg_.modality_width(cfg_.layout[i])) {
      throw std::invalid_argument("embed_tokens: channel " + std::to_string(i) + " has shape " +
                                  Tensor::shape_str(c.shape));
    }
  }
  const int64_t B = channels[0].shape[0];
  if (static_cast<int64_t>(timesteps.size()) != B * K) {
    throw std::invalid_argument("embed_tokens: timestep count does not match batch");
  }

  const Graph::Id tpos = g_.embedding_lookup(pos_, timesteps, {B, K});
  std::vector<Graph::Id> per_modality;
  for (size_t i = 0; i < channels.size(); ++i) {
    Graph::Id h = g_.matmul(g_.constant(channels[i]), embed_w_[i]);
    h = g_.add_bias(h, embed_b_[i]);
    per_modality.push_back(g_.add(h, tpos));  // same position code for every
                                              // token of the step
  }
  return g_.interleave_positions(per_modality);
}

Graph::Id TransformerModel::predict(Graph::Id tokens, const Tensor& step_mask,
                                    Prng* dropout_rng) {
  const int64_t B = g_.val(tokens).dim(0);
  const int64_t T = g_.val(tokens).dim(1);
  const int64_t K = cfg_.context_K;
  const int64_t P = cfg_.tokens_per_step();
  if (T != K * P) throw std::invalid_argument("predict: token count does not match config");
  if (!(step_mask.shape == std::vector<int64_t>{B, K})) {
    throw std::invalid_argument("predict: step mask must be (B, K)");
  }

  // causal AND valid: position i sees j <= i where step j is real data
  Tensor attn_mask({B, T, T});
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t i = 0; i < T; ++i) {
      for (int64_t j = 0; j <= i; ++j) {
        const double valid = step_mask.v[static_cast<size_t>(b * K + j / P)];
        attn_mask.v[static_cast<size_t>((b * T + i) * T + j)] = valid;
      }
    }
  }

  const bool train = dropout_rng != nullptr && cfg_.dropout > 0.0;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.embed_dim / cfg_.n_heads));

  Graph::Id x = tokens;
  if (train) x = g_.dropout(x, cfg_.dropout, *dropout_rng);
  for (const auto& blk : blocks_) {
    Graph::Id h = g_.layer_norm(x, blk.ln1_g, blk.ln1_b);
    Graph::Id q = g_.split_heads(g_.add_bias(g_.matmul(h, blk.wq), blk.bq), cfg_.n_heads);
    Graph::Id kk = g_.split_heads(g_.add_bias(g_.matmul(h, blk.wk), blk.bk), cfg_.n_heads);
    Graph::Id v = g_.split_heads(g_.add_bias(g_.matmul(h, blk.wv), blk.bv), cfg_.n_heads);
    Graph::Id att = g_.scale(g_.bmm_nt(q, kk), inv_sqrt_d);
    att = g_.softmax_lastdim(g_.masked_fill(att, attn_mask));
    if (train) att = g_.dropout(att, cfg_.dropout, *dropout_rng);
    Graph::Id ctx = g_.merge_heads(g_.bmm(att, v), cfg_.n_heads);
    ctx = g_.add_bias(g_.matmul(ctx, blk.wo), blk.bo);
    if (train) ctx = g_.dropout(ctx, cfg_.dropout, *dropout_rng);
    x = g_.add(x, ctx);

    Graph::Id m = g_.layer_norm(x, blk.ln2_g, blk.ln2_b);
    m = g_.gelu(g_.add_bias(g_.matmul(m, blk.fc1), blk.fb1));
    m = g_.add_bias(g_.matmul(m, blk.fc2), blk.fb2);
    if (train) m = g_.dropout(m, cfg_.dropout, *dropout_rng);
    x = g_.add(x, m);
  }
  // zero-layer models stay a pure affine composition (embed then head)
  if (!blocks_.empty()) x = g_.layer_norm(x, lnf_g_, lnf_b_);
  Graph::Id read = g_.slice_positions(x, cfg_.read_offset(), P);
  return g_.add_bias(g_.matmul(read, head_w_), head_b_);
}

}  // namespace hdt
