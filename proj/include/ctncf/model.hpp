#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctncf/error.hpp"
#include "ctncf/ops.hpp"
#include "ctncf/rng.hpp"
#include "ctncf/tape.hpp"
#include "ctncf/tensor.hpp"

namespace ctncf {

enum class ModelKind { ctncf, mlp, gmf, ncf, popularity };

inline std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::ctncf: return "ctncf";
    case ModelKind::mlp: return "mlp";
    case ModelKind::gmf: return "gmf";
    case ModelKind::ncf: return "ncf";
    case ModelKind::popularity: return "popularity";
  }
  return "?";
}

inline ModelKind parse_model_kind(std::string_view s) {
  for (ModelKind k : {ModelKind::ctncf, ModelKind::mlp, ModelKind::gmf, ModelKind::ncf,
                      ModelKind::popularity}) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown model kind '" + std::string(s) +
                              "' (expected ctncf, ncf, mlp, gmf or popularity)");
}

// How the MF branch combines p_u and q_i.
enum class MfMode { outer, hadamard };

inline std::string_view to_string(MfMode m) {
  return m == MfMode::outer ? "outer" : "hadamard";
}

inline MfMode parse_mf_mode(std::string_view s) {
  if (s == "outer") return MfMode::outer;
  if (s == "hadamard") return MfMode::hadamard;
  throw std::invalid_argument("unknown mf mode '" + std::string(s) +
                              "' (expected outer or hadamard)");
}

/// Architecture settings shared by CTNCF and the neural baselines.
struct HyperParams {
  std::size_t mf_dim = 4;
  std::size_t cnn_embed_dim = 16;
  std::size_t num_filters = 64;
  std::size_t kernel_size = 3;
  std::size_t num_transformer_layers = 2;
  std::size_t num_heads = 1;
  std::size_t model_dim = 32;
  std::size_t ffn_dim = 0;  // 0 means 4 * model_dim
  MfMode mf_mode = MfMode::outer;
  std::vector<std::size_t> mlp_layers = {64, 32, 16};

  std::size_t effective_ffn_dim() const { return ffn_dim ? ffn_dim : 4 * model_dim; }
  std::size_t mf_width() const { return mf_mode == MfMode::outer ? mf_dim * mf_dim : mf_dim; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw std::invalid_argument(std::string(name) + " must be positive");
    };
    positive(mf_dim, "mf_dim");
    positive(cnn_embed_dim, "cnn_embed_dim");
    positive(num_filters, "num_filters");
    positive(kernel_size, "kernel_size");
    positive(num_heads, "num_heads");
    positive(model_dim, "model_dim");
    if (cnn_embed_dim < kernel_size) {
      throw std::invalid_argument("cnn_embed_dim (" + std::to_string(cnn_embed_dim) +
                                  ") must be >= kernel_size (" +
                                  std::to_string(kernel_size) + ")");
    }
    if (model_dim % num_heads != 0) {
      throw std::invalid_argument("model_dim must be divisible by num_heads");
    }
    if (mlp_layers.empty()) throw std::invalid_argument("mlp_layers must not be empty");
    for (std::size_t w : mlp_layers) positive(w, "mlp layer width");
  }

  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

// Which regulariser a parameter falls under.
enum class RegGroup { none, mf, cnn };

struct ParamRef {
  std::string name;
  Tensor* tensor;
  RegGroup group;
};

struct ConstParamRef {
  std::string name;
  const Tensor* tensor;
  RegGroup group;
};

/// Attention matrices captured during a forward pass, one entry per
/// (layer, head), each shaped [B×T×T].
struct ForwardTrace {
  std::vector<Tensor> attention;
};

namespace detail {
inline std::atomic<std::uint64_t> attention_calls{0};
}  // namespace detail

/// Number of attention evaluations since process start (one per layer per
/// head per forward batch).
inline std::uint64_t attention_call_count() { return detail::attention_calls.load(); }

/// Common interface of everything that scores (user, item) pairs.
class Model {
 public:
  Model(HyperParams hyper, std::size_t num_users, std::size_t num_items)
      : hyper_(std::move(hyper)), num_users_(num_users), num_items_(num_items) {
    if (num_users == 0 || num_items == 0) {
      throw std::invalid_argument("model needs at least one user and one item");
    }
  }
  virtual ~Model() = default;

  virtual ModelKind kind() const = 0;
  virtual bool trainable() const { return true; }
  virtual std::unique_ptr<Model> clone() const = 0;

  /// Pre-sigmoid scores for the pairs (users[b], items[b]), shaped [B].
  virtual Var logits(Tape& tape, std::span<const std::uint32_t> users,
                     std::span<const std::uint32_t> items) const = 0;

  virtual std::vector<ParamRef> parameters() = 0;

  std::vector<ConstParamRef> parameters() const {
    std::vector<ConstParamRef> out;
    for (auto& p : const_cast<Model*>(this)->parameters())
      out.push_back({p.name, p.tensor, p.group});
    return out;
  }

  /// Ranking scores for a batch of pairs. Probabilities in (0,1) for the
  /// neural models.
  virtual std::vector<double> score(std::span<const std::uint32_t> users,
                                    std::span<const std::uint32_t> items) const {
    Tape tape(/*record=*/false);
    Var z = logits(tape, users, items);
    std::vector<double> out(tape.value(z).values());
    for (double& v : out) v = ops::sigmoid(v);
    return out;
  }

  double predict(std::uint32_t user, std::uint32_t item) const {
    const std::uint32_t u[1] = {user};
    const std::uint32_t i[1] = {item};
    return score(u, i)[0];
  }

  const HyperParams& hyper() const { return hyper_; }
  std::size_t num_users() const { return num_users_; }
  std::size_t num_items() const { return num_items_; }

 protected:
  void check_ids(std::span<const std::uint32_t> users,
                 std::span<const std::uint32_t> items) const {
    if (users.size() != items.size() || users.empty()) {
      throw ShapeError("user/item id batches must be non-empty and equally long");
    }
  }

  HyperParams hyper_;
  std::size_t num_users_;
  std::size_t num_items_;
};

namespace init {

inline Tensor uniform(Shape shape, double limit, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

// Zero-mean normal with std sqrt(2 / fan_in).
inline Tensor kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

inline constexpr double kEmbeddingLimit = 0.05;

}  // namespace init

// ---------------------------------------------------------------------------
// CTNCF

struct TransformerLayerParams {
  Tensor w_q, w_k, w_v, w_o;
  Tensor ln1_gain, ln1_shift;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor ln2_gain, ln2_shift;
};

struct CtncfParams {
  Tensor user_mf, item_mf;    // P, Q
  Tensor user_cnn, item_cnn;  // CNN-branch embeddings
  Tensor user_filters, user_filter_bias;
  Tensor item_filters, item_filter_bias;
  Tensor proj_mf, proj_mf_bias;
  Tensor proj_user, proj_user_bias;
  Tensor proj_item, proj_item_bias;
  std::vector<TransformerLayerParams> layers;
  Tensor head_w, head_b;
};

/// Flattened interaction map between MF embeddings: [B×d] x [B×d] -> [B×d²]
/// (outer) or [B×d] (hadamard).
inline Var mf_branch(Tape& tape, Var user_vec, Var item_vec, MfMode mode = MfMode::outer) {
  if (mode == MfMode::hadamard) return ops::mul(tape, user_vec, item_vec);
  const Shape s = tape.value(user_vec).shape();
  Var m = ops::outer(tape, user_vec, item_vec);
  const std::size_t d = s.back();
  Shape flat = s.size() == 1 ? Shape{d * d} : Shape{s[0], d * d};
  return ops::reshape(tape, m, flat);
}

/// Conv1D over the embedding, ReLU, then global max-pool: [B×L] -> [B×F].
inline Var cnn_branch(Tape& tape, Var embedding, Var filters, Var bias) {
  Var conv = ops::conv1d_valid(tape, embedding, filters, bias);
  return ops::global_max_pool(tape, ops::relu(tape, conv));
}

struct FusionParams {
  Var proj_mf, proj_mf_bias, proj_user, proj_user_bias, proj_item, proj_item_bias;
};

/// Project the three branch outputs to the model width and stack them as a
/// three-token sequence [B×3×w] (MF token, user-CNN token, item-CNN token).
inline Var fuse_concat(Tape& tape, Var mf, Var cnn_user, Var cnn_item, const FusionParams& p) {
  Var t0 = ops::add_bias(tape, ops::matmul(tape, mf, p.proj_mf), p.proj_mf_bias);
  Var t1 = ops::add_bias(tape, ops::matmul(tape, cnn_user, p.proj_user), p.proj_user_bias);
  Var t2 = ops::add_bias(tape, ops::matmul(tape, cnn_item, p.proj_item), p.proj_item_bias);
  return ops::stack_tokens(tape, {t0, t1, t2});
}

struct LayerVars {
  Var w_q, w_k, w_v, w_o, ln1_gain, ln1_shift, ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln2_gain,
      ln2_shift;
};

inline LayerVars bind_layer(Tape& tape, const TransformerLayerParams& l) {
  return {tape.param(l.w_q),      tape.param(l.w_k),       tape.param(l.w_v),
          tape.param(l.w_o),      tape.param(l.ln1_gain),  tape.param(l.ln1_shift),
          tape.param(l.ffn_w1),   tape.param(l.ffn_b1),    tape.param(l.ffn_w2),
          tape.param(l.ffn_b2),   tape.param(l.ln2_gain),  tape.param(l.ln2_shift)};
}

/// Multi-head scaled dot-product self-attention followed by the output
/// projection: softmax(QKᵀ/√d_k)·V per head, heads concatenated, then W_O.
inline Var self_attention(Tape& tape, Var seq, const LayerVars& l, std::size_t num_heads,
                          ForwardTrace* trace = nullptr) {
  detail::attention_calls.fetch_add(1, std::memory_order_relaxed);
  const std::size_t w = tape.value(seq).shape().back();
  const std::size_t dk = w / num_heads;
  Var q = ops::matmul(tape, seq, l.w_q);
  Var k = ops::matmul(tape, seq, l.w_k);
  Var v = ops::matmul(tape, seq, l.w_v);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Var> heads;
  for (std::size_t h = 0; h < num_heads; ++h) {
    Var qh = num_heads == 1 ? q : ops::slice_last(tape, q, h * dk, dk);
    Var kh = num_heads == 1 ? k : ops::slice_last(tape, k, h * dk, dk);
    Var vh = num_heads == 1 ? v : ops::slice_last(tape, v, h * dk, dk);
    Var logits = ops::scale(tape, ops::bmm(tape, qh, kh, /*transpose_b=*/true), inv_sqrt_dk);
    Var weights = ops::softmax_rows(tape, logits);
    if (trace) trace->attention.push_back(tape.value(weights));
    heads.push_back(ops::bmm(tape, weights, vh, /*transpose_b=*/false));
  }
  Var joined = num_heads == 1 ? heads[0] : ops::concat_last(tape, heads);
  return ops::matmul(tape, joined, l.w_o);
}

/// Post-norm encoder block: x + Attn(x) -> LayerNorm -> x + FFN(x) -> LayerNorm.
inline Var transformer_block(Tape& tape, Var seq, const LayerVars& l, std::size_t num_heads,
                             ForwardTrace* trace = nullptr) {
  Var attn = self_attention(tape, seq, l, num_heads, trace);
  Var x = ops::layer_norm(tape, ops::add(tape, seq, attn), l.ln1_gain, l.ln1_shift);
  Var hidden = ops::relu(tape, ops::add_bias(tape, ops::matmul(tape, x, l.ffn_w1), l.ffn_b1));
  Var ffn = ops::add_bias(tape, ops::matmul(tape, hidden, l.ffn_w2), l.ffn_b2);
  return ops::layer_norm(tape, ops::add(tape, x, ffn), l.ln2_gain, l.ln2_shift);
}

class CtncfModel final : public Model {
 public:
  CtncfModel(HyperParams hyper, std::size_t num_users, std::size_t num_items)
      : Model(std::move(hyper), num_users, num_items) {
    hyper_.validate();
    allocate();
  }

  CtncfModel(HyperParams hyper, std::size_t num_users, std::size_t num_items,
             std::uint64_t seed)
      : CtncfModel(std::move(hyper), num_users, num_items) {
    initialize(seed);
  }

  ModelKind kind() const override { return ModelKind::ctncf; }
  std::unique_ptr<Model> clone() const override { return std::make_unique<CtncfModel>(*this); }

  CtncfParams& params() { return p_; }
  const CtncfParams& params() const { return p_; }

  /// Draw fresh parameters: uniform(±0.05) embeddings, Kaiming-normal
  /// filters and projections, zero biases, unit layer-norm gains.
  void initialize(std::uint64_t seed) {
    Rng rng = make_rng(seed, stream::kInit);
    const auto& h = hyper_;
    const std::size_t w = h.model_dim, f = h.num_filters, ffn = h.effective_ffn_dim();
    p_.user_mf = init::uniform({num_users_, h.mf_dim}, init::kEmbeddingLimit, rng);
    p_.item_mf = init::uniform({num_items_, h.mf_dim}, init::kEmbeddingLimit, rng);
    p_.user_cnn = init::uniform({num_users_, h.cnn_embed_dim}, init::kEmbeddingLimit, rng);
    p_.item_cnn = init::uniform({num_items_, h.cnn_embed_dim}, init::kEmbeddingLimit, rng);
    p_.user_filters = init::kaiming({f, h.kernel_size}, h.kernel_size, rng);
    p_.item_filters = init::kaiming({f, h.kernel_size}, h.kernel_size, rng);
    p_.proj_mf = init::kaiming({h.mf_width(), w}, h.mf_width(), rng);
    p_.proj_user = init::kaiming({f, w}, f, rng);
    p_.proj_item = init::kaiming({f, w}, f, rng);
    for (auto& l : p_.layers) {
      l.w_q = init::kaiming({w, w}, w, rng);
      l.w_k = init::kaiming({w, w}, w, rng);
      l.w_v = init::kaiming({w, w}, w, rng);
      l.w_o = init::kaiming({w, w}, w, rng);
      l.ffn_w1 = init::kaiming({w, ffn}, w, rng);
      l.ffn_w2 = init::kaiming({ffn, w}, ffn, rng);
    }
    p_.head_w = init::kaiming({w, 1}, w, rng);
  }

  Var logits(Tape& tape, std::span<const std::uint32_t> users,
             std::span<const std::uint32_t> items) const override {
    return logits_traced(tape, users, items, nullptr);
  }

  Var logits_traced(Tape& tape, std::span<const std::uint32_t> users,
                    std::span<const std::uint32_t> items, ForwardTrace* trace) const {
    check_ids(users, items);
    const std::size_t batch = users.size();
    Var pu = ops::gather_rows(tape, tape.param(p_.user_mf), users);
    Var qi = ops::gather_rows(tape, tape.param(p_.item_mf), items);
    Var mf = mf_branch(tape, pu, qi, hyper_.mf_mode);

    Var cu = cnn_branch(tape, ops::gather_rows(tape, tape.param(p_.user_cnn), users),
                        tape.param(p_.user_filters), tape.param(p_.user_filter_bias));
    Var ci = cnn_branch(tape, ops::gather_rows(tape, tape.param(p_.item_cnn), items),
                        tape.param(p_.item_filters), tape.param(p_.item_filter_bias));

    FusionParams fp{tape.param(p_.proj_mf),   tape.param(p_.proj_mf_bias),
                    tape.param(p_.proj_user), tape.param(p_.proj_user_bias),
                    tape.param(p_.proj_item), tape.param(p_.proj_item_bias)};
    Var seq = fuse_concat(tape, mf, cu, ci, fp);
    for (const auto& layer : p_.layers) {
      seq = transformer_block(tape, seq, bind_layer(tape, layer), hyper_.num_heads, trace);
    }
    Var pooled = ops::mean_tokens(tape, seq);
    Var z = ops::add_bias(tape, ops::matmul(tape, pooled, tape.param(p_.head_w)),
                          tape.param(p_.head_b));
    return ops::reshape(tape, z, {batch});
  }

  std::vector<ParamRef> parameters() override {
    std::vector<ParamRef> out = {
        {"user_mf", &p_.user_mf, RegGroup::mf},
        {"item_mf", &p_.item_mf, RegGroup::mf},
        {"user_cnn", &p_.user_cnn, RegGroup::none},
        {"item_cnn", &p_.item_cnn, RegGroup::none},
        {"user_filters", &p_.user_filters, RegGroup::cnn},
        {"user_filter_bias", &p_.user_filter_bias, RegGroup::none},
        {"item_filters", &p_.item_filters, RegGroup::cnn},
        {"item_filter_bias", &p_.item_filter_bias, RegGroup::none},
        {"proj_mf", &p_.proj_mf, RegGroup::none},
        {"proj_mf_bias", &p_.proj_mf_bias, RegGroup::none},
        {"proj_user", &p_.proj_user, RegGroup::none},
        {"proj_user_bias", &p_.proj_user_bias, RegGroup::none},
        {"proj_item", &p_.proj_item, RegGroup::none},
        {"proj_item_bias", &p_.proj_item_bias, RegGroup::none},
    };
    for (std::size_t i = 0; i < p_.layers.size(); ++i) {
      auto& l = p_.layers[i];
      const std::string pre = "layer" + std::to_string(i) + ".";
      for (auto [name, t] : std::initializer_list<std::pair<const char*, Tensor*>>{
               {"w_q", &l.w_q},           {"w_k", &l.w_k},
               {"w_v", &l.w_v},           {"w_o", &l.w_o},
               {"ln1_gain", &l.ln1_gain}, {"ln1_shift", &l.ln1_shift},
               {"ffn_w1", &l.ffn_w1},     {"ffn_b1", &l.ffn_b1},
               {"ffn_w2", &l.ffn_w2},     {"ffn_b2", &l.ffn_b2},
               {"ln2_gain", &l.ln2_gain}, {"ln2_shift", &l.ln2_shift}}) {
        out.push_back({pre + name, t, RegGroup::none});
      }
    }
    out.push_back({"head_w", &p_.head_w, RegGroup::none});
    out.push_back({"head_b", &p_.head_b, RegGroup::none});
    return out;
  }

 private:
  // Shapes only; values are zero except layer-norm gains.
  void allocate() {
    const auto& h = hyper_;
    const std::size_t w = h.model_dim, f = h.num_filters, ffn = h.effective_ffn_dim();
    p_.user_mf = Tensor({num_users_, h.mf_dim});
    p_.item_mf = Tensor({num_items_, h.mf_dim});
    p_.user_cnn = Tensor({num_users_, h.cnn_embed_dim});
    p_.item_cnn = Tensor({num_items_, h.cnn_embed_dim});
    p_.user_filters = Tensor({f, h.kernel_size});
    p_.user_filter_bias = Tensor({f});
    p_.item_filters = Tensor({f, h.kernel_size});
    p_.item_filter_bias = Tensor({f});
    p_.proj_mf = Tensor({h.mf_width(), w});
    p_.proj_mf_bias = Tensor({w});
    p_.proj_user = Tensor({f, w});
    p_.proj_user_bias = Tensor({w});
    p_.proj_item = Tensor({f, w});
    p_.proj_item_bias = Tensor({w});
    p_.layers.assign(h.num_transformer_layers, TransformerLayerParams{});
    for (auto& l : p_.layers) {
      l.w_q = Tensor({w, w});
      l.w_k = Tensor({w, w});
      l.w_v = Tensor({w, w});
      l.w_o = Tensor({w, w});
      l.ln1_gain = Tensor({w}, 1.0);
      l.ln1_shift = Tensor({w});
      l.ffn_w1 = Tensor({w, ffn});
      l.ffn_b1 = Tensor({ffn});
      l.ffn_w2 = Tensor({ffn, w});
      l.ffn_b2 = Tensor({w});
      l.ln2_gain = Tensor({w}, 1.0);
      l.ln2_shift = Tensor({w});
    }
    p_.head_w = Tensor({w, 1});
    p_.head_b = Tensor({1});
  }

  CtncfParams p_;
};

}  // namespace ctncf
