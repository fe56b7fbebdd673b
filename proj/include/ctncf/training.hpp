#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctncf/baselines.hpp"
#include "ctncf/binary_io.hpp"
#include "ctncf/data.hpp"
#include "ctncf/error.hpp"
#include "ctncf/metrics.hpp"
#include "ctncf/model.hpp"
#include "ctncf/ops.hpp"
#include "ctncf/rng.hpp"

namespace ctncf {

struct TrainConfig {
  double lr = 0.001;
  double l2_mf = 0.0;
  double l2_cnn = 0.01;
  std::size_t negatives_per_positive = 4;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 42;
  // Candidate protocol for the per-epoch validation NDCG@10.
  CandidateMode val_candidates = CandidateMode::full();
  std::optional<std::filesystem::path> log_path;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be >= 0");
    if (l2_mf < 0.0 || l2_cnn < 0.0) throw std::invalid_argument("l2 coefficients must be >= 0");
    if (patience < 1) throw std::invalid_argument("patience must be >= 1");
    if (negatives_per_positive < 1) throw std::invalid_argument("negatives_per_positive must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
  }
};

inline constexpr double kScoreClamp = 1e-12;

/// Pointwise log loss of one prediction; the score is clamped to
/// [1e-12, 1 - 1e-12].
inline double bce_loss(double score, int label) {
  const double s = std::clamp(score, kScoreClamp, 1.0 - kScoreClamp);
  return label ? -std::log(s) : -std::log(1.0 - s);
}

/// l2_mf · Σ‖MF embeddings‖² + l2_cnn · Σ‖convolution filters‖².
inline double l2_penalty(const Model& model, double l2_mf, double l2_cnn) {
  double total = 0.0;
  for (const auto& p : model.parameters()) {
    if (p.group == RegGroup::mf) total += l2_mf * p.tensor->squared_norm();
    if (p.group == RegGroup::cnn) total += l2_cnn * p.tensor->squared_norm();
  }
  return total;
}

/// Differentiable form of l2_penalty; nullopt when both coefficients are 0.
inline std::optional<Var> l2_penalty(Tape& tape, const Model& model, double l2_mf,
                                     double l2_cnn) {
  std::optional<Var> total;
  for (const auto& p : model.parameters()) {
    const double c = p.group == RegGroup::mf ? l2_mf : p.group == RegGroup::cnn ? l2_cnn : 0.0;
    if (c == 0.0) continue;
    Var term = ops::scale(tape, ops::sum_squares(tape, tape.param(*p.tensor)), c);
    total = total ? ops::add(tape, *total, term) : term;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamSlot {
  std::vector<double> m, v;
};

/// One bias-corrected Adam update of `param`, where `step` is the 1-based
/// update count.
inline void adam_step(std::span<double> param, std::span<const double> grad, AdamSlot& slot,
                      std::uint64_t step, const AdamOptions& opt) {
  if (grad.size() != param.size()) {
    throw ShapeError("adam: gradient length " + std::to_string(grad.size()) +
                     " does not match parameter length " + std::to_string(param.size()));
  }
  if (slot.m.empty()) {
    slot.m.assign(param.size(), 0.0);
    slot.v.assign(param.size(), 0.0);
  }
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    slot.m[i] = opt.beta1 * slot.m[i] + (1.0 - opt.beta1) * grad[i];
    slot.v[i] = opt.beta2 * slot.v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
    const double m_hat = slot.m[i] / c1;
    const double v_hat = slot.v[i] / c2;
    param[i] -= opt.lr * m_hat / (std::sqrt(v_hat) + opt.eps);
  }
}

/// Adam over a model's full parameter list.
class Adam {
 public:
  explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

  /// Parameters without a gradient on the tape are treated as having a zero
  /// gradient.
  void step(Model& model, const Tape& tape) {
    auto params = model.parameters();
    if (slots_.empty()) slots_.resize(params.size());
    ++t_;
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto g = tape.grad(*params[k].tensor);
      if (g.empty()) {
        zeros_.assign(params[k].tensor->size(), 0.0);
        g = zeros_;
      }
      adam_step(params[k].tensor->data(), g, slots_[k], t_, opt_);
    }
  }

  std::uint64_t steps() const { return t_; }

 private:
  AdamOptions opt_;
  std::vector<AdamSlot> slots_;
  std::vector<double> zeros_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: "CTNCFCK1", model kind, hyper-parameters, vocabulary sizes,
// training seed, epoch, best validation NDCG@10, then every parameter as
// (name, rank, u32 extents, f64 data), all little-endian.

inline constexpr std::string_view kCheckpointMagic = "CTNCFCK1";

struct NamedTensor {
  std::string name;
  Tensor tensor;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Checkpoint {
  ModelKind kind = ModelKind::ctncf;
  HyperParams hyper;
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::vector<NamedTensor> params;
  std::uint64_t seed = 0;
  std::uint32_t epoch = 0;
  double best_val_ndcg10 = 0.0;
};

inline Checkpoint make_checkpoint(const Model& model, std::uint64_t seed, std::uint32_t epoch,
                                  double best_val_ndcg10) {
  Checkpoint c;
  c.kind = model.kind();
  c.hyper = model.hyper();
  c.num_users = model.num_users();
  c.num_items = model.num_items();
  for (const auto& p : model.parameters()) c.params.push_back({p.name, *p.tensor});
  c.seed = seed;
  c.epoch = epoch;
  c.best_val_ndcg10 = best_val_ndcg10;
  return c;
}

inline std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& c) {
  auto model = make_model(c.kind, c.hyper, c.num_users, c.num_items);
  auto params = model->parameters();
  if (params.size() != c.params.size()) {
    throw DataError("checkpoint holds " + std::to_string(c.params.size()) +
                    " parameters, model expects " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].name != c.params[k].name ||
        params[k].tensor->shape() != c.params[k].tensor.shape()) {
      throw DataError("checkpoint parameter '" + c.params[k].name + "' " +
                      shape_str(c.params[k].tensor.shape()) + " does not match model '" +
                      params[k].name + "' " + shape_str(params[k].tensor->shape()));
    }
    *params[k].tensor = c.params[k].tensor;
  }
  return model;
}

inline void save_checkpoint(std::ostream& os, const Checkpoint& c) {
  using namespace bin;
  write_magic(os, kCheckpointMagic);
  write_string(os, to_string(c.kind));
  const HyperParams& h = c.hyper;
  for (std::size_t v : {h.mf_dim, h.cnn_embed_dim, h.num_filters, h.kernel_size,
                        h.num_transformer_layers, h.num_heads, h.model_dim, h.ffn_dim}) {
    write_u32(os, static_cast<std::uint32_t>(v));
  }
  write_string(os, to_string(h.mf_mode));
  write_u32(os, static_cast<std::uint32_t>(h.mlp_layers.size()));
  for (std::size_t w : h.mlp_layers) write_u32(os, static_cast<std::uint32_t>(w));
  write_u32(os, static_cast<std::uint32_t>(c.num_users));
  write_u32(os, static_cast<std::uint32_t>(c.num_items));
  write_u64(os, c.seed);
  write_u32(os, c.epoch);
  write_f64(os, c.best_val_ndcg10);
  write_u32(os, static_cast<std::uint32_t>(c.params.size()));
  for (const auto& p : c.params) {
    write_string(os, p.name);
    write_u32(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t e : p.tensor.shape()) write_u32(os, static_cast<std::uint32_t>(e));
    for (double v : p.tensor.data()) write_f64(os, v);
  }
}

inline Checkpoint load_checkpoint(std::istream& is) {
  using namespace bin;
  expect_magic(is, kCheckpointMagic);
  Checkpoint c;
  c.kind = parse_model_kind(read_string(is));
  HyperParams& h = c.hyper;
  for (std::size_t* v : {&h.mf_dim, &h.cnn_embed_dim, &h.num_filters, &h.kernel_size,
                         &h.num_transformer_layers, &h.num_heads, &h.model_dim, &h.ffn_dim}) {
    *v = read_count(is, 1u << 16, "hyperparameter");
  }
  h.mf_mode = parse_mf_mode(read_string(is));
  h.mlp_layers.resize(read_count(is, 64, "mlp layer"));
  for (auto& w : h.mlp_layers) w = read_count(is, 1u << 16, "mlp width");
  c.num_users = read_count(is, 1u << 28, "user");
  c.num_items = read_count(is, 1u << 28, "item");
  c.seed = read_u64(is);
  c.epoch = read_u32(is);
  c.best_val_ndcg10 = read_f64(is);
  c.params.resize(read_count(is, 1u << 16, "parameter"));
  for (auto& p : c.params) {
    p.name = read_string(is);
    Shape shape(read_count(is, 8, "tensor rank"));
    std::uint64_t n = 1;
    for (auto& e : shape) {
      e = read_count(is, 1u << 28, "tensor extent");
      n *= e;
      if (n > (1u << 28)) throw DataError("corrupt checkpoint: bad shape for " + p.name);
    }
    std::vector<double> data;
    data.reserve(std::min<std::uint64_t>(n, 1u << 16));
    for (std::uint64_t k = 0; k < n; ++k) data.push_back(read_f64(is));
    p.tensor = Tensor(std::move(shape), std::move(data));
  }
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint: " + path.string());
  save_checkpoint(os, c);
  if (!os) throw DataError("failed writing checkpoint: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint: " + path.string());
  return load_checkpoint(is);
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch;
  double loss;        // mean BCE over the epoch's samples, penalty excluded
  double val_ndcg10;  // NaN when the split has no validation users
  double elapsed_s;
};

struct TrainSummary {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_ndcg10 = 0.0;
  std::size_t epochs_run = 0;
};

struct TrainingSample {
  std::uint32_t user;
  std::uint32_t item;
  double label;
};

/// Positives plus freshly drawn negatives for one epoch, in shuffled order.
inline std::vector<TrainingSample> epoch_samples(const SplitDataset& split,
                                                 std::size_t negatives_per_positive,
                                                 std::uint64_t seed, std::uint64_t epoch) {
  std::vector<TrainingSample> samples;
  for (std::uint32_t u = 0; u < split.num_users; ++u) {
    const auto& pos = split.train[u];
    if (pos.empty()) continue;
    for (std::uint32_t i : pos) samples.push_back({u, i, 1.0});
    for (std::uint32_t i :
         sample_negatives(split, u, pos.size() * negatives_per_positive, seed, epoch)) {
      samples.push_back({u, i, 0.0});
    }
  }
  Rng rng = make_rng(seed, stream::kShuffle, epoch);
  std::shuffle(samples.begin(), samples.end(), rng);
  return samples;
}

/// Mean BCE of `model` over `samples` without recording gradients.
inline double mean_bce(const Model& model, std::span<const TrainingSample> samples) {
  std::vector<std::uint32_t> us, is;
  for (const auto& s : samples) {
    us.push_back(s.user);
    is.push_back(s.item);
  }
  double total = 0.0;
  const auto scores = model.score(us, is);
  for (std::size_t k = 0; k < samples.size(); ++k)
    total += bce_loss(scores[k], samples[k].label > 0.5);
  return total / static_cast<double>(samples.size());
}

inline bool has_validation_users(const SplitDataset& split) {
  return std::any_of(split.validation.begin(), split.validation.end(),
                     [](const auto& v) { return !v.empty(); });
}

inline double validation_ndcg10(const Model& model, const SplitDataset& split,
                                const TrainConfig& config) {
  EvalOptions opt;
  opt.ks = {10};
  opt.candidates = config.val_candidates;
  opt.target = EvalTarget::validation;
  opt.seed = split.seed;
  return evaluate(model, split, opt).at(10).ndcg;
}

/// Train `model` in place with BCE on sampled negatives and Adam. After each
/// epoch the validation NDCG@10 decides which parameters are kept; training
/// stops after `patience` epochs without strict improvement. On return the
/// model holds the best parameters seen. Without validation users the loop
/// runs `max_epochs` and keeps the last parameters.
inline TrainSummary train_model(Model& model, const SplitDataset& split,
                                const TrainConfig& config,
                                const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  config.validate();
  if (split.num_users != model.num_users() || split.num_items != model.num_items()) {
    throw std::invalid_argument("model vocabulary does not match the split");
  }
  TrainSummary summary;
  if (!model.trainable()) {
    if (auto* pop = dynamic_cast<PopularityModel*>(&model)) pop->fit(split.train);
    const bool has_val = has_validation_users(split);
    summary.best_val_ndcg10 = has_val ? validation_ndcg10(model, split, config) : 0.0;
    return summary;
  }

  std::ofstream log;
  if (config.log_path) {
    const bool fresh = !std::filesystem::exists(*config.log_path);
    log.open(*config.log_path, std::ios::app);
    if (!log) throw DataError("cannot open training log: " + config.log_path->string());
    if (fresh) log << "epoch,loss,val_ndcg10,elapsed_s\n";
  }

  const bool early_stopping = has_validation_users(split);
  Adam adam(AdamOptions{.lr = config.lr});
  std::unique_ptr<Model> best;
  double best_score = -std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::uint32_t> users, items;
  std::vector<double> labels;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto samples = epoch_samples(split, config.negatives_per_positive, config.seed, epoch);
    if (samples.empty()) throw DataError("training split holds no interactions");
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < samples.size(); begin += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(begin + config.batch_size, samples.size());
      users.clear();
      items.clear();
      labels.clear();
      for (std::size_t k = begin; k < end; ++k) {
        users.push_back(samples[k].user);
        items.push_back(samples[k].item);
        labels.push_back(samples[k].label);
      }
      Tape tape;
      Var data_loss = ops::bce_with_logits(tape, model.logits(tape, users, items), labels);
      const double batch_loss = tape.value(data_loss)[0];
      if (!std::isfinite(batch_loss)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index));
      }
      Var total = data_loss;
      if (auto pen = l2_penalty(tape, model, config.l2_mf, config.l2_cnn)) {
        total = ops::add(tape, total, *pen);
      }
      tape.backward(total);
      adam.step(model, tape);
      loss_sum += batch_loss * static_cast<double>(end - begin);
    }
    for (const auto& p : model.parameters()) {
      if (!p.tensor->all_finite()) {
        throw NumericError("non-finite parameter '" + p.name + "' after epoch " +
                           std::to_string(epoch));
      }
    }

    EpochRecord rec{epoch, loss_sum / static_cast<double>(samples.size()),
                    std::numeric_limits<double>::quiet_NaN(), 0.0};
    if (early_stopping) rec.val_ndcg10 = validation_ndcg10(model, split, config);
    rec.elapsed_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    summary.history.push_back(rec);
    summary.epochs_run = epoch;
    if (log.is_open()) {
      log << rec.epoch << ',' << format_metric(rec.loss) << ','
          << (early_stopping ? format_metric(rec.val_ndcg10) : std::string("nan")) << ','
          << format_metric(rec.elapsed_s) << '\n';
      log.flush();
    }
    if (on_epoch) on_epoch(rec);

    if (!early_stopping) {
      summary.best_epoch = epoch;
      continue;
    }
    if (rec.val_ndcg10 > best_score) {
      best_score = rec.val_ndcg10;
      summary.best_epoch = epoch;
      summary.best_val_ndcg10 = rec.val_ndcg10;
      best = model.clone();
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }

  if (best) {
    auto dst = model.parameters();
    auto src = best->parameters();
    for (std::size_t k = 0; k < dst.size(); ++k) *dst[k].tensor = *src[k].tensor;
  }
  return summary;
}

/// Fresh model of `kind`, initialised from config.seed, trained on `split`.
inline Checkpoint train(ModelKind kind, const SplitDataset& split, const HyperParams& hyper,
                        const TrainConfig& config,
                        const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  auto model = make_model(kind, hyper, split.num_users, split.num_items, config.seed);
  const TrainSummary s = train_model(*model, split, config, on_epoch);
  return make_checkpoint(*model, config.seed, static_cast<std::uint32_t>(s.best_epoch),
                         s.best_val_ndcg10);
}

/// Test-set report of a trained model; sampled-mode negatives are drawn
/// from the split seed so every model sees the same candidates.
inline EvalReport evaluate_test(const Model& model, const SplitDataset& split,
                                const CandidateMode& candidates,
                                std::vector<std::size_t> ks = {5, 10, 20}) {
  EvalOptions opt;
  opt.ks = std::move(ks);
  opt.candidates = candidates;
  opt.target = EvalTarget::test;
  opt.seed = split.seed;
  return evaluate(model, split, opt);
}

/// Train and test once per seed and average the test metrics.
inline EvalReport run_seeds(ModelKind kind, const SplitDataset& split, const HyperParams& hyper,
                            TrainConfig config, const std::vector<std::uint64_t>& seeds,
                            const CandidateMode& candidates) {
  if (seeds.empty()) throw std::invalid_argument("run_seeds: no seeds");
  std::vector<EvalReport> reports;
  for (std::uint64_t s : seeds) {
    config.seed = s;
    const Checkpoint c = train(kind, split, hyper, config);
    auto model = model_from_checkpoint(c);
    EvalReport r = evaluate_test(*model, split, candidates);
    r.seeds = {s};
    reports.push_back(std::move(r));
  }
  return mean_report(reports);
}

/// The three-run protocol: seeds s, s+1, s+2.
inline EvalReport run_thrice(ModelKind kind, const SplitDataset& split, const HyperParams& hyper,
                             const TrainConfig& config, const CandidateMode& candidates) {
  const std::uint64_t s = config.seed;
  return run_seeds(kind, split, hyper, config, {s, s + 1, s + 2}, candidates);
}

}  // namespace ctncf
