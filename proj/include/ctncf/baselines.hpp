#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ctncf/model.hpp"

namespace ctncf {

struct DenseLayer {
  Tensor w, b;
};

namespace detail {

inline std::vector<DenseLayer> make_tower(std::size_t input, const std::vector<std::size_t>& widths) {
  std::vector<DenseLayer> tower;
  for (std::size_t w : widths) {
    tower.push_back({Tensor({input, w}), Tensor({w})});
    input = w;
  }
  return tower;
}

inline void init_tower(std::vector<DenseLayer>& tower, Rng& rng) {
  for (auto& l : tower) l.w = init::kaiming(l.w.shape(), l.w.dim(0), rng);
}

// ReLU tower over [B×in] -> [B×last].
inline Var run_tower(Tape& tape, Var x, const std::vector<DenseLayer>& tower) {
  for (const auto& l : tower) {
    x = ops::relu(tape, ops::add_bias(tape, ops::matmul(tape, x, tape.param(l.w)),
                                      tape.param(l.b)));
  }
  return x;
}

inline void append_tower(std::vector<ParamRef>& out, const std::string& prefix,
                         std::vector<DenseLayer>& tower) {
  for (std::size_t i = 0; i < tower.size(); ++i) {
    out.push_back({prefix + std::to_string(i) + ".w", &tower[i].w, RegGroup::none});
    out.push_back({prefix + std::to_string(i) + ".b", &tower[i].b, RegGroup::none});
  }
}

inline Var linear_head(Tape& tape, Var x, const Tensor& w, const Tensor& b, std::size_t batch) {
  Var z = ops::add_bias(tape, ops::matmul(tape, x, tape.param(w)), tape.param(b));
  return ops::reshape(tape, z, {batch});
}

}  // namespace detail

/// concat(p_u, q_i) -> ReLU tower (default 64-32-16) -> linear -> sigmoid.
class MlpModel final : public Model {
 public:
  MlpModel(HyperParams hyper, std::size_t num_users, std::size_t num_items,
           std::optional<std::uint64_t> seed = std::nullopt)
      : Model(std::move(hyper), num_users, num_items) {
    hyper_.validate();
    const std::size_t d = hyper_.mf_dim;
    user_ = Tensor({num_users, d});
    item_ = Tensor({num_items, d});
    tower_ = detail::make_tower(2 * d, hyper_.mlp_layers);
    head_w_ = Tensor({hyper_.mlp_layers.back(), 1});
    head_b_ = Tensor({1});
    if (seed) initialize(*seed);
  }

  void initialize(std::uint64_t seed) {
    Rng rng = make_rng(seed, stream::kInit);
    user_ = init::uniform(user_.shape(), init::kEmbeddingLimit, rng);
    item_ = init::uniform(item_.shape(), init::kEmbeddingLimit, rng);
    detail::init_tower(tower_, rng);
    head_w_ = init::kaiming(head_w_.shape(), head_w_.dim(0), rng);
  }

  ModelKind kind() const override { return ModelKind::mlp; }
  std::unique_ptr<Model> clone() const override { return std::make_unique<MlpModel>(*this); }

  Var logits(Tape& tape, std::span<const std::uint32_t> users,
             std::span<const std::uint32_t> items) const override {
    check_ids(users, items);
    Var pu = ops::gather_rows(tape, tape.param(user_), users);
    Var qi = ops::gather_rows(tape, tape.param(item_), items);
    Var h = detail::run_tower(tape, ops::concat_last(tape, {pu, qi}), tower_);
    return detail::linear_head(tape, h, head_w_, head_b_, users.size());
  }

  std::vector<ParamRef> parameters() override {
    std::vector<ParamRef> out = {{"user_emb", &user_, RegGroup::mf},
                                 {"item_emb", &item_, RegGroup::mf}};
    detail::append_tower(out, "tower", tower_);
    out.push_back({"head_w", &head_w_, RegGroup::none});
    out.push_back({"head_b", &head_b_, RegGroup::none});
    return out;
  }

 private:
  Tensor user_, item_;
  std::vector<DenseLayer> tower_;
  Tensor head_w_, head_b_;
};

/// Generalised matrix factorisation: linear head over p_u ⊙ q_i.
class GmfModel final : public Model {
 public:
  GmfModel(HyperParams hyper, std::size_t num_users, std::size_t num_items,
           std::optional<std::uint64_t> seed = std::nullopt)
      : Model(std::move(hyper), num_users, num_items) {
    hyper_.validate();
    user_ = Tensor({num_users, hyper_.mf_dim});
    item_ = Tensor({num_items, hyper_.mf_dim});
    head_w_ = Tensor({hyper_.mf_dim, 1});
    head_b_ = Tensor({1});
    if (seed) initialize(*seed);
  }

  void initialize(std::uint64_t seed) {
    Rng rng = make_rng(seed, stream::kInit);
    user_ = init::uniform(user_.shape(), init::kEmbeddingLimit, rng);
    item_ = init::uniform(item_.shape(), init::kEmbeddingLimit, rng);
    head_w_ = init::kaiming(head_w_.shape(), head_w_.dim(0), rng);
  }

  ModelKind kind() const override { return ModelKind::gmf; }
  std::unique_ptr<Model> clone() const override { return std::make_unique<GmfModel>(*this); }

  Var logits(Tape& tape, std::span<const std::uint32_t> users,
             std::span<const std::uint32_t> items) const override {
    check_ids(users, items);
    Var pu = ops::gather_rows(tape, tape.param(user_), users);
    Var qi = ops::gather_rows(tape, tape.param(item_), items);
    return detail::linear_head(tape, ops::mul(tape, pu, qi), head_w_, head_b_, users.size());
  }

  std::vector<ParamRef> parameters() override {
    return {{"user_emb", &user_, RegGroup::mf},
            {"item_emb", &item_, RegGroup::mf},
            {"head_w", &head_w_, RegGroup::none},
            {"head_b", &head_b_, RegGroup::none}};
  }

 private:
  Tensor user_, item_;
  Tensor head_w_, head_b_;
};

/// NeuMF-style fusion: separate GMF and MLP embeddings; the head reads
/// concat(p_u ⊙ q_i, last MLP hidden layer). Head weights for the GMF part
/// come first.
class NcfModel final : public Model {
 public:
  NcfModel(HyperParams hyper, std::size_t num_users, std::size_t num_items,
           std::optional<std::uint64_t> seed = std::nullopt)
      : Model(std::move(hyper), num_users, num_items) {
    hyper_.validate();
    const std::size_t d = hyper_.mf_dim;
    gmf_user_ = Tensor({num_users, d});
    gmf_item_ = Tensor({num_items, d});
    mlp_user_ = Tensor({num_users, d});
    mlp_item_ = Tensor({num_items, d});
    tower_ = detail::make_tower(2 * d, hyper_.mlp_layers);
    head_w_ = Tensor({d + hyper_.mlp_layers.back(), 1});
    head_b_ = Tensor({1});
    if (seed) initialize(*seed);
  }

  void initialize(std::uint64_t seed) {
    Rng rng = make_rng(seed, stream::kInit);
    for (Tensor* t : {&gmf_user_, &gmf_item_, &mlp_user_, &mlp_item_})
      *t = init::uniform(t->shape(), init::kEmbeddingLimit, rng);
    detail::init_tower(tower_, rng);
    head_w_ = init::kaiming(head_w_.shape(), head_w_.dim(0), rng);
  }

  ModelKind kind() const override { return ModelKind::ncf; }
  std::unique_ptr<Model> clone() const override { return std::make_unique<NcfModel>(*this); }

  Var logits(Tape& tape, std::span<const std::uint32_t> users,
             std::span<const std::uint32_t> items) const override {
    check_ids(users, items);
    Var gmf = ops::mul(tape, ops::gather_rows(tape, tape.param(gmf_user_), users),
                       ops::gather_rows(tape, tape.param(gmf_item_), items));
    Var mlp_in = ops::concat_last(tape, {ops::gather_rows(tape, tape.param(mlp_user_), users),
                                         ops::gather_rows(tape, tape.param(mlp_item_), items)});
    Var h = detail::run_tower(tape, mlp_in, tower_);
    return detail::linear_head(tape, ops::concat_last(tape, {gmf, h}), head_w_, head_b_,
                               users.size());
  }

  std::vector<ParamRef> parameters() override {
    std::vector<ParamRef> out = {{"gmf_user", &gmf_user_, RegGroup::mf},
                                 {"gmf_item", &gmf_item_, RegGroup::mf},
                                 {"mlp_user", &mlp_user_, RegGroup::mf},
                                 {"mlp_item", &mlp_item_, RegGroup::mf}};
    detail::append_tower(out, "tower", tower_);
    out.push_back({"head_w", &head_w_, RegGroup::none});
    out.push_back({"head_b", &head_b_, RegGroup::none});
    return out;
  }

 private:
  Tensor gmf_user_, gmf_item_, mlp_user_, mlp_item_;
  std::vector<DenseLayer> tower_;
  Tensor head_w_, head_b_;
};

/// Scores an item by its number of training interactions. Ranking ties fall
/// back to ascending item index through rank_items.
class PopularityModel final : public Model {
 public:
  PopularityModel(HyperParams hyper, std::size_t num_users, std::size_t num_items)
      : Model(std::move(hyper), num_users, num_items), counts_({num_items}) {}

  ModelKind kind() const override { return ModelKind::popularity; }
  bool trainable() const override { return false; }
  std::unique_ptr<Model> clone() const override {
    return std::make_unique<PopularityModel>(*this);
  }

  /// Count every (user, item) occurrence in the per-user training lists.
  void fit(const std::vector<std::vector<std::uint32_t>>& train_by_user) {
    counts_.fill(0.0);
    for (const auto& items : train_by_user)
      for (std::uint32_t i : items) {
        if (i >= num_items_) throw ShapeError("item id out of range in training lists");
        counts_[i] += 1.0;
      }
  }

  double popularity_score(std::uint32_t item) const {
    return item < num_items_ ? counts_[item] : 0.0;
  }

  Var logits(Tape&, std::span<const std::uint32_t>,
             std::span<const std::uint32_t>) const override {
    throw std::logic_error("popularity model has no differentiable logits");
  }

  std::vector<double> score(std::span<const std::uint32_t> users,
                            std::span<const std::uint32_t> items) const override {
    check_ids(users, items);
    std::vector<double> out(items.size());
    for (std::size_t b = 0; b < items.size(); ++b) {
      if (items[b] >= num_items_) {
        throw ShapeError("id " + std::to_string(items[b]) +
                         " out of range for vocabulary of size " + std::to_string(num_items_));
      }
      out[b] = counts_[items[b]];
    }
    return out;
  }

  std::vector<ParamRef> parameters() override {
    return {{"item_counts", &counts_, RegGroup::none}};
  }

 private:
  Tensor counts_;
};

/// Fresh model of the requested kind. With a seed, trainable models are
/// randomly initialised; without one every parameter is zero.
inline std::unique_ptr<Model> make_model(ModelKind kind, const HyperParams& hyper,
                                         std::size_t num_users, std::size_t num_items,
                                         std::optional<std::uint64_t> seed = std::nullopt) {
  switch (kind) {
    case ModelKind::ctncf: {
      auto m = std::make_unique<CtncfModel>(hyper, num_users, num_items);
      if (seed) m->initialize(*seed);
      return m;
    }
    case ModelKind::mlp: return std::make_unique<MlpModel>(hyper, num_users, num_items, seed);
    case ModelKind::gmf: return std::make_unique<GmfModel>(hyper, num_users, num_items, seed);
    case ModelKind::ncf: return std::make_unique<NcfModel>(hyper, num_users, num_items, seed);
    case ModelKind::popularity:
      return std::make_unique<PopularityModel>(hyper, num_users, num_items);
  }
  throw std::invalid_argument("unknown model kind");
}

}  // namespace ctncf
