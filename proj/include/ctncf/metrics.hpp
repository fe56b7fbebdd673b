#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ctncf/data.hpp"
#include "ctncf/error.hpp"
#include "ctncf/model.hpp"
#include "ctncf/rng.hpp"

namespace ctncf {

/// Candidates ordered by descending score, ties by ascending item index.
/// Only the first `top` positions are materialised (all when top == 0).
inline std::vector<std::uint32_t> rank_items(std::span<const double> scores,
                                             std::span<const std::uint32_t> candidates,
                                             std::size_t top = 0) {
  if (candidates.empty()) throw std::invalid_argument("rank_items: empty candidate set");
  if (scores.size() != candidates.size()) {
    throw std::invalid_argument("rank_items: scores and candidates differ in length");
  }
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return candidates[a] < candidates[b];
  };
  const std::size_t keep = top == 0 ? order.size() : std::min(top, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep),
                    order.end(), before);
  std::vector<std::uint32_t> out(keep);
  for (std::size_t r = 0; r < keep; ++r) out[r] = candidates[order[r]];
  return out;
}

namespace detail {

inline bool contains(std::span<const std::uint32_t> set, std::uint32_t item) {
  return std::find(set.begin(), set.end(), item) != set.end();
}

inline void require_relevant(std::span<const std::uint32_t> relevant, std::size_t n) {
  if (relevant.empty()) throw std::invalid_argument("metric needs a non-empty relevant set");
  if (n == 0) throw std::invalid_argument("metric cutoff n must be >= 1");
}

}  // namespace detail

/// |top-n ∩ relevant| / |relevant|.
inline double recall_at_n(std::span<const std::uint32_t> ranking,
                          std::span<const std::uint32_t> relevant, std::size_t n) {
  detail::require_relevant(relevant, n);
  const std::size_t limit = std::min(n, ranking.size());
  std::size_t hits = 0;
  for (std::size_t r = 0; r < limit; ++r) hits += detail::contains(relevant, ranking[r]);
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

/// Binary-relevance NDCG with gain 1/log2(rank + 1), rank 1-indexed.
inline double ndcg_at_n(std::span<const std::uint32_t> ranking,
                        std::span<const std::uint32_t> relevant, std::size_t n) {
  detail::require_relevant(relevant, n);
  const std::size_t limit = std::min(n, ranking.size());
  double dcg = 0.0;
  for (std::size_t r = 0; r < limit; ++r)
    if (detail::contains(relevant, ranking[r])) dcg += 1.0 / std::log2(static_cast<double>(r + 2));
  double idcg = 0.0;
  const std::size_t ideal = std::min(n, relevant.size());
  for (std::size_t r = 0; r < ideal; ++r) idcg += 1.0 / std::log2(static_cast<double>(r + 2));
  return dcg / idcg;
}

/// Which items get ranked for a user: every item outside the user's known
/// positives, or the held-out positives plus n sampled non-positives.
struct CandidateMode {
  bool sampled = false;
  std::size_t negatives = 0;

  static CandidateMode full() { return {}; }
  static CandidateMode sampled_with(std::size_t n) { return {true, n}; }

  friend bool operator==(const CandidateMode&, const CandidateMode&) = default;
};

inline std::string to_string(const CandidateMode& m) {
  return m.sampled ? "sampled:" + std::to_string(m.negatives) : "full";
}

inline CandidateMode parse_candidate_mode(std::string_view s) {
  if (s == "full") return CandidateMode::full();
  constexpr std::string_view prefix = "sampled:";
  if (s.substr(0, prefix.size()) == prefix) {
    std::size_t n = 0;
    const auto rest = s.substr(prefix.size());
    auto [p, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), n);
    if (ec == std::errc() && p == rest.data() + rest.size() && n > 0) {
      return CandidateMode::sampled_with(n);
    }
  }
  throw std::invalid_argument("bad candidate mode '" + std::string(s) +
                              "' (expected full or sampled:N)");
}

enum class EvalTarget { test, validation };

struct EvalOptions {
  std::vector<std::size_t> ks = {5, 10, 20};
  CandidateMode candidates = CandidateMode::full();
  EvalTarget target = EvalTarget::test;
  std::uint64_t seed = 0;  // drives sampled-mode negatives
  std::size_t score_batch = 4096;
};

struct MetricAtK {
  std::size_t k;
  double recall;
  double ndcg;
  friend bool operator==(const MetricAtK&, const MetricAtK&) = default;
};

struct EvalReport {
  std::vector<MetricAtK> metrics;
  std::size_t users_evaluated = 0;
  std::size_t users_skipped = 0;
  CandidateMode candidate_mode;
  std::vector<std::uint64_t> seeds;
  // Per-run metrics when this report aggregates several training runs.
  std::vector<std::vector<MetricAtK>> runs;

  const MetricAtK& at(std::size_t k) const {
    for (const auto& m : metrics)
      if (m.k == k) return m;
    throw std::out_of_range("no metric at k=" + std::to_string(k));
  }
};

/// Rank candidates for every user holding target positives and average
/// Recall@k / NDCG@k over those users with equal weight.
inline EvalReport evaluate(const Model& model, const SplitDataset& split,
                           const EvalOptions& opt = {}) {
  if (opt.ks.empty()) throw std::invalid_argument("evaluate: no cutoffs requested");
  const std::size_t max_k = *std::max_element(opt.ks.begin(), opt.ks.end());
  EvalReport report;
  report.candidate_mode = opt.candidates;
  report.metrics.reserve(opt.ks.size());
  for (std::size_t k : opt.ks) report.metrics.push_back({k, 0.0, 0.0});

  std::vector<char> excluded(split.num_items);
  std::vector<std::uint32_t> candidates, users;
  std::vector<double> scores;
  for (std::uint32_t u = 0; u < split.num_users; ++u) {
    const auto& relevant = opt.target == EvalTarget::test ? split.test[u] : split.validation[u];
    if (relevant.empty()) {
      ++report.users_skipped;
      continue;
    }
    std::fill(excluded.begin(), excluded.end(), 0);
    for (std::uint32_t i : split.train[u]) excluded[i] = 1;
    if (opt.target == EvalTarget::test)
      for (std::uint32_t i : split.validation[u]) excluded[i] = 1;

    candidates.clear();
    if (!opt.candidates.sampled) {
      for (std::uint32_t i = 0; i < split.num_items; ++i)
        if (!excluded[i]) candidates.push_back(i);
    } else {
      for (auto* v : {&split.validation[u], &split.test[u]})
        for (std::uint32_t i : *v) excluded[i] = 1;
      std::vector<std::uint32_t> pool;
      for (std::uint32_t i = 0; i < split.num_items; ++i)
        if (!excluded[i]) pool.push_back(i);
      Rng rng = make_rng(opt.seed, stream::kEvalNegatives, u,
                         opt.target == EvalTarget::test ? 0 : 1);
      const std::size_t take = std::min(opt.candidates.negatives, pool.size());
      // Partial Fisher-Yates: the first `take` entries become the sample.
      for (std::size_t j = 0; j < take; ++j) {
        std::uniform_int_distribution<std::size_t> pick(j, pool.size() - 1);
        std::swap(pool[j], pool[pick(rng)]);
      }
      candidates.assign(relevant.begin(), relevant.end());
      candidates.insert(candidates.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    }

    scores.clear();
    for (std::size_t start = 0; start < candidates.size(); start += opt.score_batch) {
      const std::size_t len = std::min(opt.score_batch, candidates.size() - start);
      users.assign(len, u);
      auto chunk = model.score(users, std::span<const std::uint32_t>(candidates).subspan(start, len));
      scores.insert(scores.end(), chunk.begin(), chunk.end());
    }
    const auto ranking = rank_items(scores, candidates, max_k);
    for (auto& m : report.metrics) {
      m.recall += recall_at_n(ranking, relevant, m.k);
      m.ndcg += ndcg_at_n(ranking, relevant, m.k);
    }
    ++report.users_evaluated;
  }
  if (report.users_evaluated == 0) throw DataError("evaluate: no evaluable users");
  for (auto& m : report.metrics) {
    m.recall /= static_cast<double>(report.users_evaluated);
    m.ndcg /= static_cast<double>(report.users_evaluated);
  }
  return report;
}

/// Element-wise mean of several reports; the inputs are kept in `runs`.
inline EvalReport mean_report(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("mean_report: no reports");
  EvalReport out = reports.front();
  out.seeds.clear();
  out.runs.clear();
  // Running mean, so identical runs average to exactly the same value.
  double n = 0.0;
  for (const auto& r : reports) {
    if (r.metrics.size() != out.metrics.size()) {
      throw std::invalid_argument("mean_report: reports use different cutoffs");
    }
    n += 1.0;
    for (std::size_t j = 0; j < r.metrics.size(); ++j) {
      out.metrics[j].recall += (r.metrics[j].recall - out.metrics[j].recall) / n;
      out.metrics[j].ndcg += (r.metrics[j].ndcg - out.metrics[j].ndcg) / n;
    }
    out.seeds.insert(out.seeds.end(), r.seeds.begin(), r.seeds.end());
    out.runs.push_back(r.metrics);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report output

inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string s;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) s += ';';
    s += std::to_string(seeds[i]);
  }
  return s;
}

inline constexpr std::string_view kReportCsvHeader = "model,dataset,k,recall,ndcg,runs,seed_list";

/// One CSV row per cutoff; the header is written separately.
inline void write_report_rows(std::ostream& os, std::string_view model, std::string_view dataset,
                              const EvalReport& r) {
  const std::size_t runs = r.runs.empty() ? 1 : r.runs.size();
  for (const auto& m : r.metrics) {
    os << model << ',' << dataset << ',' << m.k << ',' << format_metric(m.recall) << ','
       << format_metric(m.ndcg) << ',' << runs << ',' << join_seeds(r.seeds) << '\n';
  }
}

inline void print_report_table(std::ostream& os, std::string_view model, const EvalReport& r) {
  os << model << "  (" << r.users_evaluated << " users, candidates "
     << to_string(r.candidate_mode) << ", seeds " << join_seeds(r.seeds) << ")\n";
  os << "  " << std::left << std::setw(6) << "k" << std::setw(12) << "Recall@k"
     << "NDCG@k\n";
  for (const auto& m : r.metrics) {
    os << "  " << std::left << std::setw(6) << m.k << std::setw(12) << format_metric(m.recall)
       << format_metric(m.ndcg) << '\n';
  }
}

}  // namespace ctncf
