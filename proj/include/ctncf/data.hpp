#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "ctncf/binary_io.hpp"
#include "ctncf/error.hpp"
#include "ctncf/rng.hpp"

namespace ctncf {

/// Bijective raw-id <-> dense-index map. Indices are assigned in order of
/// first appearance.
class Vocabulary {
 public:
  std::uint32_t intern(std::string_view raw) {
    auto it = index_.find(std::string(raw));
    if (it != index_.end()) return it->second;
    const auto id = static_cast<std::uint32_t>(raw_.size());
    raw_.emplace_back(raw);
    index_.emplace(raw_.back(), id);
    return id;
  }

  std::optional<std::uint32_t> find(std::string_view raw) const {
    auto it = index_.find(std::string(raw));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& raw(std::uint32_t id) const { return raw_.at(id); }
  const std::vector<std::string>& raw_ids() const { return raw_; }
  std::size_t size() const { return raw_.size(); }

 private:
  std::vector<std::string> raw_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

struct Rating {
  std::uint32_t user;
  std::uint32_t item;
  double rating;
  std::int64_t timestamp;
};

struct InteractionLog {
  std::vector<Rating> records;
  Vocabulary users;
  Vocabulary items;
  std::size_t malformed_lines = 0;
  std::size_t total_lines = 0;

  double density() const {
    if (users.size() == 0 || items.size() == 0) return 0.0;
    return static_cast<double>(records.size()) /
           (static_cast<double>(users.size()) * static_cast<double>(items.size()));
  }
};

enum class DataFormat { movielens, amazon };

inline DataFormat parse_data_format(std::string_view s) {
  if (s == "movielens") return DataFormat::movielens;
  if (s == "amazon") return DataFormat::amazon;
  throw std::invalid_argument("unknown dataset format '" + std::string(s) +
                              "' (expected movielens or amazon)");
}

inline std::string_view to_string(DataFormat f) {
  return f == DataFormat::movielens ? "movielens" : "amazon";
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, std::string_view delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + delim.size();
  }
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '"')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '"' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '"')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '"' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

// Malformed lines are tolerated up to this fraction of non-blank lines.
inline constexpr double kMaxMalformedFraction = 0.01;

inline InteractionLog parse_ratings(std::istream& in, std::string_view delim,
                                    bool allow_header, std::string_view source) {
  InteractionLog log;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    std::string_view view(line);
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    if (view.find_first_not_of(" \t") == std::string_view::npos) continue;
    const auto fields = split_fields(view, delim);
    double rating = 0.0;
    std::int64_t ts = 0;
    const bool rating_ok = fields.size() >= 3 && parse_number(fields[2], rating);
    if (first && allow_header && !rating_ok) {
      first = false;
      continue;
    }
    first = false;
    ++log.total_lines;
    if (fields.size() != 4 || !rating_ok || !parse_number(fields[3], ts) ||
        trim(fields[0]).empty() || trim(fields[1]).empty() || !(rating >= 1.0 && rating <= 5.0)) {
      ++log.malformed_lines;
      continue;
    }
    const std::uint32_t u = log.users.intern(trim(fields[0]));
    const std::uint32_t i = log.items.intern(trim(fields[1]));
    log.records.push_back({u, i, rating, ts});
  }
  if (log.records.empty()) throw DataError(std::string(source) + ": no records");
  if (static_cast<double>(log.malformed_lines) >
      kMaxMalformedFraction * static_cast<double>(log.total_lines)) {
    throw DataError(std::string(source) + ": " + std::to_string(log.malformed_lines) + " of " +
                    std::to_string(log.total_lines) + " lines malformed (more than 1%)");
  }
  return log;
}

inline std::ifstream open_or_throw(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read ratings file: " + path.string());
  return in;
}

}  // namespace detail

/// `user::item::rating::timestamp` lines (MovieLens-1M ratings.dat).
inline InteractionLog parse_movielens(std::istream& in, std::string_view source = "movielens") {
  return detail::parse_ratings(in, "::", /*allow_header=*/false, source);
}

inline InteractionLog parse_movielens(const std::filesystem::path& path) {
  auto in = detail::open_or_throw(path);
  return parse_movielens(in, path.string());
}

/// `user,item,rating,timestamp` CSV. A first line whose rating column is not
/// numeric is taken as a header and skipped.
inline InteractionLog parse_amazon_csv(std::istream& in, std::string_view source = "amazon") {
  return detail::parse_ratings(in, ",", /*allow_header=*/true, source);
}

inline InteractionLog parse_amazon_csv(const std::filesystem::path& path) {
  auto in = detail::open_or_throw(path);
  return parse_amazon_csv(in, path.string());
}

inline InteractionLog load_ratings(const std::filesystem::path& path, DataFormat format) {
  return format == DataFormat::movielens ? parse_movielens(path) : parse_amazon_csv(path);
}

namespace detail {

// Copy of `log` restricted to records passing `keep`, with both
// vocabularies rebuilt densely in first-appearance order.
template <typename Pred>
InteractionLog reindex(const InteractionLog& log, Pred keep) {
  InteractionLog out;
  out.malformed_lines = log.malformed_lines;
  out.total_lines = log.total_lines;
  for (const Rating& r : log.records) {
    if (!keep(r)) continue;
    const std::uint32_t u = out.users.intern(log.users.raw(r.user));
    const std::uint32_t i = out.items.intern(log.items.raw(r.item));
    out.records.push_back({u, i, r.rating, r.timestamp});
  }
  return out;
}

}  // namespace detail

/// Iteratively drop users and items with fewer than the given number of
/// ratings until both thresholds hold.
inline InteractionLog kcore_filter(const InteractionLog& log, std::size_t min_user,
                                   std::size_t min_item) {
  InteractionLog cur = detail::reindex(log, [](const Rating&) { return true; });
  while (true) {
    std::vector<std::size_t> uc(cur.users.size()), ic(cur.items.size());
    for (const Rating& r : cur.records) {
      ++uc[r.user];
      ++ic[r.item];
    }
    auto keep = [&](const Rating& r) { return uc[r.user] >= min_user && ic[r.item] >= min_item; };
    const bool stable = std::all_of(cur.records.begin(), cur.records.end(), keep);
    if (stable) return cur;
    cur = detail::reindex(cur, keep);
    if (cur.records.empty()) throw DataError("k-core filter removed every rating");
  }
}

/// Keep only the first `max_users` users (by first appearance).
inline InteractionLog limit_users(const InteractionLog& log, std::size_t max_users) {
  return detail::reindex(log, [max_users](const Rating& r) { return r.user < max_users; });
}

/// Binary implicit feedback: every rated (user, item) pair is a positive.
struct ImplicitFeedback {
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  // Per user, items ordered by earliest interaction time (ties by index).
  std::vector<std::vector<std::uint32_t>> items_by_user;
  std::size_t records_before_dedup = 0;

  std::size_t num_positives() const {
    std::size_t n = 0;
    for (const auto& v : items_by_user) n += v.size();
    return n;
  }
};

/// Collapse ratings into positive pairs, keeping each pair's earliest
/// timestamp. With `min_rating`, lower ratings are dropped first.
inline ImplicitFeedback to_implicit(const InteractionLog& log,
                                    std::optional<double> min_rating = std::nullopt) {
  struct Entry {
    std::int64_t ts;
    std::uint32_t item;
  };
  std::vector<std::unordered_map<std::uint32_t, std::int64_t>> earliest(log.users.size());
  ImplicitFeedback fb;
  fb.num_users = log.users.size();
  fb.num_items = log.items.size();
  for (const Rating& r : log.records) {
    if (min_rating && r.rating < *min_rating) continue;
    ++fb.records_before_dedup;
    auto [it, inserted] = earliest[r.user].try_emplace(r.item, r.timestamp);
    if (!inserted) it->second = std::min(it->second, r.timestamp);
  }
  fb.items_by_user.resize(fb.num_users);
  for (std::size_t u = 0; u < fb.num_users; ++u) {
    std::vector<Entry> entries;
    entries.reserve(earliest[u].size());
    for (auto [item, ts] : earliest[u]) entries.push_back({ts, item});
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
      return a.ts != b.ts ? a.ts < b.ts : a.item < b.item;
    });
    for (const Entry& e : entries) fb.items_by_user[u].push_back(e.item);
  }
  return fb;
}

/// Per-user 7:2:1 partition of positives.
struct SplitDataset {
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::uint64_t seed = 0;
  // Sorted ascending per user.
  std::vector<std::vector<std::uint32_t>> train, validation, test;
  std::vector<std::string> user_ids, item_ids;  // raw ids, optional

  bool evaluable(std::uint32_t user) const { return !test[user].empty(); }

  std::size_t num_train_interactions() const {
    std::size_t n = 0;
    for (const auto& v : train) n += v.size();
    return n;
  }
};

struct SplitSizes {
  std::size_t train, validation, test;
  friend bool operator==(const SplitSizes&, const SplitSizes&) = default;
};

/// Test gets max(1, round(0.1 n)), validation max(1, round(0.2 n)), train the
/// rest. Users with fewer than 3 positives are train-only.
inline SplitSizes split_sizes(std::size_t n) {
  if (n < 3) return {n, 0, 0};
  // Integer half-up rounding of n/10 and 2n/10.
  const std::size_t test = std::max<std::size_t>(1, (n + 5) / 10);
  const std::size_t val = std::max<std::size_t>(1, (2 * n + 5) / 10);
  return {n - test - val, val, test};
}

inline SplitDataset split_721(const ImplicitFeedback& fb, std::uint64_t seed) {
  SplitDataset s;
  s.num_users = fb.num_users;
  s.num_items = fb.num_items;
  s.seed = seed;
  s.train.resize(fb.num_users);
  s.validation.resize(fb.num_users);
  s.test.resize(fb.num_users);
  for (std::size_t u = 0; u < fb.num_users; ++u) {
    std::vector<std::uint32_t> items = fb.items_by_user[u];
    Rng rng = make_rng(seed, stream::kSplit, u);
    std::shuffle(items.begin(), items.end(), rng);
    const SplitSizes sz = split_sizes(items.size());
    auto first = items.begin();
    s.test[u].assign(first, first + sz.test);
    s.validation[u].assign(first + sz.test, first + sz.test + sz.validation);
    s.train[u].assign(first + sz.test + sz.validation, items.end());
    for (auto* v : {&s.train[u], &s.validation[u], &s.test[u]}) std::sort(v->begin(), v->end());
  }
  return s;
}

inline SplitDataset split_721(const InteractionLog& log, std::uint64_t seed,
                              std::optional<double> min_rating = std::nullopt) {
  SplitDataset s = split_721(to_implicit(log, min_rating), seed);
  s.user_ids = log.users.raw_ids();
  s.item_ids = log.items.raw_ids();
  return s;
}

/// `count` items drawn uniformly with replacement from those not in the
/// user's training positives. The stream depends only on (seed, user, step).
inline std::vector<std::uint32_t> sample_negatives(const SplitDataset& split, std::uint32_t user,
                                                   std::size_t count, std::uint64_t seed,
                                                   std::uint64_t step = 0) {
  if (count == 0) throw std::invalid_argument("negative sample count must be >= 1");
  if (user >= split.num_users) throw std::out_of_range("user id out of range");
  const auto& pos = split.train[user];
  if (pos.size() >= split.num_items) {
    throw DataError("user " + std::to_string(user) + " has interacted with all items");
  }
  Rng rng = make_rng(seed, stream::kNegatives, user, step);
  std::vector<std::uint32_t> out;
  out.reserve(count);
  if (2 * pos.size() > split.num_items) {
    std::vector<std::uint32_t> pool;
    for (std::uint32_t i = 0; i < split.num_items; ++i)
      if (!std::binary_search(pos.begin(), pos.end(), i)) pool.push_back(i);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (std::size_t k = 0; k < count; ++k) out.push_back(pool[pick(rng)]);
    return out;
  }
  std::uniform_int_distribution<std::uint32_t> pick(
      0, static_cast<std::uint32_t>(split.num_items - 1));
  while (out.size() < count) {
    const std::uint32_t i = pick(rng);
    if (!std::binary_search(pos.begin(), pos.end(), i)) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Split cache: "CTNCFDS1", u64 seed, u32 users, u32 items, then per user
// u32 train/val/test counts followed by the three index arrays, then the raw
// user and item ids as length-prefixed strings.

inline constexpr std::string_view kSplitMagic = "CTNCFDS1";

inline void save_split(std::ostream& os, const SplitDataset& s) {
  bin::write_magic(os, kSplitMagic);
  bin::write_u64(os, s.seed);
  bin::write_u32(os, static_cast<std::uint32_t>(s.num_users));
  bin::write_u32(os, static_cast<std::uint32_t>(s.num_items));
  for (std::size_t u = 0; u < s.num_users; ++u) {
    for (const auto* v : {&s.train[u], &s.validation[u], &s.test[u]})
      bin::write_u32(os, static_cast<std::uint32_t>(v->size()));
    for (const auto* v : {&s.train[u], &s.validation[u], &s.test[u]})
      for (std::uint32_t i : *v) bin::write_u32(os, i);
  }
  bin::write_u32(os, static_cast<std::uint32_t>(s.user_ids.size()));
  for (const auto& id : s.user_ids) bin::write_string(os, id);
  bin::write_u32(os, static_cast<std::uint32_t>(s.item_ids.size()));
  for (const auto& id : s.item_ids) bin::write_string(os, id);
}

inline SplitDataset load_split(std::istream& is) {
  bin::expect_magic(is, kSplitMagic);
  SplitDataset s;
  s.seed = bin::read_u64(is);
  s.num_users = bin::read_count(is, 1u << 28, "user");
  s.num_items = bin::read_count(is, 1u << 28, "item");
  // Grown incrementally so a corrupt header cannot force a huge allocation.
  for (std::size_t u = 0; u < s.num_users; ++u) {
    std::uint32_t counts[3];
    for (auto& c : counts) c = bin::read_count(is, s.num_items, "interaction");
    std::vector<std::vector<std::uint32_t>>* lists[3] = {&s.train, &s.validation, &s.test};
    for (int k = 0; k < 3; ++k) {
      auto& v = lists[k]->emplace_back();
      for (std::uint32_t j = 0; j < counts[k]; ++j) {
        const std::uint32_t i = bin::read_u32(is);
        if (i >= s.num_items) throw DataError("split cache: item index out of range");
        v.push_back(i);
      }
    }
  }
  for (auto [ids, limit, what] : {std::tuple{&s.user_ids, s.num_users, "user id"},
                                  std::tuple{&s.item_ids, s.num_items, "item id"}}) {
    const std::uint32_t n = bin::read_count(is, limit, what);
    for (std::uint32_t j = 0; j < n; ++j) ids->push_back(bin::read_string(is));
  }
  return s;
}

inline void save_split(const std::filesystem::path& path, const SplitDataset& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write split cache: " + path.string());
  save_split(os, s);
  if (!os) throw DataError("failed writing split cache: " + path.string());
}

inline SplitDataset load_split(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read split cache: " + path.string());
  return load_split(is);
}

}  // namespace ctncf
