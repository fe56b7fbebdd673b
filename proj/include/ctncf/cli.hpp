#pragma once

// Command-line front end: prepare-data, train, evaluate, compare, sweep,
// ablate, replay. Every run writes its outputs into a staging directory that
// is renamed onto --out once the command succeeds, together with a run.json
// manifest holding the full argument list and resolved configuration.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ctncf/ctncf.hpp"

namespace ctncf::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3 };

struct DataOptions {
  std::vector<std::string> datasets;  // raw rating files
  std::vector<std::string> formats = {"movielens"};
  std::vector<std::string> caches;  // prepared split.bin files
  std::vector<std::string> names;
  std::size_t max_users = 0;
  std::size_t min_user_interactions = 0;
  std::size_t min_item_interactions = 0;
  std::optional<double> min_rating;
};

struct ModelOptions {
  std::string model = "ctncf";
  std::size_t filters = 64;
  std::size_t transformer_layers = 2;
  std::string mf_mode = "outer";
  std::size_t mf_dim = 4;
  std::size_t cnn_embed_dim = 16;
  std::size_t model_dim = 32;
  std::size_t heads = 1;
};

struct TrainOptions {
  double lr = 0.001;
  double l2_mf = 0.0;
  double l2_cnn = 0.01;
  std::size_t negatives = 4;
  std::size_t batch_size = 256;
  std::size_t epochs = 100;
  std::size_t patience = 10;
  std::string candidates = "full";
  std::string val_candidates;  // defaults to --candidates
};

struct Common {
  std::uint64_t seed = 42;
  std::string out;
  bool quiet = false;
};

struct NamedSplit {
  std::string name;
  SplitDataset split;
};

inline std::string dataset_name(const fs::path& p) {
  const std::string stem = p.stem().string();
  if ((stem == "split" || stem == "ratings") && p.has_parent_path() &&
      !p.parent_path().filename().empty()) {
    return p.parent_path().filename().string();
  }
  return stem;
}

inline void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw DataError(std::string(what) + " not found: expected " + path);
}

inline InteractionLog load_filtered(const std::string& path, DataFormat format,
                                    const DataOptions& d) {
  require_file(path, "ratings file");
  InteractionLog log = load_ratings(path, format);
  if (d.min_user_interactions > 1 || d.min_item_interactions > 1) {
    log = kcore_filter(log, std::max<std::size_t>(1, d.min_user_interactions),
                       std::max<std::size_t>(1, d.min_item_interactions));
  }
  if (d.max_users > 0) log = limit_users(log, d.max_users);
  return log;
}

inline std::vector<NamedSplit> load_splits(const DataOptions& d, std::uint64_t seed,
                                           std::ostream& info) {
  std::vector<NamedSplit> out;
  for (std::size_t k = 0; k < d.caches.size(); ++k) {
    require_file(d.caches[k], "split cache");
    out.push_back({dataset_name(d.caches[k]), load_split(d.caches[k])});
  }
  for (std::size_t k = 0; k < d.datasets.size(); ++k) {
    const std::string& fmt = d.formats.size() == 1 ? d.formats[0] : d.formats.at(k);
    InteractionLog log = load_filtered(d.datasets[k], parse_data_format(fmt), d);
    info << "loaded " << d.datasets[k] << ": " << log.users.size() << " users, "
         << log.items.size() << " items, " << log.records.size() << " ratings\n";
    out.push_back({dataset_name(d.datasets[k]), split_721(log, seed, d.min_rating)});
  }
  if (out.empty()) throw std::invalid_argument("no input data: pass --dataset or --data");
  for (std::size_t k = 0; k < d.names.size() && k < out.size(); ++k) out[k].name = d.names[k];
  return out;
}

inline HyperParams hyper_from(const ModelOptions& m) {
  HyperParams h;
  h.mf_dim = m.mf_dim;
  h.cnn_embed_dim = m.cnn_embed_dim;
  h.num_filters = m.filters;
  h.num_transformer_layers = m.transformer_layers;
  h.num_heads = m.heads;
  h.model_dim = m.model_dim;
  h.mf_mode = parse_mf_mode(m.mf_mode);
  h.validate();
  return h;
}

inline TrainConfig train_config_from(const TrainOptions& t, std::uint64_t seed) {
  TrainConfig c;
  c.lr = t.lr;
  c.l2_mf = t.l2_mf;
  c.l2_cnn = t.l2_cnn;
  c.negatives_per_positive = t.negatives;
  c.batch_size = t.batch_size;
  c.max_epochs = t.epochs;
  c.patience = t.patience;
  c.seed = seed;
  c.val_candidates =
      parse_candidate_mode(t.val_candidates.empty() ? t.candidates : t.val_candidates);
  c.validate();
  return c;
}

inline json hyper_json(const HyperParams& h) {
  return {{"mf_dim", h.mf_dim},
          {"cnn_embed_dim", h.cnn_embed_dim},
          {"num_filters", h.num_filters},
          {"kernel_size", h.kernel_size},
          {"num_transformer_layers", h.num_transformer_layers},
          {"num_heads", h.num_heads},
          {"model_dim", h.model_dim},
          {"ffn_dim", h.effective_ffn_dim()},
          {"mf_mode", std::string(to_string(h.mf_mode))},
          {"mlp_layers", h.mlp_layers}};
}

inline json train_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"l2_mf", c.l2_mf},
          {"l2_cnn", c.l2_cnn},
          {"negatives_per_positive", c.negatives_per_positive},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"seed", c.seed},
          {"val_candidates", to_string(c.val_candidates)}};
}

/// Staging directory that replaces `target` when committed. An existing
/// target is only replaced if it is a previous run directory.
class OutputDir {
 public:
  explicit OutputDir(fs::path target) : target_(std::move(target)) {
    if (target_.empty()) throw std::invalid_argument("--out is required");
    if (fs::exists(target_) && !fs::is_empty(target_) && !fs::exists(target_ / "run.json")) {
      throw DataError("refusing to overwrite non-run directory: " + target_.string());
    }
    staging_ = target_;
    staging_ += ".partial";
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  OutputDir(const OutputDir&) = delete;
  OutputDir& operator=(const OutputDir&) = delete;
  ~OutputDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }

  fs::path file(const std::string& name) const { return staging_ / name; }

  void write_text(const std::string& name, const std::string& text) const {
    std::ofstream os(file(name), std::ios::binary);
    os << text;
    if (!os) throw DataError("cannot write " + file(name).string());
  }

  void commit() {
    if (fs::exists(target_)) fs::remove_all(target_);
    if (target_.has_parent_path()) fs::create_directories(target_.parent_path());
    fs::rename(staging_, target_);
    committed_ = true;
  }

 private:
  fs::path target_;
  fs::path staging_;
  bool committed_ = false;
};

class App {
 public:
  App() {
    app_.require_subcommand(1);
    app_.set_help_all_flag("--help-all", "Expand all help");
    setup_prepare();
    setup_train();
    setup_evaluate();
    setup_compare();
    setup_sweep();
    setup_ablate();
    setup_replay();
  }

  /// args excludes the program name.
  int run(std::vector<std::string> args, std::ostream& out = std::cout,
          std::ostream& err = std::cerr) {
    args_ = args;
    out_ = &out;
    err_ = &err;
    std::reverse(args.begin(), args.end());
    try {
      app_.parse(args);
    } catch (const CLI::CallForHelp& e) {
      out << app_.help();
      return kOk;
    } catch (const CLI::CallForAllHelp& e) {
      out << app_.help("", CLI::AppFormatMode::All);
      return kOk;
    } catch (const CLI::ParseError& e) {
      err << "error: " << e.what() << "\n\n" << app_.help();
      return kUsage;
    }
    try {
      return dispatch();
    } catch (const DataError& e) {
      err << "data error: " << e.what() << '\n';
      return kDataError;
    } catch (const NumericError& e) {
      err << "numeric failure: " << e.what() << '\n';
      return kNumericError;
    } catch (const std::invalid_argument& e) {
      err << "error: " << e.what() << '\n';
      return kUsage;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return kDataError;
    }
  }

 private:
  std::ostream& info() { return common_.quiet ? null_ : *err_; }

  void add_common(CLI::App* sc) {
    sc->add_option("--seed", common_.seed, "Random seed")->capture_default_str();
    sc->add_option("--out", common_.out, "Output directory")->required();
    sc->add_flag("--quiet", common_.quiet, "Suppress progress output");
  }

  void add_data(CLI::App* sc) {
    sc->add_option("--dataset", data_.datasets, "Ratings file(s)");
    sc->add_option("--format", data_.formats, "movielens or amazon (one per --dataset, or one for all)")
        ->check(CLI::IsMember({"movielens", "amazon"}));
    sc->add_option("--data", data_.caches, "Prepared split cache(s) (split.bin)");
    sc->add_option("--name", data_.names, "Display name(s) for the datasets");
    sc->add_option("--max-users", data_.max_users, "Keep only the first N users");
    sc->add_option("--min-user-interactions", data_.min_user_interactions, "k-core threshold for users");
    sc->add_option("--min-item-interactions", data_.min_item_interactions, "k-core threshold for items");
    sc->add_option("--min-rating", data_.min_rating, "Drop ratings below this value before conversion");
  }

  void add_model(CLI::App* sc, bool with_kind) {
    if (with_kind) {
      sc->add_option("--model", model_.model, "ctncf, ncf, mlp, gmf or popularity")
          ->check(CLI::IsMember({"ctncf", "ncf", "mlp", "gmf", "popularity"}))
          ->capture_default_str();
    }
    sc->add_option("--filters", model_.filters, "CNN filters per branch")->capture_default_str();
    sc->add_option("--transformer-layers", model_.transformer_layers, "Transformer layers (0 disables)")
        ->capture_default_str();
    sc->add_option("--mf-mode", model_.mf_mode, "outer or hadamard")
        ->check(CLI::IsMember({"outer", "hadamard"}))
        ->capture_default_str();
    sc->add_option("--mf-dim", model_.mf_dim, "MF embedding size")->capture_default_str();
    sc->add_option("--cnn-embed-dim", model_.cnn_embed_dim, "CNN embedding size")->capture_default_str();
    sc->add_option("--model-dim", model_.model_dim, "Transformer width")->capture_default_str();
    sc->add_option("--heads", model_.heads, "Attention heads")->capture_default_str();
  }

  void add_train(CLI::App* sc) {
    sc->add_option("--lr", train_.lr, "Adam learning rate")->capture_default_str();
    sc->add_option("--l2-mf", train_.l2_mf, "L2 coefficient for MF embeddings")->capture_default_str();
    sc->add_option("--l2-cnn", train_.l2_cnn, "L2 coefficient for convolution filters")->capture_default_str();
    sc->add_option("--negatives", train_.negatives, "Sampled negatives per positive")->capture_default_str();
    sc->add_option("--batch-size", train_.batch_size, "Mini-batch size")->capture_default_str();
    sc->add_option("--epochs", train_.epochs, "Maximum epochs")->capture_default_str();
    sc->add_option("--patience", train_.patience, "Early-stopping patience")->capture_default_str();
    add_candidates(sc);
    sc->add_option("--val-candidates", train_.val_candidates,
                   "Candidate mode for validation (defaults to --candidates)");
  }

  void add_candidates(CLI::App* sc) {
    sc->add_option("--candidates", train_.candidates, "full or sampled:N")->capture_default_str();
  }

  void setup_prepare() {
    auto* sc = app_.add_subcommand("prepare-data", "Parse ratings, split 7:2:1, write split.bin");
    add_common(sc);
    add_data(sc);
    commands_.push_back(sc);
  }

  void setup_train() {
    auto* sc = app_.add_subcommand("train", "Train one model; writes checkpoint.bin and train_log.csv");
    add_common(sc);
    add_data(sc);
    add_model(sc, true);
    add_train(sc);
    commands_.push_back(sc);
  }

  void setup_evaluate() {
    auto* sc = app_.add_subcommand("evaluate", "Evaluate a checkpoint on the test split; writes report.csv");
    add_common(sc);
    add_data(sc);
    sc->add_option("--checkpoint", checkpoint_, "checkpoint.bin from train")->required();
    add_candidates(sc);
    commands_.push_back(sc);
  }

  void setup_compare() {
    auto* sc = app_.add_subcommand("compare", "Train several models three times each; writes report.csv");
    add_common(sc);
    add_data(sc);
    add_model(sc, false);
    add_train(sc);
    sc->add_option("--models", models_, "Models to compare")->delimiter(',')->capture_default_str();
    commands_.push_back(sc);
  }

  void setup_sweep() {
    auto* sc = app_.add_subcommand("sweep", "CTNCF over filters {8,16,32,64,128}; CSV per dataset + SVG");
    add_common(sc);
    add_data(sc);
    add_model(sc, false);
    add_train(sc);
    sc->add_option("--grid", grid_, "Filter counts")->delimiter(',')->capture_default_str();
    commands_.push_back(sc);
  }

  void setup_ablate() {
    auto* sc = app_.add_subcommand("ablate", "CTNCF with 0 vs 2 transformer layers; CSV per dataset + SVG");
    add_common(sc);
    add_data(sc);
    add_model(sc, false);
    add_train(sc);
    commands_.push_back(sc);
  }

  void setup_replay() {
    auto* sc = app_.add_subcommand("replay", "Re-run the command recorded in a run.json manifest");
    sc->add_option("manifest", manifest_, "run.json")->required();
    sc->add_option("--out", common_.out, "New output directory")->required();
    replay_ = sc;
  }

  int dispatch() {
    if (replay_->parsed()) return do_replay();
    for (auto* sc : commands_) {
      if (!sc->parsed()) continue;
      const std::string name = sc->get_name();
      OutputDir out(common_.out);
      json manifest = {{"command", name}, {"argv", args_}, {"seed", common_.seed}};
      if (name == "prepare-data") do_prepare(out, manifest);
      else if (name == "train") do_train(out, manifest);
      else if (name == "evaluate") do_evaluate(out, manifest);
      else if (name == "compare") do_compare(out, manifest);
      else if (name == "sweep") do_sweep(out, manifest);
      else if (name == "ablate") do_ablate(out, manifest);
      out.write_text("run.json", manifest.dump(2) + "\n");
      out.commit();
      return kOk;
    }
    return kUsage;
  }

  json data_json() const {
    return {{"dataset", data_.datasets},   {"format", data_.formats},
            {"data", data_.caches},        {"max_users", data_.max_users},
            {"min_user_interactions", data_.min_user_interactions},
            {"min_item_interactions", data_.min_item_interactions},
            {"min_rating", data_.min_rating ? json(*data_.min_rating) : json(nullptr)}};
  }

  void do_prepare(OutputDir& out, json& manifest) {
    if (data_.datasets.size() != 1) {
      throw std::invalid_argument("prepare-data takes exactly one --dataset");
    }
    const std::string fmt = data_.formats.at(0);
    InteractionLog log = load_filtered(data_.datasets[0], parse_data_format(fmt), data_);
    SplitDataset split = split_721(log, common_.seed, data_.min_rating);
    save_split(out.file("split.bin"), split);
    const ImplicitFeedback fb = to_implicit(log, data_.min_rating);
    std::size_t evaluable = 0, train_n = 0, val_n = 0, test_n = 0;
    for (std::uint32_t u = 0; u < split.num_users; ++u) {
      evaluable += split.evaluable(u);
      train_n += split.train[u].size();
      val_n += split.validation[u].size();
      test_n += split.test[u].size();
    }
    json stats = {{"users", log.users.size()},
                  {"items", log.items.size()},
                  {"ratings", log.records.size()},
                  {"density_percent", 100.0 * log.density()},
                  {"malformed_lines", log.malformed_lines},
                  {"positives", fb.num_positives()},
                  {"train", train_n},
                  {"validation", val_n},
                  {"test", test_n},
                  {"evaluable_users", evaluable}};
    *out_ << "users " << log.users.size() << ", items " << log.items.size() << ", ratings "
          << log.records.size() << ", density " << format_metric(100.0 * log.density())
          << "%, malformed lines " << log.malformed_lines << "\n"
          << "split train/val/test " << train_n << '/' << val_n << '/' << test_n << ", "
          << evaluable << " evaluable users\n";
    manifest["data"] = data_json();
    manifest["stats"] = stats;
  }

  void do_train(OutputDir& out, json& manifest) {
    auto splits = load_splits(data_, common_.seed, info());
    const NamedSplit& ds = splits.front();
    const HyperParams hyper = hyper_from(model_);
    TrainConfig config = train_config_from(train_, common_.seed);
    config.log_path = out.file("train_log.csv");
    const ModelKind kind = parse_model_kind(model_.model);
    std::ostream& log = info();
    const Checkpoint ckpt = train(kind, ds.split, hyper, config, [&](const EpochRecord& r) {
      log << "epoch " << r.epoch << " loss " << format_metric(r.loss) << " val_ndcg10 "
          << format_metric(r.val_ndcg10) << " (" << format_metric(r.elapsed_s) << " s)\n";
    });
    save_checkpoint(out.file("checkpoint.bin"), ckpt);
    *out_ << "trained " << to_string(kind) << " on " << ds.name << ": best epoch " << ckpt.epoch
          << ", validation NDCG@10 " << format_metric(ckpt.best_val_ndcg10) << '\n';
    manifest["data"] = data_json();
    manifest["model"] = model_.model;
    manifest["hyper"] = hyper_json(hyper);
    manifest["train"] = train_json(config);
    manifest["best_epoch"] = ckpt.epoch;
    manifest["best_val_ndcg10"] = ckpt.best_val_ndcg10;
  }

  void do_evaluate(OutputDir& out, json& manifest) {
    require_file(checkpoint_, "checkpoint");
    const Checkpoint ckpt = load_checkpoint(checkpoint_);
    auto splits = load_splits(data_, common_.seed, info());
    const NamedSplit& ds = splits.front();
    if (ds.split.num_users != ckpt.num_users || ds.split.num_items != ckpt.num_items) {
      throw DataError("checkpoint vocabulary (" + std::to_string(ckpt.num_users) + " users, " +
                      std::to_string(ckpt.num_items) + " items) does not match the data");
    }
    auto model = model_from_checkpoint(ckpt);
    EvalReport report = evaluate_test(*model, ds.split, parse_candidate_mode(train_.candidates));
    report.seeds = {ckpt.seed};
    std::ostringstream csv;
    csv << kReportCsvHeader << '\n';
    write_report_rows(csv, to_string(ckpt.kind), ds.name, report);
    out.write_text("report.csv", csv.str());
    print_report_table(*out_, to_string(ckpt.kind), report);
    manifest["data"] = data_json();
    manifest["checkpoint"] = checkpoint_;
    manifest["candidates"] = train_.candidates;
    manifest["users_evaluated"] = report.users_evaluated;
  }

  void do_compare(OutputDir& out, json& manifest) {
    auto splits = load_splits(data_, common_.seed, info());
    const HyperParams hyper = hyper_from(model_);
    const TrainConfig config = train_config_from(train_, common_.seed);
    const CandidateMode cand = parse_candidate_mode(train_.candidates);
    std::ostringstream csv;
    csv << kReportCsvHeader << '\n';
    for (const auto& ds : splits) {
      for (const auto& m : models_) {
        const ModelKind kind = parse_model_kind(m);
        info() << "compare: " << m << " on " << ds.name << '\n';
        const EvalReport r = run_thrice(kind, ds.split, hyper, config, cand);
        write_report_rows(csv, m, ds.name, r);
        print_report_table(*out_, m, r);
      }
    }
    out.write_text("report.csv", csv.str());
    manifest["data"] = data_json();
    manifest["models"] = models_;
    manifest["hyper"] = hyper_json(hyper);
    manifest["train"] = train_json(config);
    manifest["seeds"] = {common_.seed, common_.seed + 1, common_.seed + 2};
  }

  void do_sweep(OutputDir& out, json& manifest) {
    auto splits = load_splits(data_, common_.seed, info());
    const HyperParams hyper = hyper_from(model_);
    const TrainConfig config = train_config_from(train_, common_.seed);
    const CandidateMode cand = parse_candidate_mode(train_.candidates);
    std::vector<SweepSeries> all;
    json failures = json::array();
    for (const auto& ds : splits) {
      info() << "sweep on " << ds.name << '\n';
      SweepSeries s = run_filter_sweep(ds.split, ds.name, hyper, config, cand, grid_);
      std::ostringstream csv;
      write_sweep_csv(csv, s);
      out.write_text("sweep_" + ds.name + ".csv", csv.str());
      for (const auto& r : s.rows) {
        if (r.failed()) failures.push_back({{"dataset", ds.name}, {"filters", r.filters}, {"error", r.error}});
        *out_ << ds.name << " filters=" << r.filters << " recall10=" << format_metric(r.recall10)
              << " ndcg10=" << format_metric(r.ndcg10) << '\n';
      }
      all.push_back(std::move(s));
    }
    out.write_text("sweep_recall10.svg", sweep_svg(all, false));
    out.write_text("sweep_ndcg10.svg", sweep_svg(all, true));
    manifest["data"] = data_json();
    manifest["hyper"] = hyper_json(hyper);
    manifest["train"] = train_json(config);
    manifest["grid"] = grid_;
    manifest["failed_cells"] = failures;
  }

  void do_ablate(OutputDir& out, json& manifest) {
    auto splits = load_splits(data_, common_.seed, info());
    const HyperParams hyper = hyper_from(model_);
    const TrainConfig config = train_config_from(train_, common_.seed);
    const CandidateMode cand = parse_candidate_mode(train_.candidates);
    std::vector<AblationSeries> all;
    json counters = json::object();
    for (const auto& ds : splits) {
      info() << "ablation on " << ds.name << '\n';
      auto rows = run_ablation(ds.split, hyper, config, cand, model_.transformer_layers);
      std::ostringstream csv;
      write_ablation_csv(csv, rows);
      out.write_text("ablate_" + ds.name + ".csv", csv.str());
      for (const auto& r : rows) {
        counters[ds.name][r.variant] = r.attention_calls;
        *out_ << ds.name << " " << r.variant << " (layers=" << r.layers
              << ") recall10=" << format_metric(r.recall10) << " ndcg10=" << format_metric(r.ndcg10)
              << " attention_calls=" << r.attention_calls << '\n';
      }
      all.push_back({ds.name, std::move(rows)});
    }
    out.write_text("ablate_recall10.svg", ablation_svg(all, false));
    out.write_text("ablate_ndcg10.svg", ablation_svg(all, true));
    manifest["data"] = data_json();
    manifest["hyper"] = hyper_json(hyper);
    manifest["train"] = train_json(config);
    manifest["attention_calls"] = counters;
  }

  int do_replay() {
    require_file(manifest_, "manifest");
    std::ifstream in(manifest_);
    json m;
    try {
      m = json::parse(in);
    } catch (const json::exception& e) {
      throw DataError("cannot parse manifest " + manifest_ + ": " + e.what());
    }
    std::vector<std::string> args = m.at("argv").get<std::vector<std::string>>();
    for (std::size_t k = 0; k + 1 < args.size(); ++k) {
      if (args[k] == "--out") args[k + 1] = common_.out;
    }
    App fresh;
    return fresh.run(args, *out_, *err_);
  }

  CLI::App app_{"CTNCF recommender: data preparation, training, evaluation and experiments", "ctncf"};
  std::vector<CLI::App*> commands_;
  CLI::App* replay_ = nullptr;
  std::vector<std::string> args_;
  std::ostream* out_ = &std::cout;
  std::ostream* err_ = &std::cerr;
  std::ostream null_{nullptr};

  Common common_;
  DataOptions data_;
  ModelOptions model_;
  TrainOptions train_;
  std::string checkpoint_;
  std::string manifest_;
  std::vector<std::string> models_ = {"popularity", "mlp", "gmf", "ncf", "ctncf"};
  std::vector<std::size_t> grid_ = kFilterGrid;
};

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  App app;
  return app.run(args, out, err);
}

}  // namespace ctncf::cli
