// in2core: gradient-manifest influence scoring, coreset selection, layer
// budgeting, and coverage analysis over toy training runs.
//
// in2core {toy|influence|select|layer-budget|coverage} [flags] --config <path> --out <dir>
//
// Flags always win over --config values. Exit statuses: 0 success,
// 2 config/validation error, 3 data format error, 4 numerical error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "in2core/coreset.hpp"
#include "in2core/coverage.hpp"
#include "in2core/error.hpp"
#include "in2core/influence.hpp"
#include "in2core/layer_budget.hpp"
#include "in2core/stats.hpp"
#include "in2core/text.hpp"
#include "in2core/toy_harness.hpp"

namespace fs = std::filesystem;
using namespace in2core;

namespace {

// Declarative config: a flat JSON object whose keys are long flag names
// without the leading dashes. Explicit flags override config values; unknown
// keys are rejected.
class Cfg {
 public:
  void load(const std::string& path) {
    if (path.empty()) return;
    try {
      json_ = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::invalid_argument, std::string("bad config json: ") + e.what());
    }
    if (!json_.is_object())
      fail(ErrorCode::invalid_argument, "config must be a json object");
  }

  template <class T>
  void maybe(CLI::Option* opt, const char* key, T& target) {
    bool present = false;
    maybe_flagged(opt, key, target, present);
  }

  template <class T>
  void maybe_flagged(CLI::Option* opt, const char* key, T& target, bool& present) {
    if (opt && opt->count() > 0) present = true;
    if (!json_.contains(key)) return;
    consumed_.insert(key);
    if (opt && opt->count() > 0) return;
    try {
      target = json_[key].get<T>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::invalid_argument,
           std::string("config key '") + key + "': " + e.what());
    }
    present = true;
  }

  void finish() const {
    for (const auto& item : json_.items())
      if (!consumed_.count(item.key()))
        fail(ErrorCode::invalid_argument, "unknown config key: " + item.key());
  }

 private:
  nlohmann::json json_ = nlohmann::json::object();
  std::set<std::string> consumed_;
};

void require(bool ok, const std::string& message) {
  if (!ok) fail(ErrorCode::invalid_argument, message);
}

fs::path ensure_out_dir(const std::string& out) {
  require(!out.empty(), "--out directory is required");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) fail(ErrorCode::io_failure, "cannot create output dir " + out + ": " + ec.message());
  return fs::path(out);
}

ToyDataset load_dataset(const std::string& path) {
  return dataset_from_json(read_text_file(path));
}

ToyModel load_model(const std::string& path) {
  return model_from_json(read_text_file(path));
}

// ---- shared estimator flags ------------------------------------------------

struct EstimatorOpts {
  std::string estimator = "datainf";
  std::string damping_mode = "datainf_scaled";
  double damping = 0.01;
  int32_t layer_limit = 0;
  std::string model_path;
  std::string model_data_path;
  CLI::Option* estimator_opt = nullptr;
  CLI::Option* damping_mode_opt = nullptr;
  CLI::Option* damping_opt = nullptr;
  CLI::Option* layer_limit_opt = nullptr;
  CLI::Option* model_opt = nullptr;
  CLI::Option* model_data_opt = nullptr;
};

void add_estimator_flags(CLI::App* cmd, EstimatorOpts& e, const char* default_estimator) {
  e.estimator = default_estimator;
  e.estimator_opt = cmd->add_option("--estimator", e.estimator,
                                    "exact | identity | datainf (default: " +
                                        std::string(default_estimator) + ")");
  e.damping_mode_opt = cmd->add_option("--damping-mode", e.damping_mode,
                                       "fixed | datainf_scaled");
  e.damping_opt = cmd->add_option("--damping", e.damping, "damping value (fixed mode, exact)");
  e.layer_limit_opt =
      cmd->add_option("--layer-limit", e.layer_limit, "use only the first k layers");
  e.model_opt = cmd->add_option("--model", e.model_path,
                                "toy model json (curvature for the exact estimator)");
  e.model_data_opt = cmd->add_option("--model-data", e.model_data_path,
                                     "dataset json the curvature is computed over");
}

struct ResolvedEstimator {
  InfluenceConfig cfg;
  std::optional<MatD> hessian;
  const MatD* hessian_ptr() const { return hessian ? &*hessian : nullptr; }
};

ResolvedEstimator resolve_estimator(EstimatorOpts& e, Cfg& cfg) {
  cfg.maybe(e.estimator_opt, "estimator", e.estimator);
  cfg.maybe(e.damping_mode_opt, "damping-mode", e.damping_mode);
  cfg.maybe(e.damping_opt, "damping", e.damping);
  bool has_limit = false;
  cfg.maybe_flagged(e.layer_limit_opt, "layer-limit", e.layer_limit, has_limit);
  cfg.maybe(e.model_opt, "model", e.model_path);
  cfg.maybe(e.model_data_opt, "model-data", e.model_data_path);

  ResolvedEstimator out;
  out.cfg.estimator = estimator_from_string(e.estimator);
  out.cfg.damping_mode = damping_mode_from_string(e.damping_mode);
  out.cfg.damping_value = e.damping;
  if (has_limit) out.cfg.layer_limit = e.layer_limit;

  if (out.cfg.estimator == Estimator::exact) {
    require(!e.model_path.empty() && !e.model_data_path.empty(),
            "the exact estimator needs --model and --model-data to compute curvature");
    const ToyModel model = load_model(e.model_path);
    const ToyDataset data = load_dataset(e.model_data_path);
    out.hessian = hessian_of_mean_loss(model, data);
  }
  return out;
}

// Scoring gradients from two different parameter snapshots is silently wrong,
// so refuse when both manifests carry a tag and they disagree.
void check_manifest_tags(const GradientManifest& train, const GradientManifest& val) {
  if (!train.model_tag.empty() && !val.model_tag.empty() &&
      train.model_tag != val.model_tag)
    fail(ErrorCode::invalid_argument,
         "model_tag mismatch between manifests (train " + train.model_tag + " vs val " +
             val.model_tag + ")");
}

std::vector<std::string> estimator_comments(const ResolvedEstimator& r) {
  std::vector<std::string> c;
  c.push_back(std::string("estimator=") + to_string(r.cfg.estimator));
  c.push_back(std::string("damping_mode=") + to_string(r.cfg.damping_mode));
  c.push_back("damping=" + fmt_double(r.cfg.damping_value));
  c.push_back("layer_limit=" +
              (r.cfg.layer_limit ? std::to_string(*r.cfg.layer_limit) : std::string("all")));
  return c;
}

// ---- toy generate ----------------------------------------------------------

struct GenOpts {
  std::string config, out, name = "dataset";
  std::string task = "cluster_classification";
  int64_t n = 100;
  uint64_t seed = 0;
  uint64_t world_seed = 0;
  int32_t classes = 3, feature_dim = 4;
  double center_spread = 2.0, cluster_noise = 0.5, shift = 0.0, label_noise = 0.0;
  int32_t vocab = 6, min_len = 2, max_len = 20;
  std::string id_prefix = "ex";
  CLI::Option *task_o{}, *n_o{}, *seed_o{}, *world_seed_o{}, *classes_o{}, *feature_dim_o{},
      *center_spread_o{}, *cluster_noise_o{}, *shift_o{}, *label_noise_o{}, *vocab_o{},
      *min_len_o{}, *max_len_o{}, *id_prefix_o{}, *name_o{}, *out_o{};
};

void run_toy_generate(GenOpts& o) {
  Cfg cfg;
  cfg.load(o.config);
  cfg.maybe(o.task_o, "task", o.task);
  cfg.maybe(o.n_o, "n", o.n);
  cfg.maybe(o.seed_o, "seed", o.seed);
  bool has_world = false;
  cfg.maybe_flagged(o.world_seed_o, "world-seed", o.world_seed, has_world);
  cfg.maybe(o.classes_o, "classes", o.classes);
  cfg.maybe(o.feature_dim_o, "feature-dim", o.feature_dim);
  cfg.maybe(o.center_spread_o, "center-spread", o.center_spread);
  cfg.maybe(o.cluster_noise_o, "cluster-noise", o.cluster_noise);
  cfg.maybe(o.shift_o, "shift", o.shift);
  cfg.maybe(o.label_noise_o, "label-noise", o.label_noise);
  cfg.maybe(o.vocab_o, "vocab", o.vocab);
  cfg.maybe(o.min_len_o, "min-len", o.min_len);
  cfg.maybe(o.max_len_o, "max-len", o.max_len);
  cfg.maybe(o.id_prefix_o, "id-prefix", o.id_prefix);
  cfg.maybe(o.name_o, "name", o.name);
  cfg.maybe(o.out_o, "out", o.out);
  cfg.finish();

  DatasetParams p;
  p.task = task_from_string(o.task);
  p.n = o.n;
  p.seed = o.seed;
  if (has_world) p.world_seed = o.world_seed;
  p.classes = o.classes;
  p.feature_dim = o.feature_dim;
  p.center_spread = o.center_spread;
  p.cluster_noise = o.cluster_noise;
  p.shift = o.shift;
  p.label_noise = o.label_noise;
  p.vocab = o.vocab;
  p.min_len = o.min_len;
  p.max_len = o.max_len;
  p.id_prefix = o.id_prefix;

  const ToyDataset data = generate_dataset(p);
  const fs::path dir = ensure_out_dir(o.out);
  const fs::path path = dir / (o.name + ".json");
  write_text_file(path, dataset_to_json(data));
  std::cout << "wrote " << path.string() << " (" << data.size() << " examples, task "
            << to_string(data.task) << ")\n";
}

// ---- toy train -------------------------------------------------------------

struct TrainOpts {
  std::string config, out, name = "model";
  std::string data_path;
  int32_t layers = 3, hidden = 8, rank = 2;
  double lr = 0.1, l2 = 0.01;
  int32_t epochs = 100;
  uint64_t seed = 0;
  CLI::Option *data_o{}, *layers_o{}, *hidden_o{}, *rank_o{}, *lr_o{}, *epochs_o{}, *seed_o{},
      *l2_o{}, *name_o{}, *out_o{};
};

void run_toy_train(TrainOpts& o) {
  Cfg cfg;
  cfg.load(o.config);
  cfg.maybe(o.data_o, "data", o.data_path);
  cfg.maybe(o.layers_o, "layers", o.layers);
  cfg.maybe(o.hidden_o, "hidden", o.hidden);
  cfg.maybe(o.rank_o, "rank", o.rank);
  cfg.maybe(o.lr_o, "lr", o.lr);
  cfg.maybe(o.epochs_o, "epochs", o.epochs);
  cfg.maybe(o.seed_o, "seed", o.seed);
  cfg.maybe(o.l2_o, "l2", o.l2);
  cfg.maybe(o.name_o, "name", o.name);
  cfg.maybe(o.out_o, "out", o.out);
  cfg.finish();
  require(!o.data_path.empty(), "--data is required");

  const ToyDataset data = load_dataset(o.data_path);
  ModelConfig mc;
  mc.layers = o.layers;
  mc.hidden = o.hidden;
  mc.rank = o.rank;
  mc.seed = o.seed;
  const ToyModel base = make_toy_model(data, mc);

  TrainConfig tc;
  tc.learning_rate = o.lr;
  tc.epochs = o.epochs;
  tc.seed = o.seed;
  tc.l2_damping = o.l2;

  const double initial = mean_loss(base, data);
  const ToyModel trained = train(base, data, tc);
  const double final_loss = mean_loss(trained, data);

  const fs::path dir = ensure_out_dir(o.out);
  const fs::path path = dir / (o.name + ".json");
  write_text_file(path, model_to_json(trained));
  std::cout << "wrote " << path.string() << "\n";
  std::cout << "mean_loss_initial=" << fmt_double(initial) << "\n";
  std::cout << "mean_loss_final=" << fmt_double(final_loss) << "\n";
  if (data.task == Task::markov_next_token)
    std::cout << "perplexity=" << fmt_double(perplexity(trained, data)) << "\n";
  else
    std::cout << "accuracy=" << fmt_double(accuracy(trained, data)) << "\n";
}

// ---- toy grads -------------------------------------------------------------

struct GradsOpts {
  std::string config, out, name = "grads";
  std::string model_path, data_path, split = "train";
  std::string created_at = "1970-01-01T00:00:00Z";
  CLI::Option *model_o{}, *data_o{}, *split_o{}, *created_o{}, *name_o{}, *out_o{};
};

void run_toy_grads(GradsOpts& o) {
  Cfg cfg;
  cfg.load(o.config);
  cfg.maybe(o.model_o, "model", o.model_path);
  cfg.maybe(o.data_o, "data", o.data_path);
  cfg.maybe(o.split_o, "split", o.split);
  cfg.maybe(o.created_o, "created-at", o.created_at);
  cfg.maybe(o.name_o, "name", o.name);
  cfg.maybe(o.out_o, "out", o.out);
  cfg.finish();
  require(!o.model_path.empty(), "--model is required");
  require(!o.data_path.empty(), "--data is required");

  const ToyModel model = load_model(o.model_path);
  const ToyDataset data = load_dataset(o.data_path);
  GradientManifest m = per_example_gradients(model, data, split_from_string(o.split));
  m.created_at = o.created_at;

  const fs::path dir = ensure_out_dir(o.out);
  const fs::path path = dir / (o.name + ".in2g");
  const uint64_t bytes = write_manifest(m, path);
  std::cout << "wrote " << path.string() << " (" << m.size() << " examples, "
            << m.layer_count() << " layers, total dim " << m.total_dim() << ", " << bytes
            << " bytes)\n";
}

// ---- toy loo ---------------------------------------------------------------

struct LooOpts {
  std::string config, out, name = "loo";
  std::string data_path, val_path;
  int32_t layers = 3, hidden = 8, rank = 2;
  double lr = 0.1, l2 = 0.01;
  int32_t epochs = 100;
  uint64_t seed = 0;
  CLI::Option *data_o{}, *val_o{}, *layers_o{}, *hidden_o{}, *rank_o{}, *lr_o{}, *epochs_o{},
      *seed_o{}, *l2_o{}, *name_o{}, *out_o{};
};

void run_toy_loo(LooOpts& o) {
  Cfg cfg;
  cfg.load(o.config);
  cfg.maybe(o.data_o, "data", o.data_path);
  cfg.maybe(o.val_o, "val", o.val_path);
  cfg.maybe(o.layers_o, "layers", o.layers);
  cfg.maybe(o.hidden_o, "hidden", o.hidden);
  cfg.maybe(o.rank_o, "rank", o.rank);
  cfg.maybe(o.lr_o, "lr", o.lr);
  cfg.maybe(o.epochs_o, "epochs", o.epochs);
  cfg.maybe(o.seed_o, "seed", o.seed);
  cfg.maybe(o.l2_o, "l2", o.l2);
  cfg.maybe(o.name_o, "name", o.name);
  cfg.maybe(o.out_o, "out", o.out);
  cfg.finish();
  require(!o.data_path.empty(), "--data is required");
  require(!o.val_path.empty(), "--val is required");

  const ToyDataset data = load_dataset(o.data_path);
  const ToyDataset val = load_dataset(o.val_path);
  if (data.size() > 50)
    std::cout << "warning: leave-one-out retrains one model per example; n=" << data.size()
              << " will be slow\n";

  ModelConfig mc;
  mc.layers = o.layers;
  mc.hidden = o.hidden;
  mc.rank = o.rank;
  mc.seed = o.seed;
  const ToyModel base = make_toy_model(data, mc);

  TrainConfig tc;
  tc.learning_rate = o.lr;
  tc.epochs = o.epochs;
  tc.seed = o.seed;
  tc.l2_damping = o.l2;

  const auto deltas = loo_oracle(data, val, tc, base);
  std::string csv = "example_id,loo_delta\n";
  for (const auto& [id, d] : deltas) csv += id + "," + fmt_double(d) + "\n";

  const fs::path dir = ensure_out_dir(o.out);
  const fs::path path = dir / (o.name + ".csv");
  write_text_file(path, csv);
  std::cout << "wrote " << path.string() << " (" << deltas.size() << " rows)\n";
}

// ---- influence -------------------------------------------------------------

struct InfluenceOpts {
  std::string config, out, name = "influence";
  std::string train_path, val_path;
  EstimatorOpts est;
  CLI::Option *train_o{}, *val_o{}, *name_o{}, *out_o{};
};

void run_influence(InfluenceOpts& o) {
  Cfg cfg;
  cfg.load(o.config);
  cfg.maybe(o.train_o, "train", o.train_path);
  cfg.maybe(o.val_o, "val", o.val_path);
  cfg.maybe(o.name_o, "name", o.name);
  cfg.maybe(o.out_o, "out", o.out);
  ResolvedEstimator est = resolve_estimator(o.est, cfg);
  cfg.finish();
  require(!o.train_path.empty(), "--train is required");
  require(!o.val_path.empty(), "--val is required");

  const GradientManifest train_m = read_manifest(o.train_path);
  const GradientManifest val_m = read_manifest(o.val_path);
  check_manifest_tags(train_m, val_m);
  const auto records = influence_against_set(train_m, val_m, est.cfg, est.hessian_ptr());

  auto comments = estimator_comments(est);
  comments.push_back("train=" + o.train_path + " n=" + std::to_string(train_m.size()));
  comments.push_back("val=" + o.val_path + " n=" + std::to_string(val_m.size()));

  const fs::path dir = ensure_out_dir(o.out);
  const fs::path csv_path = dir / (o.name + ".csv");
  write_text_file(csv_path, records_to_csv(records, comments));
  write_text_file(dir / (o.name + ".json"), records_to_json(records));
  std::cout << "wrote " << csv_path.string() << " (" << records.size() << " rows)\n";
}

// ---- select ----------------------------------------------------------------

struct SelectOpts {
  std::string config, out;
  std::string records_path, train_path, val_path;
  std::string strategy = "proponents";
  double fraction = 0.0;
  int64_t count = 0;
  uint64_t seed = 0;
  bool compare = false;
  int32_t bins = 50;
  EstimatorOpts est;
  CLI::Option *records_o{}, *train_o{}, *val_o{}, *strategy_o{}, *fraction_o{}, *count_o{},
      *seed_o{}, *compare_o{}, *bins_o{}, *out_o{};
};

void run_select(SelectOpts& o) {
  Cfg cfg;
  cfg.load(o.config);
  cfg.maybe(o.records_o, "records", o.records_path);
  cfg.maybe(o.train_o, "train", o.train_path);
  cfg.maybe(o.val_o, "val", o.val_path);
  cfg.maybe(o.strategy_o, "strategy", o.strategy);
  bool has_fraction = false, has_count = false;
  cfg.maybe_flagged(o.fraction_o, "fraction", o.fraction, has_fraction);
  cfg.maybe_flagged(o.count_o, "count", o.count, has_count);
  cfg.maybe(o.seed_o, "seed", o.seed);
  bool compare_flag = o.compare;
  cfg.maybe(o.compare_o, "compare", compare_flag);
  cfg.maybe(o.bins_o, "bins", o.bins);
  cfg.maybe(o.out_o, "out", o.out);

  CoresetSpec spec;
  spec.strategy = strategy_from_string(o.strategy);
  if (has_fraction) spec.fraction = o.fraction;
  if (has_count) spec.count = o.count;
  spec.seed = o.seed;

  std::vector<InfluenceRecord> records;
  if (!o.records_path.empty()) {
    cfg.finish();
    records = records_from_csv(read_text_file(o.records_path));
  } else {
    ResolvedEstimator est = resolve_estimator(o.est, cfg);
    cfg.finish();
    require(!o.train_path.empty() && !o.val_path.empty(),
            "either --records or both --train and --val are required");
    const GradientManifest train_m = read_manifest(o.train_path);
    const GradientManifest val_m = read_manifest(o.val_path);
    check_manifest_tags(train_m, val_m);
    records = influence_against_set(train_m, val_m, est.cfg, est.hessian_ptr());
  }

  const CoresetResult result = select_coreset(records, spec);
  const DistributionStats stats = distribution_stats(records, o.bins);

  const fs::path dir = ensure_out_dir(o.out);
  write_text_file(dir / "coreset.json", coreset_to_json(result));
  write_text_file(dir / "coreset_ids.txt", id_list_to_text(result.selected_ids));
  write_text_file(dir / "histogram.csv", histogram_to_csv(stats));
  std::cout << "selected " << result.selected_ids.size() << " of " << records.size()
            << " (" << to_string(spec.strategy) << ")\n";

  if (compare_flag) {
    const int64_t count = static_cast<int64_t>(result.selected_ids.size());
    nlohmann::json cmp;
    std::map<std::string, std::vector<std::string>> sets;
    for (Strategy s : {Strategy::proponents, Strategy::opponents, Strategy::minimum,
                       Strategy::random}) {
      CoresetSpec cs;
      cs.strategy = s;
      cs.count = count;
      cs.seed = o.seed;
      sets[to_string(s)] = select_coreset(records, cs).selected_ids;
    }
    nlohmann::json sel;
    for (const auto& [name, ids] : sets) sel[name] = ids;
    cmp["selections"] = std::move(sel);
    nlohmann::json overlaps;
    const std::vector<std::string> names = {"proponents", "opponents", "minimum", "random"};
    for (size_t i = 0; i < names.size(); ++i)
      for (size_t j = i + 1; j < names.size(); ++j)
        overlaps[names[i] + "_" + names[j]] =
            overlap_coefficient(sets[names[i]], sets[names[j]]);
    cmp["overlaps"] = std::move(overlaps);
    if (stats.skewness) cmp["skewness"] = *stats.skewness;
    cmp["count"] = count;
    write_text_file(dir / "comparison.json", cmp.dump(2) + "\n");
    std::cout << "wrote " << (dir / "comparison.json").string() << "\n";
  }
}

// ---- layer-budget ----------------------------------------------------------

struct BudgetOpts {
  std::string config, out;
  std::string train_path, val_path;
  std::string ks_text;
  uint64_t budget_bytes = UINT64_MAX;
  double min_rho = 0.0;
  EstimatorOpts est;
  CLI::Option *train_o{}, *val_o{}, *ks_o{}, *budget_o{}, *min_rho_o{}, *out_o{};
};

std::vector<int32_t> parse_ks(const std::string& text) {
  std::vector<int32_t> out;
  std::string cur;
  for (char c : text + ",") {
    if (c == ',') {
      if (!cur.empty()) {
        try {
          out.push_back(std::stoi(cur));
        } catch (const std::exception&) {
          fail(ErrorCode::invalid_argument, "bad k value: " + cur);
        }
        cur.clear();
      }
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  return out;
}

void run_layer_budget(BudgetOpts& o) {
  Cfg cfg;
  cfg.load(o.config);
  cfg.maybe(o.train_o, "train", o.train_path);
  cfg.maybe(o.val_o, "val", o.val_path);
  cfg.maybe(o.ks_o, "ks", o.ks_text);
  cfg.maybe(o.budget_o, "budget-bytes", o.budget_bytes);
  bool has_min_rho = false;
  cfg.maybe_flagged(o.min_rho_o, "min-rho", o.min_rho, has_min_rho);
  cfg.maybe(o.out_o, "out", o.out);
  ResolvedEstimator est = resolve_estimator(o.est, cfg);
  cfg.finish();
  require(!o.train_path.empty(), "--train is required");
  require(!o.val_path.empty(), "--val is required");
  require(!o.ks_text.empty(), "--ks is required (comma separated, e.g. 1,2,3)");

  const std::vector<int32_t> ks = parse_ks(o.ks_text);
  std::set<int32_t> unique_ks(ks.begin(), ks.end());
  if (unique_ks.size() != ks.size())
    std::cout << "warning: duplicate k values collapsed\n";

  const GradientManifest train_m = read_manifest(o.train_path);
  const GradientManifest val_m = read_manifest(o.val_path);
  check_manifest_tags(train_m, val_m);
  const LayerBudgetReport report = profile_layer_budget(
      train_m, val_m, est.cfg, ks, o.budget_bytes, est.hessian_ptr(),
      has_min_rho ? std::optional<double>(o.min_rho) : std::nullopt);

  const fs::path dir = ensure_out_dir(o.out);
  write_text_file(dir / "layer_budget.csv", report_to_csv(report));
  write_text_file(dir / "layer_budget.json", report_to_json(report));
  write_text_file(dir / "layer_budget_plot.csv", report_to_plot_csv(report));
  std::cout << "chosen_k=" << report.chosen_k << "\n";
}

// ---- coverage --------------------------------------------------------------

struct CoverageCacheOpts {
  std::string config, out, name = "cache";
  std::string train_path;
  CLI::Option *train_o{}, *name_o{}, *out_o{};
};

void run_coverage_cache(CoverageCacheOpts& o) {
  Cfg cfg;
  cfg.load(o.config);
  cfg.maybe(o.train_o, "train", o.train_path);
  cfg.maybe(o.name_o, "name", o.name);
  cfg.maybe(o.out_o, "out", o.out);
  cfg.finish();
  require(!o.train_path.empty(), "--train is required");

  const GradientManifest train_m = read_manifest(o.train_path);
  const GradientCache cache = build_cache(train_m);
  const fs::path dir = ensure_out_dir(o.out);
  const fs::path path = dir / (o.name + ".in2g");
  write_cache(cache, path);
  std::cout << "wrote " << path.string() << " (n_train=" << cache.n_train << ", model_tag="
            << cache.model_tag << ")\n";
}

void check_cache_tag(const GradientCache& cache, const GradientManifest& test) {
  if (!cache.model_tag.empty() && !test.model_tag.empty() &&
      cache.model_tag != test.model_tag)
    fail(ErrorCode::invalid_argument,
         "stale cache: model_tag mismatch (cache " + cache.model_tag + " vs test " +
             test.model_tag + ")");
}

struct CoverageScoreOpts {
  std::string config, out, name = "coverage_scores";
  std::string cache_path, test_path, train_manifest_path;
  EstimatorOpts est;
  CLI::Option *cache_o{}, *test_o{}, *train_manifest_o{}, *name_o{}, *out_o{};
};

void run_coverage_score(CoverageScoreOpts& o) {
  Cfg cfg;
  cfg.load(o.config);
  cfg.maybe(o.cache_o, "cache", o.cache_path);
  cfg.maybe(o.test_o, "test", o.test_path);
  cfg.maybe(o.train_manifest_o, "train-manifest", o.train_manifest_path);
  cfg.maybe(o.name_o, "name", o.name);
  cfg.maybe(o.out_o, "out", o.out);
  ResolvedEstimator est = resolve_estimator(o.est, cfg);
  cfg.finish();
  require(!o.cache_path.empty(), "--cache is required");
  require(!o.test_path.empty(), "--test is required");

  const GradientCache cache = read_cache(o.cache_path);
  const GradientManifest test_m = read_manifest(o.test_path);
  check_cache_tag(cache, test_m);

  std::optional<GradientManifest> train_m;
  if (!o.train_manifest_path.empty()) train_m = read_manifest(o.train_manifest_path);

  std::vector<const ExampleGradient*> order;
  for (const auto& ex : test_m.examples) order.push_back(&ex);
  std::sort(order.begin(), order.end(),
            [](const ExampleGradient* a, const ExampleGradient* b) {
              return a->example_id < b->example_id;
            });

  std::string csv = "test_id,coverage\n";
  for (const ExampleGradient* ex : order) {
    const double score = coverage_score(cache, *ex, est.cfg,
                                        train_m ? &*train_m : nullptr, est.hessian_ptr());
    const std::string row = ex->example_id + "," + fmt_double(score);
    std::cout << row << "\n";
    csv += row + "\n";
  }

  const fs::path dir = ensure_out_dir(o.out);
  const fs::path path = dir / (o.name + ".csv");
  write_text_file(path, csv);
  std::cout << "wrote " << path.string() << " (" << order.size() << " rows)\n";
}

struct CoverageReportOpts {
  std::string config, out;
  std::string cache_path, test_path, train_manifest_path, losses_path, embeddings_path;
  double length_bias_threshold = 0.3;
  EstimatorOpts est;
  CLI::Option *cache_o{}, *test_o{}, *train_manifest_o{}, *losses_o{}, *embeddings_o{},
      *threshold_o{}, *out_o{};
};

std::vector<std::pair<std::string, double>> parse_losses(const std::string& text) {
  std::vector<std::pair<std::string, double>> out;
  std::istringstream in(text);
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != "test_id,loss")
        fail(ErrorCode::invalid_argument, "losses csv must start with 'test_id,loss'");
      header_seen = true;
      continue;
    }
    const size_t c = line.find(',');
    if (c == std::string::npos)
      fail(ErrorCode::invalid_argument, "bad losses row: " + line);
    try {
      out.emplace_back(line.substr(0, c), std::stod(line.substr(c + 1)));
    } catch (const std::exception&) {
      fail(ErrorCode::invalid_argument, "bad losses row: " + line);
    }
  }
  if (!header_seen) fail(ErrorCode::invalid_argument, "losses csv has no header");
  return out;
}

EmbeddingSet parse_embeddings(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("bad embeddings json: ") + e.what());
  }
  EmbeddingSet out;
  try {
    for (const auto& row : j.at("train")) {
      VecD v(static_cast<int64_t>(row.size()));
      for (size_t i = 0; i < row.size(); ++i) v[static_cast<int64_t>(i)] = row[i].get<double>();
      out.train.push_back(std::move(v));
    }
    for (const auto& item : j.at("test").items()) {
      const auto& row = item.value();
      VecD v(static_cast<int64_t>(row.size()));
      for (size_t i = 0; i < row.size(); ++i) v[static_cast<int64_t>(i)] = row[i].get<double>();
      out.test[item.key()] = std::move(v);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("bad embeddings json: ") + e.what());
  }
  return out;
}

void run_coverage_report(CoverageReportOpts& o) {
  Cfg cfg;
  cfg.load(o.config);
  cfg.maybe(o.cache_o, "cache", o.cache_path);
  cfg.maybe(o.test_o, "test", o.test_path);
  cfg.maybe(o.train_manifest_o, "train-manifest", o.train_manifest_path);
  cfg.maybe(o.losses_o, "losses", o.losses_path);
  cfg.maybe(o.embeddings_o, "embeddings", o.embeddings_path);
  cfg.maybe(o.threshold_o, "length-bias-threshold", o.length_bias_threshold);
  cfg.maybe(o.out_o, "out", o.out);
  ResolvedEstimator est = resolve_estimator(o.est, cfg);
  cfg.finish();
  require(!o.cache_path.empty(), "--cache is required");
  require(!o.test_path.empty(), "--test is required");

  const GradientCache cache = read_cache(o.cache_path);
  const GradientManifest test_m = read_manifest(o.test_path);
  check_cache_tag(cache, test_m);

  std::optional<GradientManifest> train_m;
  if (!o.train_manifest_path.empty()) train_m = read_manifest(o.train_manifest_path);

  std::vector<std::pair<std::string, double>> losses;
  if (!o.losses_path.empty()) {
    losses = parse_losses(read_text_file(o.losses_path));
  } else {
    for (const auto& ex : test_m.examples)
      losses.emplace_back(ex.example_id, static_cast<double>(ex.loss_value));
  }

  std::optional<EmbeddingSet> embeddings;
  if (!o.embeddings_path.empty())
    embeddings = parse_embeddings(read_text_file(o.embeddings_path));

  const CoverageReport report =
      coverage_report(cache, test_m, losses, est.cfg, embeddings ? &*embeddings : nullptr,
                      train_m ? &*train_m : nullptr, est.hessian_ptr());

  const fs::path dir = ensure_out_dir(o.out);
  write_text_file(dir / "coverage_report.csv", coverage_to_csv(report));
  write_text_file(dir / "coverage_report.json", coverage_to_json(report));
  write_text_file(dir / "scatter_influence.csv", scatter_csv(report, false));
  if (embeddings)
    write_text_file(dir / "scatter_similarity.csv", scatter_csv(report, true));

  auto show = [](const std::optional<double>& v) {
    return v ? fmt_double(*v) : std::string("undefined");
  };
  std::cout << "influence_loss_corr=" << show(report.influence_loss_corr) << "\n";
  std::cout << "similarity_loss_corr=" << show(report.similarity_loss_corr) << "\n";

  // Length bias: only meaningful when sequence lengths actually vary.
  std::set<uint32_t> distinct;
  std::vector<std::pair<std::string, int64_t>> counts;
  std::vector<std::pair<std::string, double>> inf_pairs;
  for (const auto& row : report.rows) {
    distinct.insert(row.token_count);
    counts.emplace_back(row.test_id, static_cast<int64_t>(row.token_count));
    inf_pairs.emplace_back(row.test_id, row.influence);
  }
  if (distinct.size() < 2) {
    std::cout << "length_bias=skipped (token counts constant)\n";
  } else {
    const double bias = length_bias_diagnostic(rank_records(inf_pairs), counts);
    std::cout << "length_bias=" << fmt_double(bias) << "\n";
    if (std::fabs(bias) > o.length_bias_threshold)
      std::cout << "warning: influence magnitude correlates with sequence length (|"
                << fmt_double(bias) << "| > " << fmt_double(o.length_bias_threshold)
                << "); averaged token gradients may be washing out long examples\n";
  }
  std::cout << "wrote " << (dir / "coverage_report.csv").string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "influence scoring, coreset selection, layer budgeting and coverage analysis "
      "over gradient manifests"};
  app.require_subcommand(1);

  // toy
  auto* toy = app.add_subcommand("toy", "toy data, models, gradients, retraining oracle");
  toy->require_subcommand(1);

  auto gen = std::make_shared<GenOpts>();
  {
    auto* c = toy->add_subcommand("generate", "write a dataset json");
    c->add_option("--config", gen->config, "json config file");
    gen->task_o = c->add_option("--task", gen->task, "cluster_classification | markov_next_token");
    gen->n_o = c->add_option("--n", gen->n, "number of examples");
    gen->seed_o = c->add_option("--seed", gen->seed, "draw seed");
    gen->world_seed_o = c->add_option("--world-seed", gen->world_seed,
                                      "centers/chain seed (defaults to --seed)");
    gen->classes_o = c->add_option("--classes", gen->classes, "cluster count");
    gen->feature_dim_o = c->add_option("--feature-dim", gen->feature_dim, "feature width");
    gen->center_spread_o = c->add_option("--center-spread", gen->center_spread, "center scale");
    gen->cluster_noise_o = c->add_option("--cluster-noise", gen->cluster_noise, "within-cluster noise");
    gen->shift_o = c->add_option("--shift", gen->shift, "offset every center (distribution shift)");
    gen->label_noise_o = c->add_option("--label-noise", gen->label_noise,
                                       "probability a label is redrawn uniformly");
    gen->vocab_o = c->add_option("--vocab", gen->vocab, "token vocabulary size");
    gen->min_len_o = c->add_option("--min-len", gen->min_len, "min sequence length");
    gen->max_len_o = c->add_option("--max-len", gen->max_len, "max sequence length");
    gen->id_prefix_o = c->add_option("--id-prefix", gen->id_prefix, "example id prefix");
    gen->name_o = c->add_option("--name", gen->name, "output file stem");
    gen->out_o = c->add_option("--out", gen->out, "output directory");
    c->callback([gen] { run_toy_generate(*gen); });
  }

  auto tr = std::make_shared<TrainOpts>();
  {
    auto* c = toy->add_subcommand("train", "full-batch gradient descent on the adapters");
    c->add_option("--config", tr->config, "json config file");
    tr->data_o = c->add_option("--data", tr->data_path, "dataset json");
    tr->layers_o = c->add_option("--layers", tr->layers, "layer count");
    tr->hidden_o = c->add_option("--hidden", tr->hidden, "hidden width");
    tr->rank_o = c->add_option("--rank", tr->rank, "adapter rank");
    tr->lr_o = c->add_option("--lr", tr->lr, "learning rate");
    tr->epochs_o = c->add_option("--epochs", tr->epochs, "epochs");
    tr->seed_o = c->add_option("--seed", tr->seed, "model init seed");
    tr->l2_o = c->add_option("--l2", tr->l2, "l2 damping on the adapters");
    tr->name_o = c->add_option("--name", tr->name, "output file stem");
    tr->out_o = c->add_option("--out", tr->out, "output directory");
    c->callback([tr] { run_toy_train(*tr); });
  }

  auto gr = std::make_shared<GradsOpts>();
  {
    auto* c = toy->add_subcommand("grads", "per-example adapter gradients -> manifest");
    c->add_option("--config", gr->config, "json config file");
    gr->model_o = c->add_option("--model", gr->model_path, "model json");
    gr->data_o = c->add_option("--data", gr->data_path, "dataset json");
    gr->split_o = c->add_option("--split", gr->split, "train | validation | test");
    gr->created_o = c->add_option("--created-at", gr->created_at, "timestamp stored in the sidecar");
    gr->name_o = c->add_option("--name", gr->name, "output file stem");
    gr->out_o = c->add_option("--out", gr->out, "output directory");
    c->callback([gr] { run_toy_grads(*gr); });
  }

  auto lo = std::make_shared<LooOpts>();
  {
    auto* c = toy->add_subcommand("loo", "leave-one-out retraining deltas");
    c->add_option("--config", lo->config, "json config file");
    lo->data_o = c->add_option("--data", lo->data_path, "training dataset json");
    lo->val_o = c->add_option("--val", lo->val_path, "validation dataset json");
    lo->layers_o = c->add_option("--layers", lo->layers, "layer count");
    lo->hidden_o = c->add_option("--hidden", lo->hidden, "hidden width");
    lo->rank_o = c->add_option("--rank", lo->rank, "adapter rank");
    lo->lr_o = c->add_option("--lr", lo->lr, "learning rate");
    lo->epochs_o = c->add_option("--epochs", lo->epochs, "epochs");
    lo->seed_o = c->add_option("--seed", lo->seed, "model init seed");
    lo->l2_o = c->add_option("--l2", lo->l2, "l2 damping");
    lo->name_o = c->add_option("--name", lo->name, "output file stem");
    lo->out_o = c->add_option("--out", lo->out, "output directory");
    c->callback([lo] { run_toy_loo(*lo); });
  }

  auto inf_opts = std::make_shared<InfluenceOpts>();
  {
    auto* c = app.add_subcommand("influence", "score a train manifest against a val manifest");
    c->add_option("--config", inf_opts->config, "json config file");
    inf_opts->train_o = c->add_option("--train", inf_opts->train_path, "train gradient manifest");
    inf_opts->val_o = c->add_option("--val", inf_opts->val_path, "validation gradient manifest");
    add_estimator_flags(c, inf_opts->est, "datainf");
    inf_opts->name_o = c->add_option("--name", inf_opts->name, "output file stem");
    inf_opts->out_o = c->add_option("--out", inf_opts->out, "output directory");
    c->callback([inf_opts] { run_influence(*inf_opts); });
  }

  auto se = std::make_shared<SelectOpts>();
  {
    auto* c = app.add_subcommand("select", "pick a coreset from an influence ranking");
    c->add_option("--config", se->config, "json config file");
    se->records_o = c->add_option("--records", se->records_path, "influence csv (skip scoring)");
    se->train_o = c->add_option("--train", se->train_path, "train gradient manifest");
    se->val_o = c->add_option("--val", se->val_path, "validation gradient manifest");
    add_estimator_flags(c, se->est, "datainf");
    se->strategy_o = c->add_option("--strategy", se->strategy,
                                   "proponents | opponents | minimum | random");
    se->fraction_o = c->add_option("--fraction", se->fraction, "keep floor(fraction*n) points");
    se->count_o = c->add_option("--count", se->count, "keep exactly this many points");
    se->seed_o = c->add_option("--seed", se->seed, "random strategy seed");
    se->compare_o = c->add_flag("--compare", se->compare,
                                "emit equal-size selections for all strategies + overlaps");
    se->bins_o = c->add_option("--bins", se->bins, "histogram bin count");
    se->out_o = c->add_option("--out", se->out, "output directory");
    c->callback([se] { run_select(*se); });
  }

  auto lb = std::make_shared<BudgetOpts>();
  {
    auto* c = app.add_subcommand("layer-budget", "agreement-per-layer profile and chosen k");
    c->add_option("--config", lb->config, "json config file");
    lb->train_o = c->add_option("--train", lb->train_path, "train gradient manifest");
    lb->val_o = c->add_option("--val", lb->val_path, "validation gradient manifest");
    lb->ks_o = c->add_option("--ks", lb->ks_text, "comma separated k values, e.g. 1,2,3");
    lb->budget_o = c->add_option("--budget-bytes", lb->budget_bytes, "memory budget in bytes");
    lb->min_rho_o = c->add_option("--min-rho", lb->min_rho, "feasibility floor on rho");
    add_estimator_flags(c, lb->est, "datainf");
    lb->out_o = c->add_option("--out", lb->out, "output directory");
    c->callback([lb] { run_layer_budget(*lb); });
  }

  auto* cov = app.add_subcommand("coverage", "train-mean cache and test coverage scoring");
  cov->require_subcommand(1);

  auto cc = std::make_shared<CoverageCacheOpts>();
  {
    auto* c = cov->add_subcommand("cache", "build the train-mean cache");
    c->add_option("--config", cc->config, "json config file");
    cc->train_o = c->add_option("--train", cc->train_path, "train gradient manifest");
    cc->name_o = c->add_option("--name", cc->name, "output file stem");
    cc->out_o = c->add_option("--out", cc->out, "output directory");
    c->callback([cc] { run_coverage_cache(*cc); });
  }

  auto cs = std::make_shared<CoverageScoreOpts>();
  {
    auto* c = cov->add_subcommand("score", "coverage score per test point");
    c->add_option("--config", cs->config, "json config file");
    cs->cache_o = c->add_option("--cache", cs->cache_path, "cache file");
    cs->test_o = c->add_option("--test", cs->test_path, "test gradient manifest");
    cs->train_manifest_o = c->add_option("--train-manifest", cs->train_manifest_path,
                                         "train manifest (datainf estimator)");
    add_estimator_flags(c, cs->est, "identity");
    cs->name_o = c->add_option("--name", cs->name, "output file stem");
    cs->out_o = c->add_option("--out", cs->out, "output directory");
    c->callback([cs] { run_coverage_score(*cs); });
  }

  auto cr = std::make_shared<CoverageReportOpts>();
  {
    auto* c = cov->add_subcommand("report", "coverage vs loss, similarity baseline, length bias");
    c->add_option("--config", cr->config, "json config file");
    cr->cache_o = c->add_option("--cache", cr->cache_path, "cache file");
    cr->test_o = c->add_option("--test", cr->test_path, "test gradient manifest");
    cr->train_manifest_o = c->add_option("--train-manifest", cr->train_manifest_path,
                                         "train manifest (datainf estimator)");
    cr->losses_o = c->add_option("--losses", cr->losses_path,
                                 "test_id,loss csv (defaults to manifest loss values)");
    cr->embeddings_o = c->add_option("--embeddings", cr->embeddings_path,
                                     "embeddings json for the similarity baseline");
    cr->threshold_o = c->add_option("--length-bias-threshold", cr->length_bias_threshold,
                                    "warn when |length bias| exceeds this");
    add_estimator_flags(c, cr->est, "identity");
    cr->out_o = c->add_option("--out", cr->out, "output directory");
    c->callback([cr] { run_coverage_report(*cr); });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    nlohmann::json err;
    err["error"] = {{"code", "invalid_argument"}, {"message", e.what()}};
    std::cerr << err.dump() << "\n";
    return 2;
  } catch (const Error& e) {
    nlohmann::json err;
    err["error"] = {{"code", to_string(e.code())}, {"message", e.what()}};
    std::cerr << err.dump() << "\n";
    return exit_status_for(e.code());
  } catch (const std::exception& e) {
    nlohmann::json err;
    err["error"] = {{"code", "internal"}, {"message", e.what()}};
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 0;
}
