#include "in2core/influence.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include <Eigen/Cholesky>
#include <nlohmann/json.hpp>

#include "in2core/error.hpp"
#include "in2core/text.hpp"

namespace in2core {

namespace {

std::atomic<uint64_t> live_scratch{0};
std::atomic<uint64_t> peak_scratch{0};

void scratch_add(uint64_t n) {
  const uint64_t now = live_scratch.fetch_add(n) + n;
  uint64_t prev = peak_scratch.load();
  while (prev < now && !peak_scratch.compare_exchange_weak(prev, now)) {
  }
}

void scratch_sub(uint64_t n) { live_scratch.fetch_sub(n); }

// f64 work vector whose footprint is reported to the scratch counters.
class ScratchVec {
 public:
  explicit ScratchVec(int64_t n) : v_(VecD::Zero(n)) { scratch_add(static_cast<uint64_t>(n)); }
  ~ScratchVec() { scratch_sub(static_cast<uint64_t>(v_.size())); }
  ScratchVec(const ScratchVec&) = delete;
  ScratchVec& operator=(const ScratchVec&) = delete;
  VecD& get() { return v_; }

 private:
  VecD v_;
};

void check_layer_shape(const GradientManifest& train, const ExampleGradient& val_grad) {
  if (val_grad.per_layer.size() != train.layers.size())
    fail(ErrorCode::dimension_mismatch,
         "validation gradient carries " + std::to_string(val_grad.per_layer.size()) +
             " layer blocks, train manifest declares " + std::to_string(train.layers.size()));
  for (size_t l = 0; l < train.layers.size(); ++l)
    if (val_grad.per_layer[l].size() != train.layers[l].dim)
      fail(ErrorCode::dimension_mismatch,
           "validation gradient layer " + std::to_string(l) + " has length " +
               std::to_string(val_grad.per_layer[l].size()) + ", train manifest declares " +
               std::to_string(train.layers[l].dim));
}

}  // namespace

const char* to_string(Estimator e) {
  switch (e) {
    case Estimator::exact: return "exact";
    case Estimator::identity: return "identity";
    case Estimator::datainf: return "datainf";
  }
  return "datainf";
}

Estimator estimator_from_string(const std::string& name) {
  if (name == "exact") return Estimator::exact;
  if (name == "identity") return Estimator::identity;
  if (name == "datainf") return Estimator::datainf;
  fail(ErrorCode::invalid_argument, "unknown estimator: " + name);
}

const char* to_string(DampingMode m) {
  return m == DampingMode::fixed ? "fixed" : "datainf_scaled";
}

DampingMode damping_mode_from_string(const std::string& name) {
  if (name == "fixed") return DampingMode::fixed;
  if (name == "datainf_scaled" || name == "scaled") return DampingMode::datainf_scaled;
  fail(ErrorCode::invalid_argument, "unknown damping mode: " + name);
}

std::vector<InfluenceRecord> rank_records(
    const std::vector<std::pair<std::string, double>>& values) {
  std::set<std::string> seen;
  for (const auto& [id, v] : values) {
    if (!std::isfinite(v))
      fail(ErrorCode::numerical, "non-finite influence value for example " + id);
    if (!seen.insert(id).second)
      fail(ErrorCode::invalid_argument, "duplicate example_id in ranking input: " + id);
  }
  std::vector<InfluenceRecord> out;
  out.reserve(values.size());
  for (const auto& [id, v] : values) out.push_back({id, v, 0});
  std::sort(out.begin(), out.end(), [](const InfluenceRecord& a, const InfluenceRecord& b) {
    if (a.influence != b.influence) return a.influence < b.influence;
    return a.example_id < b.example_id;
  });
  for (size_t i = 0; i < out.size(); ++i) out[i].rank = static_cast<int64_t>(i) + 1;
  return out;
}

std::vector<InfluenceRecord> influence_exact(const GradientManifest& train,
                                             const ExampleGradient& val_grad,
                                             const MatD& hessian, double damping) {
  if (train.examples.empty()) fail(ErrorCode::invalid_argument, "empty train manifest");
  check_layer_shape(train, val_grad);
  const int64_t dim = train.total_dim();
  if (hessian.rows() != dim || hessian.cols() != dim)
    fail(ErrorCode::dimension_mismatch,
         "hessian is " + std::to_string(hessian.rows()) + "x" + std::to_string(hessian.cols()) +
             ", manifest total dim is " + std::to_string(dim));
  if (damping < 0) fail(ErrorCode::invalid_argument, "damping must be >= 0");

  MatD m = hessian;
  m.diagonal().array() += damping;
  Eigen::LDLT<MatD> solver(m);
  const VecD v = concat_gradient(val_grad);
  VecD s;
  bool ok = solver.info() == Eigen::Success;
  if (ok) {
    s = solver.solve(v);
    ok = s.allFinite() && (m * s - v).norm() <= 1e-8 * std::max(1.0, v.norm());
  }
  if (!ok) {
    const VecD d = solver.vectorD().cwiseAbs();
    const double dmax = d.size() ? d.maxCoeff() : 0.0;
    const double dmin = d.size() ? d.minCoeff() : 0.0;
    const double cond = (dmin > 0.0) ? dmax / dmin : std::numeric_limits<double>::infinity();
    fail(ErrorCode::numerical,
         "damped hessian solve failed; condition estimate " + fmt_double(cond));
  }

  std::vector<std::pair<std::string, double>> values;
  values.reserve(train.examples.size());
  for (const auto& ex : train.examples)
    values.emplace_back(ex.example_id, -s.dot(concat_gradient(ex)));
  return rank_records(values);
}

std::vector<InfluenceRecord> influence_identity(const GradientManifest& train,
                                                const ExampleGradient& val_grad) {
  if (train.examples.empty()) fail(ErrorCode::invalid_argument, "empty train manifest");
  check_layer_shape(train, val_grad);
  std::vector<std::pair<std::string, double>> values;
  values.reserve(train.examples.size());
  for (const auto& ex : train.examples) {
    double acc = 0.0;
    for (size_t l = 0; l < ex.per_layer.size(); ++l)
      acc += val_grad.per_layer[l].cast<double>().dot(ex.per_layer[l].cast<double>());
    values.emplace_back(ex.example_id, -acc);
  }
  return rank_records(values);
}

std::vector<double> datainf_layer_damping(const GradientManifest& train,
                                          const InfluenceConfig& cfg) {
  if (train.examples.empty()) fail(ErrorCode::invalid_argument, "empty train manifest");
  std::vector<double> out(train.layers.size(), cfg.damping_value);
  if (cfg.damping_mode == DampingMode::fixed) {
    if (cfg.damping_value <= 0)
      fail(ErrorCode::invalid_argument, "datainf requires damping > 0");
    return out;
  }
  const auto order = ascending_id_order(train);
  for (size_t l = 0; l < train.layers.size(); ++l) {
    double sq = 0.0;
    for (int64_t idx : order)
      sq += train.examples[idx].per_layer[l].cast<double>().squaredNorm();
    const double lambda =
        0.1 * sq /
        (static_cast<double>(train.size()) * static_cast<double>(train.layers[l].dim));
    if (lambda <= 0)
      fail(ErrorCode::numerical, "zero damping: layer " + std::to_string(l) +
                                     " gradients are identically zero");
    out[l] = lambda;
  }
  return out;
}

VecD datainf_apply_inverse(const std::vector<const VecF*>& grads, const VecD& v, double lambda) {
  if (grads.empty()) fail(ErrorCode::invalid_argument, "empty gradient list");
  if (lambda <= 0) fail(ErrorCode::invalid_argument, "datainf requires damping > 0");
  const int64_t dim = v.size();
  ScratchVec acc_s(dim), g_s(dim);
  VecD& acc = acc_s.get();
  VecD& g = g_s.get();
  for (const VecF* gf : grads) {
    if (gf->size() != dim) fail(ErrorCode::dimension_mismatch, "gradient length mismatch");
    g = gf->cast<double>();
    const double coef = g.dot(v) / (lambda + g.squaredNorm());
    acc += v - coef * g;
  }
  return acc / (static_cast<double>(grads.size()) * lambda);
}

std::vector<InfluenceRecord> influence_datainf(const GradientManifest& train,
                                               const ExampleGradient& val_grad,
                                               const InfluenceConfig& cfg) {
  if (train.examples.empty()) fail(ErrorCode::invalid_argument, "empty train manifest");
  check_layer_shape(train, val_grad);
  const std::vector<double> lambda = datainf_layer_damping(train, cfg);
  const auto order = ascending_id_order(train);

  std::vector<double> values(train.examples.size(), 0.0);
  for (size_t l = 0; l < train.layers.size(); ++l) {
    std::vector<const VecF*> grads;
    grads.reserve(train.examples.size());
    for (int64_t idx : order) grads.push_back(&train.examples[idx].per_layer[l]);

    ScratchVec v_s(train.layers[l].dim);
    VecD& v = v_s.get();
    v = val_grad.per_layer[l].cast<double>();
    const VecD approx = datainf_apply_inverse(grads, v, lambda[l]);

    ScratchVec g_s(train.layers[l].dim);
    VecD& g = g_s.get();
    for (size_t i = 0; i < train.examples.size(); ++i) {
      g = train.examples[i].per_layer[l].cast<double>();
      values[i] -= approx.dot(g);
    }
  }

  std::vector<std::pair<std::string, double>> pairs;
  pairs.reserve(values.size());
  for (size_t i = 0; i < values.size(); ++i)
    pairs.emplace_back(train.examples[i].example_id, values[i]);
  return rank_records(pairs);
}

std::vector<InfluenceRecord> influence_against_set(const GradientManifest& train,
                                                   const GradientManifest& val,
                                                   const InfluenceConfig& cfg,
                                                   const MatD* hessian) {
  if (train.examples.empty()) fail(ErrorCode::invalid_argument, "empty train manifest");
  if (val.examples.empty()) fail(ErrorCode::invalid_argument, "empty validation manifest");
  if (train.layers.size() != val.layers.size())
    fail(ErrorCode::dimension_mismatch,
         "layer structure mismatch: train has " + std::to_string(train.layers.size()) +
             " layers, validation has " + std::to_string(val.layers.size()));
  for (size_t l = 0; l < train.layers.size(); ++l)
    if (train.layers[l].dim != val.layers[l].dim)
      fail(ErrorCode::dimension_mismatch,
           "layer structure mismatch at layer " + std::to_string(l) + ": dims " +
               std::to_string(train.layers[l].dim) + " vs " +
               std::to_string(val.layers[l].dim));

  const GradientManifest* train_p = &train;
  const GradientManifest* val_p = &val;
  GradientManifest train_r, val_r;
  MatD hess_block;
  const MatD* hess_p = hessian;

  if (cfg.layer_limit) {
    const int k = *cfg.layer_limit;
    if (k < 1 || k > train.layer_count())
      fail(ErrorCode::invalid_argument,
           "layer_limit " + std::to_string(k) + " outside [1, " +
               std::to_string(train.layer_count()) + "]");
    train_r = restrict_layers(train, k);
    val_r = restrict_layers(val, k);
    train_p = &train_r;
    val_p = &val_r;
    if (hessian) {
      const int64_t d = train.total_dim(k);
      if (hessian->rows() < d || hessian->cols() < d)
        fail(ErrorCode::dimension_mismatch, "hessian smaller than restricted dim");
      hess_block = hessian->topLeftCorner(d, d);
      hess_p = &hess_block;
    }
  }

  const ExampleGradient val_grad = mean_gradient(*val_p);

  switch (cfg.estimator) {
    case Estimator::identity:
      return influence_identity(*train_p, val_grad);
    case Estimator::datainf:
      return influence_datainf(*train_p, val_grad, cfg);
    case Estimator::exact:
      if (!hess_p)
        fail(ErrorCode::invalid_argument, "exact estimator requires a hessian");
      return influence_exact(*train_p, val_grad, *hess_p, cfg.damping_value);
  }
  fail(ErrorCode::invalid_argument, "unknown estimator");
}

void reset_scratch_stats() {
  live_scratch.store(0);
  peak_scratch.store(0);
}

uint64_t peak_scratch_doubles() { return peak_scratch.load(); }

std::string records_to_csv(const std::vector<InfluenceRecord>& records,
                           const std::vector<std::string>& header_comments) {
  std::string out;
  for (const auto& line : header_comments) out += "# " + line + "\n";
  out += "example_id,influence,rank\n";
  for (const auto& r : records)
    out += r.example_id + "," + fmt_double(r.influence) + "," + std::to_string(r.rank) + "\n";
  return out;
}

std::vector<InfluenceRecord> records_from_csv(const std::string& text) {
  std::vector<InfluenceRecord> out;
  std::istringstream in(text);
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != "example_id,influence,rank")
        fail(ErrorCode::invalid_argument, "unexpected csv header: " + line);
      header_seen = true;
      continue;
    }
    const size_t c1 = line.find(',');
    const size_t c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      fail(ErrorCode::invalid_argument, "bad csv row: " + line);
    InfluenceRecord r;
    r.example_id = line.substr(0, c1);
    try {
      r.influence = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
      r.rank = std::stoll(line.substr(c2 + 1));
    } catch (const std::exception&) {
      fail(ErrorCode::invalid_argument, "bad csv row: " + line);
    }
    out.push_back(std::move(r));
  }
  if (!header_seen) fail(ErrorCode::invalid_argument, "csv has no header row");
  return out;
}

std::string records_to_json(const std::vector<InfluenceRecord>& records) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json o;
    o["example_id"] = r.example_id;
    o["influence"] = r.influence;
    o["rank"] = r.rank;
    arr.push_back(std::move(o));
  }
  return arr.dump(2) + "\n";
}

}  // namespace in2core
