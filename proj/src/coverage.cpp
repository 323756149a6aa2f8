#include "in2core/coverage.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include <Eigen/Cholesky>
#include <nlohmann/json.hpp>

#include "in2core/error.hpp"
#include "in2core/text.hpp"

namespace in2core {

namespace {

std::atomic<uint64_t> train_reads{0};

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".meta.json");
}

int effective_layers(const std::vector<LayerSpec>& layers, const InfluenceConfig& cfg) {
  const int total = static_cast<int>(layers.size());
  if (!cfg.layer_limit) return total;
  const int k = *cfg.layer_limit;
  if (k < 1 || k > total)
    fail(ErrorCode::invalid_argument,
         "layer_limit " + std::to_string(k) + " outside [1, " + std::to_string(total) + "]");
  return k;
}

void check_blocks(const std::vector<LayerSpec>& layers, const ExampleGradient& g,
                  const char* what) {
  if (g.per_layer.size() != layers.size())
    fail(ErrorCode::dimension_mismatch,
         std::string(what) + " carries " + std::to_string(g.per_layer.size()) +
             " layer blocks, cache declares " + std::to_string(layers.size()));
  for (size_t l = 0; l < layers.size(); ++l)
    if (g.per_layer[l].size() != layers[l].dim)
      fail(ErrorCode::dimension_mismatch,
           std::string(what) + " layer " + std::to_string(l) + " has length " +
               std::to_string(g.per_layer[l].size()) + ", cache declares " +
               std::to_string(layers[l].dim));
}

}  // namespace

GradientCache build_cache(const GradientManifest& train) {
  if (train.examples.empty())
    fail(ErrorCode::invalid_argument, "cannot build a cache from an empty manifest");
  GradientCache cache;
  cache.model_tag = train.model_tag;
  cache.layers = train.layers;
  cache.train_mean = mean_gradient(train);
  cache.n_train = train.size();
  cache.created_at = train.created_at;

  const auto order = ascending_id_order(train);
  cache.datainf_damping.assign(train.layers.size(), 0.0);
  for (size_t l = 0; l < train.layers.size(); ++l) {
    double sq = 0.0;
    for (int64_t idx : order)
      sq += train.examples[idx].per_layer[l].cast<double>().squaredNorm();
    cache.datainf_damping[l] =
        0.1 * sq /
        (static_cast<double>(train.size()) * static_cast<double>(train.layers[l].dim));
  }
  return cache;
}

void write_cache(const GradientCache& cache, const std::filesystem::path& path) {
  GradientManifest m;
  m.split = Split::train_mean;
  m.layers = cache.layers;
  m.model_tag = cache.model_tag;
  m.created_at = cache.created_at;
  m.examples.push_back(cache.train_mean);
  write_manifest(m, path);

  nlohmann::json meta;
  meta["split"] = to_string(Split::train_mean);
  meta["model_tag"] = cache.model_tag;
  meta["created_at"] = cache.created_at;
  meta["n_train"] = cache.n_train;
  meta["datainf_damping"] = cache.datainf_damping;
  write_text_file(sidecar_path(path), meta.dump(2) + "\n");
}

GradientCache read_cache(const std::filesystem::path& path) {
  const GradientManifest m = read_manifest(path);
  if (m.split != Split::train_mean)
    fail(ErrorCode::corrupt_header, "cache file split is not train_mean: " + path.string());
  if (m.size() != 1)
    fail(ErrorCode::corrupt_header,
         "cache file must hold exactly one example, found " + std::to_string(m.size()));

  GradientCache cache;
  cache.model_tag = m.model_tag;
  cache.layers = m.layers;
  cache.train_mean = m.examples.front();
  cache.created_at = m.created_at;

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_text_file(sidecar_path(path)));
  } catch (const Error&) {
    fail(ErrorCode::corrupt_header, "cache sidecar missing: " + sidecar_path(path).string());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::corrupt_header,
         "bad cache sidecar " + sidecar_path(path).string() + ": " + e.what());
  }
  if (!meta.contains("n_train") || !meta.contains("datainf_damping"))
    fail(ErrorCode::corrupt_header,
         "cache sidecar lacks n_train/datainf_damping: " + sidecar_path(path).string());
  cache.n_train = meta["n_train"].get<int64_t>();
  cache.datainf_damping = meta["datainf_damping"].get<std::vector<double>>();
  if (cache.datainf_damping.size() != cache.layers.size())
    fail(ErrorCode::dimension_mismatch, "cache damping list length mismatch");
  if (cache.n_train < 1) fail(ErrorCode::corrupt_header, "cache n_train < 1");
  return cache;
}

double coverage_score(const GradientCache& cache, const ExampleGradient& test_grad,
                      const InfluenceConfig& cfg, const GradientManifest* train,
                      const MatD* hessian) {
  check_blocks(cache.layers, test_grad, "test gradient");
  const int k = effective_layers(cache.layers, cfg);

  if (cfg.estimator == Estimator::identity) {
    double acc = 0.0;
    for (int l = 0; l < k; ++l)
      acc += test_grad.per_layer[l].cast<double>().dot(
          cache.train_mean.per_layer[l].cast<double>());
    return -acc;
  }

  if (cfg.estimator == Estimator::datainf) {
    if (!train)
      fail(ErrorCode::invalid_argument,
           "datainf coverage needs the training manifest; the cache alone only "
           "supports the identity estimator");
    if (train->layers.size() != cache.layers.size())
      fail(ErrorCode::dimension_mismatch, "training manifest layer count mismatch");
    for (size_t l = 0; l < cache.layers.size(); ++l)
      if (train->layers[l].dim != cache.layers[l].dim)
        fail(ErrorCode::dimension_mismatch,
             "training manifest layer " + std::to_string(l) + " dim mismatch");
    if (train->examples.empty()) fail(ErrorCode::invalid_argument, "empty training manifest");

    const auto order = ascending_id_order(*train);
    double acc = 0.0;
    for (int l = 0; l < k; ++l) {
      double lambda = cfg.damping_value;
      if (cfg.damping_mode == DampingMode::datainf_scaled) {
        lambda = cache.datainf_damping[static_cast<size_t>(l)];
        if (lambda <= 0)
          fail(ErrorCode::numerical,
               "zero damping: cached layer " + std::to_string(l) +
                   " gradients are identically zero");
      } else if (lambda <= 0) {
        fail(ErrorCode::invalid_argument, "datainf requires damping > 0");
      }
      std::vector<const VecF*> grads;
      grads.reserve(train->examples.size());
      for (int64_t idx : order) {
        grads.push_back(&train->examples[idx].per_layer[l]);
        train_reads.fetch_add(1);
      }
      const VecD v = test_grad.per_layer[l].cast<double>();
      const VecD approx = datainf_apply_inverse(grads, v, lambda);
      acc += approx.dot(cache.train_mean.per_layer[l].cast<double>());
    }
    return -acc;
  }

  // exact
  if (!hessian)
    fail(ErrorCode::invalid_argument,
         "exact coverage needs a precomputed hessian; the cache alone only "
         "supports the identity estimator");
  int64_t dim = 0;
  for (int l = 0; l < k; ++l) dim += cache.layers[l].dim;
  if (hessian->rows() < dim || hessian->cols() < dim)
    fail(ErrorCode::dimension_mismatch, "hessian smaller than the restricted dim");
  MatD m = hessian->topLeftCorner(dim, dim);
  if (cfg.damping_value < 0) fail(ErrorCode::invalid_argument, "damping must be >= 0");
  m.diagonal().array() += cfg.damping_value;
  Eigen::LDLT<MatD> solver(m);
  const VecD mean_v = concat_gradient(cache.train_mean, k);
  VecD s;
  bool ok = solver.info() == Eigen::Success;
  if (ok) {
    s = solver.solve(mean_v);
    ok = s.allFinite() && (m * s - mean_v).norm() <= 1e-8 * std::max(1.0, mean_v.norm());
  }
  if (!ok) fail(ErrorCode::numerical, "damped hessian solve failed in coverage scoring");
  return -concat_gradient(test_grad, k).dot(s);
}

double similarity_baseline(const std::vector<VecD>& train_embeddings,
                           const VecD& test_embedding) {
  if (train_embeddings.empty())
    fail(ErrorCode::invalid_argument, "similarity baseline needs training embeddings");
  const double tn = test_embedding.norm();
  if (tn == 0.0) fail(ErrorCode::invalid_argument, "zero-norm test embedding");
  double acc = 0.0;
  for (const auto& e : train_embeddings) {
    if (e.size() != test_embedding.size())
      fail(ErrorCode::dimension_mismatch, "embedding length mismatch");
    const double en = e.norm();
    if (en == 0.0) fail(ErrorCode::invalid_argument, "zero-norm training embedding");
    acc += e.dot(test_embedding) / (en * tn);
  }
  return acc / static_cast<double>(train_embeddings.size());
}

CoverageReport coverage_report(const GradientCache& cache, const GradientManifest& test,
                               const std::vector<std::pair<std::string, double>>& losses,
                               const InfluenceConfig& cfg, const EmbeddingSet* embeddings,
                               const GradientManifest* train, const MatD* hessian) {
  if (test.examples.empty()) fail(ErrorCode::invalid_argument, "empty test manifest");
  if (!cache.model_tag.empty() && !test.model_tag.empty() &&
      cache.model_tag != test.model_tag)
    fail(ErrorCode::invalid_argument,
         "stale cache: model_tag mismatch (cache " + cache.model_tag + " vs test " +
             test.model_tag + ")");

  std::map<std::string, double> loss_by_id;
  for (const auto& [id, loss] : losses) loss_by_id[id] = loss;

  std::vector<const ExampleGradient*> examples;
  examples.reserve(test.examples.size());
  for (const auto& ex : test.examples) examples.push_back(&ex);
  std::sort(examples.begin(), examples.end(),
            [](const ExampleGradient* a, const ExampleGradient* b) {
              return a->example_id < b->example_id;
            });

  CoverageReport report;
  std::vector<std::pair<std::string, double>> influence_pairs, similarity_pairs;
  for (const ExampleGradient* ex : examples) {
    auto it = loss_by_id.find(ex->example_id);
    if (it == loss_by_id.end())
      fail(ErrorCode::invalid_argument, "missing loss for test id " + ex->example_id);
    CoverageRow row;
    row.test_id = ex->example_id;
    row.influence = coverage_score(cache, *ex, cfg, train, hessian);
    row.loss = it->second;
    row.token_count = ex->token_count;
    if (embeddings) {
      auto eit = embeddings->test.find(ex->example_id);
      if (eit == embeddings->test.end())
        fail(ErrorCode::invalid_argument,
             "missing embedding for test id " + ex->example_id);
      row.similarity = similarity_baseline(embeddings->train, eit->second);
      similarity_pairs.emplace_back(row.test_id, *row.similarity);
    }
    influence_pairs.emplace_back(row.test_id, row.influence);
    report.rows.push_back(std::move(row));
  }

  const auto influence_ranks = rank_records(influence_pairs);
  std::map<std::string, int64_t> rank_of;
  for (const auto& r : influence_ranks) rank_of[r.example_id] = r.rank;
  for (auto& row : report.rows) row.influence_rank = rank_of[row.test_id];

  if (embeddings) {
    const auto sim_ranks = rank_records(similarity_pairs);
    std::map<std::string, int64_t> sim_rank_of;
    for (const auto& r : sim_ranks) sim_rank_of[r.example_id] = r.rank;
    for (auto& row : report.rows) row.similarity_rank = sim_rank_of[row.test_id];
  }

  std::vector<double> loss_v, inf_v, inf_rank_v, sim_v, sim_rank_v;
  for (const auto& row : report.rows) {
    loss_v.push_back(row.loss);
    inf_v.push_back(row.influence);
    inf_rank_v.push_back(static_cast<double>(row.influence_rank));
    if (row.similarity) {
      sim_v.push_back(*row.similarity);
      sim_rank_v.push_back(static_cast<double>(*row.similarity_rank));
    }
  }

  const bool inf_constant =
      *std::max_element(inf_v.begin(), inf_v.end()) ==
      *std::min_element(inf_v.begin(), inf_v.end());
  if (!inf_constant) {
    report.influence_loss_corr = stats::pearson(inf_rank_v, loss_v);
    report.influence_fit = stats::ols(inf_rank_v, loss_v);
  }
  report.influence_loss_spearman = stats::spearman(inf_v, loss_v);

  if (embeddings && !sim_v.empty()) {
    const bool sim_constant =
        *std::max_element(sim_v.begin(), sim_v.end()) ==
        *std::min_element(sim_v.begin(), sim_v.end());
    if (!sim_constant) {
      report.similarity_loss_corr = stats::pearson(sim_rank_v, loss_v);
      report.similarity_fit = stats::ols(sim_rank_v, loss_v);
    }
    report.similarity_loss_spearman = stats::spearman(sim_v, loss_v);
  }
  return report;
}

double length_bias_diagnostic(
    const std::vector<InfluenceRecord>& records,
    const std::vector<std::pair<std::string, int64_t>>& token_counts) {
  if (records.empty()) fail(ErrorCode::invalid_argument, "no records");
  std::map<std::string, int64_t> count_by_id;
  for (const auto& [id, c] : token_counts) count_by_id[id] = c;

  std::vector<double> magnitude, length;
  for (const auto& r : records) {
    auto it = count_by_id.find(r.example_id);
    if (it == count_by_id.end())
      fail(ErrorCode::invalid_argument, "missing token count for " + r.example_id);
    magnitude.push_back(std::fabs(r.influence));
    length.push_back(static_cast<double>(it->second));
  }
  const bool all_equal =
      *std::max_element(length.begin(), length.end()) ==
      *std::min_element(length.begin(), length.end());
  if (all_equal)
    fail(ErrorCode::invalid_argument,
         "length bias diagnostic needs at least two distinct token counts");
  const auto rho = stats::spearman(magnitude, length);
  if (!rho)
    fail(ErrorCode::numerical,
         "length bias undefined: influence magnitudes are constant");
  return *rho;
}

void reset_train_read_counter() { train_reads.store(0); }

uint64_t train_read_count() { return train_reads.load(); }

std::string coverage_to_csv(const CoverageReport& r) {
  std::string out =
      "test_id,influence,influence_rank,similarity,similarity_rank,loss,token_count\n";
  for (const auto& row : r.rows) {
    out += row.test_id + "," + fmt_double(row.influence) + "," +
           std::to_string(row.influence_rank) + ",";
    out += row.similarity ? fmt_double(*row.similarity) : "";
    out += ",";
    out += row.similarity_rank ? std::to_string(*row.similarity_rank) : "";
    out += "," + fmt_double(row.loss) + "," + std::to_string(row.token_count) + "\n";
  }
  return out;
}

std::string coverage_to_json(const CoverageReport& r) {
  nlohmann::json j;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json o;
    o["test_id"] = row.test_id;
    o["influence"] = row.influence;
    o["influence_rank"] = row.influence_rank;
    if (row.similarity) o["similarity"] = *row.similarity;
    if (row.similarity_rank) o["similarity_rank"] = *row.similarity_rank;
    o["loss"] = row.loss;
    o["token_count"] = row.token_count;
    rows.push_back(std::move(o));
  }
  j["rows"] = std::move(rows);
  auto put_opt = [&j](const char* key, const std::optional<double>& v) {
    if (v)
      j[key] = *v;
    else
      j[key] = nullptr;
  };
  put_opt("influence_loss_corr", r.influence_loss_corr);
  put_opt("similarity_loss_corr", r.similarity_loss_corr);
  put_opt("influence_loss_spearman", r.influence_loss_spearman);
  put_opt("similarity_loss_spearman", r.similarity_loss_spearman);
  if (r.influence_fit) {
    j["influence_fit"] = {{"slope", r.influence_fit->slope},
                          {"intercept", r.influence_fit->intercept}};
  }
  if (r.similarity_fit) {
    j["similarity_fit"] = {{"slope", r.similarity_fit->slope},
                           {"intercept", r.similarity_fit->intercept}};
  }
  return j.dump(2) + "\n";
}

std::string scatter_csv(const CoverageReport& r, bool similarity) {
  std::string out = "rank,loss\n";
  for (const auto& row : r.rows) {
    if (similarity) {
      if (!row.similarity_rank) continue;
      out += std::to_string(*row.similarity_rank) + "," + fmt_double(row.loss) + "\n";
    } else {
      out += std::to_string(row.influence_rank) + "," + fmt_double(row.loss) + "\n";
    }
  }
  return out;
}

}  // namespace in2core
