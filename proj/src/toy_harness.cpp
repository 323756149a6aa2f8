#include "in2core/toy_harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

#include "in2core/error.hpp"
#include "in2core/rng.hpp"

namespace in2core {

namespace {

std::string padded_id(const std::string& prefix, int64_t i, int64_t n) {
  int width = 5;
  int64_t top = std::max<int64_t>(n - 1, 0);
  int digits = 1;
  while (top >= 10) {
    top /= 10;
    ++digits;
  }
  width = std::max(width, digits);
  std::string num = std::to_string(i);
  return prefix + std::string(static_cast<size_t>(width) - num.size(), '0') + num;
}

void validate_params(const DatasetParams& p) {
  if (p.n < 1) fail(ErrorCode::invalid_argument, "dataset size must be >= 1");
  if (p.task == Task::cluster_classification) {
    if (p.classes < 2) fail(ErrorCode::invalid_argument, "classes must be >= 2");
    if (p.feature_dim < 1) fail(ErrorCode::invalid_argument, "feature_dim must be >= 1");
    if (p.cluster_noise < 0) fail(ErrorCode::invalid_argument, "cluster_noise must be >= 0");
    if (p.label_noise < 0 || p.label_noise > 1)
      fail(ErrorCode::invalid_argument, "label_noise must lie in [0, 1]");
  } else {
    if (p.vocab < 2) fail(ErrorCode::invalid_argument, "vocab must be >= 2");
    if (p.min_len < 2) fail(ErrorCode::invalid_argument, "min_len must be >= 2");
    if (p.max_len < p.min_len)
      fail(ErrorCode::invalid_argument, "max_len must be >= min_len");
  }
}

// Forward pass: tanh on every hidden layer, raw logits from the last.
struct Forward {
  std::vector<VecD> acts;  // acts[l] is the input to layer l
  VecD logits;
  double loss = 0.0;  // NLL of the target
  VecD probs;
};

Forward forward_pass(const std::vector<MatD>& weights, const VecD& input, int target) {
  Forward f;
  const int layer_count = static_cast<int>(weights.size());
  f.acts.resize(layer_count);
  f.acts[0] = input;
  for (int l = 0; l + 1 < layer_count; ++l)
    f.acts[l + 1] = (weights[l] * f.acts[l]).array().tanh().matrix();
  f.logits = weights[layer_count - 1] * f.acts[layer_count - 1];

  const double zmax = f.logits.maxCoeff();
  const double lse = zmax + std::log((f.logits.array() - zmax).exp().sum());
  f.loss = lse - f.logits[target];
  f.probs = (f.logits.array() - lse).exp().matrix();
  return f;
}

// dLoss/dW per layer for one (input, target) pair.
std::vector<MatD> backward_pass(const std::vector<MatD>& weights, const Forward& f, int target) {
  const int layer_count = static_cast<int>(weights.size());
  std::vector<MatD> grads(layer_count);
  VecD delta = f.probs;
  delta[target] -= 1.0;
  for (int l = layer_count - 1; l >= 0; --l) {
    grads[l] = delta * f.acts[l].transpose();
    if (l > 0)
      delta = (weights[l].transpose() * delta).cwiseProduct(
          (1.0 - f.acts[l].array().square()).matrix());
  }
  return grads;
}

std::vector<MatD> effective_weights(const ToyModel& model) {
  std::vector<MatD> w;
  w.reserve(model.frozen.size());
  for (int l = 0; l < model.layer_count(); ++l) w.push_back(model.effective_weight(l));
  return w;
}

VecD onehot(int index, int64_t dim) {
  VecD v = VecD::Zero(dim);
  v[index] = 1.0;
  return v;
}

void check_example(const ToyModel& model, const ToyExample& ex, Task task) {
  if (task == Task::cluster_classification) {
    if (ex.features.size() != model.input_dim())
      fail(ErrorCode::dimension_mismatch,
           "example " + ex.example_id + " feature length " +
               std::to_string(ex.features.size()) + " vs model input " +
               std::to_string(model.input_dim()));
    if (ex.label < 0 || ex.label >= model.output_dim())
      fail(ErrorCode::invariant_violation,
           "example " + ex.example_id + " label out of range");
  } else {
    if (ex.tokens.size() < 2)
      fail(ErrorCode::invariant_violation,
           "example " + ex.example_id + " needs at least 2 tokens");
    for (int32_t t : ex.tokens)
      if (t < 0 || t >= model.input_dim() || t >= model.output_dim())
        fail(ErrorCode::invariant_violation,
             "example " + ex.example_id + " token out of range");
  }
}

// [vec(dA); vec(dB)] for one layer, column-major.
VecD adapter_block(const ToyModel& model, int l, const MatD& dw) {
  const MatD da = dw * model.adapters[l].b.transpose();
  const MatD db = model.adapters[l].a.transpose() * dw;
  VecD out(da.size() + db.size());
  out.head(da.size()) = Eigen::Map<const VecD>(da.data(), da.size());
  out.tail(db.size()) = Eigen::Map<const VecD>(db.data(), db.size());
  return out;
}

std::vector<VecD> adapter_grads_single(const ToyModel& model, const std::vector<MatD>& weights,
                                       const VecD& input, int target) {
  Forward f = forward_pass(weights, input, target);
  std::vector<MatD> dw = backward_pass(weights, f, target);
  std::vector<VecD> out;
  out.reserve(dw.size());
  for (int l = 0; l < model.layer_count(); ++l) out.push_back(adapter_block(model, l, dw[l]));
  return out;
}

std::vector<int64_t> ascending_id_order(const ToyDataset& data) {
  std::vector<int64_t> order(data.examples.size());
  std::iota(order.begin(), order.end(), int64_t{0});
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return data.examples[a].example_id < data.examples[b].example_id;
  });
  return order;
}

nlohmann::json matrix_to_json(const MatD& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int64_t i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int64_t j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

MatD matrix_from_json(const nlohmann::json& rows) {
  if (!rows.is_array() || rows.empty())
    fail(ErrorCode::invalid_argument, "matrix json must be a non-empty array");
  const int64_t r = static_cast<int64_t>(rows.size());
  const int64_t c = static_cast<int64_t>(rows[0].size());
  MatD m(r, c);
  for (int64_t i = 0; i < r; ++i) {
    if (static_cast<int64_t>(rows[i].size()) != c)
      fail(ErrorCode::invalid_argument, "ragged matrix json");
    for (int64_t j = 0; j < c; ++j) m(i, j) = rows[i][j].get<double>();
  }
  return m;
}

uint64_t fnv1a_init() { return 14695981039346656037ull; }

void fnv1a_bytes(uint64_t& h, const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
}

void fnv1a_matrix(uint64_t& h, const MatD& m) {
  const int64_t r = m.rows(), c = m.cols();
  fnv1a_bytes(h, &r, sizeof(r));
  fnv1a_bytes(h, &c, sizeof(c));
  fnv1a_bytes(h, m.data(), sizeof(double) * static_cast<size_t>(m.size()));
}

}  // namespace

const char* to_string(Task t) {
  return t == Task::cluster_classification ? "cluster_classification" : "markov_next_token";
}

Task task_from_string(const std::string& name) {
  if (name == "cluster_classification" || name == "cluster") return Task::cluster_classification;
  if (name == "markov_next_token" || name == "markov") return Task::markov_next_token;
  fail(ErrorCode::invalid_argument, "unknown task: " + name);
}

int64_t ToyDataset::input_dim() const {
  return task == Task::cluster_classification ? feature_dim : vocab_or_classes;
}

ToyDataset generate_dataset(Task task, int64_t n, uint64_t seed) {
  DatasetParams p;
  p.task = task;
  p.n = n;
  p.seed = seed;
  return generate_dataset(p);
}

ToyDataset generate_dataset(const DatasetParams& p) {
  validate_params(p);
  ToyDataset data;
  data.task = p.task;
  data.seed = p.seed;

  if (p.task == Task::cluster_classification) {
    data.vocab_or_classes = p.classes;
    data.feature_dim = p.feature_dim;

    Rng world(p.world_seed.value_or(p.seed));
    MatD centers(p.classes, p.feature_dim);
    for (int c = 0; c < p.classes; ++c)
      for (int j = 0; j < p.feature_dim; ++j) centers(c, j) = p.center_spread * world.normal();
    if (p.shift != 0.0)
      centers.array() += p.shift / std::sqrt(static_cast<double>(p.feature_dim));

    Rng draw(p.seed);
    data.examples.reserve(p.n);
    for (int64_t i = 0; i < p.n; ++i) {
      ToyExample ex;
      ex.example_id = padded_id(p.id_prefix, i, p.n);
      const int c = static_cast<int>(draw.bounded(p.classes));
      ex.features = VecD(p.feature_dim);
      for (int j = 0; j < p.feature_dim; ++j)
        ex.features[j] = centers(c, j) + p.cluster_noise * draw.normal();
      ex.label = c;
      if (p.label_noise > 0.0 && draw.uniform() < p.label_noise)
        ex.label = static_cast<int>(draw.bounded(p.classes));
      data.examples.push_back(std::move(ex));
    }
  } else {
    data.vocab_or_classes = p.vocab;
    data.feature_dim = 0;

    Rng world(p.world_seed.value_or(p.seed));
    MatD trans(p.vocab, p.vocab);
    for (int i = 0; i < p.vocab; ++i) {
      double row_sum = 0.0;
      for (int j = 0; j < p.vocab; ++j) {
        const double u = world.uniform();
        trans(i, j) = u * u + 1e-4;
        row_sum += trans(i, j);
      }
      trans.row(i) /= row_sum;
    }

    Rng draw(p.seed);
    data.examples.reserve(p.n);
    for (int64_t i = 0; i < p.n; ++i) {
      ToyExample ex;
      ex.example_id = padded_id(p.id_prefix, i, p.n);
      const int len =
          p.min_len + static_cast<int>(draw.bounded(static_cast<uint64_t>(p.max_len - p.min_len + 1)));
      ex.tokens.reserve(len);
      int t = static_cast<int>(draw.bounded(p.vocab));
      ex.tokens.push_back(t);
      for (int k = 1; k < len; ++k) {
        const double u = draw.uniform();
        double acc = 0.0;
        int next = p.vocab - 1;
        for (int j = 0; j < p.vocab; ++j) {
          acc += trans(t, j);
          if (u < acc) {
            next = j;
            break;
          }
        }
        ex.tokens.push_back(next);
        t = next;
      }
      data.examples.push_back(std::move(ex));
    }
  }
  return data;
}

ToyDataset concat_datasets(const ToyDataset& a, const ToyDataset& b) {
  if (a.task != b.task) fail(ErrorCode::invalid_argument, "concat: task mismatch");
  if (a.vocab_or_classes != b.vocab_or_classes || a.feature_dim != b.feature_dim)
    fail(ErrorCode::invalid_argument, "concat: shape mismatch");
  std::set<std::string> ids;
  for (const auto& ex : a.examples) ids.insert(ex.example_id);
  for (const auto& ex : b.examples)
    if (!ids.insert(ex.example_id).second)
      fail(ErrorCode::invalid_argument, "concat: duplicate example_id " + ex.example_id);
  ToyDataset out = a;
  out.examples.insert(out.examples.end(), b.examples.begin(), b.examples.end());
  return out;
}

std::string dataset_to_json(const ToyDataset& data) {
  nlohmann::json j;
  j["task"] = to_string(data.task);
  j["vocab_or_classes"] = data.vocab_or_classes;
  j["feature_dim"] = data.feature_dim;
  j["seed"] = data.seed;
  nlohmann::json exs = nlohmann::json::array();
  for (const auto& ex : data.examples) {
    nlohmann::json e;
    e["id"] = ex.example_id;
    if (data.task == Task::cluster_classification) {
      nlohmann::json feats = nlohmann::json::array();
      for (int64_t i = 0; i < ex.features.size(); ++i) feats.push_back(ex.features[i]);
      e["features"] = std::move(feats);
      e["label"] = ex.label;
    } else {
      e["tokens"] = ex.tokens;
    }
    exs.push_back(std::move(e));
  }
  j["examples"] = std::move(exs);
  return j.dump(2) + "\n";
}

ToyDataset dataset_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("bad dataset json: ") + e.what());
  }
  ToyDataset data;
  try {
    data.task = task_from_string(j.at("task").get<std::string>());
    data.vocab_or_classes = j.at("vocab_or_classes").get<int32_t>();
    data.feature_dim = j.at("feature_dim").get<int32_t>();
    data.seed = j.at("seed").get<uint64_t>();
    for (const auto& e : j.at("examples")) {
      ToyExample ex;
      ex.example_id = e.at("id").get<std::string>();
      if (data.task == Task::cluster_classification) {
        const auto& feats = e.at("features");
        ex.features = VecD(static_cast<int64_t>(feats.size()));
        for (size_t i = 0; i < feats.size(); ++i)
          ex.features[static_cast<int64_t>(i)] = feats[i].get<double>();
        ex.label = e.at("label").get<int32_t>();
      } else {
        ex.tokens = e.at("tokens").get<std::vector<int32_t>>();
      }
      data.examples.push_back(std::move(ex));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("bad dataset json: ") + e.what());
  }
  return data;
}

int64_t ToyModel::adapter_dim(int l) const {
  return adapters[l].a.size() + adapters[l].b.size();
}

int64_t ToyModel::total_adapter_dim() const {
  int64_t acc = 0;
  for (int l = 0; l < layer_count(); ++l) acc += adapter_dim(l);
  return acc;
}

ToyModel make_toy_model(int64_t input_dim, int64_t output_dim, const ModelConfig& cfg) {
  if (cfg.layers < 1) fail(ErrorCode::invalid_argument, "model needs >= 1 layer");
  if (cfg.hidden < 1) fail(ErrorCode::invalid_argument, "hidden width must be >= 1");
  if (cfg.rank < 1) fail(ErrorCode::invalid_argument, "adapter rank must be >= 1");
  if (input_dim < 1 || output_dim < 2)
    fail(ErrorCode::invalid_argument, "model needs input_dim >= 1, output_dim >= 2");

  std::vector<std::pair<int64_t, int64_t>> dims;  // (out, in) per layer
  if (cfg.layers == 1) {
    dims.emplace_back(output_dim, input_dim);
  } else {
    dims.emplace_back(cfg.hidden, input_dim);
    for (int l = 0; l < cfg.layers - 2; ++l) dims.emplace_back(cfg.hidden, cfg.hidden);
    dims.emplace_back(output_dim, cfg.hidden);
  }

  Rng rng(cfg.seed);
  ToyModel model;
  model.rank = cfg.rank;
  for (auto [out, in] : dims) {
    const double w0_scale = 1.0 / std::sqrt(static_cast<double>(in));
    MatD w0(out, in);
    for (int64_t i = 0; i < out; ++i)
      for (int64_t j = 0; j < in; ++j) w0(i, j) = w0_scale * rng.normal();
    AdapterPair ad;
    ad.a = MatD(out, cfg.rank);
    const double a_scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (int64_t i = 0; i < out; ++i)
      for (int64_t j = 0; j < cfg.rank; ++j) ad.a(i, j) = a_scale * rng.normal();
    ad.b = MatD::Zero(cfg.rank, in);
    model.frozen.push_back(std::move(w0));
    model.adapters.push_back(std::move(ad));
  }
  return model;
}

ToyModel make_toy_model(const ToyDataset& data, const ModelConfig& cfg) {
  return make_toy_model(data.input_dim(), data.vocab_or_classes, cfg);
}

std::string model_to_json(const ToyModel& model) {
  nlohmann::json j;
  j["rank"] = model.rank;
  nlohmann::json layers = nlohmann::json::array();
  for (int l = 0; l < model.layer_count(); ++l) {
    nlohmann::json layer;
    layer["w0"] = matrix_to_json(model.frozen[l]);
    layer["a"] = matrix_to_json(model.adapters[l].a);
    layer["b"] = matrix_to_json(model.adapters[l].b);
    layers.push_back(std::move(layer));
  }
  j["layers"] = std::move(layers);
  return j.dump(2) + "\n";
}

ToyModel model_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("bad model json: ") + e.what());
  }
  ToyModel model;
  try {
    model.rank = j.at("rank").get<int32_t>();
    for (const auto& layer : j.at("layers")) {
      model.frozen.push_back(matrix_from_json(layer.at("w0")));
      AdapterPair ad;
      ad.a = matrix_from_json(layer.at("a"));
      ad.b = matrix_from_json(layer.at("b"));
      model.adapters.push_back(std::move(ad));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("bad model json: ") + e.what());
  }
  if (model.frozen.empty()) fail(ErrorCode::invalid_argument, "model json has no layers");
  return model;
}

std::string model_tag(const ToyModel& model) {
  uint64_t h = fnv1a_init();
  const int64_t rank = model.rank;
  fnv1a_bytes(h, &rank, sizeof(rank));
  for (int l = 0; l < model.layer_count(); ++l) {
    fnv1a_matrix(h, model.frozen[l]);
    fnv1a_matrix(h, model.adapters[l].a);
    fnv1a_matrix(h, model.adapters[l].b);
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "toy-%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double example_loss(const ToyModel& model, const ToyExample& ex, Task task) {
  check_example(model, ex, task);
  const auto weights = effective_weights(model);
  if (task == Task::cluster_classification)
    return forward_pass(weights, ex.features, ex.label).loss;
  double acc = 0.0;
  const int64_t transitions = static_cast<int64_t>(ex.tokens.size()) - 1;
  for (int64_t t = 0; t < transitions; ++t)
    acc += forward_pass(weights, onehot(ex.tokens[t], model.input_dim()), ex.tokens[t + 1]).loss;
  return acc / static_cast<double>(transitions);
}

double mean_loss(const ToyModel& model, const ToyDataset& data) {
  if (data.examples.empty()) fail(ErrorCode::invalid_argument, "mean_loss of empty dataset");
  double acc = 0.0;
  for (int64_t idx : ascending_id_order(data))
    acc += example_loss(model, data.examples[idx], data.task);
  return acc / static_cast<double>(data.size());
}

double training_objective(const ToyModel& model, const ToyDataset& data, double l2_damping) {
  const VecD theta = flatten_adapters(model);
  return mean_loss(model, data) + 0.5 * l2_damping * theta.squaredNorm();
}

double accuracy(const ToyModel& model, const ToyDataset& data) {
  if (data.task != Task::cluster_classification)
    fail(ErrorCode::invalid_argument, "accuracy is defined for cluster_classification");
  if (data.examples.empty()) fail(ErrorCode::invalid_argument, "accuracy of empty dataset");
  const auto weights = effective_weights(model);
  int64_t hits = 0;
  for (const auto& ex : data.examples) {
    check_example(model, ex, data.task);
    Forward f = forward_pass(weights, ex.features, ex.label);
    int best = 0;
    f.logits.maxCoeff(&best);
    if (best == ex.label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

std::vector<VecD> example_adapter_gradients(const ToyModel& model, const ToyExample& ex,
                                            Task task) {
  check_example(model, ex, task);
  const auto weights = effective_weights(model);
  if (task == Task::cluster_classification)
    return adapter_grads_single(model, weights, ex.features, ex.label);

  const int64_t transitions = static_cast<int64_t>(ex.tokens.size()) - 1;
  std::vector<VecD> acc;
  for (int64_t t = 0; t < transitions; ++t) {
    auto g = adapter_grads_single(model, weights, onehot(ex.tokens[t], model.input_dim()),
                                  ex.tokens[t + 1]);
    if (acc.empty()) {
      acc = std::move(g);
    } else {
      for (size_t l = 0; l < acc.size(); ++l) acc[l] += g[l];
    }
  }
  for (auto& block : acc) block /= static_cast<double>(transitions);
  return acc;
}

std::vector<std::vector<VecD>> per_token_gradients(const ToyModel& model, const ToyExample& ex) {
  check_example(model, ex, Task::markov_next_token);
  const auto weights = effective_weights(model);
  std::vector<std::vector<VecD>> out;
  const int64_t transitions = static_cast<int64_t>(ex.tokens.size()) - 1;
  out.reserve(transitions);
  for (int64_t t = 0; t < transitions; ++t)
    out.push_back(adapter_grads_single(model, weights, onehot(ex.tokens[t], model.input_dim()),
                                       ex.tokens[t + 1]));
  return out;
}

GradientManifest per_example_gradients(const ToyModel& model, const ToyDataset& data,
                                       Split split) {
  GradientManifest m;
  m.split = split;
  m.model_tag = model_tag(model);
  m.created_at = "1970-01-01T00:00:00Z";
  for (int l = 0; l < model.layer_count(); ++l) {
    LayerSpec spec;
    spec.layer_index = l;
    spec.name = "layer" + std::to_string(l);
    spec.dim = model.adapter_dim(l);
    m.layers.push_back(std::move(spec));
  }
  m.examples.reserve(data.examples.size());
  for (const auto& ex : data.examples) {
    ExampleGradient g;
    g.example_id = ex.example_id;
    g.loss_value = static_cast<float>(example_loss(model, ex, data.task));
    g.token_count = data.task == Task::markov_next_token
                        ? static_cast<uint32_t>(ex.tokens.size())
                        : 1u;
    auto blocks = example_adapter_gradients(model, ex, data.task);
    g.per_layer.reserve(blocks.size());
    for (const auto& b : blocks) g.per_layer.push_back(b.cast<float>());
    m.examples.push_back(std::move(g));
  }
  validate_manifest(m);
  return m;
}

VecD objective_gradient(const ToyModel& model, const ToyDataset& data) {
  if (data.examples.empty())
    fail(ErrorCode::invalid_argument, "objective_gradient of empty dataset");
  VecD acc = VecD::Zero(model.total_adapter_dim());
  for (int64_t idx : ascending_id_order(data)) {
    auto blocks = example_adapter_gradients(model, data.examples[idx], data.task);
    int64_t at = 0;
    for (const auto& b : blocks) {
      acc.segment(at, b.size()) += b;
      at += b.size();
    }
  }
  return acc / static_cast<double>(data.size());
}

MatD hessian_of_mean_loss(const ToyModel& model, const ToyDataset& data, double step) {
  if (step <= 0) fail(ErrorCode::invalid_argument, "finite difference step must be > 0");
  const int64_t dim = model.total_adapter_dim();
  const VecD theta = flatten_adapters(model);
  MatD h(dim, dim);
  ToyModel probe = model;
  for (int64_t j = 0; j < dim; ++j) {
    VecD t = theta;
    t[j] = theta[j] + step;
    unflatten_adapters(probe, t);
    const VecD gp = objective_gradient(probe, data);
    t[j] = theta[j] - step;
    unflatten_adapters(probe, t);
    const VecD gm = objective_gradient(probe, data);
    h.col(j) = (gp - gm) / (2.0 * step);
  }
  return 0.5 * (h + h.transpose());
}

ToyModel train(const ToyModel& model, const ToyDataset& data, const TrainConfig& cfg) {
  if (cfg.learning_rate < 0) fail(ErrorCode::invalid_argument, "learning_rate must be >= 0");
  if (cfg.epochs < 0) fail(ErrorCode::invalid_argument, "epochs must be >= 0");
  if (cfg.l2_damping < 0) fail(ErrorCode::invalid_argument, "l2_damping must be >= 0");
  if (data.examples.empty()) fail(ErrorCode::invalid_argument, "train on empty dataset");

  ToyModel cur = model;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const VecD g = objective_gradient(cur, data);
    VecD theta = flatten_adapters(cur);
    theta -= cfg.learning_rate * (g + cfg.l2_damping * theta);
    if (!theta.allFinite())
      fail(ErrorCode::numerical, "training diverged at epoch " + std::to_string(epoch));
    unflatten_adapters(cur, theta);
  }
  if (cfg.epochs > 0 && !std::isfinite(mean_loss(cur, data)))
    fail(ErrorCode::numerical,
         "training diverged at epoch " + std::to_string(cfg.epochs - 1));
  return cur;
}

double perplexity(const ToyModel& model, const ToyDataset& data) {
  if (data.task != Task::markov_next_token)
    fail(ErrorCode::invalid_argument, "perplexity is defined for next-token data only");
  return std::exp(mean_loss(model, data));
}

int worker_count() {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  int cap = static_cast<int>(hw);
  if (const char* env = std::getenv("IN2CORE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) cap = std::min<long>(v, cap);
  }
  return std::max(cap, 1);
}

std::vector<std::pair<std::string, double>> loo_oracle(const ToyDataset& data,
                                                       const ToyDataset& val,
                                                       const TrainConfig& cfg,
                                                       const ToyModel& base_model) {
  if (data.examples.empty()) fail(ErrorCode::invalid_argument, "loo on empty dataset");
  if (data.size() < 2)
    fail(ErrorCode::invalid_argument, "loo needs at least 2 training examples");

  const ToyModel full = train(base_model, data, cfg);
  const double loss_full = mean_loss(full, val);

  const int64_t n = data.size();
  std::vector<double> deltas(n, 0.0);
  std::atomic<int64_t> next{0};
  const int workers = std::min<int64_t>(worker_count(), n);

  auto work = [&]() {
    for (;;) {
      const int64_t i = next.fetch_add(1);
      if (i >= n) return;
      ToyDataset subset;
      subset.task = data.task;
      subset.vocab_or_classes = data.vocab_or_classes;
      subset.feature_dim = data.feature_dim;
      subset.seed = data.seed;
      subset.examples.reserve(n - 1);
      for (int64_t j = 0; j < n; ++j)
        if (j != i) subset.examples.push_back(data.examples[j]);
      const ToyModel m = train(base_model, subset, cfg);
      deltas[i] = mean_loss(m, val) - loss_full;
    }
  };

  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }

  std::vector<std::pair<std::string, double>> out;
  out.reserve(n);
  for (int64_t i = 0; i < n; ++i) out.emplace_back(data.examples[i].example_id, deltas[i]);
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

VecD flatten_adapters(const ToyModel& model) {
  VecD out(model.total_adapter_dim());
  int64_t at = 0;
  for (int l = 0; l < model.layer_count(); ++l) {
    const auto& ad = model.adapters[l];
    out.segment(at, ad.a.size()) = Eigen::Map<const VecD>(ad.a.data(), ad.a.size());
    at += ad.a.size();
    out.segment(at, ad.b.size()) = Eigen::Map<const VecD>(ad.b.data(), ad.b.size());
    at += ad.b.size();
  }
  return out;
}

void unflatten_adapters(ToyModel& model, const VecD& theta) {
  if (theta.size() != model.total_adapter_dim())
    fail(ErrorCode::dimension_mismatch, "adapter vector length mismatch");
  int64_t at = 0;
  for (int l = 0; l < model.layer_count(); ++l) {
    auto& ad = model.adapters[l];
    Eigen::Map<VecD>(ad.a.data(), ad.a.size()) = theta.segment(at, ad.a.size());
    at += ad.a.size();
    Eigen::Map<VecD>(ad.b.data(), ad.b.size()) = theta.segment(at, ad.b.size());
    at += ad.b.size();
  }
}

}  // namespace in2core
