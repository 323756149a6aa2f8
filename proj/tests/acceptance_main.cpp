// Acceptance gate: ten end-to-end properties, one per command line argument
// (1-10), or all of them when run bare. Each prints a [PASS]/[FAIL] line; the
// exit status is the number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "in2core/coreset.hpp"
#include "in2core/coverage.hpp"
#include "in2core/error.hpp"
#include "in2core/influence.hpp"
#include "in2core/layer_budget.hpp"
#include "in2core/stats.hpp"
#include "in2core/toy_harness.hpp"
#include "test_util.hpp"

using namespace in2core;
using testutil::ManifestBuilder;
using testutil::run_cli;
using testutil::TempDir;

namespace {

int checks_failed = 0;

void expect(bool ok, const std::string& what) {
  if (!ok) {
    ++checks_failed;
    std::cout << "    check failed: " << what << "\n";
  }
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

ToyDataset subset_by_ids(const ToyDataset& d, const std::vector<std::string>& ids) {
  std::set<std::string> keep(ids.begin(), ids.end());
  ToyDataset out = d;
  out.examples.clear();
  for (const auto& ex : d.examples)
    if (keep.count(ex.example_id)) out.examples.push_back(ex);
  return out;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_var(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

// ---- 1: analytic gradients match finite differences -------------------------

VecD fd_gradient(const ToyModel& model, const ToyExample& ex, Task task, double h) {
  ToyModel m = model;
  const VecD theta = flatten_adapters(m);
  VecD g(theta.size());
  for (int64_t i = 0; i < theta.size(); ++i) {
    VecD t = theta;
    t[i] = theta[i] + h;
    unflatten_adapters(m, t);
    const double up = example_loss(m, ex, task);
    t[i] = theta[i] - h;
    unflatten_adapters(m, t);
    const double down = example_loss(m, ex, task);
    g[i] = (up - down) / (2.0 * h);
  }
  unflatten_adapters(m, theta);
  return g;
}

bool criterion_gradients() {
  int64_t coords = 0;
  double worst = 0.0;
  for (Task task : {Task::cluster_classification, Task::markov_next_token}) {
    for (int layers = 1; layers <= 3; ++layers) {
      DatasetParams p;
      p.task = task;
      p.n = 10;
      p.seed = 7 + layers;
      p.vocab = 4;
      auto data = generate_dataset(p);

      ModelConfig mc;
      mc.layers = layers;
      mc.hidden = 5;
      mc.rank = 2;
      mc.seed = 7;
      TrainConfig tc;
      tc.learning_rate = 0.2;
      tc.epochs = 3;
      tc.l2_damping = 0.0;
      // a few warmup steps so the low-rank factors are away from zero
      auto model = train(make_toy_model(data, mc), data, tc);

      for (const auto& ex : data.examples) {
        const auto per_layer = example_adapter_gradients(model, ex, task);
        VecD analytic(model.total_adapter_dim());
        int64_t at = 0;
        for (const auto& block : per_layer) {
          analytic.segment(at, block.size()) = block;
          at += block.size();
        }
        const VecD fd = fd_gradient(model, ex, task, 1e-6);
        for (int64_t i = 0; i < fd.size(); ++i) {
          const double scale = std::max({1.0, std::fabs(analytic[i]), std::fabs(fd[i])});
          worst = std::max(worst, std::fabs(analytic[i] - fd[i]) / scale);
          ++coords;
        }
      }
    }
  }
  std::cout << "    " << coords << " coordinates compared, worst relative error "
            << worst << "\n";
  expect(coords >= 1000, "at least 1000 coordinates sampled");
  expect(worst < 1e-4, "relative error below 1e-4");
  return checks_failed == 0;
}

// ---- 2: influence scores predict leave-one-out retraining -------------------

bool criterion_retraining_oracle() {
  int passed = 0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    DatasetParams p;
    p.task = Task::cluster_classification;
    p.n = 30;
    p.seed = seed;
    auto data = generate_dataset(p);
    DatasetParams pv = p;
    pv.n = 10;
    pv.seed = seed + 500;
    pv.world_seed = seed;
    pv.id_prefix = "val";
    auto val = generate_dataset(pv);

    ModelConfig mc;
    mc.layers = 1;
    mc.hidden = 4;
    mc.rank = 2;
    mc.seed = seed;
    TrainConfig tc;
    tc.learning_rate = 0.3;
    tc.epochs = 1500;
    tc.seed = seed;
    tc.l2_damping = 0.01;
    auto base = make_toy_model(data, mc);
    auto model = train(base, data, tc);

    auto tg = per_example_gradients(model, data, Split::train);
    auto vg = per_example_gradients(model, val, Split::validation);
    MatD h = hessian_of_mean_loss(model, data);
    InfluenceConfig cfg;
    cfg.estimator = Estimator::exact;
    cfg.damping_value = 0.01;
    auto records = influence_against_set(tg, vg, cfg, &h);

    auto deltas = loo_oracle(data, val, tc, base);
    std::map<std::string, double> by_id(deltas.begin(), deltas.end());
    std::vector<double> scores, neg_deltas;
    for (const auto& r : records) {
      scores.push_back(r.influence);
      neg_deltas.push_back(-by_id.at(r.example_id));
    }
    auto rho = stats::spearman(scores, neg_deltas);
    std::cout << "    seed " << seed << ": rho " << (rho ? *rho : -9.0) << "\n";
    if (rho && *rho >= 0.8) ++passed;
  }
  std::cout << "    " << passed << "/5 seeds at rho >= 0.8\n";
  expect(passed >= 4, "at least 4 of 5 seeds reach rho >= 0.8");
  return checks_failed == 0;
}

// ---- 3: fast estimator agrees with the dense solver -------------------------

bool criterion_estimator_fidelity() {
  int passed = 0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    DatasetParams p;
    p.task = Task::markov_next_token;
    p.n = 100;
    p.seed = seed;
    p.vocab = 4;
    p.min_len = 10;
    p.max_len = 30;
    auto data = generate_dataset(p);
    DatasetParams pv = p;
    pv.n = 25;
    pv.seed = seed + 1000;  // fresh world too: queries off the training manifold
    pv.id_prefix = "val";
    auto val = generate_dataset(pv);

    ModelConfig mc;
    mc.layers = 3;
    mc.hidden = 8;
    mc.rank = 2;
    mc.seed = seed;
    TrainConfig tc;
    tc.learning_rate = 0.3;
    tc.epochs = 4000;
    tc.seed = seed;
    tc.l2_damping = 0.01;
    auto model = train(make_toy_model(data, mc), data, tc);
    expect(model.total_adapter_dim() <= 200, "at most 200 trainable parameters");

    auto tg = per_example_gradients(model, data, Split::train);
    auto vg = per_example_gradients(model, val, Split::validation);

    InfluenceConfig exact_cfg;
    exact_cfg.estimator = Estimator::exact;
    exact_cfg.damping_value = 0.3;
    MatD h = hessian_of_mean_loss(model, data);
    auto exact = influence_against_set(tg, vg, exact_cfg, &h);

    InfluenceConfig fast_cfg;
    fast_cfg.estimator = Estimator::datainf;
    fast_cfg.damping_mode = DampingMode::fixed;
    fast_cfg.damping_value = 0.3;
    auto fast = influence_against_set(tg, vg, fast_cfg);

    std::map<std::string, double> fast_by_id;
    for (const auto& r : fast) fast_by_id[r.example_id] = r.influence;
    std::vector<double> a, b;
    for (const auto& r : exact) {
      a.push_back(r.influence);
      b.push_back(fast_by_id.at(r.example_id));
    }
    auto rho = stats::spearman(a, b);
    std::cout << "    seed " << seed << ": rho " << (rho ? *rho : -9.0) << "\n";
    if (rho && *rho >= 0.9) ++passed;
  }
  std::cout << "    " << passed << "/5 seeds at rho >= 0.9\n";
  expect(passed >= 4, "at least 4 of 5 seeds reach rho >= 0.9");
  return checks_failed == 0;
}

// ---- 4: proponent coresets order validation loss ----------------------------

bool criterion_coreset_ordering() {
  std::vector<double> prop_losses, rand_losses, opp_losses;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    DatasetParams p;
    p.task = Task::cluster_classification;
    p.n = 100;
    p.seed = seed;
    p.label_noise = 0.2;  // selection only matters when some points hurt
    auto data = generate_dataset(p);
    DatasetParams pv = p;
    pv.n = 25;
    pv.seed = seed + 500;
    pv.world_seed = seed;
    pv.id_prefix = "val";
    pv.label_noise = 0.0;
    auto val = generate_dataset(pv);

    ModelConfig mc;
    mc.layers = 1;
    mc.hidden = 6;
    mc.rank = 2;
    mc.seed = seed;
    TrainConfig tc;
    tc.learning_rate = 0.3;
    tc.epochs = 500;
    tc.seed = seed;
    tc.l2_damping = 0.01;
    auto base = make_toy_model(data, mc);
    auto model = train(base, data, tc);

    auto tg = per_example_gradients(model, data, Split::train);
    auto vg = per_example_gradients(model, val, Split::validation);
    MatD h = hessian_of_mean_loss(model, data);
    InfluenceConfig cfg;
    cfg.estimator = Estimator::exact;
    cfg.damping_value = 0.01;
    auto records = influence_against_set(tg, vg, cfg, &h);

    auto eval_strategy = [&](Strategy s) {
      CoresetSpec cs;
      cs.strategy = s;
      cs.fraction = 0.5;
      cs.seed = seed;
      auto ids = select_coreset(records, cs).selected_ids;
      auto retrained = train(base, subset_by_ids(data, ids), tc);
      return mean_loss(retrained, val);
    };
    const double lp = eval_strategy(Strategy::proponents);
    const double lr = eval_strategy(Strategy::random);
    const double lo = eval_strategy(Strategy::opponents);
    prop_losses.push_back(lp);
    rand_losses.push_back(lr);
    opp_losses.push_back(lo);
    std::cout << "    seed " << seed << ": proponents " << lp << " random " << lr
              << " opponents " << lo << "\n";
  }
  const double mp = mean_of(prop_losses);
  const double mr = mean_of(rand_losses);
  const double mo = mean_of(opp_losses);
  // standard error of the difference of two 5-seed means
  const double pooled_se = std::sqrt(sample_var(prop_losses) / 5.0 +
                                     sample_var(opp_losses) / 5.0);
  std::cout << "    means: proponents " << mp << " random " << mr << " opponents "
            << mo << " (gap " << mo - mp << ", pooled se " << pooled_se << ")\n";
  expect(mp <= mr, "mean proponent loss <= mean random loss");
  expect(mr <= mo, "mean random loss <= mean opponent loss");
  expect(mo - mp >= pooled_se, "proponents vs opponents separated by >= 1 pooled se");
  return checks_failed == 0;
}

// ---- 5: half the data beats all of it under contamination -------------------

bool criterion_less_is_more() {
#ifndef IN2CORE_TEST_CONFIG_DIR
  expect(false, "config directory not compiled in");
  return false;
#else
  const std::string path =
      std::string(IN2CORE_TEST_CONFIG_DIR) + "/contaminated_selection.json";
  nlohmann::json j = nlohmann::json::parse(slurp(path));
  const uint64_t seed = j["seed"].get<uint64_t>();

  DatasetParams pc;
  pc.task = Task::cluster_classification;
  pc.n = j["clean"]["n"].get<int64_t>();
  pc.seed = seed;
  pc.cluster_noise = j["clean"]["cluster_noise"].get<double>();
  pc.id_prefix = j["clean"]["id_prefix"].get<std::string>();
  auto clean = generate_dataset(pc);

  DatasetParams px = pc;
  px.n = j["contamination"]["n"].get<int64_t>();
  px.seed = seed + j["contamination"]["seed_offset"].get<uint64_t>();
  px.world_seed = seed;
  px.shift = j["contamination"]["shift"].get<double>();
  px.id_prefix = j["contamination"]["id_prefix"].get<std::string>();
  auto data = concat_datasets(clean, generate_dataset(px));

  DatasetParams pv = pc;
  pv.n = j["validation"]["n"].get<int64_t>();
  pv.seed = seed + j["validation"]["seed_offset"].get<uint64_t>();
  pv.world_seed = seed;
  pv.id_prefix = j["validation"]["id_prefix"].get<std::string>();
  auto val = generate_dataset(pv);

  ModelConfig mc;
  mc.layers = j["model"]["layers"].get<int32_t>();
  mc.hidden = j["model"]["hidden"].get<int32_t>();
  mc.rank = j["model"]["rank"].get<int32_t>();
  mc.seed = seed;
  TrainConfig tc;
  tc.learning_rate = j["training"]["lr"].get<double>();
  tc.epochs = j["training"]["epochs"].get<int32_t>();
  tc.seed = seed;
  tc.l2_damping = j["training"]["l2"].get<double>();

  auto base = make_toy_model(data, mc);
  auto full_model = train(base, data, tc);
  const double full_loss = mean_loss(full_model, val);

  auto tg = per_example_gradients(full_model, data, Split::train);
  auto vg = per_example_gradients(full_model, val, Split::validation);
  MatD h = hessian_of_mean_loss(full_model, data);
  InfluenceConfig cfg;
  cfg.estimator = Estimator::exact;
  cfg.damping_value = j["influence"]["damping"].get<double>();
  auto records = influence_against_set(tg, vg, cfg, &h);

  CoresetSpec cs;
  cs.strategy = Strategy::proponents;
  cs.fraction = j["selection"]["fraction"].get<double>();
  cs.seed = seed;
  auto ids = select_coreset(records, cs).selected_ids;
  int contaminated_kept = 0;
  for (const auto& id : ids)
    if (id.rfind(px.id_prefix, 0) == 0) ++contaminated_kept;

  auto half_model = train(base, subset_by_ids(data, ids), tc);
  const double half_loss = mean_loss(half_model, val);

  std::cout << "    full-data val loss " << full_loss << ", best-half val loss "
            << half_loss << " (" << contaminated_kept << "/" << px.n
            << " contaminated points kept)\n";
  expect(half_loss < full_loss, "half the data trains to strictly lower val loss");
  return checks_failed == 0;
#endif
}

// ---- 6: layer profile is exact and picks the dominant layer -----------------

bool criterion_layer_budget() {
  // a) real trained-model gradients: the full-depth entry agrees with itself
  DatasetParams p;
  p.task = Task::markov_next_token;
  p.n = 20;
  p.seed = 11;
  p.vocab = 4;
  auto data = generate_dataset(p);
  DatasetParams pv = p;
  pv.n = 8;
  pv.seed = 1011;
  pv.world_seed = 11;
  pv.id_prefix = "val";
  auto val = generate_dataset(pv);
  ModelConfig mc;
  mc.layers = 3;
  mc.hidden = 6;
  mc.rank = 2;
  mc.seed = 11;
  TrainConfig tc;
  tc.learning_rate = 0.3;
  tc.epochs = 300;
  tc.l2_damping = 0.01;
  auto model = train(make_toy_model(data, mc), data, tc);
  auto tg = per_example_gradients(model, data, Split::train);
  auto vg = per_example_gradients(model, val, Split::validation);

  InfluenceConfig cfg;
  cfg.estimator = Estimator::identity;
  auto report = profile_layer_budget(tg, vg, cfg, {1, 2, 3}, UINT64_MAX);
  expect(report.entries.back().rho == 1.0, "full-depth agreement is exactly 1.0");
  for (const auto& e : report.entries)
    expect(e.s == e.rho / static_cast<double>(e.k), "s equals rho over k, exactly");

  // b) synthetic manifests where the first layer carries all the signal
  ManifestBuilder tb(Split::train, {2, 2, 2});
  ManifestBuilder vb(Split::validation, {2, 2, 2});
  for (int i = 0; i < 8; ++i) {
    const float signal = 100.0f * static_cast<float>(i + 1);
    const float noise = (i % 2 == 0) ? 1.5f : -2.5f;
    tb.add("t" + std::to_string(i),
           {{signal, -signal}, {noise, 0.3f * noise}, {-noise, noise}});
  }
  vb.add("v0", {{10.0f, -10.0f}, {0.5f, 0.1f}, {-0.2f, 0.4f}});
  auto dom_report =
      profile_layer_budget(tb.build(), vb.build(), cfg, {1, 2, 3}, UINT64_MAX);
  expect(dom_report.chosen_k == 1, "dominant first layer picks k = 1");
  for (const auto& e : dom_report.entries)
    expect(e.s == e.rho / static_cast<double>(e.k), "s equals rho over k, exactly");
  expect(dom_report.entries.back().rho == 1.0,
         "full-depth agreement is exactly 1.0 on the synthetic manifest");
  return checks_failed == 0;
}

// ---- 7: coverage tracks test loss better than similarity --------------------

bool criterion_coverage_correlation() {
  int passed = 0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    DatasetParams p;
    p.task = Task::cluster_classification;
    p.n = 100;
    p.seed = seed;
    p.cluster_noise = 1.0;
    auto data = generate_dataset(p);
    DatasetParams pid = p;
    pid.n = 25;
    pid.seed = seed + 300;
    pid.world_seed = seed;
    pid.id_prefix = "id";
    DatasetParams pod = pid;
    pod.seed = seed + 600;
    pod.shift = 4.0;
    pod.id_prefix = "od";
    auto test_data = concat_datasets(generate_dataset(pid), generate_dataset(pod));

    ModelConfig mc;
    mc.layers = 1;
    mc.hidden = 6;
    mc.rank = 2;
    mc.seed = seed;
    TrainConfig tc;
    tc.learning_rate = 0.3;
    tc.epochs = 500;
    tc.seed = seed;
    tc.l2_damping = 0.01;
    auto model = train(make_toy_model(data, mc), data, tc);

    auto cache = build_cache(per_example_gradients(model, data, Split::train));
    auto test_m = per_example_gradients(model, test_data, Split::test);

    std::vector<std::pair<std::string, double>> losses;
    for (const auto& ex : test_data.examples)
      losses.emplace_back(ex.example_id, example_loss(model, ex, test_data.task));

    EmbeddingSet emb;
    for (const auto& ex : data.examples) emb.train.push_back(ex.features);
    for (const auto& ex : test_data.examples) emb.test[ex.example_id] = ex.features;

    InfluenceConfig cfg;
    cfg.estimator = Estimator::identity;
    auto report = coverage_report(cache, test_m, losses, cfg, &emb);
    const double ic =
        report.influence_loss_corr ? *report.influence_loss_corr : -9.0;
    const double sc =
        report.similarity_loss_corr ? *report.similarity_loss_corr : -9.0;
    std::cout << "    seed " << seed << ": influence corr " << ic
              << ", similarity corr " << sc << "\n";
    if (ic > 0.0 && ic > sc) ++passed;
  }
  std::cout << "    " << passed << "/5 seeds with positive and dominant influence correlation\n";
  expect(passed >= 4, "at least 4 of 5 seeds");
  return checks_failed == 0;
}

// ---- 8: cached scoring reads no training data --------------------------------

bool criterion_cache_amortization() {
  ManifestBuilder tb(Split::train, {6, 4});
  for (int i = 0; i < 12; ++i) {
    std::vector<float> a(6), b(4);
    for (int k = 0; k < 6; ++k) a[static_cast<size_t>(k)] = 0.1f * float(i - k);
    for (int k = 0; k < 4; ++k) b[static_cast<size_t>(k)] = 0.2f * float(i + k);
    tb.add("t" + std::to_string(i), {a, b});
  }
  const auto train_m = tb.build();
  const auto cache = build_cache(train_m);

  InfluenceConfig cfg;
  cfg.estimator = Estimator::identity;
  reset_train_read_counter();
  for (int i = 0; i < 25; ++i) {
    ExampleGradient q;
    q.example_id = "q";
    VecF l0(6), l1(4);
    for (int k = 0; k < 6; ++k) l0[k] = float(i + k);
    for (int k = 0; k < 4; ++k) l1[k] = float(i - k);
    q.per_layer = {l0, l1};
    (void)coverage_score(cache, q, cfg);
  }
  const uint64_t reads = train_read_count();
  std::cout << "    25 points scored, " << reads << " training-example reads\n";
  expect(reads == 0, "identity scoring from the cache reads zero training examples");

  // control: the estimator that does need training data is counted
  cfg.estimator = Estimator::datainf;
  cfg.damping_mode = DampingMode::fixed;
  cfg.damping_value = 0.5;
  ExampleGradient q;
  q.example_id = "q";
  q.per_layer = {VecF::Ones(6), VecF::Ones(4)};
  (void)coverage_score(cache, q, cfg, &train_m);
  expect(train_read_count() > 0, "the counter itself is live");
  return checks_failed == 0;
}

// ---- 9: manifest round trip is bit exact -------------------------------------

bool criterion_format_roundtrip() {
  TempDir dir;
  ManifestBuilder tb(Split::train, {8, 6, 4});
  std::mt19937_64 rng(424242);
  auto nextf = [&rng]() {
    return static_cast<float>(static_cast<double>(rng() % 2000000) / 1e6 - 1.0);
  };
  for (int i = 0; i < 10000; ++i) {
    std::vector<float> a(8), b(6), c(4);
    for (auto& x : a) x = nextf();
    for (auto& x : b) x = nextf();
    for (auto& x : c) x = nextf();
    tb.add("ex" + std::to_string(i), {a, b, c}, nextf(),
           static_cast<uint32_t>(1 + (i % 37)));
  }
  const auto manifest = tb.build();

  const auto path = dir.sub("big.in2g");
  const uint64_t written = write_manifest(manifest, path);
  const auto loaded = read_manifest(path);

  bool equal = loaded.split == manifest.split &&
               loaded.model_tag == manifest.model_tag &&
               loaded.created_at == manifest.created_at &&
               loaded.layers == manifest.layers &&
               loaded.examples.size() == manifest.examples.size();
  for (size_t i = 0; equal && i < manifest.examples.size(); ++i) {
    const auto& a = manifest.examples[i];
    const auto& b = loaded.examples[i];
    equal = a.example_id == b.example_id && a.loss_value == b.loss_value &&
            a.token_count == b.token_count;
    for (size_t l = 0; equal && l < a.per_layer.size(); ++l)
      equal = a.per_layer[l].size() == b.per_layer[l].size() &&
              std::memcmp(a.per_layer[l].data(), b.per_layer[l].data(),
                          sizeof(float) * a.per_layer[l].size()) == 0;
  }
  expect(equal, "10000-example manifest reloads field-for-field identically");

  // rewriting the loaded copy reproduces the original bytes
  const auto path2 = dir.sub("big2.in2g");
  const uint64_t rewritten = write_manifest(loaded, path2);
  expect(written == rewritten, "byte count is stable across rewrite");
  expect(slurp(path) == slurp(path2), "file bytes are identical across rewrite");

  // slicing to the first layer keeps exactly that layer's share of the payload
  const auto sliced = restrict_layers(manifest, 1);
  const uint64_t sliced_bytes = write_manifest(sliced, dir.sub("k1.in2g"));
  const uint64_t n = manifest.examples.size();
  // overhead covers header, layer table, and id fields; what remains per
  // example is 8 bytes of loss + token_count plus the gradient floats
  const uint64_t full_payload =
      written - manifest_overhead_bytes(manifest) - n * 8;
  const uint64_t k1_payload = sliced_bytes - manifest_overhead_bytes(sliced) - n * 8;
  std::cout << "    payload bytes: full " << full_payload << ", first layer "
            << k1_payload << "\n";
  expect(full_payload == n * 18 * 4, "full payload is n * total dim * 4");
  expect(k1_payload == n * 8 * 4, "first-layer payload is n * dim0 * 4");
  expect(k1_payload * 18 == full_payload * 8,
         "first-layer payload is exactly its fraction of the total");
  return checks_failed == 0;
}

// ---- 10: command line reruns are byte identical ------------------------------

bool criterion_cli_determinism() {
  TempDir t;
  const std::string base = t.str();

  auto gen = [&](const std::string& dir) {
    expect(run_cli({"toy", "generate", "--task", "markov_next_token", "--n", "24",
                    "--seed", "9", "--vocab", "4", "--name", "data", "--out", dir})
                   .status == 0,
           "generate succeeds");
    expect(run_cli({"toy", "train", "--data", dir + "/data.json", "--layers", "2",
                    "--hidden", "5", "--rank", "2", "--lr", "0.3", "--epochs", "150",
                    "--seed", "9", "--l2", "0.01", "--name", "model", "--out", dir})
                   .status == 0,
           "train succeeds");
  };
  gen(base + "/a");
  gen(base + "/b");
  expect(slurp(base + "/a/data.json") == slurp(base + "/b/data.json"),
         "dataset bytes identical across reruns");
  expect(slurp(base + "/a/model.json") == slurp(base + "/b/model.json"),
         "model bytes identical across reruns");

  // one shared input set; gradient, influence, and profile outputs rerun twice
  const std::string data = base + "/a/data.json";
  const std::string model = base + "/a/model.json";
  for (const std::string run : {"r1", "r2"}) {
    const std::string d = base + "/" + run;
    expect(run_cli({"toy", "grads", "--model", model, "--data", data, "--split",
                    "train", "--name", "g", "--out", d})
                   .status == 0,
           "grads succeed");
    expect(run_cli({"influence", "--train", base + "/r1/g.in2g", "--val",
                    base + "/r1/g.in2g", "--estimator", "datainf", "--damping-mode",
                    "datainf_scaled", "--name", "s", "--out", d})
                   .status == 0,
           "influence succeeds");
    expect(run_cli({"layer-budget", "--train", base + "/r1/g.in2g", "--val",
                    base + "/r1/g.in2g", "--ks", "1,2", "--estimator", "identity",
                    "--out", d})
                   .status == 0,
           "layer-budget succeeds");
  }
  for (const char* f : {"g.in2g", "s.csv", "s.json", "layer_budget.csv",
                        "layer_budget.json", "layer_budget_plot.csv"})
    expect(slurp(base + "/r1/" + f) == slurp(base + "/r2/" + f),
           std::string("byte-identical rerun: ") + f);

  // worker cap must not change any byte either
  for (const std::string threads : {"1", "3"}) {
    const std::string d = base + "/th" + threads;
    expect(run_cli({"toy", "grads", "--model", model, "--data", data, "--split",
                    "train", "--name", "g", "--out", d},
                   {{"IN2CORE_THREADS", threads}})
                   .status == 0,
           "grads under a worker cap succeed");
    expect(run_cli({"influence", "--train", base + "/r1/g.in2g", "--val",
                    base + "/r1/g.in2g", "--estimator", "datainf", "--damping-mode",
                    "datainf_scaled", "--name", "s", "--out", d},
                   {{"IN2CORE_THREADS", threads}})
                   .status == 0,
           "influence under a worker cap succeeds");
  }
  expect(slurp(base + "/th1/g.in2g") == slurp(base + "/th3/g.in2g"),
         "gradient manifest identical under 1 vs 3 workers");
  expect(slurp(base + "/th1/s.csv") == slurp(base + "/th3/s.csv"),
         "influence csv identical under 1 vs 3 workers");
  return checks_failed == 0;
}

struct Criterion {
  int number;
  const char* name;
  std::function<bool()> run;
  double time_limit_s;  // 0 = no limit stated
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all = {
      {1, "analytic gradients match finite differences", criterion_gradients, 60},
      {2, "influence scores predict leave-one-out retraining",
       criterion_retraining_oracle, 300},
      {3, "fast estimator agrees with the dense solver",
       criterion_estimator_fidelity, 120},
      {4, "proponent coresets order validation loss", criterion_coreset_ordering,
       600},
      {5, "half the data beats all of it under contamination",
       criterion_less_is_more, 0},
      {6, "layer profile is exact and picks the dominant layer",
       criterion_layer_budget, 60},
      {7, "coverage tracks test loss better than similarity",
       criterion_coverage_correlation, 300},
      {8, "cached scoring reads no training data", criterion_cache_amortization, 0},
      {9, "manifest round trip is bit exact", criterion_format_roundtrip, 0},
      {10, "command line reruns are byte identical", criterion_cli_determinism, 0},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  if (argc > 1) {
    only = std::atoi(argv[1]);
    if (only < 1 || only > 10) {
      std::cerr << "usage: acceptance [1-10]\n";
      return 64;
    }
  }

  int failures = 0;
  for (const auto& c : criteria()) {
    if (only != 0 && c.number != only) continue;
    checks_failed = 0;
    const auto start = std::chrono::steady_clock::now();
    bool ok = false;
    try {
      ok = c.run();
    } catch (const std::exception& e) {
      std::cout << "    threw: " << e.what() << "\n";
      ok = false;
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    if (c.time_limit_s > 0 && elapsed > c.time_limit_s) {
      std::cout << "    too slow: " << elapsed << "s exceeds " << c.time_limit_s
                << "s\n";
      ok = false;
    }
    std::printf("[%s] criterion %d: %s (%.1fs)\n", ok ? "PASS" : "FAIL", c.number,
                c.name, elapsed);
    if (!ok) ++failures;
  }
  return failures;
}
