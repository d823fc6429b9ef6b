// End-to-end acceptance suite. Each test case checks one release
// criterion and prints a single PASS/FAIL line so the run can be audited
// from the log alone.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "apgcl/dataset.hpp"
#include "apgcl/experiment.hpp"
#include "apgcl/gradcheck.hpp"
#include "apgcl/protocol.hpp"

using namespace apgcl;
namespace fs = std::filesystem;

namespace {

void verdict(int n, const char* name, bool ok) {
  std::printf("criterion %d (%s): %s\n", n, name, ok ? "PASS" : "FAIL");
  std::fflush(stdout);
  CHECK_MESSAGE(ok, "criterion ", n, " failed: ", std::string(name));
}

// random APG + classifier instance, conditioned away from the tiny
// training init so finite differences are well posed
template <class T>
struct LossFixture {
  APGConfig cfg;
  ParameterSet<T> ps;
  CandidateList list;

  explicit LossFixture(std::uint64_t seed, int d, int heads, int np, int ng,
                       int num_classes) {
    cfg.feature_dim = cfg.candidate_dim = d;
    cfg.num_heads = heads;
    cfg.num_prompts = np;
    cfg.group_size = ng;
    Rng rng(seed);
    init_apg_params(ps, cfg, rng);
    std::vector<int> ids;
    for (int c = 0; c < num_classes; ++c) ids.push_back(c);
    extend_candidates(list, ps, ids, cfg, seed);
    for (const auto& name : ps.names()) {
      if (name.rfind("apg.", 0) != 0) continue;
      Mat<T>& m = ps.at(name);
      m = Mat<T>::gaussian(m.rows, m.cols, T(0.5), rng);
    }
    ps.add("head.weight", Mat<T>::gaussian(num_classes, d, T(0.5), rng));
    ps.add("head.bias", Mat<T>::gaussian(1, num_classes, T(0.1), rng));
    ps.add("in.v_l", Mat<T>::gaussian(1, d, T(1), rng), false);
    ps.add("in.v2", Mat<T>::gaussian(1, d, T(1), rng), false);
    ps.add("in.v3", Mat<T>::gaussian(1, d, T(1), rng), false);
    ps.add("in.centroid", Mat<T>::gaussian(np, d, T(1), rng), false);
    ps.add("in.sampled", Mat<T>::gaussian(1, d, T(1), rng), false);
  }
};

// which of the five losses a gradcheck builder should evaluate
enum class Term { cls, attn, tri, conA, conC };

template <class T>
double loss_suite_max_err(std::uint64_t seed, Term term, T eps) {
  LossFixture<T> fx(seed, 8, 2, 1, 2, 3);
  auto res = check_gradient(
      [&](auto& t, const auto& b) {
        using U = typename std::decay_t<decltype(t)>::scalar;
        auto g1 = generate_prompts(b["in.v_l"], b["apg.candidates"], b, fx.cfg);
        switch (term) {
          case Term::cls: {
            auto pooled = slice_rows(g1.prompts, 0, 1);
            auto logits = add_bias(matmul(pooled, transpose(b["head.weight"])),
                                   b["head.bias"]);
            return classification_loss(softmax_rows(logits), 1);
          }
          case Term::attn:
            return attention_loss(g1.scores, 1, fx.list);
          case Term::tri: {
            auto g2 = generate_prompts(b["in.v2"], b["apg.candidates"], b, fx.cfg);
            auto g3 = generate_prompts(b["in.v3"], b["apg.candidates"], b, fx.cfg);
            return triplet_loss(g1.prompts, g2.prompts, g3.prompts, U(0.2));
          }
          case Term::conA:
            return apg_consistency_loss(g1.prompts, b["in.centroid"].val());
          case Term::conC: {
            auto logits = add_bias(matmul(b["in.sampled"], transpose(b["head.weight"])),
                                   b["head.bias"]);
            return classifier_consistency_loss(softmax_rows(logits), 2);
          }
        }
        throw std::logic_error("unreachable");
      },
      fx.ps, eps);
  return static_cast<double>(res.max_rel_err);
}

// naive nested-loop reference for multi-output multi-head cross-attention
Mat<double> naive_mmha(const Mat<double>& z, const Mat<double>& cand,
                       ParameterSet<double>& ps, const APGConfig& cfg) {
  int dc = cfg.candidate_dim, dk = cfg.head_dim(), N = cand.rows;
  Mat<double> stacked(cfg.num_prompts, dc);
  for (int j = 0; j < cfg.num_prompts; ++j) {
    for (int h = 0; h < cfg.num_heads; ++h) {
      const Mat<double>& wq = ps.at(apg_proj_name("q", h, j));
      const Mat<double>& wk = ps.at(apg_proj_name("k", h, j));
      const Mat<double>& wv = ps.at(apg_proj_name("v", h, j));
      std::vector<double> q(static_cast<std::size_t>(dk), 0.0);
      for (int a = 0; a < dk; ++a)
        for (int x = 0; x < dc; ++x) q[static_cast<std::size_t>(a)] += z(0, x) * wq(x, a);
      std::vector<double> logits(static_cast<std::size_t>(N), 0.0);
      for (int c = 0; c < N; ++c) {
        double s = 0;
        for (int a = 0; a < dk; ++a) {
          double kca = 0;
          for (int x = 0; x < dc; ++x) kca += cand(c, x) * wk(x, a);
          s += q[static_cast<std::size_t>(a)] * kca;
        }
        logits[static_cast<std::size_t>(c)] = s / std::sqrt(double(dk));
      }
      double mx = logits[0];
      for (double l : logits) mx = std::max(mx, l);
      double sum = 0;
      std::vector<double> p(logits.size());
      for (std::size_t c = 0; c < logits.size(); ++c) {
        p[c] = std::exp(logits[c] - mx);
        sum += p[c];
      }
      for (auto& x : p) x /= sum;
      for (int a = 0; a < dk; ++a) {
        double r = 0;
        for (int c = 0; c < N; ++c) {
          double vca = 0;
          for (int x = 0; x < dc; ++x) vca += cand(c, x) * wv(x, a);
          r += p[static_cast<std::size_t>(c)] * vca;
        }
        stacked(j, h * dk + a) = r;
      }
    }
  }
  const Mat<double>& wo = ps.at("apg.wo");
  Mat<double> out(cfg.num_prompts, dc);
  for (int j = 0; j < cfg.num_prompts; ++j)
    for (int y = 0; y < dc; ++y)
      for (int x = 0; x < dc; ++x) out(j, y) += stacked(j, x) * wo(x, y);
  return out;
}

// the desk-scale setup shared by the trend, audit and determinism checks
struct DeskScale {
  SyntheticDatasetSpec spec;
  BackboneConfig bb;
  APGConfig apg;
  TrainConfig tc;

  explicit DeskScale(std::uint64_t seed, const std::string& ablation) {
    spec.num_classes = 10;
    spec.train_per_class = 20;
    spec.test_per_class = 10;
    spec.image_size = 16;
    spec.seed = seed;
    spec.noise_std = 0.2;
    bb.image_size = 16;
    bb.patch_size = 4;
    bb.embed_dim = 32;
    bb.num_layers = 4;
    bb.num_heads = 2;
    apg.feature_dim = apg.candidate_dim = 32;
    apg.num_heads = 2;
    apg.num_prompts = 1;
    apg.group_size = 1;
    tc.epochs = 20;
    tc.batch_size = 8;
    tc.opt.lr = 1e-2;
    tc.seed = seed;
    tc.freezing = FreezingMode::non_pretrained;
    tc.losses = ablation_flags(ablation);
  }
};

struct DeskRun {
  double avg_acc = 0;
  std::vector<TrainLog<float>> logs;
};

// in-memory B2-T4 run over the 10-class synthetic set
DeskRun desk_run(std::uint64_t seed, const std::string& ablation, bool keep_logs) {
  DeskScale ds(seed, ablation);
  auto st = init_model<float>(ds.bb, ds.apg, ds.tc);
  auto split = make_splits(10, 2, 4, seed);
  StageHistory h;
  std::vector<LabeledSet<float>> tests;
  DeskRun out;
  for (int t = 0; t < split.num_tasks(); ++t) {
    begin_task(st, split.task_classes[t], mix_seed(seed, 0x7A5C + t));
    auto train = synthesize_set<float>(ds.spec, split.task_classes[t], true);
    TrainLog<float> log = train_task(st, train, t + 1);
    if (keep_logs) out.logs.push_back(std::move(log));
    tests.push_back(synthesize_set<float>(ds.spec, split.task_classes[t], false));
    evaluate(st, tests, h);
  }
  out.avg_acc = average_accuracy(h);
  return out;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ExperimentConfig desk_experiment_config(const fs::path& data_dir, const fs::path& out_dir,
                                        const std::string& run_id) {
  DeskScale ds(7, "full");
  ds.tc.epochs = 3;  // artifact checks do not need a converged model
  ExperimentConfig cfg;
  cfg.run_id = run_id;
  cfg.dataset_dir = data_dir.string();
  cfg.synthetic = ds.spec;
  cfg.has_synthetic = true;
  cfg.split_B = 2;
  cfg.split_T = 4;
  cfg.backbone = ds.bb;
  cfg.apg = ds.apg;
  cfg.train = ds.tc;
  cfg.ablation = "full";
  cfg.out_dir = out_dir.string();
  return cfg;
}

KnowledgePool<double> pool_with(int num_classes, int samples_per_class, int d) {
  Rng rng(3);
  KnowledgePool<double> pool;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<Mat<double>> f;
    for (int i = 0; i < samples_per_class; ++i)
      f.push_back(Mat<double>::gaussian(1, d, 1.0, rng));
    pool.insert(c, summarize_class(f, f, [&](const Mat<double>& mean) { return mean; }));
  }
  return pool;
}

}  // namespace

TEST_CASE("criterion 1: gradient suite for all five losses") {
  bool ok = true;
  for (Term term : {Term::cls, Term::attn, Term::tri, Term::conA, Term::conC}) {
    double err32 = loss_suite_max_err<float>(31 + static_cast<int>(term), term, 1e-4f);
    double err64 = loss_suite_max_err<double>(63 + static_cast<int>(term), term, 1e-5);
    ok = ok && err32 <= 1e-3 && err64 <= 1e-5;
    CHECK(err32 <= 1e-3);
    CHECK(err64 <= 1e-5);
  }
  verdict(1, "gradient suite, five losses at both precisions", ok);
}

TEST_CASE("criterion 2: MMHA matches the naive oracle on 100 random configurations") {
  Rng rng(2025);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    APGConfig cfg;
    cfg.num_heads = 1 + static_cast<int>(rng.index(4));
    int dk = 1 + static_cast<int>(rng.index(16 / cfg.num_heads));
    cfg.candidate_dim = cfg.feature_dim = cfg.num_heads * dk;
    cfg.num_prompts = 1 + static_cast<int>(rng.index(3));
    cfg.group_size = 1 + static_cast<int>(rng.index(2));
    int classes = 1 + static_cast<int>(rng.index(
                          static_cast<std::size_t>(8 / cfg.group_size)));
    ParameterSet<double> ps;
    Rng init(rng.next_u64());
    init_apg_params(ps, cfg, init);
    std::vector<int> ids;
    for (int c = 0; c < classes; ++c) ids.push_back(c);
    CandidateList list;
    extend_candidates(list, ps, ids, cfg, init.next_u64());
    for (const auto& name : ps.names()) {
      Mat<double>& m = ps.at(name);
      m = Mat<double>::gaussian(m.rows, m.cols, 0.7, init);
    }
    Mat<double> z = Mat<double>::gaussian(1, cfg.candidate_dim, 1.0, init);

    Tape<double> tape;
    Bound<double> b = bind_all(tape, ps);
    Var<double> out = mmha(tape.leaf(z), b["apg.candidates"], b, cfg);
    Mat<double> expect = naive_mmha(z, ps.at("apg.candidates"), ps, cfg);
    for (std::size_t i = 0; i < expect.v.size(); ++i)
      worst = std::max(worst, std::abs(out.val().v[i] - expect.v[i]));
  }
  CHECK(worst <= 1e-6);
  verdict(2, "MMHA oracle over 100 random configurations", worst <= 1e-6);
}

TEST_CASE("criterion 3: attention rows normalized across a training run") {
  DeskRun run = desk_run(5, "full", /*keep_logs=*/true);
  bool ok = true;
  std::size_t records = 0;
  for (const auto& log : run.logs) {
    for (const auto& rec : log.attention) {
      ++records;
      for (const auto& slice : rec.slices) {
        double sum = 0;
        for (float x : slice.v) sum += x;
        ok = ok && std::abs(sum - 1.0) <= 1e-6;
      }
    }
  }
  CHECK(records > 0);
  CHECK(ok);
  verdict(3, "attention normalization over logged records", ok && records > 0);
}

TEST_CASE("criterion 4: candidate list is a bit-exact prefix over 10 extensions") {
  APGConfig cfg;
  cfg.feature_dim = cfg.candidate_dim = 16;
  cfg.num_heads = 2;
  cfg.group_size = 2;
  ParameterSet<float> ps;
  Rng rng(4);
  init_apg_params(ps, cfg, rng);
  CandidateList list;
  bool ok = true;
  Mat<float> previous(0, 16);
  for (int step = 0; step < 10; ++step) {
    extend_candidates(list, ps, {step * 2, step * 2 + 1}, cfg, 40 + step);
    const Mat<float>& now = ps.at("apg.candidates");
    for (std::size_t i = 0; i < previous.v.size(); ++i) ok = ok && now.v[i] == previous.v[i];
    ok = ok && now.rows == previous.rows + 2 * cfg.group_size;
    previous = now;
  }
  CHECK(ok);
  verdict(4, "candidate-list prefix stability over 10 extensions", ok);
}

TEST_CASE("criterion 5: sampler statistics for identity covariance, d in {2, 8}") {
  bool ok = true;
  for (int d : {2, 8}) {
    KnowledgePool<double> pool;
    ClassStatistics<double> s;
    Rng rng(50 + d);
    s.stat_l.mean = Mat<double>::gaussian(1, d, 1.0, rng);
    s.stat_l.cov = Mat<double>::identity(d);
    s.stat_l.sample_count = 1000;
    s.stat_final = s.stat_l;
    s.prompt_centroid = Mat<double>(1, d);
    pool.insert(0, s);

    const int n = 20000;
    auto draws = sample(pool, 0, PoolLayer::l, n, 500 + d);
    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (const auto& v : draws)
      for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += v(0, j);
    for (auto& m : mean) m /= n;
    for (int j = 0; j < d; ++j)
      ok = ok && std::abs(mean[static_cast<std::size_t>(j)] - s.stat_l.mean(0, j)) <= 0.03;
    double err2 = 0;
    for (int i = 0; i < d; ++i) {
      for (int k = 0; k < d; ++k) {
        double c = 0;
        for (const auto& v : draws)
          c += (v(0, i) - mean[static_cast<std::size_t>(i)]) *
               (v(0, k) - mean[static_cast<std::size_t>(k)]);
        c /= n - 1;
        double target = i == k ? 1.0 : 0.0;
        err2 += (c - target) * (c - target);
      }
    }
    ok = ok && std::sqrt(err2) <= 0.1;
  }
  CHECK(ok);
  verdict(5, "sampler mean/covariance statistics", ok);
}

TEST_CASE("criterion 6: metric oracles on hand-built histories") {
  bool ok = true;

  // fixture 1: stage-mean of union accuracies
  StageHistory h1;
  h1.acc = {{80}, {75, 65}, {70, 60, 50}};
  h1.union_acc = {80, 70, 60};
  ok = ok && average_accuracy(h1) == 70.0;

  // fixture 2: single old task, trace [90, 85, 80] -> drop of exactly 10
  StageHistory h2;
  h2.acc = {{90}, {85, 100}, {80, 100, 100}};
  h2.union_acc = {90, 92.5, 93.3};
  ok = ok && forgetting(h2) == 5.0;  // mean over tasks (10 + 0) / 2

  // fixture 3: average maximum accuracy drop with a later peak:
  // traces [90,80,70] and [-,60,65] -> mean(20, 0) = 10, exactly
  StageHistory h3;
  h3.acc = {{90}, {80, 60}, {70, 65, 40}};
  h3.union_acc = {90, 70, 58.3};
  ok = ok && forgetting(h3) == 10.0;
  ok = ok && average_accuracy(h3) == (90.0 + 70.0 + 58.3) / 3.0;

  CHECK(ok);
  verdict(6, "metric oracles exact on three fixtures", ok);
}

TEST_CASE("criterion 7: desk-scale ablation trend, 3 seeds") {
  auto mean_over_seeds = [](const std::string& abl) {
    double sum = 0;
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) sum += desk_run(seed, abl, false).avg_acc;
    return sum / 3.0;
  };
  double c1 = mean_over_seeds("c-1");
  double c2 = mean_over_seeds("c-2");
  double full = mean_over_seeds("full");
  std::printf("  ablation means: c-1 %.2f, c-2 %.2f, full %.2f\n", c1, c2, full);
  bool ok = full >= c1 + 15.0 && c2 >= c1 + 10.0 && full >= c2;
  CHECK(full >= c1 + 15.0);
  CHECK(c2 >= c1 + 10.0);
  CHECK(full >= c2);
  verdict(7, "ablation ordering and minimum gaps", ok);
}

TEST_CASE("criterion 8: exemplar-free audit and pool-size scaling") {
  bool ok = true;

  // instrumented run: no training sample survives a task boundary
  TempDir data("apgcl_acc_data"), out("apgcl_acc_out");
  auto cfg = desk_experiment_config(data.path, out.path, "audit");
  generate_synthetic_dataset(cfg.synthetic, data.path, true);
  run_experiment<float>(cfg, true);
  std::ifstream f(out.path / "audit" / "results.jsonl");
  std::string line;
  int stages = 0;
  while (std::getline(f, line)) {
    auto j = nlohmann::json::parse(line);
    if (j.value("type", std::string()) != "stage") continue;
    ++stages;
    ok = ok && j.at("live_training_samples").get<std::int64_t>() == 0;
  }
  ok = ok && stages == 5 && live_samples() == 0;

  // pool files: linear in class count, independent of samples per class
  auto size_of = [](const KnowledgePool<double>& p) { return serialize_pool(p).size(); };
  std::size_t s2 = size_of(pool_with(2, 10, 16));
  std::size_t s4 = size_of(pool_with(4, 10, 16));
  std::size_t s8 = size_of(pool_with(8, 10, 16));
  // header H + n records of fixed size R: equal per-class increments
  ok = ok && (s8 - s4) == 2 * (s4 - s2) && s4 > s2;
  ok = ok && size_of(pool_with(4, 50, 16)) == s4;

  CHECK(ok);
  verdict(8, "exemplar-free audit and pool-size scaling", ok);
}

TEST_CASE("criterion 9: byte-identical metrics across two identical runs") {
  TempDir data("apgcl_det_data"), out1("apgcl_det_out1"), out2("apgcl_det_out2");
  auto cfg1 = desk_experiment_config(data.path, out1.path, "det");
  generate_synthetic_dataset(cfg1.synthetic, data.path, true);
  auto cfg2 = cfg1;
  cfg2.out_dir = out2.path.string();
  run_experiment<float>(cfg1, true);
  run_experiment<float>(cfg2, true);

  auto final_fields = [](const fs::path& p) {
    std::ifstream f(p);
    std::string line, last;
    while (std::getline(f, line))
      if (!line.empty()) last = line;
    auto j = nlohmann::json::parse(last);
    REQUIRE(j.at("type") == "result");
    return std::pair<std::string, std::string>(j.at("avg_acc").dump(),
                                               j.at("forgetting").dump());
  };
  auto [a1, f1] = final_fields(out1.path / "det" / "results.jsonl");
  auto [a2, f2] = final_fields(out2.path / "det" / "results.jsonl");
  bool ok = a1 == a2 && f1 == f2;
  CHECK(a1 == a2);
  CHECK(f1 == f2);
  verdict(9, "determinism of avg_acc and forgetting", ok);
}
