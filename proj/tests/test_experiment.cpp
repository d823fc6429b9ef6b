#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "apgcl/experiment.hpp"

using namespace apgcl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// smallest run that exercises the full pipeline
ExperimentConfig tiny_config(const fs::path& data_dir, const fs::path& out_dir) {
  ExperimentConfig c;
  c.run_id = "tiny";
  c.dataset_dir = data_dir.string();
  c.split_B = 2;
  c.split_T = 2;
  c.backbone.image_size = 8;
  c.backbone.patch_size = 4;
  c.backbone.embed_dim = 16;
  c.backbone.num_layers = 2;
  c.backbone.num_heads = 2;
  c.apg.num_heads = 2;
  c.apg.num_prompts = 1;
  c.apg.group_size = 1;
  c.train.epochs = 1;
  c.train.batch_size = 4;
  c.train.seed = 3;
  c.train.freezing = FreezingMode::frozen_throughout;
  c.ablation = "full";
  c.out_dir = out_dir.string();
  return c;
}

void tiny_dataset(const fs::path& dir) {
  SyntheticDatasetSpec spec;
  spec.num_classes = 4;
  spec.train_per_class = 6;
  spec.test_per_class = 4;
  spec.image_size = 8;
  spec.noise_std = 0.2;
  spec.seed = 1;
  generate_synthetic_dataset(spec, dir, true);
}

}  // namespace

TEST_CASE("ablation_flags: the seven named configs map to distinct documented sets") {
  auto f1 = ablation_flags("c-1");
  CHECK_FALSE(f1.conC);
  CHECK_FALSE(f1.conA);
  CHECK_FALSE(f1.attn);
  CHECK_FALSE(f1.tri);
  auto f2 = ablation_flags("c-2");
  CHECK(f2.conC);
  CHECK_FALSE(f2.conA);
  CHECK_FALSE(f2.attn);
  CHECK_FALSE(f2.tri);
  auto f3 = ablation_flags("c-3");
  CHECK(f3.conC);
  CHECK(f3.conA);
  CHECK_FALSE(f3.attn);
  CHECK_FALSE(f3.tri);
  auto f4 = ablation_flags("c-4");
  CHECK(f4.conC);
  CHECK(f4.conA);
  CHECK(f4.attn);
  CHECK_FALSE(f4.tri);
  auto f5 = ablation_flags("c-5");
  CHECK(f5.conC);
  CHECK(f5.conA);
  CHECK_FALSE(f5.attn);
  CHECK(f5.tri);
  auto f6 = ablation_flags("c-6");
  CHECK(f6.conC);
  CHECK_FALSE(f6.conA);
  CHECK(f6.attn);
  CHECK(f6.tri);
  auto ff = ablation_flags("full");
  CHECK(ff.conC);
  CHECK(ff.conA);
  CHECK(ff.attn);
  CHECK(ff.tri);
  CHECK_THROWS(ablation_flags("c-7"));
  // pairwise distinct
  auto key = [](const LossFlags& f) {
    return (f.conC ? 8 : 0) | (f.conA ? 4 : 0) | (f.attn ? 2 : 0) | (f.tri ? 1 : 0);
  };
  std::set<int> keys{key(f1), key(f2), key(f3), key(f4), key(f5), key(f6), key(ff)};
  CHECK(keys.size() == 7);
}

TEST_CASE("config: JSON round-trip preserves every field and the hash") {
  ExperimentConfig c;
  c.run_id = "abc";
  c.dataset_dir = "/tmp/ds";
  c.has_synthetic = true;
  c.synthetic.num_classes = 7;
  c.synthetic.noise_std = 0.35;
  c.split_B = 3;
  c.split_T = 2;
  c.backbone.embed_dim = 32;
  c.apg.num_prompts = 2;
  c.train.epochs = 4;
  c.train.seed = 42;
  c.train.freezing = FreezingMode::frozen_throughout;
  c.train.opt.kind = OptimizerKind::sgd;
  c.ablation = "c-4";
  c.out_dir = "/tmp/out";

  auto back = config_from_json(config_to_json(c));
  CHECK(back.run_id == c.run_id);
  CHECK(back.dataset_dir == c.dataset_dir);
  CHECK(back.has_synthetic);
  CHECK(back.synthetic.num_classes == 7);
  CHECK(back.synthetic.noise_std == doctest::Approx(0.35));
  CHECK(back.split_B == 3);
  CHECK(back.split_T == 2);
  CHECK(back.backbone.embed_dim == 32);
  CHECK(back.apg.num_prompts == 2);
  CHECK(back.apg.feature_dim == 32);  // follows the backbone width
  CHECK(back.train.epochs == 4);
  CHECK(back.train.seed == 42);
  CHECK(back.train.freezing == FreezingMode::frozen_throughout);
  CHECK(back.train.opt.kind == OptimizerKind::sgd);
  CHECK(back.ablation == "c-4");
  CHECK(config_hash(back) == config_hash(c));

  ExperimentConfig other = c;
  other.train.seed = 43;
  CHECK(config_hash(other) != config_hash(c));
}

TEST_CASE("checkpoint: round-trip restores parameters, candidates and classifier") {
  TrainConfig tc;
  tc.seed = 5;
  BackboneConfig bb;
  bb.image_size = 8;
  bb.patch_size = 4;
  bb.embed_dim = 16;
  bb.num_layers = 2;
  bb.num_heads = 2;
  APGConfig apg;
  apg.feature_dim = apg.candidate_dim = 16;
  apg.num_heads = 2;
  auto st = init_model<float>(bb, apg, tc);
  begin_task(st, {0, 1, 2}, 1);
  st.completed_tasks = 1;

  auto bytes = serialize_checkpoint(st);
  auto fresh = init_model<float>(bb, apg, tc);
  restore_checkpoint(fresh, bytes);
  CHECK(fresh.seen_classes == st.seen_classes);
  CHECK(fresh.completed_tasks == 1);
  CHECK(fresh.candidates.groups == st.candidates.groups);
  CHECK(fresh.candidates.task_boundaries == st.candidates.task_boundaries);
  for (const auto& name : st.params.names()) {
    const auto& a = st.params.at(name);
    const auto& b = fresh.params.at(name);
    REQUIRE(a.same_shape(b));
    for (std::size_t i = 0; i < a.v.size(); ++i) CHECK(a.v[i] == b.v[i]);
  }

  auto corrupted = bytes;
  corrupted[0] ^= 0xff;
  auto another = init_model<float>(bb, apg, tc);
  CHECK_THROWS(restore_checkpoint(another, corrupted));
  corrupted = bytes;
  corrupted.resize(corrupted.size() / 2);
  CHECK_THROWS(restore_checkpoint(another, corrupted));
}

TEST_CASE("run_experiment: artifacts, determinism replay, and results schema") {
  TempDir data("apgcl_exp_data"), out("apgcl_exp_out");
  tiny_dataset(data.path);
  auto cfg = tiny_config(data.path, out.path);

  auto r1 = run_experiment<float>(cfg);
  CHECK(fs::exists(out.path / "tiny" / "results.jsonl"));
  CHECK(fs::exists(out.path / "tiny" / "checkpoint.bin"));
  CHECK(fs::exists(out.path / "tiny" / "pool.bin"));

  // without overwrite a rerun is refused; with it, metrics replay exactly
  CHECK_THROWS(run_experiment<float>(cfg));
  auto r2 = run_experiment<float>(cfg, /*overwrite=*/true);
  CHECK(r1.avg_acc == r2.avg_acc);
  CHECK(r1.forgetting == r2.forgetting);
  CHECK(r1.union_acc == r2.union_acc);
  CHECK(r1.hash == r2.hash);

  // every line parses; the final record carries the config snapshot
  std::ifstream f(out.path / "tiny" / "results.jsonl");
  std::string line, last;
  int lines = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    CHECK(j.contains("type"));
    last = line;
    ++lines;
  }
  CHECK(lines > 3);
  auto final_record = nlohmann::json::parse(last);
  CHECK(final_record.at("type") == "result");
  CHECK(final_record.at("config").at("train").at("seed") == 3);
  // replay from the embedded snapshot reproduces the metrics
  auto replay_cfg = config_from_json(final_record.at("config"));
  TempDir out2("apgcl_exp_out2");
  replay_cfg.out_dir = out2.path.string();
  auto r3 = run_experiment<float>(replay_cfg, true);
  CHECK(r3.avg_acc == r1.avg_acc);
  CHECK(r3.forgetting == r1.forgetting);

  // pool holds exactly the dataset's classes; no training data is live
  auto pool = deserialize_pool<float>(
      detail::read_bytes(out.path / "tiny" / "pool.bin"));
  CHECK(pool.size() == 4);
  CHECK(live_samples() == 0);
}

TEST_CASE("run_experiment: failure leaves a marker record") {
  TempDir data("apgcl_exp_faildata"), out("apgcl_exp_failout");
  tiny_dataset(data.path);
  auto cfg = tiny_config(data.path, out.path);
  cfg.split_B = 10;  // infeasible for a 4-class dataset
  CHECK_THROWS(run_experiment<float>(cfg));
  std::ifstream f(out.path / "tiny" / "results.jsonl");
  std::string line;
  REQUIRE(std::getline(f, line));
  auto j = nlohmann::json::parse(line);
  CHECK(j.at("type") == "failure");
  CHECK(j.at("error").get<std::string>().find("make_splits") != std::string::npos);
}

TEST_CASE("report: ordering, CSV schema, plot emission, malformed skipping") {
  TempDir data("apgcl_rep_data"), out("apgcl_rep_out");
  tiny_dataset(data.path);

  auto c1 = tiny_config(data.path, out.path);
  c1.run_id = "run-a";
  auto c2 = tiny_config(data.path, out.path);
  c2.run_id = "run-b";
  c2.train.seed = 9;
  auto ra = run_experiment<float>(c1);
  auto rb = run_experiment<float>(c2);

  fs::path bogus = out.path / "bogus.jsonl";
  std::ofstream(bogus) << "{not json\n";

  std::ostringstream warnings;
  auto rows = report({out.path / "run-a" / "results.jsonl",
                      out.path / "run-b" / "results.jsonl", bogus},
                     out.path / "report", warnings);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].avg_acc >= rows[1].avg_acc);  // sorted descending
  CHECK(warnings.str().find("bogus") != std::string::npos);

  std::ifstream csv(out.path / "report" / "report.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "run,avg_acc,forgetting,config_hash");
  int data_rows = 0;
  std::string line;
  while (std::getline(csv, line))
    if (!line.empty()) ++data_rows;
  CHECK(data_rows == 2);
  CHECK(fs::exists(out.path / "report" / "accuracy_vs_stage.svg"));
  CHECK(fs::exists(out.path / "report" / "report.txt"));

  // all files malformed -> error
  CHECK_THROWS(report({bogus}, out.path / "report2", warnings));
  (void)ra;
  (void)rb;
}
