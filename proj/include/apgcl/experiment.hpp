#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "apgcl/dataset.hpp"
#include "apgcl/protocol.hpp"

namespace apgcl {

// Table-style named loss configurations. Classification is always on;
// the rest switch per config.
inline LossFlags ablation_flags(const std::string& name) {
  LossFlags f;
  f.conC = f.conA = f.attn = f.tri = false;
  if (name == "c-1") return f;
  if (name == "c-2") {
    f.conC = true;
    return f;
  }
  if (name == "c-3") {
    f.conC = f.conA = true;
    return f;
  }
  if (name == "c-4") {
    f.conC = f.conA = f.attn = true;
    return f;
  }
  if (name == "c-5") {
    f.conC = f.conA = f.tri = true;
    return f;
  }
  if (name == "c-6") {
    f.conC = f.attn = f.tri = true;
    return f;
  }
  if (name == "full") {
    f.conC = f.conA = f.attn = f.tri = true;
    return f;
  }
  throw std::invalid_argument("ablation_flags: unknown config '" + name +
                              "' (expected c-1..c-6 or full)");
}

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"c-1", "c-2", "c-3", "c-4",
                                              "c-5", "c-6", "full"};
  return names;
}

struct ExperimentConfig {
  std::string run_id = "run";
  std::string dataset_dir;
  SyntheticDatasetSpec synthetic;  // used by generate-data; embedded for replay
  bool has_synthetic = false;
  int split_B = 2;
  int split_T = 4;
  BackboneConfig backbone;
  APGConfig apg;
  TrainConfig train;
  std::string ablation = "full";
  std::string out_dir = "out";

  void validate() const {
    backbone.validate();
    apg.validate();
    train.validate();
    if (dataset_dir.empty())
      throw std::invalid_argument("ExperimentConfig: dataset_dir required");
    ablation_flags(ablation);  // throws on bad name
  }
};

namespace detail {

inline nlohmann::json synthetic_to_json(const SyntheticDatasetSpec& s) {
  return {{"num_classes", s.num_classes}, {"train_per_class", s.train_per_class},
          {"test_per_class", s.test_per_class}, {"image_size", s.image_size},
          {"seed", s.seed},                 {"noise_std", s.noise_std}};
}

inline SyntheticDatasetSpec synthetic_from_json(const nlohmann::json& j) {
  SyntheticDatasetSpec s;
  s.num_classes = j.value("num_classes", s.num_classes);
  s.train_per_class = j.value("train_per_class", s.train_per_class);
  s.test_per_class = j.value("test_per_class", s.test_per_class);
  s.image_size = j.value("image_size", s.image_size);
  s.seed = j.value("seed", s.seed);
  s.noise_std = j.value("noise_std", s.noise_std);
  return s;
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["run_id"] = c.run_id;
  j["dataset"] = {{"dir", c.dataset_dir}};
  if (c.has_synthetic) j["dataset"]["synthetic"] = detail::synthetic_to_json(c.synthetic);
  j["split"] = {{"B", c.split_B}, {"T", c.split_T}};
  j["backbone"] = {{"image_size", c.backbone.image_size},
                   {"patch_size", c.backbone.patch_size},
                   {"channels", c.backbone.channels},
                   {"embed_dim", c.backbone.embed_dim},
                   {"num_layers", c.backbone.num_layers},
                   {"num_heads", c.backbone.num_heads},
                   {"mlp_ratio", c.backbone.mlp_ratio},
                   {"prompt_layer", c.backbone.prompt_layer}};
  j["apg"] = {{"num_heads", c.apg.num_heads},
              {"num_prompts", c.apg.num_prompts},
              {"group_size", c.apg.group_size}};
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"lr", c.train.opt.lr},
                {"weight_decay", c.train.opt.weight_decay},
                {"optimizer", c.train.opt.kind == OptimizerKind::adamw ? "adamw" : "sgd"},
                {"margin", c.train.margin},
                {"seed", c.train.seed},
                {"freezing", c.train.freezing == FreezingMode::non_pretrained
                                 ? "non-pretrained"
                                 : "frozen-throughout"}};
  j["ablation"] = c.ablation;
  j["out_dir"] = c.out_dir;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.run_id = j.value("run_id", c.run_id);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    c.dataset_dir = d.value("dir", std::string());
    if (d.contains("synthetic")) {
      c.synthetic = detail::synthetic_from_json(d.at("synthetic"));
      c.has_synthetic = true;
    }
  }
  if (j.contains("split")) {
    c.split_B = j.at("split").value("B", c.split_B);
    c.split_T = j.at("split").value("T", c.split_T);
  }
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    c.backbone.image_size = b.value("image_size", c.backbone.image_size);
    c.backbone.patch_size = b.value("patch_size", c.backbone.patch_size);
    c.backbone.channels = b.value("channels", c.backbone.channels);
    c.backbone.embed_dim = b.value("embed_dim", c.backbone.embed_dim);
    c.backbone.num_layers = b.value("num_layers", c.backbone.num_layers);
    c.backbone.num_heads = b.value("num_heads", c.backbone.num_heads);
    c.backbone.mlp_ratio = b.value("mlp_ratio", c.backbone.mlp_ratio);
    c.backbone.prompt_layer = b.value("prompt_layer", c.backbone.prompt_layer);
  }
  if (j.contains("apg")) {
    const auto& a = j.at("apg");
    c.apg.num_heads = a.value("num_heads", c.apg.num_heads);
    c.apg.num_prompts = a.value("num_prompts", c.apg.num_prompts);
    c.apg.group_size = a.value("group_size", c.apg.group_size);
  }
  c.apg.feature_dim = c.apg.candidate_dim = c.backbone.embed_dim;
  if (j.contains("train")) {
    const auto& t = j.at("train");
    c.train.epochs = t.value("epochs", c.train.epochs);
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    c.train.opt.lr = t.value("lr", c.train.opt.lr);
    c.train.opt.weight_decay = t.value("weight_decay", c.train.opt.weight_decay);
    std::string opt = t.value("optimizer", std::string("adamw"));
    if (opt == "adamw")
      c.train.opt.kind = OptimizerKind::adamw;
    else if (opt == "sgd")
      c.train.opt.kind = OptimizerKind::sgd;
    else
      throw std::invalid_argument("config: unknown optimizer '" + opt + "'");
    c.train.margin = t.value("margin", c.train.margin);
    c.train.seed = t.value("seed", c.train.seed);
    std::string fr = t.value("freezing", std::string("non-pretrained"));
    if (fr == "non-pretrained")
      c.train.freezing = FreezingMode::non_pretrained;
    else if (fr == "frozen-throughout")
      c.train.freezing = FreezingMode::frozen_throughout;
    else
      throw std::invalid_argument("config: unknown freezing mode '" + fr + "'");
  }
  c.ablation = j.value("ablation", c.ablation);
  c.out_dir = j.value("out_dir", c.out_dir);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_config: cannot open " + path.string());
  return config_from_json(nlohmann::json::parse(f));
}

// FNV-1a over the canonical (key-sorted) config serialization
inline std::string config_hash(const ExperimentConfig& c) {
  std::string dump = config_to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : dump) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ---- checkpoint format ----
//
// Little-endian: magic "APGCCKPT", u32 version, then the parameter table
// (u32 count; per entry: u32 name length + name bytes, u32 rows, u32 cols,
// u8 trainable, float32 values), the candidate list bookkeeping, and the
// classifier's class-id order.

namespace detail {

constexpr char kCkptMagic[8] = {'A', 'P', 'G', 'C', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

inline void put_f32(std::vector<std::uint8_t>& out, float x) {
  std::uint32_t bits;
  std::memcpy(&bits, &x, 4);
  put_u32(out, bits);
}

inline void put_str(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> serialize_checkpoint(const ModelState<T>& st) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), detail::kCkptMagic, detail::kCkptMagic + 8);
  detail::put_u32(out, detail::kCkptVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(st.params.count()));
  for (const auto& [name, e] : st.params) {
    detail::put_str(out, name);
    detail::put_u32(out, static_cast<std::uint32_t>(e.value.rows));
    detail::put_u32(out, static_cast<std::uint32_t>(e.value.cols));
    out.push_back(e.trainable ? 1 : 0);
    for (T x : e.value.v) detail::put_f32(out, static_cast<float>(x));
  }
  detail::put_u32(out, static_cast<std::uint32_t>(st.candidates.group_size));
  detail::put_u32(out, static_cast<std::uint32_t>(st.candidates.groups.size()));
  for (const auto& [cid, range] : st.candidates.groups) {
    detail::put_u32(out, static_cast<std::uint32_t>(cid));
    detail::put_u32(out, static_cast<std::uint32_t>(range.first));
    detail::put_u32(out, static_cast<std::uint32_t>(range.second));
  }
  detail::put_u32(out, static_cast<std::uint32_t>(st.candidates.task_boundaries.size()));
  for (int b : st.candidates.task_boundaries) detail::put_u32(out, static_cast<std::uint32_t>(b));
  detail::put_u32(out, static_cast<std::uint32_t>(st.seen_classes.size()));
  for (int c : st.seen_classes) detail::put_u32(out, static_cast<std::uint32_t>(c));
  detail::put_u32(out, static_cast<std::uint32_t>(st.completed_tasks));
  return out;
}

// restores parameters/candidates/classifier into a freshly init_model'd
// state (configs must match what the checkpoint was written with)
template <class T>
void restore_checkpoint(ModelState<T>& st, const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r{&bytes};
  r.need(8);
  if (std::memcmp(bytes.data(), detail::kCkptMagic, 8) != 0)
    throw std::runtime_error("restore_checkpoint: bad magic");
  r.pos = 8;
  std::uint32_t version = r.u32();
  if (version != detail::kCkptVersion)
    throw std::runtime_error("restore_checkpoint: unsupported version " +
                             std::to_string(version));
  std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t len = r.u32();
    r.need(len);
    std::string name(reinterpret_cast<const char*>(bytes.data() + r.pos), len);
    r.pos += len;
    int rows = static_cast<int>(r.u32());
    int cols = static_cast<int>(r.u32());
    r.need(1);
    bool trainable = bytes[r.pos++] != 0;
    Mat<T> m(rows, cols);
    for (auto& x : m.v) {
      std::uint32_t bits = r.u32();
      float f;
      std::memcpy(&f, &bits, 4);
      x = static_cast<T>(f);
    }
    if (st.params.has(name)) {
      st.params.at(name) = std::move(m);
      st.params.set_trainable(name, trainable);
    } else {
      st.params.add(name, std::move(m), trainable);
    }
  }
  st.candidates.group_size = static_cast<int>(r.u32());
  std::uint32_t groups = r.u32();
  st.candidates.groups.clear();
  for (std::uint32_t i = 0; i < groups; ++i) {
    int cid = static_cast<int>(r.u32());
    int begin = static_cast<int>(r.u32());
    int end = static_cast<int>(r.u32());
    st.candidates.groups[cid] = {begin, end};
  }
  std::uint32_t nb = r.u32();
  st.candidates.task_boundaries.assign(nb, 0);
  for (auto& b : st.candidates.task_boundaries) b = static_cast<int>(r.u32());
  std::uint32_t ns = r.u32();
  st.seen_classes.assign(ns, 0);
  for (auto& c : st.seen_classes) c = static_cast<int>(r.u32());
  st.completed_tasks = static_cast<int>(r.u32());
}

// ---- experiment driver ----

struct RunResult {
  std::string run_id;
  double avg_acc = 0;
  double forgetting = 0;
  std::vector<double> union_acc;
  std::string hash;
};

namespace detail {

inline void write_bytes(const std::filesystem::path& path,
                        const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(f.tellg()));
  f.seekg(0);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  return bytes;
}

}  // namespace detail

// Full incremental run: split, per-task extend/train/evaluate, artifacts.
// Writes results.jsonl (one structured record per line), checkpoint.bin
// and pool.bin into <out_dir>/<run_id>/.
template <class T>
RunResult run_experiment(const ExperimentConfig& cfg, bool overwrite = false) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::path run_dir = fs::path(cfg.out_dir) / cfg.run_id;
  if (fs::exists(run_dir / "results.jsonl") && !overwrite)
    throw std::runtime_error("run_experiment: " + run_dir.string() +
                             " already has results (pass overwrite to redo)");
  fs::create_directories(run_dir);
  std::ofstream results(run_dir / "results.jsonl", std::ios::trunc);
  if (!results) throw std::runtime_error("run_experiment: cannot write results.jsonl");

  auto started = std::chrono::steady_clock::now();
  std::string hash = config_hash(cfg);
  try {
    DatasetInfo info = read_manifest(cfg.dataset_dir);
    int num_classes = static_cast<int>(info.class_ids.size());
    TaskSpec spec = make_splits(num_classes, cfg.split_B, cfg.split_T, cfg.train.seed);

    TrainConfig tc = cfg.train;
    tc.losses = ablation_flags(cfg.ablation);
    APGConfig apg = cfg.apg;
    apg.feature_dim = apg.candidate_dim = cfg.backbone.embed_dim;
    ModelState<T> st = init_model<T>(cfg.backbone, apg, tc);

    StageHistory history;
    std::vector<LabeledSet<T>> test_sets;
    for (int t = 0; t < spec.num_tasks(); ++t) {
      begin_task(st, spec.task_classes[t], mix_seed(tc.seed, 0x7A5C + t));
      TrainLog<T> log;
      {
        TrackedSet<T> train = load_train_tracked<T>(cfg.dataset_dir, info,
                                                    spec.task_classes[t]);
        log = train_task(st, train.get(), t + 1);
      }  // training data dropped here, before evaluation
      for (std::size_t s = 0; s < log.steps.size(); ++s) {
        const auto& lb = log.steps[s];
        nlohmann::json line{{"type", "step"},
                            {"task", t + 1},
                            {"step", s},
                            {"cls", static_cast<double>(lb.cls)},
                            {"attn", static_cast<double>(lb.attn)},
                            {"tri", static_cast<double>(lb.tri)},
                            {"conA", static_cast<double>(lb.conA)},
                            {"conC", static_cast<double>(lb.conC)},
                            {"total", static_cast<double>(lb.total)}};
        results << line.dump() << "\n";
      }
      test_sets.push_back(load_split<T>(cfg.dataset_dir, info, spec.task_classes[t], false));
      evaluate(st, test_sets, history);
      nlohmann::json stage{{"type", "stage"},
                           {"stage", t + 1},
                           {"union_acc", history.union_acc.back()},
                           {"per_task_acc", history.acc.back()},
                           {"live_training_samples", live_samples().load()}};
      results << stage.dump() << "\n";
      results.flush();
    }

    RunResult rr;
    rr.run_id = cfg.run_id;
    rr.avg_acc = average_accuracy(history);
    rr.forgetting = forgetting(history);
    rr.union_acc = history.union_acc;
    rr.hash = hash;

    detail::write_bytes(run_dir / "checkpoint.bin", serialize_checkpoint(st));
    detail::write_bytes(run_dir / "pool.bin", serialize_pool(st.pool));

    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started)
                      .count();
    nlohmann::json final{{"type", "result"},
                         {"run", cfg.run_id},
                         {"avg_acc", rr.avg_acc},
                         {"forgetting", rr.forgetting},
                         {"union_acc", rr.union_acc},
                         {"config_hash", hash},
                         {"wall_clock_s", wall},
                         {"config", config_to_json(cfg)}};
    results << final.dump() << "\n";
    return rr;
  } catch (const std::exception& e) {
    nlohmann::json marker{{"type", "failure"}, {"run", cfg.run_id},
                          {"error", std::string(e.what())}, {"config_hash", hash}};
    results << marker.dump() << "\n";
    throw;
  }
}

// ---- report ----

struct ReportRow {
  std::string run;
  double avg_acc = 0;
  double forgetting = 0;
  std::string config_hash;
  std::vector<double> union_acc;
};

// reads the final "result" record of one results.jsonl
inline bool read_result_record(const std::filesystem::path& path, ReportRow& row) {
  std::ifstream f(path);
  if (!f) return false;
  bool found = false;
  std::string line;
  try {
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      if (j.value("type", std::string()) != "result") continue;
      row.run = j.at("run").get<std::string>();
      row.avg_acc = j.at("avg_acc").get<double>();
      row.forgetting = j.at("forgetting").get<double>();
      row.config_hash = j.at("config_hash").get<std::string>();
      row.union_acc = j.at("union_acc").get<std::vector<double>>();
      found = true;
    }
  } catch (const std::exception&) {
    return false;
  }
  return found;
}

inline std::string render_accuracy_svg(const std::vector<ReportRow>& rows) {
  const int w = 640, h = 400, ml = 50, mb = 40, mt = 20, mr = 20;
  std::size_t max_stages = 1;
  for (const auto& r : rows) max_stages = std::max(max_stages, r.union_acc.size());
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                 "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
                    "\" height=\"" + std::to_string(h) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  auto px = [&](std::size_t stage) {
    double frac = max_stages > 1 ? static_cast<double>(stage) / (max_stages - 1) : 0.0;
    return ml + frac * (w - ml - mr);
  };
  auto py = [&](double acc) { return mt + (1.0 - acc / 100.0) * (h - mt - mb); };
  // axes and gridlines
  for (int g = 0; g <= 100; g += 25) {
    svg += "<line x1=\"" + std::to_string(ml) + "\" y1=\"" + std::to_string(py(g)) +
           "\" x2=\"" + std::to_string(w - mr) + "\" y2=\"" + std::to_string(py(g)) +
           "\" stroke=\"#ddd\"/>\n";
    svg += "<text x=\"8\" y=\"" + std::to_string(py(g) + 4) + "\" font-size=\"12\">" +
           std::to_string(g) + "</text>\n";
  }
  svg += "<text x=\"" + std::to_string(w / 2) + "\" y=\"" + std::to_string(h - 8) +
         "\" font-size=\"12\">stage</text>\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const char* color = colors[i % 8];
    std::string points;
    for (std::size_t s = 0; s < rows[i].union_acc.size(); ++s)
      points += std::to_string(px(s)) + "," + std::to_string(py(rows[i].union_acc[s])) + " ";
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"2\" points=\"" + points + "\"/>\n";
    svg += "<text x=\"" + std::to_string(w - mr - 120) + "\" y=\"" +
           std::to_string(mt + 16 * (i + 1)) + "\" font-size=\"12\" fill=\"" + color + "\">" +
           rows[i].run + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

// Builds the comparison table (stdout text + CSV) and the per-stage union
// accuracy plot. Malformed inputs are skipped with a warning; returns the
// rows that were rendered.
inline std::vector<ReportRow> report(const std::vector<std::filesystem::path>& results_files,
                                     const std::filesystem::path& out_dir,
                                     std::ostream& log = std::cerr) {
  std::vector<ReportRow> rows;
  for (const auto& path : results_files) {
    ReportRow row;
    if (read_result_record(path, row)) {
      rows.push_back(std::move(row));
    } else {
      log << "warning: skipping malformed results file " << path << "\n";
    }
  }
  if (rows.empty()) throw std::runtime_error("report: no readable results files");
  std::sort(rows.begin(), rows.end(),
            [](const ReportRow& a, const ReportRow& b) { return a.avg_acc > b.avg_acc; });

  std::filesystem::create_directories(out_dir);
  std::ofstream csv(out_dir / "report.csv");
  csv << "run,avg_acc,forgetting,config_hash\n";
  for (const auto& r : rows)
    csv << r.run << "," << r.avg_acc << "," << r.forgetting << "," << r.config_hash << "\n";

  std::ofstream txt(out_dir / "report.txt");
  auto emit = [&](std::ostream& os) {
    os << "run                     avg_acc   forgetting  config_hash\n";
    for (const auto& r : rows) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%-22s %8.2f %12.2f  %s\n", r.run.c_str(), r.avg_acc,
                    r.forgetting, r.config_hash.c_str());
      os << buf;
    }
  };
  emit(txt);

  std::ofstream svg(out_dir / "accuracy_vs_stage.svg");
  svg << render_accuracy_svg(rows);
  return rows;
}

}  // namespace apgcl
