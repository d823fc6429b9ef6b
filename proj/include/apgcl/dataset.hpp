#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "apgcl/backbone.hpp"
#include "apgcl/protocol.hpp"
#include "apgcl/rng.hpp"

namespace apgcl {

struct SyntheticDatasetSpec {
  int num_classes = 10;
  int train_per_class = 100;
  int test_per_class = 50;
  int image_size = 32;
  std::uint64_t seed = 0;
  double noise_std = 0.1;

  void validate() const {
    if (num_classes < 1 || train_per_class < 1 || test_per_class < 1 || image_size < 1)
      throw std::invalid_argument("SyntheticDatasetSpec: counts and size must be positive");
    if (noise_std < 0)
      throw std::invalid_argument("SyntheticDatasetSpec: noise_std must be >= 0");
  }
};

// Counts sample objects currently held in memory via TrackedSet. The
// exemplar-free audit asserts this returns to zero at every task boundary.
inline std::atomic<std::int64_t>& live_samples() {
  static std::atomic<std::int64_t> count{0};
  return count;
}

// RAII wrapper around a task's training data: registers its samples with
// the live counter on construction and unregisters on destruction, so a
// leaked reference past the task boundary is observable.
template <class T>
class TrackedSet {
 public:
  TrackedSet() = default;
  explicit TrackedSet(LabeledSet<T> set) : set_(std::move(set)) {
    live_samples() += static_cast<std::int64_t>(set_.size());
  }
  TrackedSet(TrackedSet&& other) noexcept : set_(std::move(other.set_)) {
    other.set_ = LabeledSet<T>{};
  }
  TrackedSet& operator=(TrackedSet&& other) noexcept {
    release();
    set_ = std::move(other.set_);
    other.set_ = LabeledSet<T>{};
    return *this;
  }
  TrackedSet(const TrackedSet&) = delete;
  TrackedSet& operator=(const TrackedSet&) = delete;
  ~TrackedSet() { release(); }

  const LabeledSet<T>& get() const { return set_; }

 private:
  void release() {
    live_samples() -= static_cast<std::int64_t>(set_.size());
    set_ = LabeledSet<T>{};
  }
  LabeledSet<T> set_;
};

namespace detail {

struct ClassPattern {
  double freq;
  double angle;
  double phase;
};

inline ClassPattern class_pattern(const SyntheticDatasetSpec& spec, int class_id) {
  Rng rng(mix_seed(spec.seed, 0xC1A55 + static_cast<std::uint64_t>(class_id)));
  ClassPattern p;
  p.freq = 1.0 + 3.0 * rng.uniform();
  p.angle = 3.141592653589793 * rng.uniform();
  p.phase = 2.0 * 3.141592653589793 * rng.uniform();
  return p;
}

inline std::uint64_t sample_salt(int class_id, bool train, int index) {
  // train/test draw from disjoint noise streams by construction
  return (static_cast<std::uint64_t>(class_id) << 32) |
         (static_cast<std::uint64_t>(train ? 0 : 1) << 31) |
         static_cast<std::uint64_t>(index);
}

}  // namespace detail

// One image: a class-specific oriented sinusoid texture plus pixel noise.
// The texture separates classes; noise_std dials the difficulty.
template <class T>
Image<T> synthesize_image(const SyntheticDatasetSpec& spec, int class_id, bool train,
                          int index) {
  detail::ClassPattern p = detail::class_pattern(spec, class_id);
  Rng noise(mix_seed(spec.seed, detail::sample_salt(class_id, train, index)));
  Image<T> img(spec.image_size, spec.image_size, 1);
  const double s = spec.image_size;
  const double ca = std::cos(p.angle), sa = std::sin(p.angle);
  for (int y = 0; y < spec.image_size; ++y) {
    for (int x = 0; x < spec.image_size; ++x) {
      double u = (x * ca + y * sa) / s;
      double v = std::sin(2.0 * 3.141592653589793 * p.freq * u + p.phase);
      img.at(y, x) = static_cast<T>(v + spec.noise_std * noise.gaussian());
    }
  }
  return img;
}

template <class T>
LabeledSet<T> synthesize_set(const SyntheticDatasetSpec& spec, const std::vector<int>& classes,
                             bool train) {
  LabeledSet<T> out;
  int per = train ? spec.train_per_class : spec.test_per_class;
  for (int c : classes)
    for (int i = 0; i < per; ++i) out.push(synthesize_image<T>(spec, c, train, i), c);
  return out;
}

// ---- on-disk layout ----
//
// <dir>/manifest.json plus <dir>/class_<id>/{train,test}_<i>.bin with raw
// row-major float32 pixels; counts and geometry live in the manifest.

namespace detail {

inline void write_image_file(const std::filesystem::path& path, const Image<float>& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("generate_synthetic_dataset: cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(img.pix.data()),
          static_cast<std::streamsize>(img.pix.size() * sizeof(float)));
}

template <class T>
Image<T> read_image_file(const std::filesystem::path& path, int size) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_dataset: cannot read " + path.string());
  std::vector<float> raw(static_cast<std::size_t>(size) * size);
  f.read(reinterpret_cast<char*>(raw.data()),
         static_cast<std::streamsize>(raw.size() * sizeof(float)));
  if (f.gcount() != static_cast<std::streamsize>(raw.size() * sizeof(float)))
    throw std::runtime_error("load_dataset: truncated image " + path.string());
  Image<T> img(size, size, 1);
  for (std::size_t i = 0; i < raw.size(); ++i) img.pix[i] = static_cast<T>(raw[i]);
  return img;
}

}  // namespace detail

inline void generate_synthetic_dataset(const SyntheticDatasetSpec& spec,
                                       const std::filesystem::path& dir,
                                       bool overwrite = false) {
  spec.validate();
  namespace fs = std::filesystem;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!overwrite)
      throw std::runtime_error("generate_synthetic_dataset: " + dir.string() +
                               " is not empty (pass overwrite to replace it)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);

  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["image_size"] = spec.image_size;
  manifest["channels"] = 1;
  manifest["seed"] = spec.seed;
  manifest["noise_std"] = spec.noise_std;
  manifest["classes"] = nlohmann::json::array();
  int train_total = 0, test_total = 0;
  for (int c = 0; c < spec.num_classes; ++c) {
    fs::path cdir = dir / ("class_" + std::to_string(c));
    fs::create_directories(cdir);
    for (int i = 0; i < spec.train_per_class; ++i)
      detail::write_image_file(cdir / ("train_" + std::to_string(i) + ".bin"),
                               synthesize_image<float>(spec, c, true, i));
    for (int i = 0; i < spec.test_per_class; ++i)
      detail::write_image_file(cdir / ("test_" + std::to_string(i) + ".bin"),
                               synthesize_image<float>(spec, c, false, i));
    manifest["classes"].push_back({{"id", c},
                                   {"train_count", spec.train_per_class},
                                   {"test_count", spec.test_per_class}});
    train_total += spec.train_per_class;
    test_total += spec.test_per_class;
  }
  manifest["train_total"] = train_total;
  manifest["test_total"] = test_total;
  std::ofstream mf(dir / "manifest.json");
  mf << manifest.dump(2) << "\n";
}

struct DatasetInfo {
  int image_size = 0;
  std::vector<int> class_ids;
  std::map<int, int> train_counts;
  std::map<int, int> test_counts;
};

inline DatasetInfo read_manifest(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("load_dataset: no manifest in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(mf);
  DatasetInfo info;
  info.image_size = manifest.at("image_size").get<int>();
  for (const auto& c : manifest.at("classes")) {
    int id = c.at("id").get<int>();
    info.class_ids.push_back(id);
    info.train_counts[id] = c.at("train_count").get<int>();
    info.test_counts[id] = c.at("test_count").get<int>();
  }
  return info;
}

// loads the requested classes' samples; training data arrives tracked so
// its lifetime is auditable
template <class T>
LabeledSet<T> load_split(const std::filesystem::path& dir, const DatasetInfo& info,
                         const std::vector<int>& classes, bool train) {
  LabeledSet<T> out;
  for (int c : classes) {
    auto counts = train ? info.train_counts : info.test_counts;
    auto it = counts.find(c);
    if (it == counts.end())
      throw std::out_of_range("load_split: class " + std::to_string(c) + " not in manifest");
    std::filesystem::path cdir = dir / ("class_" + std::to_string(c));
    const char* stem = train ? "train_" : "test_";
    for (int i = 0; i < it->second; ++i)
      out.push(detail::read_image_file<T>(cdir / (stem + std::to_string(i) + ".bin"),
                                          info.image_size),
               c);
  }
  return out;
}

template <class T>
TrackedSet<T> load_train_tracked(const std::filesystem::path& dir, const DatasetInfo& info,
                                 const std::vector<int>& classes) {
  return TrackedSet<T>(load_split<T>(dir, info, classes, true));
}

}  // namespace apgcl
