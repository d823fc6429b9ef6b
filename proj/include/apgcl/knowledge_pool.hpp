#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "apgcl/matrix.hpp"
#include "apgcl/rng.hpp"

namespace apgcl {

// Per-class multivariate normal over features at one layer.
template <class T>
struct GaussianStat {
  Mat<T> mean;  // 1 x d
  Mat<T> cov;   // d x d, symmetric
  std::int64_t sample_count = 0;
};

// Everything retained about a finished class: feature statistics at the
// prompt-insertion layer and the final layer, plus the prompt centroid the
// generator produced for the class mean. No raw images or token sequences
// are ever stored here — that is the whole point.
template <class T>
struct ClassStatistics {
  GaussianStat<T> stat_l;
  GaussianStat<T> stat_final;
  Mat<T> prompt_centroid;  // N_P x d, frozen at summarization time
};

enum class PoolLayer { l, final };

template <class T>
struct KnowledgePool {
  std::map<int, ClassStatistics<T>> entries;
  // advanced once per sample() call so repeated draws differ while a
  // (seed, call order) pair stays reproducible
  std::uint64_t draw_counter = 0;

  bool contains(int class_id) const { return entries.count(class_id) != 0; }
  std::size_t size() const { return entries.size(); }

  const ClassStatistics<T>& at(int class_id) const {
    auto it = entries.find(class_id);
    if (it == entries.end())
      throw std::out_of_range("KnowledgePool: class " + std::to_string(class_id) +
                              " not summarized");
    return it->second;
  }

  void insert(int class_id, ClassStatistics<T> stats) {
    auto [it, inserted] = entries.emplace(class_id, std::move(stats));
    if (!inserted)
      throw std::invalid_argument("KnowledgePool: class " + std::to_string(class_id) +
                                  " already summarized; entries are immutable");
  }
};

namespace detail {

template <class T>
GaussianStat<T> gaussian_fit(const std::vector<Mat<T>>& features) {
  const int n = static_cast<int>(features.size());
  const int d = features.front().cols;
  GaussianStat<T> g;
  g.sample_count = n;
  g.mean = Mat<T>(1, d);
  for (const Mat<T>& f : features) {
    if (f.rows != 1 || f.cols != d)
      throw std::invalid_argument("summarize_class: feature must be 1x" + std::to_string(d) +
                                  ", got " + shape_str(f));
    for (int j = 0; j < d; ++j) g.mean(0, j) += f(0, j);
  }
  for (int j = 0; j < d; ++j) g.mean(0, j) /= T(n);

  g.cov = Mat<T>(d, d);
  const T divisor = T(n > 1 ? n - 1 : 1);
  for (const Mat<T>& f : features)
    for (int i = 0; i < d; ++i)
      for (int k = 0; k <= i; ++k)
        g.cov(i, k) += (f(0, i) - g.mean(0, i)) * (f(0, k) - g.mean(0, k)) / divisor;
  // built lower-triangular, mirror up: symmetric by construction
  for (int i = 0; i < d; ++i)
    for (int k = i + 1; k < d; ++k) g.cov(i, k) = g.cov(k, i);
  return g;
}

// lower-triangular Cholesky of (cov + jitter I), done in double for headroom;
// returns false when the matrix is not positive definite at this jitter
template <class T>
bool cholesky(const Mat<T>& cov, double jitter, std::vector<double>& lower) {
  const int d = cov.rows;
  lower.assign(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) {
    for (int k = 0; k <= i; ++k) {
      double acc = static_cast<double>(cov(i, k)) + (i == k ? jitter : 0.0);
      for (int m = 0; m < k; ++m) acc -= lower[i * d + m] * lower[k * d + m];
      if (i == k) {
        if (!(acc > 0.0) || !std::isfinite(acc)) return false;
        lower[i * d + i] = std::sqrt(acc);
      } else {
        lower[i * d + k] = acc / lower[k * d + k];
      }
    }
  }
  return true;
}

template <class T>
double base_jitter(const Mat<T>& cov) {
  double trace = 0.0;
  for (int i = 0; i < cov.rows; ++i) trace += static_cast<double>(cov(i, i));
  return 1e-4 * (trace / cov.rows + 1e-8);
}

}  // namespace detail

// Fits the two Gaussians and records the generator's output for the class
// mean. `apg_eval` maps a 1xd mean to the N_P x d prompt matrix.
template <class T, class ApgFn>
ClassStatistics<T> summarize_class(const std::vector<Mat<T>>& features_l,
                                   const std::vector<Mat<T>>& features_final,
                                   ApgFn&& apg_eval) {
  if (features_l.empty() || features_final.empty())
    throw std::invalid_argument("summarize_class: empty feature set");
  if (features_l.size() != features_final.size())
    throw std::invalid_argument("summarize_class: layer-l and final feature sets differ in size");
  ClassStatistics<T> out;
  out.stat_l = detail::gaussian_fit(features_l);
  out.stat_final = detail::gaussian_fit(features_final);
  out.prompt_centroid = apg_eval(out.stat_l.mean);
  return out;
}

// Draws n synthetic knowledge vectors ~ N(mean, cov + jitter I). The jitter
// starts scale-aware and escalates x10 up to 3 times before giving up.
template <class T>
std::vector<Mat<T>> sample(KnowledgePool<T>& pool, int class_id, PoolLayer layer, int n,
                           std::uint64_t seed) {
  const ClassStatistics<T>& stats = pool.at(class_id);
  const GaussianStat<T>& g = layer == PoolLayer::l ? stats.stat_l : stats.stat_final;
  const int d = g.mean.cols;

  double jitter = detail::base_jitter(g.cov);
  std::vector<double> lower;
  bool ok = false;
  for (int attempt = 0; attempt <= 3 && !ok; ++attempt) {
    if (attempt > 0) jitter *= 10.0;
    ok = detail::cholesky(g.cov, jitter, lower);
  }
  if (!ok) {
    double trace = 0.0;
    for (int i = 0; i < d; ++i) trace += static_cast<double>(g.cov(i, i));
    throw std::runtime_error("sample: Cholesky failed for class " + std::to_string(class_id) +
                             " even at jitter " + std::to_string(jitter) + " (d=" +
                             std::to_string(d) + ", trace/d=" + std::to_string(trace / d) + ")");
  }

  Rng rng(mix_seed(seed, pool.draw_counter++));
  std::vector<Mat<T>> out;
  out.reserve(static_cast<std::size_t>(n));
  std::vector<double> eps(static_cast<std::size_t>(d));
  for (int s = 0; s < n; ++s) {
    for (auto& e : eps) e = rng.gaussian();
    Mat<T> v(1, d);
    for (int i = 0; i < d; ++i) {
      double acc = static_cast<double>(g.mean(0, i));
      for (int k = 0; k <= i; ++k) acc += lower[i * d + k] * eps[k];
      v(0, i) = static_cast<T>(acc);
    }
    out.push_back(std::move(v));
  }
  return out;
}

// ---- binary pool format ----
//
// Little-endian throughout. Header: magic "APGCPOOL", u32 version, u32 d,
// u32 N_P, u32 class count, u64 draw counter. Then one record per class:
// i32 class id, i64 sample counts (layer l, final), mean_l, mean_final,
// cov_l, cov_final, prompt centroid — all float64 row-major.

namespace detail {

constexpr char kPoolMagic[8] = {'A', 'P', 'G', 'C', 'P', 'O', 'O', 'L'};
constexpr std::uint32_t kPoolVersion = 1;

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(x >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(x >> (8 * i)));
}
inline void put_f64(std::vector<std::uint8_t>& out, double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, 8);
  put_u64(out, bits);
}

struct ByteReader {
  const std::vector<std::uint8_t>* bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes->size())
      throw std::runtime_error("deserialize_pool: truncated stream at byte " +
                               std::to_string(pos));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= std::uint32_t((*bytes)[pos++]) << (8 * i);
    return x;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= std::uint64_t((*bytes)[pos++]) << (8 * i);
    return x;
  }
  double f64() {
    std::uint64_t bits = u64();
    double x;
    std::memcpy(&x, &bits, 8);
    return x;
  }
};

template <class T>
void put_mat(std::vector<std::uint8_t>& out, const Mat<T>& m) {
  for (T x : m.v) put_f64(out, static_cast<double>(x));
}

template <class T>
Mat<T> read_mat(ByteReader& r, int rows, int cols) {
  Mat<T> m(rows, cols);
  for (auto& x : m.v) x = static_cast<T>(r.f64());
  return m;
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> serialize_pool(const KnowledgePool<T>& pool) {
  int d = 0, np = 0;
  if (!pool.entries.empty()) {
    const ClassStatistics<T>& first = pool.entries.begin()->second;
    d = first.stat_l.mean.cols;
    np = first.prompt_centroid.rows;
  }
  std::vector<std::uint8_t> out;
  out.insert(out.end(), detail::kPoolMagic, detail::kPoolMagic + 8);
  detail::put_u32(out, detail::kPoolVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(d));
  detail::put_u32(out, static_cast<std::uint32_t>(np));
  detail::put_u32(out, static_cast<std::uint32_t>(pool.entries.size()));
  detail::put_u64(out, pool.draw_counter);
  for (const auto& [id, s] : pool.entries) {
    detail::put_u32(out, static_cast<std::uint32_t>(id));
    detail::put_u64(out, static_cast<std::uint64_t>(s.stat_l.sample_count));
    detail::put_u64(out, static_cast<std::uint64_t>(s.stat_final.sample_count));
    detail::put_mat(out, s.stat_l.mean);
    detail::put_mat(out, s.stat_final.mean);
    detail::put_mat(out, s.stat_l.cov);
    detail::put_mat(out, s.stat_final.cov);
    detail::put_mat(out, s.prompt_centroid);
  }
  return out;
}

template <class T>
KnowledgePool<T> deserialize_pool(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r{&bytes};
  r.need(8);
  if (std::memcmp(bytes.data(), detail::kPoolMagic, 8) != 0)
    throw std::runtime_error("deserialize_pool: bad magic");
  r.pos = 8;
  std::uint32_t version = r.u32();
  if (version != detail::kPoolVersion)
    throw std::runtime_error("deserialize_pool: unsupported version " + std::to_string(version));
  int d = static_cast<int>(r.u32());
  int np = static_cast<int>(r.u32());
  std::uint32_t count = r.u32();

  KnowledgePool<T> pool;
  pool.draw_counter = r.u64();
  // sanity-check the record count against the remaining payload so a
  // corrupted header fails here rather than half-filling the pool
  std::size_t record_bytes =
      4 + 16 + 8ull * (2ull * d + 2ull * d * d + std::size_t(np) * d);
  if (bytes.size() - r.pos != record_bytes * count)
    throw std::runtime_error("deserialize_pool: payload size does not match class count");

  for (std::uint32_t i = 0; i < count; ++i) {
    int id = static_cast<int>(r.u32());
    ClassStatistics<T> s;
    s.stat_l.sample_count = static_cast<std::int64_t>(r.u64());
    s.stat_final.sample_count = static_cast<std::int64_t>(r.u64());
    s.stat_l.mean = detail::read_mat<T>(r, 1, d);
    s.stat_final.mean = detail::read_mat<T>(r, 1, d);
    s.stat_l.cov = detail::read_mat<T>(r, d, d);
    s.stat_final.cov = detail::read_mat<T>(r, d, d);
    s.prompt_centroid = detail::read_mat<T>(r, np, d);
    pool.insert(id, std::move(s));
  }
  return pool;
}

}  // namespace apgcl
