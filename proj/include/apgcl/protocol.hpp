#pragma once

#include <algorithm>
#include <cstdlib>
#include <map>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "apgcl/apg.hpp"
#include "apgcl/backbone.hpp"
#include "apgcl/knowledge_pool.hpp"
#include "apgcl/losses.hpp"
#include "apgcl/optimizer.hpp"
#include "apgcl/rng.hpp"

namespace apgcl {

// Bx-Ty split: task 1 holds B classes, the rest spread over T incremental
// tasks as evenly as possible, remainder to the earliest tasks.
struct TaskSpec {
  int B = 0;
  int T = 0;
  std::vector<int> class_order;                 // seeded permutation
  std::vector<std::vector<int>> task_classes;   // size T+1, disjoint

  int num_tasks() const { return static_cast<int>(task_classes.size()); }
};

inline TaskSpec make_splits(int num_classes, int B, int T, std::uint64_t seed) {
  if (B < 1 || T < 1 || B + T > num_classes)
    throw std::invalid_argument("make_splits: need B >= 1, T >= 1, B + T <= num_classes (got B=" +
                                std::to_string(B) + ", T=" + std::to_string(T) +
                                ", classes=" + std::to_string(num_classes) + ")");
  TaskSpec spec;
  spec.B = B;
  spec.T = T;
  spec.class_order.resize(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) spec.class_order[c] = c;
  Rng rng(mix_seed(seed, 0x511));
  for (int i = num_classes - 1; i > 0; --i) {
    std::size_t j = rng.index(static_cast<std::size_t>(i) + 1);
    std::swap(spec.class_order[i], spec.class_order[j]);
  }
  int rest = num_classes - B;
  int base = rest / T;
  int rem = rest % T;
  std::size_t pos = 0;
  spec.task_classes.emplace_back(spec.class_order.begin(), spec.class_order.begin() + B);
  pos = B;
  for (int t = 0; t < T; ++t) {
    int size = base + (t < rem ? 1 : 0);
    spec.task_classes.emplace_back(spec.class_order.begin() + pos,
                                   spec.class_order.begin() + pos + size);
    pos += size;
  }
  return spec;
}

enum class FreezingMode {
  non_pretrained,     // backbone trained on task 1 only, then fixed
  frozen_throughout,  // backbone never trained
};

struct TrainConfig {
  int epochs = 20;
  int batch_size = 16;
  OptimizerConfig opt;
  double margin = 0.2;  // triplet margin alpha
  std::uint64_t seed = 0;
  FreezingMode freezing = FreezingMode::non_pretrained;
  LossFlags losses;

  void validate() const {
    if (epochs < 1 || batch_size < 1)
      throw std::invalid_argument("TrainConfig: epochs and batch_size must be positive");
    if (margin < 0) throw std::invalid_argument("TrainConfig: margin must be >= 0");
  }
};

template <class T>
struct LabeledSet {
  std::vector<Image<T>> images;
  std::vector<int> labels;

  std::size_t size() const { return images.size(); }
  void push(Image<T> img, int label) {
    images.push_back(std::move(img));
    labels.push_back(label);
  }
};

// Everything that persists across tasks. Raw training data never enters
// this struct; only parameters and pool statistics survive a task.
template <class T>
struct ModelState {
  BackboneConfig backbone;
  APGConfig apg;
  TrainConfig train;
  ParameterSet<T> params;
  CandidateList candidates;
  KnowledgePool<T> pool;
  std::vector<int> seen_classes;  // classifier row -> class id
  Optimizer<T> opt{OptimizerConfig{}};
  int completed_tasks = 0;

  int row_of(int class_id) const {
    for (std::size_t r = 0; r < seen_classes.size(); ++r)
      if (seen_classes[r] == class_id) return static_cast<int>(r);
    throw std::out_of_range("ModelState: class " + std::to_string(class_id) + " not seen");
  }
};

template <class T>
ModelState<T> init_model(const BackboneConfig& bb, const APGConfig& apg,
                         const TrainConfig& tc) {
  bb.validate();
  apg.validate();
  tc.validate();
  if (bb.embed_dim != apg.feature_dim)
    throw std::invalid_argument("init_model: backbone width and APG feature dim must match");
  ModelState<T> st;
  st.backbone = bb;
  st.apg = apg;
  st.train = tc;
  st.opt = Optimizer<T>(tc.opt);
  Rng rng(mix_seed(tc.seed, 0xB0DE));
  init_backbone_params(st.params, bb, rng);
  init_apg_params(st.params, apg, rng);
  st.params.add("head.weight", Mat<T>(0, bb.embed_dim));
  st.params.add("head.bias", Mat<T>(1, 0));
  return st;
}

// Grows the classifier by one row per new class: old rows bit-identical,
// new rows gaussian (std 0.02), zero bias.
template <class T>
void extend_classifier(ModelState<T>& st, const std::vector<int>& new_class_ids,
                       std::uint64_t seed) {
  for (int c : new_class_ids)
    for (int s : st.seen_classes)
      if (s == c)
        throw std::invalid_argument("extend_classifier: class " + std::to_string(c) +
                                    " already has a row");
  Mat<T>& w = st.params.at("head.weight");
  Mat<T>& bias = st.params.at("head.bias");
  int old_rows = w.rows;
  int added = static_cast<int>(new_class_ids.size());
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(old_rows)));
  Mat<T> grown(old_rows + added, w.cols);
  for (std::size_t i = 0; i < w.v.size(); ++i) grown.v[i] = w.v[i];
  for (std::size_t i = w.v.size(); i < grown.v.size(); ++i)
    grown.v[i] = static_cast<T>(rng.gaussian()) * T(0.02);
  Mat<T> grown_bias(1, old_rows + added);
  for (int j = 0; j < old_rows; ++j) grown_bias(0, j) = bias(0, j);
  w = std::move(grown);
  bias = std::move(grown_bias);
  for (int c : new_class_ids) st.seen_classes.push_back(c);
}

// convenience: candidate groups + classifier rows for one task's classes
template <class T>
void begin_task(ModelState<T>& st, const std::vector<int>& class_ids, std::uint64_t seed) {
  extend_candidates(st.candidates, st.params, class_ids, st.apg, seed);
  extend_classifier(st, class_ids, seed);
}

template <class T>
struct SampleForward {
  Var<T> v_l;      // 1 x d, prompt-free class token at layer l
  Var<T> prompts;  // N_P x d
  ScoreVars<T> scores;
  Var<T> feature;  // 1 x d, final class token
  Var<T> logits;   // 1 x seen classes
  Var<T> probs;    // softmax of the logits
};

template <class T>
Var<T> classifier_logits(const Bound<T>& b, Var<T> feature) {
  return add_bias(matmul(feature, transpose(b["head.weight"])), b["head.bias"]);
}

template <class T>
Var<T> classifier_probs(const Bound<T>& b, Var<T> feature) {
  return softmax_rows(classifier_logits(b, feature));
}

// the full per-sample pipeline: plain forward to layer l, prompt
// generation, prompted forward to the top, classifier
template <class T>
SampleForward<T> forward_sample(Tape<T>& tape, const Image<T>& img, const Bound<T>& b,
                                const ModelState<T>& st) {
  int l = st.backbone.effective_prompt_layer();
  IntermediateFeature<T> inter = forward_to_layer(tape, img, b, st.backbone, l);
  GeneratedPrompts<T> gen = generate_prompts(inter.v_l, b["apg.candidates"], b, st.apg);
  TokenSeq<T> prompted = insert_prompts(inter.x_l, gen.prompts);
  Var<T> feature = forward_from_layer(prompted, b, st.backbone, l);
  Var<T> logits = classifier_logits(b, feature);
  return SampleForward<T>{inter.v_l,      gen.prompts, std::move(gen.scores),
                          feature,        logits,      softmax_rows(logits)};
}

template <class T>
struct TrainLog {
  std::vector<LossBreakdown<T>> steps;
  std::vector<AttentionRecord<T>> attention;  // one record per step
};

// One incremental task: candidate/classifier extension must already have
// happened for exactly this task's classes. Trains with the five-term
// objective, then summarizes every class of the task into the pool.
template <class T>
TrainLog<T> train_task(ModelState<T>& st, const LabeledSet<T>& data, int task_index) {
  if (task_index < 1) throw std::invalid_argument("train_task: task_index is 1-based");
  if (data.size() == 0) throw std::invalid_argument("train_task: empty task data");
  const TrainConfig& tc = st.train;
  const bool first_task = task_index == 1;

  // classes of this task = the labels present in its data; everything
  // already summarized counts as an old class
  std::vector<int> task_class_ids;
  for (int y : data.labels) {
    if (!std::count(st.seen_classes.begin(), st.seen_classes.end(), y))
      throw std::invalid_argument("train_task: sample labeled " + std::to_string(y) +
                                  " has no classifier row; extend first");
    if (st.pool.contains(y))
      throw std::invalid_argument("train_task: class " + std::to_string(y) +
                                  " was already summarized in an earlier task");
    if (!std::count(task_class_ids.begin(), task_class_ids.end(), y))
      task_class_ids.push_back(y);
  }
  std::vector<int> old_class_ids;
  for (int c : st.seen_classes)
    if (st.pool.contains(c)) old_class_ids.push_back(c);
  if (!first_task && old_class_ids.empty())
    throw std::invalid_argument("train_task: task >= 2 but no summarized old classes");

  // freezing policy
  bool backbone_trainable =
      tc.freezing == FreezingMode::non_pretrained && first_task;
  st.params.set_trainable_prefix("backbone.", backbone_trainable);

  const bool use_old = !first_task;  // conA/conC vacuous during task 1
  const int n = static_cast<int>(data.size());
  const int steps_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  const int total_steps = steps_per_epoch * tc.epochs;

  TrainLog<T> log;
  Rng order_rng(mix_seed(tc.seed, 0xE90C + static_cast<std::uint64_t>(task_index)));
  Rng old_rng(mix_seed(tc.seed, 0x01D + static_cast<std::uint64_t>(task_index)));

  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[i] = i;

  int step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i)
      std::swap(idx[i], idx[order_rng.index(static_cast<std::size_t>(i) + 1)]);

    for (int start = 0; start < n; start += tc.batch_size, ++step) {
      int bsz = std::min(tc.batch_size, n - start);
      Tape<T> tape;
      Bound<T> bound = bind_all(tape, st.params);

      std::vector<SampleForward<T>> fwd;
      fwd.reserve(static_cast<std::size_t>(bsz));
      for (int k = 0; k < bsz; ++k)
        fwd.push_back(forward_sample(tape, data.images[idx[start + k]], bound, st));

      LossBreakdown<T> means;
      Var<T> batch_loss = tape.leaf(Mat<T>(1, 1));
      for (int k = 0; k < bsz; ++k) {
        int y = data.labels[idx[start + k]];
        int row = st.row_of(y);
        Var<T> term = classification_loss_logits(fwd[k].logits, row);
        means.cls += term.scalar();

        if (tc.losses.attn) {
          Var<T> la = attention_loss(fwd[k].scores, y, st.candidates);
          means.attn += la.scalar();
          term = add(term, la);
        }
        if (tc.losses.tri) {
          // in-batch mining: nearest following same-class sample as the
          // positive, first other-class sample as the negative
          int pos = -1, neg = -1;
          for (int m = 1; m < bsz && (pos < 0 || neg < 0); ++m) {
            int other = (k + m) % bsz;
            int oy = data.labels[idx[start + other]];
            if (oy == y && pos < 0) pos = other;
            if (oy != y && neg < 0) neg = other;
          }
          if (pos >= 0 && neg >= 0) {
            Var<T> lt = triplet_loss(fwd[k].prompts, fwd[pos].prompts, fwd[neg].prompts,
                                     static_cast<T>(tc.margin));
            means.tri += lt.scalar();
            term = add(term, lt);
          }
        }
        if (use_old && (tc.losses.conA || tc.losses.conC)) {
          int c = old_class_ids[old_rng.index(old_class_ids.size())];
          int old_row = st.row_of(c);
          if (tc.losses.conA) {
            Mat<T> v_tilde =
                sample(st.pool, c, PoolLayer::l, 1, old_rng.next_u64()).front();
            GeneratedPrompts<T> gen =
                generate_prompts(tape.leaf(v_tilde), bound["apg.candidates"], bound, st.apg);
            Var<T> la = apg_consistency_loss(gen.prompts, st.pool.at(c).prompt_centroid);
            means.conA += la.scalar();
            term = add(term, la);
          }
          if (tc.losses.conC) {
            Mat<T> v_tilde =
                sample(st.pool, c, PoolLayer::final, 1, old_rng.next_u64()).front();
            Var<T> lc = classification_loss_logits(
                classifier_logits(bound, tape.leaf(v_tilde)), old_row);
            means.conC += lc.scalar();
            term = add(term, lc);
          }
        }
        batch_loss = add(batch_loss, term);
      }
      batch_loss = scale(batch_loss, T(1) / static_cast<T>(bsz));
      tape.backward(batch_loss);
      auto grads = collect_grads(bound);
      st.opt.step(st.params, grads, cosine_lr(tc.opt.lr, step, total_steps));

      T inv = T(1) / static_cast<T>(bsz);
      log.steps.push_back(total_loss(means.cls * inv, means.attn * inv, means.tri * inv,
                                     means.conA * inv, means.conC * inv));
      log.attention.push_back(fwd[0].scores.record(st.candidates.total_rows()));
    }
  }

  // knowledge-pool summarization: per class, features of every training
  // sample at layer l (prompt-free) and at the top (prompted)
  for (int c : task_class_ids) {
    std::vector<Mat<T>> feats_l, feats_final;
    for (int i = 0; i < n; ++i) {
      if (data.labels[i] != c) continue;
      Tape<T> tape;
      Bound<T> bound = bind_all(tape, st.params);
      SampleForward<T> f = forward_sample(tape, data.images[i], bound, st);
      feats_l.push_back(f.v_l.val());
      feats_final.push_back(f.feature.val());
    }
    st.pool.insert(c, summarize_class(feats_l, feats_final, [&](const Mat<T>& mean) {
                     return generate_prompts_value(st.params, st.apg, mean);
                   }));
  }
  ++st.completed_tasks;
  return log;
}

// ---- evaluation and metrics ----

inline int eval_threads() {
  const char* env = std::getenv("APGCL_THREADS");
  if (!env) return 1;
  int n = std::atoi(env);
  return n > 0 ? n : 1;
}

struct StageHistory {
  // acc[s][t]: accuracy (percent) on task t's test set after stage s, t <= s
  std::vector<std::vector<double>> acc;
  std::vector<double> union_acc;  // accuracy over the union of seen test sets
};

// classifies one test set; returns per-sample correctness flags in input order
template <class T>
std::vector<char> classify_set(const ModelState<T>& st, const LabeledSet<T>& set) {
  const int n = static_cast<int>(set.size());
  std::vector<char> correct(static_cast<std::size_t>(n), 0);
  int threads = std::min(eval_threads(), std::max(1, n));
  auto work = [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      Tape<T> tape;
      Bound<T> bound = bind_all(tape, st.params);
      SampleForward<T> f = forward_sample(tape, set.images[i], bound, st);
      const Mat<T>& p = f.probs.val();
      int best = 0;
      for (int j = 1; j < p.cols; ++j)
        if (p(0, j) > p(0, best)) best = j;
      correct[i] = st.seen_classes[best] == set.labels[i] ? 1 : 0;
    }
  };
  if (threads == 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    int chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      int begin = t * chunk, end = std::min(n, begin + chunk);
      if (begin < end) pool.emplace_back(work, begin, end);
    }
    for (auto& th : pool) th.join();
  }
  return correct;
}

// Appends one stage row: per-task accuracies plus the union accuracy over
// every seen task's test set (task-agnostic argmax over all seen classes).
template <class T>
void evaluate(const ModelState<T>& st, const std::vector<LabeledSet<T>>& test_sets,
              StageHistory& history) {
  std::vector<double> row;
  std::int64_t correct_total = 0, total = 0;
  for (const LabeledSet<T>& set : test_sets) {
    auto flags = classify_set(st, set);
    std::int64_t c = 0;
    for (char f : flags) c += f;
    correct_total += c;
    total += static_cast<std::int64_t>(flags.size());
    row.push_back(flags.empty() ? 0.0 : 100.0 * static_cast<double>(c) / flags.size());
  }
  if (total == 0) throw std::invalid_argument("evaluate: no test samples");
  history.acc.push_back(std::move(row));
  history.union_acc.push_back(100.0 * static_cast<double>(correct_total) / total);
}

inline double average_accuracy(const StageHistory& history) {
  if (history.union_acc.empty() || history.union_acc.size() != history.acc.size())
    throw std::invalid_argument("average_accuracy: incomplete history");
  for (std::size_t s = 0; s < history.acc.size(); ++s)
    if (history.acc[s].size() != s + 1)
      throw std::invalid_argument("average_accuracy: stage " + std::to_string(s) +
                                  " is missing task accuracies");
  double sum = 0;
  for (double a : history.union_acc) sum += a;
  return sum / history.union_acc.size();
}

// mean over past tasks of (best accuracy ever seen on that task) minus
// (accuracy at the final stage)
inline double forgetting(const StageHistory& history) {
  const std::size_t stages = history.acc.size();
  if (stages < 2) throw std::invalid_argument("forgetting: need at least 2 stages");
  for (std::size_t s = 0; s < stages; ++s)
    if (history.acc[s].size() != s + 1)
      throw std::invalid_argument("forgetting: stage " + std::to_string(s) +
                                  " is missing task accuracies");
  double sum = 0;
  for (std::size_t t = 0; t + 1 < stages; ++t) {
    double best = history.acc[t][t];
    for (std::size_t s = t; s < stages; ++s) best = std::max(best, history.acc[s][t]);
    sum += best - history.acc[stages - 1][t];
  }
  return sum / static_cast<double>(stages - 1);
}

}  // namespace apgcl
