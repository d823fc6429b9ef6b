#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "apgcl/params.hpp"
#include "apgcl/tape.hpp"

namespace apgcl {

struct APGConfig {
  int feature_dim = 64;    // d, width of v_l and of the emitted prompts
  int candidate_dim = 64;  // d_c; kept equal to d by default
  int num_heads = 4;       // n_h
  int num_prompts = 1;     // N_P
  int group_size = 1;      // N_g candidates appended per class

  int head_dim() const { return candidate_dim / num_heads; }

  void validate() const {
    if (feature_dim < 1 || candidate_dim < 1 || num_heads < 1 || num_prompts < 1 ||
        group_size < 1)
      throw std::invalid_argument("APGConfig: all counts must be positive");
    if (candidate_dim % num_heads != 0)
      throw std::invalid_argument("APGConfig: candidate_dim must divide by num_heads");
  }
};

// Bookkeeping for the extendable candidate store. The candidate values
// themselves live in the ParameterSet under "apg.candidates" so they are
// trained like any other parameter.
struct CandidateList {
  int group_size = 1;
  std::map<int, std::pair<int, int>> groups;  // class id -> [row begin, row end)
  std::vector<int> task_boundaries;           // cumulative row count after each task

  int total_rows() const { return group_size * static_cast<int>(groups.size()); }
  bool empty() const { return groups.empty(); }

  std::pair<int, int> group_of(int class_id) const {
    auto it = groups.find(class_id);
    if (it == groups.end())
      throw std::out_of_range("CandidateList: class " + std::to_string(class_id) +
                              " has no candidate group");
    return it->second;
  }
};

inline std::string apg_proj_name(const char* which, int head, int output) {
  return std::string("apg.cross.") + which + ".h" + std::to_string(head) + ".j" +
         std::to_string(output);
}

template <class T>
void init_apg_params(ParameterSet<T>& params, const APGConfig& cfg, Rng& rng) {
  cfg.validate();
  const T std02 = T(0.02);
  int d = cfg.feature_dim, dc = cfg.candidate_dim, dk = cfg.head_dim();
  params.add("apg.m_in.fc1.weight", Mat<T>::gaussian(d, dc, std02, rng));
  params.add("apg.m_in.fc1.bias", Mat<T>(1, dc));
  params.add("apg.m_in.fc2.weight", Mat<T>::gaussian(dc, dc, std02, rng));
  params.add("apg.m_in.fc2.bias", Mat<T>(1, dc));
  params.add("apg.m_out.fc1.weight", Mat<T>::gaussian(dc, dc, std02, rng));
  params.add("apg.m_out.fc1.bias", Mat<T>(1, dc));
  params.add("apg.m_out.fc2.weight", Mat<T>::gaussian(dc, d, std02, rng));
  params.add("apg.m_out.fc2.bias", Mat<T>(1, d));
  params.add("apg.wo", Mat<T>::gaussian(dc, dc, std02, rng));
  // one projection triple per (head, output token), exactly as indexed
  for (int h = 0; h < cfg.num_heads; ++h) {
    for (int j = 0; j < cfg.num_prompts; ++j) {
      params.add(apg_proj_name("q", h, j), Mat<T>::gaussian(dc, dk, std02, rng));
      params.add(apg_proj_name("k", h, j), Mat<T>::gaussian(dc, dk, std02, rng));
      params.add(apg_proj_name("v", h, j), Mat<T>::gaussian(dc, dk, std02, rng));
    }
  }
}

// Appends N_g fresh gaussian rows per new class; earlier rows are preserved
// bit-exactly as a prefix.
template <class T>
void extend_candidates(CandidateList& list, ParameterSet<T>& params,
                       const std::vector<int>& new_class_ids, const APGConfig& cfg,
                       std::uint64_t seed) {
  for (int c : new_class_ids)
    if (list.groups.count(c))
      throw std::invalid_argument("extend_candidates: class " + std::to_string(c) +
                                  " already has a candidate group");
  if (!list.empty() && list.group_size != cfg.group_size)
    throw std::invalid_argument("extend_candidates: group size changed mid-run");
  list.group_size = cfg.group_size;

  int old_rows = list.total_rows();
  int added = cfg.group_size * static_cast<int>(new_class_ids.size());
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(old_rows)));
  Mat<T> grown(old_rows + added, cfg.candidate_dim);
  if (old_rows > 0) {
    const Mat<T>& old_mat = params.at("apg.candidates");
    for (std::size_t i = 0; i < old_mat.v.size(); ++i) grown.v[i] = old_mat.v[i];
  }
  for (std::size_t i = static_cast<std::size_t>(old_rows) * cfg.candidate_dim;
       i < grown.v.size(); ++i)
    grown.v[i] = static_cast<T>(rng.gaussian()) * T(0.02);

  int row = old_rows;
  for (int c : new_class_ids) {
    list.groups[c] = {row, row + cfg.group_size};
    row += cfg.group_size;
  }
  list.task_boundaries.push_back(grown.rows);

  if (params.has("apg.candidates"))
    params.at("apg.candidates") = std::move(grown);
  else
    params.add("apg.candidates", std::move(grown));
}

// Cross-attention scores between an already-projected query z and every
// candidate, one probability row per (head, output token).
template <class T>
struct AttentionRecord {
  int num_heads = 0;
  int num_prompts = 0;
  int num_candidates = 0;
  std::vector<Mat<T>> slices;  // [h * num_prompts + j] -> 1 x num_candidates

  const Mat<T>& slice(int h, int j) const {
    return slices[static_cast<std::size_t>(h) * num_prompts + j];
  }
};

template <class T>
struct ScoreVars {
  int num_heads = 0;
  int num_prompts = 0;
  std::vector<Var<T>> slices;        // same layout as AttentionRecord
  std::vector<Var<T>> logit_slices;  // pre-softmax, for numerically safe logs

  Var<T> slice(int h, int j) const {
    return slices[static_cast<std::size_t>(h) * num_prompts + j];
  }

  Var<T> logit_slice(int h, int j) const {
    return logit_slices[static_cast<std::size_t>(h) * num_prompts + j];
  }

  AttentionRecord<T> record(int num_candidates) const {
    AttentionRecord<T> rec;
    rec.num_heads = num_heads;
    rec.num_prompts = num_prompts;
    rec.num_candidates = num_candidates;
    for (const Var<T>& s : slices) rec.slices.push_back(s.val());
    return rec;
  }
};

template <class T>
ScoreVars<T> attention_scores(Var<T> z, Var<T> candidates, const Bound<T>& b,
                              const APGConfig& cfg) {
  const Mat<T>& cand = candidates.val();
  if (cand.rows == 0)
    throw std::invalid_argument("attention_scores: empty candidate list (APG undefined before first task)");
  if (z.val().rows != 1 || z.val().cols != cfg.candidate_dim)
    throw std::invalid_argument("attention_scores: z must be 1x" +
                                std::to_string(cfg.candidate_dim));
  T scaling = T(1) / static_cast<T>(std::sqrt(static_cast<double>(cfg.head_dim())));
  ScoreVars<T> out;
  out.num_heads = cfg.num_heads;
  out.num_prompts = cfg.num_prompts;
  for (int h = 0; h < cfg.num_heads; ++h) {
    for (int j = 0; j < cfg.num_prompts; ++j) {
      Var<T> q = matmul(z, b[apg_proj_name("q", h, j)]);           // 1 x dk
      Var<T> k = matmul(candidates, b[apg_proj_name("k", h, j)]);  // N x dk
      Var<T> logits = scale(matmul(q, transpose(k)), scaling);
      out.logit_slices.push_back(logits);
      out.slices.push_back(softmax_rows(logits));
    }
  }
  return out;
}

// MMHA: for each output token j, attend to the candidates in every head,
// concatenate the heads, then project the stacked tokens.
template <class T>
Var<T> mmha(Var<T> z, Var<T> candidates, const Bound<T>& b, const APGConfig& cfg,
            ScoreVars<T>* scores_out = nullptr) {
  ScoreVars<T> scores = attention_scores(z, candidates, b, cfg);
  std::vector<Var<T>> outputs;
  outputs.reserve(static_cast<std::size_t>(cfg.num_prompts));
  for (int j = 0; j < cfg.num_prompts; ++j) {
    std::vector<Var<T>> heads;
    heads.reserve(static_cast<std::size_t>(cfg.num_heads));
    for (int h = 0; h < cfg.num_heads; ++h) {
      Var<T> values = matmul(candidates, b[apg_proj_name("v", h, j)]);  // N x dk
      heads.push_back(matmul(scores.slice(h, j), values));              // 1 x dk
    }
    outputs.push_back(concat_cols(heads));  // 1 x d_c
  }
  Var<T> stacked = concat_rows(outputs);  // N_P x d_c
  if (scores_out) *scores_out = std::move(scores);
  return matmul(stacked, b["apg.wo"]);
}

namespace detail {
// 2-layer projection, one nonlinearity, no residual
template <class T>
Var<T> mlp2(Var<T> x, const Bound<T>& b, const std::string& prefix) {
  Var<T> h = relu(add_bias(matmul(x, b[prefix + ".fc1.weight"]), b[prefix + ".fc1.bias"]));
  return add_bias(matmul(h, b[prefix + ".fc2.weight"]), b[prefix + ".fc2.bias"]);
}
}  // namespace detail

template <class T>
struct GeneratedPrompts {
  Var<T> prompts;        // N_P x d
  ScoreVars<T> scores;   // for the attention loss
};

// full APG forward: z = M_in(v_l); P~ = MMHA(z, I_t, I_t); P = M_out(P~)
template <class T>
GeneratedPrompts<T> generate_prompts(Var<T> v_l, Var<T> candidates, const Bound<T>& b,
                                     const APGConfig& cfg) {
  if (v_l.val().rows != 1 || v_l.val().cols != cfg.feature_dim)
    throw std::invalid_argument("generate_prompts: v_l must be 1x" +
                                std::to_string(cfg.feature_dim));
  Var<T> z = detail::mlp2(v_l, b, "apg.m_in");
  ScoreVars<T> scores;
  Var<T> ptilde = mmha(z, candidates, b, cfg, &scores);
  Var<T> prompts = detail::mlp2(ptilde, b, "apg.m_out");
  return GeneratedPrompts<T>{prompts, std::move(scores)};
}

// value-level convenience for callers that only need the prompts
template <class T>
Mat<T> generate_prompts_value(const ParameterSet<T>& params, const APGConfig& cfg,
                              const Mat<T>& v_l) {
  Tape<T> tape;
  Bound<T> b = bind_all(tape, params);
  return generate_prompts(tape.leaf(v_l), b["apg.candidates"], b, cfg).prompts.val();
}

}  // namespace apgcl
