#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "apgcl/apg.hpp"
#include "apgcl/tape.hpp"

namespace apgcl {

// The five objective terms plus their unweighted sum, as plain values for
// logging. Terms disabled by an ablation (or vacuous during task 1) are 0.
template <class T>
struct LossBreakdown {
  T cls = T(0);
  T attn = T(0);
  T tri = T(0);
  T conA = T(0);
  T conC = T(0);
  T total = T(0);
};

// Which terms participate in the objective. The classification term is
// always on; the named ablation configs toggle the other four.
struct LossFlags {
  bool conC = true;
  bool conA = true;
  bool attn = true;
  bool tri = true;
};

// -log probs[y]
template <class T>
Var<T> classification_loss(Var<T> probs, int y) {
  const Mat<T>& pv = probs.val();
  if (pv.rows != 1) throw std::invalid_argument("classification_loss: probs must be a row");
  if (y < 0 || y >= pv.cols)
    throw std::out_of_range("classification_loss: class " + std::to_string(y) +
                            " out of range [0," + std::to_string(pv.cols) + ")");
  return scale(log_each(pick(probs, 0, y)), T(-1));
}

// same loss computed from logits via fused log-softmax; equal in exact
// arithmetic but finite even where softmax underflows to 0
template <class T>
Var<T> classification_loss_logits(Var<T> logits, int y) {
  const Mat<T>& lv = logits.val();
  if (lv.rows != 1)
    throw std::invalid_argument("classification_loss_logits: logits must be a row");
  if (y < 0 || y >= lv.cols)
    throw std::out_of_range("classification_loss_logits: class " + std::to_string(y) +
                            " out of range [0," + std::to_string(lv.cols) + ")");
  return scale(pick(log_softmax_rows(logits), 0, y), T(-1));
}

// -sum_{j} sum_{h} sum_{c in group(y)} log A[h,j,c]
template <class T>
Var<T> attention_loss(const ScoreVars<T>& scores, int y, const CandidateList& list) {
  auto [c0, c1] = list.group_of(y);  // throws when y unseen
  Tape<T>& tape = *scores.slices.front().tape;
  Var<T> total = tape.leaf(Mat<T>(1, 1));
  bool from_logits = scores.logit_slices.size() == scores.slices.size();
  for (int h = 0; h < scores.num_heads; ++h) {
    for (int j = 0; j < scores.num_prompts; ++j) {
      // log through the fused path when the logits are available, so a
      // saturated softmax cannot produce log(0)
      Var<T> logs = from_logits ? log_softmax_rows(scores.logit_slice(h, j))
                                : log_each(scores.slice(h, j));
      for (int c = c0; c < c1; ++c) total = sub(total, pick(logs, 0, c));
    }
  }
  return total;
}

// one triplet: [d(P1,P2) - d(P1,P3) + alpha]_+ with cosine distance on
// flattened prompt matrices
template <class T>
Var<T> triplet_loss(Var<T> anchor, Var<T> positive, Var<T> negative, T alpha) {
  if (alpha < T(0)) throw std::invalid_argument("triplet_loss: margin must be >= 0");
  Tape<T>& tape = *anchor.tape;
  Var<T> dp = cosine_distance(anchor, positive);
  Var<T> dn = cosine_distance(anchor, negative);
  Var<T> margin = tape.leaf(Mat<T>(1, 1, {alpha}));
  return relu(add(sub(dp, dn), margin));
}

// mean absolute elementwise difference against a frozen centroid
template <class T>
Var<T> apg_consistency_loss(Var<T> generated, const Mat<T>& centroid) {
  Tape<T>& tape = *generated.tape;
  if (!generated.val().same_shape(centroid))
    throw std::invalid_argument("apg_consistency_loss: shape mismatch: " +
                                shape_str(generated.val()) + " vs " + shape_str(centroid));
  return mean_all(abs_each(sub(generated, tape.leaf(centroid))));
}

// -log probs[c] on a sampled knowledge vector; same form as the
// classification term but evaluated on synthetic old-class features
template <class T>
Var<T> classifier_consistency_loss(Var<T> probs, int old_class_index) {
  return classification_loss(probs, old_class_index);
}

// value-level wrappers for callers that only need numbers

template <class T>
T classification_loss_value(const std::vector<T>& probs, int y) {
  Tape<T> tape;
  Var<T> p = tape.leaf(Mat<T>::row(probs));
  return classification_loss(p, y).scalar();
}

template <class T>
T triplet_loss_value(const Mat<T>& a, const Mat<T>& p, const Mat<T>& n, T alpha) {
  Tape<T> tape;
  return triplet_loss(tape.leaf(a), tape.leaf(p), tape.leaf(n), alpha).scalar();
}

template <class T>
T apg_consistency_loss_value(const Mat<T>& generated, const Mat<T>& centroid) {
  Tape<T> tape;
  return apg_consistency_loss(tape.leaf(generated), centroid).scalar();
}

template <class T>
LossBreakdown<T> total_loss(T cls, T attn, T tri, T conA, T conC) {
  LossBreakdown<T> out;
  out.cls = cls;
  out.attn = attn;
  out.tri = tri;
  out.conA = conA;
  out.conC = conC;
  out.total = cls + attn + tri + conA + conC;
  for (T x : {out.cls, out.attn, out.tri, out.conA, out.conC, out.total})
    if (!std::isfinite(static_cast<double>(x)))
      throw std::runtime_error("total_loss: non-finite term");
  return out;
}

}  // namespace apgcl
