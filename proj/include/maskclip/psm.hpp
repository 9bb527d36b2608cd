#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "maskclip/tensor_file.hpp"

namespace maskclip {

class PsmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PsmVariant {
  kEmbedLeft,   // <normalize(Theta m), t>
  kEmbedRight,  // <m, normalize(Theta t)>
  kSimAffine,   // scalar -> P -> scalar linear maps on each similarity
};

std::string to_string(PsmVariant v);
PsmVariant parse_psm_variant(const std::string& name);

inline constexpr int kDefaultPsmDim = 768;

struct PsmParams {
  PsmVariant variant = PsmVariant::kSimAffine;
  Mat theta;  // D x D, embed variants only
  Mat w1, b1, w2;  // 1 x P, affine variant only
  Mat b2;          // 1 x 1
  Mat log_logit_scale = Mat::Constant(1, 1, std::log(100.0));

  double logit_scale() const { return std::exp(log_logit_scale(0, 0)); }
  void for_each(const std::function<void(const std::string&, Mat&)>& fn);
  void for_each(const std::function<void(const std::string&, const Mat&)>& fn) const;
  PsmParams zeros_like() const;
  /// Throws unless exactly the variant's own tensors are populated.
  void validate() const;
};

/// Theta = I for the embed variants; w1 = w2 = 1/sqrt(P), b = 0 for the
/// affine variant, so every variant starts as the identity on S.
PsmParams init_psm(PsmVariant variant, int embed_dim, int psm_dim = kDefaultPsmDim);

/// S = E_m E_t^T over unit rows.
Mat raw_similarity(const Mat& mask_embeddings, const Mat& text_embeddings);

/// Refined similarity R (Q x K).
Mat apply_psm(const PsmParams& params, const Mat& mask_embeddings, const Mat& text_embeddings);

/// Slope a = w2.w1 and offset c = w2.b1 + b2 of the affine head.
std::pair<double, double> effective_affine(const PsmParams& params);

struct LossResult {
  double loss = 0.0;
  Mat d_refined;  // dL/dR
  double d_log_logit_scale = 0.0;
};

/// Mean cross-entropy of softmax(exp(log_logit_scale) * R) against labels.
LossResult classification_loss(const Mat& refined, const std::vector<int>& labels, double log_logit_scale);

/// Accumulates dL/d(psm params) into `grads` and returns dL/d(E_m) given dL/dR.
Mat psm_backward(const PsmParams& params, const Mat& mask_embeddings, const Mat& text_embeddings, const Mat& d_refined,
                 PsmParams& grads);

/// Row-wise softmax of scale * R.
Mat class_probabilities(const Mat& refined, double logit_scale);

// --- two-mask toy example of (in)consistent alignment ---

struct InconsistencyConfig {
  Vec text;    // t, unit
  Vec mask1;   // m1
  Vec mask2;   // m2
  Mat theta;   // D x D
  double target1 = 1.0;
  double target2 = 0.0;
  double learning_rate = 0.1;
};

struct SimilaritySnapshot {
  double s1 = 0, s2 = 0, r1 = 0, r2 = 0;
  bool s_rank_correct = false;
  bool r_rank_correct = false;
  /// (x1 - x2) * sign(target1 - target2): positive when the order agrees.
  double s_margin = 0;
  double r_margin = 0;
};

struct InconsistencyReport {
  SimilaritySnapshot before;
  SimilaritySnapshot after;
};

/// D = 2, t = (1,0), Theta = 2 * rotation(120 deg); r's order is repaired by
/// one L1 step on the mask embeddings while s's order breaks.
InconsistencyConfig canonical_inconsistency_config();

/// One gradient-descent step on m1, m2 minimizing |r1 - target1| + |r2 - target2|.
InconsistencyReport demo_inconsistency(const InconsistencyConfig& config);

}  // namespace maskclip
