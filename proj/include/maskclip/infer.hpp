#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "maskclip/data.hpp"
#include "maskclip/model.hpp"

namespace maskclip {

class InferError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Output of an external mask generator for one image.
struct MaskProposalSet {
  std::vector<Mat> masks;             // Q soft masks, H x W in [0,1]
  Mat gen_scores;                     // Q x K_gen, rows on the simplex
  std::vector<std::string> gen_vocab;
  std::map<std::string, int> in_vocab_map;  // generator name -> evaluation index

  std::size_t count() const { return masks.size(); }
  void validate(std::size_t eval_classes) const;
};

/// Q x K, rows on the simplex (before ensembling).
struct ClassProbabilities {
  Mat values;
};

inline constexpr int kVoidLabel = -1;

struct SemanticPrediction {
  int height = 0;
  int width = 0;
  std::vector<int> labels;  // row-major, kVoidLabel for void
};

ClassProbabilities classify_masks(const Model& model, const Mat& text, const RgbImage& image, const std::vector<Mat>& masks,
                                  GridShape grid, bool use_psm = true);

/// Generator probabilities projected onto the evaluation vocabulary and the
/// set of evaluation classes the generator knows.
struct GeneratorScores {
  Mat probs;                  // Q x K, zero outside the generator vocabulary
  std::vector<bool> in_vocab; // K
};
GeneratorScores generator_scores(const MaskProposalSet& proposals, std::size_t eval_classes);

/// P_s^gamma * P_c^(1-gamma) on generator classes, P_c elsewhere. No renormalization.
ClassProbabilities ensemble(const ClassProbabilities& model_probs, const MaskProposalSet& proposals, double gamma);

/// Pixel score for class k is sum_q mask_q(pixel) * P[q,k]; label is the
/// argmax, void when the best score is below `threshold_void`.
SemanticPrediction assemble_semantic(const std::vector<Mat>& masks, const Mat& probs, double threshold_void = 0.0);

/// Top-1 accuracy over every mask of every sample.
double mask_accuracy(const Model& model, const Mat& text, const std::vector<PreparedSample>& samples, bool use_psm = true);

/// Same, restricted to masks whose label is in `keep` (by label value).
double mask_accuracy_subset(const Model& model, const Mat& text, const std::vector<PreparedSample>& samples,
                            const std::vector<int>& keep, bool use_psm = true);

struct IouReport {
  std::vector<double> per_class;  // NaN for classes absent from both pred and gt
  double mean = 0.0;
};

/// Dataset-level IoU: counts accumulate across images before dividing.
class IouAccumulator {
 public:
  explicit IouAccumulator(std::size_t classes);
  void add(const SemanticPrediction& pred, const std::vector<int>& gt);
  IouReport report() const;

 private:
  std::vector<std::uint64_t> intersection_;
  std::vector<std::uint64_t> union_;
};

/// Per-class IoU of one prediction; gt void pixels are ignored.
IouReport miou(const SemanticPrediction& pred, const std::vector<int>& gt, std::size_t classes);

/// IoU of the >= 0.5 supports.
double iou(const Mat& a, const Mat& b);

/// Maximum-total-score one-to-one assignment of rows to columns
/// (rectangular allowed). result[row] is the column or -1.
std::vector<int> hungarian_maximize(const Mat& score);

struct OracleAssignment {
  std::vector<int> matched_gt;  // per proposal, -1 when unmatched
  Mat iou_matrix;               // Q_prop x Q_gt
  double total_iou = 0.0;
  ClassProbabilities probs;     // one-hot for matched, uniform otherwise
  SemanticPrediction semantic;
};

OracleAssignment oracle_assign(const std::vector<Mat>& proposals, const std::vector<Mat>& gt_masks,
                               const std::vector<int>& gt_labels, std::size_t classes);

// --- proposal files: <dir>/<id>.mcpp (Q x H x W) and <dir>/<id>.json ---

void save_proposals(const std::filesystem::path& dir, const std::string& id, const MaskProposalSet& set);
MaskProposalSet load_proposals(const std::filesystem::path& dir, const std::string& id);

struct ProposalFixtureOptions {
  double label_corruption = 0.0;  // probability a proposal's top generator class is wrong
  int erosion = 0;                // pixels removed from each mask border
  double confidence = 0.9;        // probability mass on the generator's chosen class
  std::vector<std::string> gen_vocab;  // empty: the evaluation vocabulary
};

/// Synthesizes generator output from ground truth (perfect or degraded masks,
/// optionally mislabeled), for oracle analysis and ensemble experiments.
MaskProposalSet proposals_from_ground_truth(const SegmentationSample& sample, const Vocabulary& vocab,
                                            const ProposalFixtureOptions& options, std::mt19937_64& rng);

Mat erode(const Mat& mask, int pixels);

}  // namespace maskclip
