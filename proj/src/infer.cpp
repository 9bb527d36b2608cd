#include "maskclip/infer.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace maskclip {

void MaskProposalSet::validate(std::size_t eval_classes) const {
  if (masks.empty()) throw InferError("proposal set is empty");
  if (gen_scores.rows() != static_cast<Eigen::Index>(masks.size())) throw InferError("gen_scores rows do not match mask count");
  if (gen_scores.cols() != static_cast<Eigen::Index>(gen_vocab.size())) {
    throw InferError("gen_scores columns do not match generator vocabulary size");
  }
  for (Eigen::Index r = 0; r < gen_scores.rows(); ++r) {
    if (std::abs(gen_scores.row(r).sum() - 1.0) > 1e-4 || gen_scores.row(r).minCoeff() < 0.0) {
      throw InferError("gen_scores row " + std::to_string(r) + " is not a probability distribution");
    }
  }
  for (const auto& [name, index] : in_vocab_map) {
    if (std::find(gen_vocab.begin(), gen_vocab.end(), name) == gen_vocab.end()) {
      throw InferError("in_vocab_map references unknown generator category '" + name + "'");
    }
    if (index < 0 || static_cast<std::size_t>(index) >= eval_classes) {
      throw InferError("in_vocab_map maps '" + name + "' to unknown evaluation category " + std::to_string(index));
    }
  }
  for (std::size_t q = 1; q < masks.size(); ++q) {
    if (masks[q].rows() != masks[0].rows() || masks[q].cols() != masks[0].cols()) throw InferError("proposal masks differ in size");
  }
}

ClassProbabilities classify_masks(const Model& model, const Mat& text, const RgbImage& image, const std::vector<Mat>& masks,
                                  GridShape grid, bool use_psm) {
  if (masks.empty()) throw InferError("no masks to classify");
  const Mat patches = image_to_patches(image, grid);
  const TokenMaskSet tokens = token_masks(masks, grid);
  const Mat r = score_masks(model, patches, tokens, text, use_psm);
  return {class_probabilities(r, model.psm.logit_scale())};
}

GeneratorScores generator_scores(const MaskProposalSet& proposals, std::size_t eval_classes) {
  proposals.validate(eval_classes);
  GeneratorScores out;
  out.probs = Mat::Zero(static_cast<Eigen::Index>(proposals.count()), static_cast<Eigen::Index>(eval_classes));
  out.in_vocab.assign(eval_classes, false);
  for (std::size_t g = 0; g < proposals.gen_vocab.size(); ++g) {
    auto it = proposals.in_vocab_map.find(proposals.gen_vocab[g]);
    if (it == proposals.in_vocab_map.end()) continue;
    out.in_vocab[static_cast<std::size_t>(it->second)] = true;
    out.probs.col(it->second) += proposals.gen_scores.col(static_cast<Eigen::Index>(g));
  }
  return out;
}

ClassProbabilities ensemble(const ClassProbabilities& model_probs, const MaskProposalSet& proposals, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw InferError("gamma must lie in [0, 1]");
  const auto k = static_cast<std::size_t>(model_probs.values.cols());
  const auto gen = generator_scores(proposals, k);
  if (gen.probs.rows() != model_probs.values.rows()) throw InferError("model and generator disagree on proposal count");
  ClassProbabilities out = model_probs;
  for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(k); ++c) {
    if (!gen.in_vocab[static_cast<std::size_t>(c)]) continue;
    for (Eigen::Index q = 0; q < out.values.rows(); ++q) {
      // std::pow(x, 0) == 1 even for x == 0, so the endpoints are exact.
      out.values(q, c) = std::pow(gen.probs(q, c), gamma) * std::pow(model_probs.values(q, c), 1.0 - gamma);
    }
  }
  return out;
}

SemanticPrediction assemble_semantic(const std::vector<Mat>& masks, const Mat& probs, double threshold_void) {
  if (masks.empty()) throw InferError("no masks to assemble");
  if (probs.rows() != static_cast<Eigen::Index>(masks.size())) throw InferError("probability rows do not match mask count");
  SemanticPrediction out;
  out.height = static_cast<int>(masks[0].rows());
  out.width = static_cast<int>(masks[0].cols());
  const Eigen::Index pixels = masks[0].size();
  // pixel x class scores
  Mat stacked(static_cast<Eigen::Index>(masks.size()), pixels);
  for (std::size_t q = 0; q < masks.size(); ++q) {
    if (masks[q].rows() != out.height || masks[q].cols() != out.width) throw InferError("masks differ in size");
    stacked.row(static_cast<Eigen::Index>(q)) = Eigen::Map<const Eigen::RowVectorXd>(masks[q].data(), pixels);
  }
  const Mat scores = stacked.transpose() * probs;
  out.labels.resize(static_cast<std::size_t>(pixels));
  for (Eigen::Index i = 0; i < pixels; ++i) {
    Eigen::Index best = 0;
    const double top = scores.row(i).maxCoeff(&best);
    out.labels[static_cast<std::size_t>(i)] = top < threshold_void ? kVoidLabel : static_cast<int>(best);
  }
  return out;
}

double mask_accuracy_subset(const Model& model, const Mat& text, const std::vector<PreparedSample>& samples,
                            const std::vector<int>& keep, bool use_psm) {
  std::size_t total = 0;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    std::vector<Eigen::Index> rows;
    for (std::size_t q = 0; q < s.labels.size(); ++q) {
      if (keep.empty() || std::find(keep.begin(), keep.end(), s.labels[q]) != keep.end()) {
        rows.push_back(static_cast<Eigen::Index>(q));
      }
    }
    if (rows.empty()) continue;
    TokenMaskSet subset;
    subset.values.resize(static_cast<Eigen::Index>(rows.size()), s.masks.values.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) subset.values.row(static_cast<Eigen::Index>(i)) = s.masks.values.row(rows[i]);
    const Mat r = score_masks(model, s.patches, subset, text, use_psm);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      Eigen::Index best = 0;
      r.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
      correct += best == s.labels[static_cast<std::size_t>(rows[i])];
      ++total;
    }
  }
  if (total == 0) throw InferError("mask accuracy over an empty mask set");
  return static_cast<double>(correct) / static_cast<double>(total);
}

double mask_accuracy(const Model& model, const Mat& text, const std::vector<PreparedSample>& samples, bool use_psm) {
  return mask_accuracy_subset(model, text, samples, {}, use_psm);
}

IouAccumulator::IouAccumulator(std::size_t classes) : intersection_(classes, 0), union_(classes, 0) {}

void IouAccumulator::add(const SemanticPrediction& pred, const std::vector<int>& gt) {
  if (pred.labels.size() != gt.size()) throw InferError("prediction and ground truth differ in size");
  const auto k = intersection_.size();
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == kVoidLabel) continue;
    const int p = pred.labels[i];
    const auto g = static_cast<std::size_t>(gt[i]);
    if (g >= k) throw InferError("ground-truth label out of range");
    if (p == gt[i]) {
      ++intersection_[g];
      ++union_[g];
    } else {
      ++union_[g];
      if (p != kVoidLabel) {
        if (static_cast<std::size_t>(p) >= k) throw InferError("predicted label out of range");
        ++union_[static_cast<std::size_t>(p)];
      }
    }
  }
}

IouReport IouAccumulator::report() const {
  IouReport r;
  double sum = 0.0;
  int counted = 0;
  for (std::size_t c = 0; c < union_.size(); ++c) {
    if (union_[c] == 0) {
      r.per_class.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double v = static_cast<double>(intersection_[c]) / static_cast<double>(union_[c]);
    r.per_class.push_back(v);
    sum += v;
    ++counted;
  }
  r.mean = counted ? sum / counted : std::numeric_limits<double>::quiet_NaN();
  return r;
}

IouReport miou(const SemanticPrediction& pred, const std::vector<int>& gt, std::size_t classes) {
  IouAccumulator acc(classes);
  acc.add(pred, gt);
  return acc.report();
}

double iou(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw InferError("iou of masks with different sizes");
  const auto sa = (a.array() >= 0.5);
  const auto sb = (b.array() >= 0.5);
  const double inter = (sa && sb).count();
  const double uni = (sa || sb).count();
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<int> hungarian_maximize(const Mat& score) {
  const auto rows = static_cast<int>(score.rows());
  const auto cols = static_cast<int>(score.cols());
  if (rows == 0 || cols == 0) return std::vector<int>(static_cast<std::size_t>(rows), -1);
  if (rows > cols) {
    const auto by_col = hungarian_maximize(score.transpose());
    std::vector<int> out(static_cast<std::size_t>(rows), -1);
    for (int c = 0; c < cols; ++c) {
      if (by_col[static_cast<std::size_t>(c)] >= 0) out[static_cast<std::size_t>(by_col[static_cast<std::size_t>(c)])] = c;
    }
    return out;
  }
  // Shortest augmenting path with potentials, minimizing -score; 1-based.
  const double inf = std::numeric_limits<double>::infinity();
  const int n = rows;
  const int m = cols;
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(m) + 1, 0.0);
  std::vector<int> match(static_cast<std::size_t>(m) + 1, 0), way(static_cast<std::size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = match[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = -score(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j) {
    if (match[static_cast<std::size_t>(j)] > 0) out[static_cast<std::size_t>(match[static_cast<std::size_t>(j)] - 1)] = j - 1;
  }
  return out;
}

OracleAssignment oracle_assign(const std::vector<Mat>& proposals, const std::vector<Mat>& gt_masks,
                               const std::vector<int>& gt_labels, std::size_t classes) {
  if (proposals.empty()) throw InferError("oracle assignment needs at least one proposal");
  if (gt_masks.size() != gt_labels.size()) throw InferError("ground-truth masks and labels differ in count");
  OracleAssignment out;
  const auto q = static_cast<Eigen::Index>(proposals.size());
  out.iou_matrix = Mat::Zero(q, static_cast<Eigen::Index>(gt_masks.size()));
  for (Eigen::Index i = 0; i < q; ++i) {
    for (std::size_t j = 0; j < gt_masks.size(); ++j) {
      out.iou_matrix(i, static_cast<Eigen::Index>(j)) = iou(proposals[static_cast<std::size_t>(i)], gt_masks[j]);
    }
  }
  out.matched_gt = hungarian_maximize(out.iou_matrix);
  out.probs.values = Mat::Constant(q, static_cast<Eigen::Index>(classes), 1.0 / static_cast<double>(classes));
  for (Eigen::Index i = 0; i < q; ++i) {
    int& j = out.matched_gt[static_cast<std::size_t>(i)];
    // zero-overlap pairs carry no evidence
    if (j >= 0 && out.iou_matrix(i, j) <= 0.0) j = -1;
    if (j < 0) continue;
    out.total_iou += out.iou_matrix(i, j);
    out.probs.values.row(i).setZero();
    out.probs.values(i, gt_labels[static_cast<std::size_t>(j)]) = 1.0;
  }
  out.semantic = assemble_semantic(proposals, out.probs.values);
  return out;
}

Mat erode(const Mat& mask, int pixels) {
  Mat cur = mask;
  for (int it = 0; it < pixels; ++it) {
    Mat next = cur;
    for (Eigen::Index y = 0; y < cur.rows(); ++y) {
      for (Eigen::Index x = 0; x < cur.cols(); ++x) {
        if (cur(y, x) < 0.5) continue;
        const bool edge = y == 0 || x == 0 || y + 1 == cur.rows() || x + 1 == cur.cols() || cur(y - 1, x) < 0.5 ||
                          cur(y + 1, x) < 0.5 || cur(y, x - 1) < 0.5 || cur(y, x + 1) < 0.5;
        if (edge) next(y, x) = 0.0;
      }
    }
    cur = std::move(next);
  }
  return cur;
}

}  // namespace maskclip
