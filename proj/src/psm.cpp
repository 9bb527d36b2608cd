#include "maskclip/psm.hpp"

#include <cmath>
#include <numbers>

namespace maskclip {
namespace {

bool populated(const Mat& m) { return m.size() > 0; }

Mat normalize_rows(const Mat& m, Eigen::VectorXd& norms) {
  norms = m.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    if (!(norms(r) > 0.0)) throw PsmError("transformed embedding row " + std::to_string(r) + " has zero norm");
  }
  return m.array().colwise() / norms.array();
}

// dL/dU for U_hat = U / |U| row-wise.
Mat normalize_backward(const Mat& unit, const Eigen::VectorXd& norms, const Mat& d_unit) {
  Eigen::VectorXd dots = (unit.array() * d_unit.array()).rowwise().sum();
  return (d_unit - (unit.array().colwise() * dots.array()).matrix()).array().colwise() / norms.array();
}

int sign(double x) { return (x > 0) - (x < 0); }

SimilaritySnapshot snapshot(const InconsistencyConfig& c, const Vec& m1, const Vec& m2) {
  SimilaritySnapshot s;
  s.s1 = m1.dot(c.text);
  s.s2 = m2.dot(c.text);
  s.r1 = (c.theta * m1).dot(c.text);
  s.r2 = (c.theta * m2).dot(c.text);
  const int want = sign(c.target1 - c.target2);
  s.s_margin = (s.s1 - s.s2) * want;
  s.r_margin = (s.r1 - s.r2) * want;
  s.s_rank_correct = want != 0 && sign(s.s1 - s.s2) == want;
  s.r_rank_correct = want != 0 && sign(s.r1 - s.r2) == want;
  return s;
}

}  // namespace

std::string to_string(PsmVariant v) {
  switch (v) {
    case PsmVariant::kEmbedLeft:
      return "embed_left";
    case PsmVariant::kEmbedRight:
      return "embed_right";
    case PsmVariant::kSimAffine:
      return "sim_affine";
  }
  return "unknown";
}

PsmVariant parse_psm_variant(const std::string& name) {
  if (name == "embed_left") return PsmVariant::kEmbedLeft;
  if (name == "embed_right") return PsmVariant::kEmbedRight;
  if (name == "sim_affine") return PsmVariant::kSimAffine;
  throw PsmError("unknown PSM variant '" + name + "' (expected sim_affine, embed_left or embed_right)");
}

void PsmParams::for_each(const std::function<void(const std::string&, const Mat&)>& fn) const {
  if (variant == PsmVariant::kSimAffine) {
    fn("psm.w1", w1);
    fn("psm.b1", b1);
    fn("psm.w2", w2);
    fn("psm.b2", b2);
  } else {
    fn("psm.theta", theta);
  }
  fn("psm.log_logit_scale", log_logit_scale);
}

void PsmParams::for_each(const std::function<void(const std::string&, Mat&)>& fn) {
  std::as_const(*this).for_each([&](const std::string& name, const Mat& m) { fn(name, const_cast<Mat&>(m)); });
}

PsmParams PsmParams::zeros_like() const {
  PsmParams z = *this;
  z.for_each([](const std::string&, Mat& m) { m.setZero(); });
  return z;
}

void PsmParams::validate() const {
  if (variant == PsmVariant::kSimAffine) {
    if (!populated(w1) || !populated(b1) || !populated(w2) || !populated(b2) || populated(theta)) {
      throw PsmError("sim_affine head needs w1, b1, w2, b2 and no theta");
    }
    if (w1.size() != b1.size() || w1.size() != w2.size() || b2.size() != 1) throw PsmError("sim_affine shapes disagree");
  } else {
    if (!populated(theta) || populated(w1) || populated(w2) || populated(b1) || populated(b2)) {
      throw PsmError(to_string(variant) + " head needs theta only");
    }
    if (theta.rows() != theta.cols()) throw PsmError("theta must be square");
  }
  if (log_logit_scale.size() != 1) throw PsmError("missing logit scale");
}

PsmParams init_psm(PsmVariant variant, int embed_dim, int psm_dim) {
  if (psm_dim < 1) throw PsmError("PSM dimension must be >= 1");
  PsmParams p;
  p.variant = variant;
  if (variant == PsmVariant::kSimAffine) {
    const double v = 1.0 / std::sqrt(static_cast<double>(psm_dim));
    p.w1 = Mat::Constant(1, psm_dim, v);
    p.w2 = Mat::Constant(1, psm_dim, v);
    p.b1 = Mat::Zero(1, psm_dim);
    p.b2 = Mat::Zero(1, 1);
  } else {
    p.theta = Mat::Identity(embed_dim, embed_dim);
  }
  return p;
}

Mat raw_similarity(const Mat& mask_embeddings, const Mat& text_embeddings) {
  if (mask_embeddings.cols() != text_embeddings.cols()) {
    throw PsmError("embedding dimensions differ: " + std::to_string(mask_embeddings.cols()) + " vs " +
                   std::to_string(text_embeddings.cols()));
  }
  return mask_embeddings * text_embeddings.transpose();
}

Mat apply_psm(const PsmParams& params, const Mat& mask_embeddings, const Mat& text_embeddings) {
  params.validate();
  Eigen::VectorXd norms;
  switch (params.variant) {
    case PsmVariant::kEmbedLeft:
      return raw_similarity(normalize_rows(mask_embeddings * params.theta.transpose(), norms), text_embeddings);
    case PsmVariant::kEmbedRight:
      return raw_similarity(mask_embeddings, normalize_rows(text_embeddings * params.theta.transpose(), norms));
    case PsmVariant::kSimAffine: {
      const Mat s = raw_similarity(mask_embeddings, text_embeddings);
      // Lift every similarity onto the P-dimensional axis and project back.
      Eigen::Map<const Eigen::VectorXd> flat(s.data(), s.size());
      Mat lifted = flat * params.w1;
      lifted.rowwise() += params.b1.row(0);
      Eigen::VectorXd back = lifted * params.w2.transpose();
      back.array() += params.b2(0, 0);
      Mat r(s.rows(), s.cols());
      Eigen::Map<Eigen::VectorXd>(r.data(), r.size()) = back;
      return r;
    }
  }
  throw PsmError("unpopulated PSM variant");
}

std::pair<double, double> effective_affine(const PsmParams& params) {
  if (params.variant != PsmVariant::kSimAffine) throw PsmError("effective_affine needs the sim_affine head");
  params.validate();
  const double a = params.w2.row(0).dot(params.w1.row(0));
  const double c = params.w2.row(0).dot(params.b1.row(0)) + params.b2(0, 0);
  return {a, c};
}

Mat class_probabilities(const Mat& refined, double logit_scale) {
  Mat p = refined * logit_scale;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    auto row = p.row(r);
    row = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  return p;
}

LossResult classification_loss(const Mat& refined, const std::vector<int>& labels, double log_logit_scale) {
  if (refined.rows() == 0) throw PsmError("classification loss over an empty mask set");
  if (static_cast<Eigen::Index>(labels.size()) != refined.rows()) throw PsmError("label count does not match mask count");
  const double scale = std::exp(log_logit_scale);
  const Mat probs = class_probabilities(refined, scale);
  LossResult out;
  out.d_refined = probs;
  const auto q = static_cast<double>(refined.rows());
  for (Eigen::Index r = 0; r < refined.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= refined.cols()) throw PsmError("label " + std::to_string(y) + " out of range");
    // log-sum-exp form keeps saturated rows finite
    const Eigen::RowVectorXd z = refined.row(r) * scale;
    const double mx = z.maxCoeff();
    out.loss += (std::log((z.array() - mx).exp().sum()) + mx - z(y)) / q;
    out.d_refined(r, y) -= 1.0;
  }
  // d_refined currently holds (p - onehot); dL/dz = that / Q, z = scale * R.
  out.d_log_logit_scale = (out.d_refined.array() * refined.array()).sum() * scale / q;
  out.d_refined *= scale / q;
  return out;
}

Mat psm_backward(const PsmParams& params, const Mat& mask_embeddings, const Mat& text_embeddings, const Mat& d_refined,
                 PsmParams& grads) {
  params.validate();
  switch (params.variant) {
    case PsmVariant::kEmbedLeft: {
      Eigen::VectorXd norms;
      const Mat u = mask_embeddings * params.theta.transpose();
      const Mat unit = normalize_rows(u, norms);
      const Mat d_u = normalize_backward(unit, norms, d_refined * text_embeddings);
      grads.theta.noalias() += d_u.transpose() * mask_embeddings;
      return d_u * params.theta;
    }
    case PsmVariant::kEmbedRight: {
      Eigen::VectorXd norms;
      const Mat v = text_embeddings * params.theta.transpose();
      const Mat unit = normalize_rows(v, norms);
      const Mat d_v = normalize_backward(unit, norms, d_refined.transpose() * mask_embeddings);
      grads.theta.noalias() += d_v.transpose() * text_embeddings;
      return d_refined * unit;
    }
    case PsmVariant::kSimAffine: {
      const Mat s = raw_similarity(mask_embeddings, text_embeddings);
      const double sum_d = d_refined.sum();
      const double sum_ds = (d_refined.array() * s.array()).sum();
      grads.w1 += params.w2 * sum_ds;
      grads.w2 += params.w1 * sum_ds + params.b1 * sum_d;
      grads.b1 += params.w2 * sum_d;
      grads.b2(0, 0) += sum_d;
      const double slope = params.w2.row(0).dot(params.w1.row(0));
      return (d_refined * slope) * text_embeddings;
    }
  }
  throw PsmError("unpopulated PSM variant");
}

InconsistencyConfig canonical_inconsistency_config() {
  InconsistencyConfig c;
  c.text = Vec(2);
  c.text << 1.0, 0.0;
  const double angle = 2.0 * std::numbers::pi / 3.0;
  c.theta = Mat(2, 2);
  c.theta << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
  c.theta *= 2.0;
  c.mask1 = Vec(2);
  c.mask1 << 0.6, -0.5;
  c.mask2 = Vec(2);
  c.mask2 << 0.5, -0.5;
  c.target1 = 1.0;
  c.target2 = 0.0;
  c.learning_rate = 0.1;
  return c;
}

InconsistencyReport demo_inconsistency(const InconsistencyConfig& config) {
  const auto dim = config.text.size();
  if (config.mask1.size() != dim || config.mask2.size() != dim || config.theta.rows() != dim || config.theta.cols() != dim) {
    throw PsmError("inconsistency config dimensions disagree");
  }
  // dr/dm = Theta^T t for every mask.
  const Vec direction = config.theta.transpose() * config.text;
  if (direction.squaredNorm() == 0.0) throw PsmError("Theta^T t is zero; the L1 gradient vanishes");
  InconsistencyReport report;
  report.before = snapshot(config, config.mask1, config.mask2);
  const Vec m1 = config.mask1 - config.learning_rate * sign(report.before.r1 - config.target1) * direction;
  const Vec m2 = config.mask2 - config.learning_rate * sign(report.before.r2 - config.target2) * direction;
  report.after = snapshot(config, m1, m2);
  return report;
}

}  // namespace maskclip
