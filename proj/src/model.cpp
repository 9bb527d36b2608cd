#include "maskclip/model.hpp"

namespace maskclip {

void Model::for_each(const std::function<void(const std::string&, const Mat&)>& fn) const {
  encoder.for_each(fn);
  psm.for_each(fn);
}

void Model::for_each(const std::function<void(const std::string&, Mat&)>& fn) {
  encoder.for_each(fn);
  psm.for_each(fn);
}

Model Model::zeros_like() const { return {encoder.zeros_like(), psm.zeros_like()}; }

Model init_model(const EncoderDims& dims, PsmVariant variant, int psm_dim, std::uint64_t seed) {
  return {init_encoder(dims, seed), init_psm(variant, dims.embed_dim, psm_dim)};
}

std::string to_string(PriorType p) {
  switch (p) {
    case PriorType::kMask:
      return "mask";
    case PriorType::kBox:
      return "box";
    case PriorType::kPixel:
      return "pixel";
  }
  return "unknown";
}

PriorType parse_prior(const std::string& name) {
  if (name == "mask") return PriorType::kMask;
  if (name == "box") return PriorType::kBox;
  if (name == "pixel") return PriorType::kPixel;
  throw DataError("unknown prior '" + name + "' (expected mask, box or pixel)");
}

bool prepare_sample(const SegmentationSample& sample, GridShape grid, PriorType prior, const std::vector<int>& label_map,
                    PreparedSample& out) {
  out.id = sample.id;
  out.patches = image_to_patches(sample.image, grid);
  std::vector<Eigen::RowVectorXd> rows;
  out.labels.clear();
  for (std::size_t q = 0; q < sample.masks.size(); ++q) {
    int label = sample.labels[q];
    if (!label_map.empty()) {
      label = label_map.at(static_cast<std::size_t>(label));
      if (label < 0) continue;
    }
    const Mat& region = prior == PriorType::kBox ? box_prior(sample.masks[q]) : sample.masks[q];
    auto pooled = mask_to_token_grid(region, grid);
    if (pooled.empty) continue;
    if (prior == PriorType::kPixel) {
      Eigen::Index best = 0;
      pooled.cells.maxCoeff(&best);
      pooled.cells.setZero();
      pooled.cells(best) = 1.0;
    }
    rows.push_back(pooled.cells);
    out.labels.push_back(label);
  }
  out.masks.values.resize(static_cast<Eigen::Index>(rows.size()), grid.cells());
  for (std::size_t r = 0; r < rows.size(); ++r) out.masks.values.row(static_cast<Eigen::Index>(r)) = rows[r];
  return !rows.empty();
}

std::vector<PreparedSample> prepare_samples(const std::vector<const SegmentationSample*>& samples, GridShape grid,
                                            PriorType prior, const std::vector<int>& label_map) {
  std::vector<PreparedSample> out;
  for (const auto* s : samples) {
    PreparedSample p;
    if (prepare_sample(*s, grid, prior, label_map, p)) out.push_back(std::move(p));
  }
  return out;
}

Mat mask_embeddings(const EncoderParams& encoder, const Mat& patches, const TokenMaskSet& masks) {
  const auto image = forward_image(encoder, patches, ExtractMode::kForFusion);
  return fuse_forward(encoder, image, masks).embeddings;
}

Mat score_masks(const Model& model, const Mat& patches, const TokenMaskSet& masks, const Mat& text, bool use_psm) {
  const Mat em = mask_embeddings(model.encoder, patches, masks);
  return use_psm ? apply_psm(model.psm, em, text) : raw_similarity(em, text);
}

ForwardResult loss_and_gradients(const Model& model, const PreparedSample& sample, const Mat& text, bool use_psm,
                                 double weight, Model& grads, const BackwardOptions& options, Mat* d_patches) {
  const auto image = forward_image(model.encoder, sample.patches, ExtractMode::kForFusion);
  const auto fused = fuse_forward(model.encoder, image, sample.masks);
  ForwardResult out;
  out.refined = use_psm ? apply_psm(model.psm, fused.embeddings, text) : raw_similarity(fused.embeddings, text);
  auto loss = classification_loss(out.refined, sample.labels, model.psm.log_logit_scale(0, 0));
  out.loss = loss.loss;
  const Mat d_refined = loss.d_refined * weight;
  grads.psm.log_logit_scale(0, 0) += loss.d_log_logit_scale * weight;
  const Mat d_em = use_psm ? psm_backward(model.psm, fused.embeddings, text, d_refined, grads.psm) : Mat(d_refined * text);
  EncoderGradients eg{std::move(grads.encoder), Mat()};
  backward(model.encoder, image, fused, d_em, eg, options);
  grads.encoder = std::move(eg.params);
  if (d_patches) *d_patches = std::move(eg.patches);
  return out;
}

double loss_only(const Model& model, const PreparedSample& sample, const Mat& text, bool use_psm) {
  const Mat r = score_masks(model, sample.patches, sample.masks, text, use_psm);
  return classification_loss(r, sample.labels, model.psm.log_logit_scale(0, 0)).loss;
}

}  // namespace maskclip
