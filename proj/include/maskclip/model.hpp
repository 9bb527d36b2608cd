#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maskclip/data.hpp"
#include "maskclip/encoder.hpp"
#include "maskclip/psm.hpp"

namespace maskclip {

/// Encoder plus similarity head: everything a checkpoint restores.
struct Model {
  EncoderParams encoder;
  PsmParams psm;

  void for_each(const std::function<void(const std::string&, Mat&)>& fn);
  void for_each(const std::function<void(const std::string&, const Mat&)>& fn) const;
  Model zeros_like() const;
};

Model init_model(const EncoderDims& dims, PsmVariant variant, int psm_dim, std::uint64_t seed);

/// Which region description is fed to the Fuser during training.
enum class PriorType { kMask, kBox, kPixel };

std::string to_string(PriorType p);
PriorType parse_prior(const std::string& name);

/// Sample converted to encoder inputs: patches, pooled masks, labels.
struct PreparedSample {
  std::string id;
  Mat patches;
  TokenMaskSet masks;
  std::vector<int> labels;
};

/// Builds encoder inputs. `label_map` (if non-empty) maps dataset labels to
/// training labels, -1 dropping the instance. Returns false when no
/// instance survives.
bool prepare_sample(const SegmentationSample& sample, GridShape grid, PriorType prior, const std::vector<int>& label_map,
                    PreparedSample& out);

std::vector<PreparedSample> prepare_samples(const std::vector<const SegmentationSample*>& samples, GridShape grid,
                                            PriorType prior = PriorType::kMask, const std::vector<int>& label_map = {});

/// Mask embeddings for one image.
Mat mask_embeddings(const EncoderParams& encoder, const Mat& patches, const TokenMaskSet& masks);

/// Refined (use_psm) or raw similarities, Q x K.
Mat score_masks(const Model& model, const Mat& patches, const TokenMaskSet& masks, const Mat& text, bool use_psm = true);

struct ForwardResult {
  double loss = 0.0;
  Mat refined;
};

/// Loss and gradients for one image; gradients are accumulated with the
/// given weight (use Q_i / Q_batch to average over a batch of masks).
ForwardResult loss_and_gradients(const Model& model, const PreparedSample& sample, const Mat& text, bool use_psm,
                                 double weight, Model& grads, const BackwardOptions& options = {},
                                 Mat* d_patches = nullptr);

double loss_only(const Model& model, const PreparedSample& sample, const Mat& text, bool use_psm);

}  // namespace maskclip
