#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskclip/data.hpp"
#include "maskclip/tensor_file.hpp"

namespace maskclip {

class EncoderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Finite stand-in for -inf in the thresholded mask bias.
inline constexpr double kMaskNegative = 1e4;

struct EncoderDims {
  int layers = 4;            // L
  int extractor_layers = 2;  // K; the Fuser is layers K+1..L
  int width = 64;            // C
  int embed_dim = 32;        // D
  int heads = 4;
  GridShape grid{16, 16};
  int patch_dim = 48;  // 3 * p * p

  int tokens() const { return grid.cells(); }
  int head_dim() const { return width / heads; }
  int fuser_layers() const { return layers - extractor_layers; }
  void validate() const;
};

struct LayerParams {
  Mat ln1_g, ln1_b;
  Mat wq, bq, wk, bk, wv, bv, wo, bo;
  Mat ln2_g, ln2_b;
  Mat w_fc, b_fc, w_out, b_out;
};

/// All encoder weights. Linear maps use the row-vector convention y = x W + b.
struct EncoderParams {
  EncoderDims dims;
  Mat patch_embed;  // patch_dim x C
  Mat pos_embed;    // (N+1) x C, row 0 belongs to CLS
  Mat cls_token;    // 1 x C
  std::vector<LayerParams> layers;
  Mat lnf_g, lnf_b;
  Mat out_proj;   // C x D
  Mat log_alpha;  // 1 x 1

  double alpha() const { return std::exp(log_alpha(0, 0)); }

  void for_each(const std::function<void(const std::string&, Mat&)>& fn);
  void for_each(const std::function<void(const std::string&, const Mat&)>& fn) const;
  Mat* find(const std::string& name);
  std::size_t parameter_count() const;
  /// Same shapes, all entries zero. Used as the gradient container.
  EncoderParams zeros_like() const;
};

EncoderParams init_encoder(const EncoderDims& dims, std::uint64_t seed);

/// Image-token snapshots. states[i] is the input to layer K+1+i for
/// i < L-K; states.back() is the output of layer L. Row 0 is CLS.
struct TokenStates {
  std::vector<Mat> states;

  const Mat& extractor_output() const { return states.front(); }
  const Mat& final_output() const { return states.back(); }
};

/// Unit-norm region embeddings, Q x D.
struct MaskEmbeddings {
  Mat values;
};

/// Bias added to mask-token attention logits over the N patch tokens.
Eigen::RowVectorXd mask_bias(const Eigen::RowVectorXd& mask_row, double alpha);

/// d(bias)/d(alpha) for the same row: M on the kept support, -kMaskNegative elsewhere.
Eigen::RowVectorXd mask_bias_slope(const Eigen::RowVectorXd& mask_row);

// --- forward with retained activations (training / gradient checks) ---

struct LayerTape {
  Mat x_in;
  Mat xhat1;
  Eigen::VectorXd rstd1;
  Mat h1, q, k, v;
  std::vector<Mat> attn;  // per head, T x T
  Mat o, y;
  Mat xhat2;
  Eigen::VectorXd rstd2;
  Mat h2, pre, act;
  bool kv_only = false;  // final layer when only keys/values are needed
};

struct ImageTape {
  Mat patches;
  std::vector<LayerTape> layers;
  Mat final_output;  // empty when the last layer ran kv_only
};

enum class ExtractMode {
  kFull,       // run every layer to completion
  kForFusion,  // last layer stops after keys/values, enough for fuse()
};

ImageTape forward_image(const EncoderParams& params, const Mat& patches, ExtractMode mode = ExtractMode::kFull);

/// Extractor + Fuser image stream. Mask tokens never enter this path.
TokenStates extract(const EncoderParams& params, const Mat& patches);
TokenStates states_from_tape(const ImageTape& tape, int extractor_layers);

struct FuseLayerTape {
  Mat e_in;
  Mat xhat1;
  Eigen::VectorXd rstd1;
  Mat h1, q;
  std::vector<Mat> phi;  // per head, Q x N
  Mat o, y;
  Mat xhat2;
  Eigen::VectorXd rstd2;
  Mat h2, pre, act;
};

struct FuseTape {
  Mat masks;      // Q x N
  Mat bias;       // Q x N
  Mat bias_slope; // Q x N
  std::vector<FuseLayerTape> layers;
  Mat e_final;    // after layer L, Q x C
  Mat xhatf;
  Eigen::VectorXd rstdf;
  Mat projected;  // Q x D before normalization
  Eigen::VectorXd norms;
  Mat embeddings;  // Q x D, unit rows
};

/// Mask-conditioned fusion from cached image activations.
FuseTape fuse_forward(const EncoderParams& params, const ImageTape& image, const TokenMaskSet& masks);

/// Mask-conditioned fusion from recorded token states.
MaskEmbeddings fuse(const EncoderParams& params, const TokenStates& states, const TokenMaskSet& masks);

/// Per-head fusion weights of Fuser layer `fuser_index` for the given masks.
std::vector<Mat> fusion_weights(const EncoderParams& params, const TokenStates& states, const TokenMaskSet& masks,
                                int fuser_index);

/// Masked average pooling of final-layer patch tokens (weights M / sum M).
MaskEmbeddings fuse_avg_pool(const EncoderParams& params, const TokenStates& states, const TokenMaskSet& masks);

struct EncoderGradients {
  EncoderParams params;   // same layout as the model
  Mat patches;            // dL/d(patch inputs), N x patch_dim
};

struct BackwardOptions {
  /// When false only q/v projections and log_alpha receive weight gradients;
  /// other weight gradients stay zero (activations still propagate).
  bool all_weight_grads = true;
};

/// Accumulates dL/dparams for one image given dL/d(embeddings).
void backward(const EncoderParams& params, const ImageTape& image, const FuseTape& fused, const Mat& d_embeddings,
              EncoderGradients& grads, const BackwardOptions& options = {});

}  // namespace maskclip
