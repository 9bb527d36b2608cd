#include "maskclip/encoder.hpp"

#include <cmath>
#include <random>
#include <utility>

namespace maskclip {
namespace {

constexpr double kLayerNormEps = 1e-5;

Mat linear(const Mat& x, const Mat& w, const Mat& b) {
  Mat y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

void layer_norm(const Mat& x, const Mat& g, const Mat& b, Mat& xhat, Eigen::VectorXd& rstd, Mat& out) {
  const auto cols = static_cast<double>(x.cols());
  Eigen::VectorXd mean = x.rowwise().sum() / cols;
  xhat = x.colwise() - mean;
  rstd = ((xhat.array().square().rowwise().sum() / cols) + kLayerNormEps).rsqrt();
  xhat = xhat.array().colwise() * rstd.array();
  out = xhat.array().rowwise() * g.row(0).array();
  out.rowwise() += b.row(0);
}

// Returns dL/dx. Accumulates dL/dg and dL/db when the pointers are set.
Mat layer_norm_backward(const Mat& dy, const Mat& xhat, const Eigen::VectorXd& rstd, const Mat& g, Mat* dg, Mat* db) {
  if (dg) *dg += (dy.array() * xhat.array()).colwise().sum().matrix();
  if (db) *db += dy.colwise().sum();
  const auto cols = static_cast<double>(xhat.cols());
  Mat dxhat = dy.array().rowwise() * g.row(0).array();
  Eigen::VectorXd mean_d = dxhat.rowwise().sum() / cols;
  Eigen::VectorXd mean_dx = (dxhat.array() * xhat.array()).rowwise().sum() / cols;
  Mat dx = dxhat.colwise() - mean_d;
  dx -= (xhat.array().colwise() * mean_dx.array()).matrix();
  return dx.array().colwise() * rstd.array();
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
  return cdf + x * pdf;
}

void softmax_rows(Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

// dL/dlogits for a row-softmax P given dL/dP.
Mat softmax_backward(const Mat& p, const Mat& dp) {
  Eigen::VectorXd dot = (p.array() * dp.array()).rowwise().sum();
  return p.array() * (dp.colwise() - dot).array();
}

Mat truncated_normal(Eigen::Index rows, Eigen::Index cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    m.data()[i] = std * z;
  }
  return m;
}

Mat mlp_forward(const LayerParams& p, const Mat& h2, Mat& pre, Mat& act) {
  pre = linear(h2, p.w_fc, p.b_fc);
  act = pre.unaryExpr(&gelu);
  return linear(act, p.w_out, p.b_out);
}

// Backprop through out = x + MLP(LN2(x)) given dL/dout; returns dL/dx.
template <typename Tape>
Mat mlp_block_backward(const LayerParams& p, const Tape& t, const Mat& d_out, LayerParams* g) {
  Mat d_act = d_out * p.w_out.transpose();
  if (g) {
    g->w_out.noalias() += t.act.transpose() * d_out;
    g->b_out += d_out.colwise().sum();
  }
  Mat d_pre = d_act.array() * t.pre.unaryExpr(&gelu_grad).array();
  if (g) {
    g->w_fc.noalias() += t.h2.transpose() * d_pre;
    g->b_fc += d_pre.colwise().sum();
  }
  Mat d_h2 = d_pre * p.w_fc.transpose();
  return d_out + layer_norm_backward(d_h2, t.xhat2, t.rstd2, p.ln2_g, g ? &g->ln2_g : nullptr, g ? &g->ln2_b : nullptr);
}

void layer_forward(const LayerParams& p, const EncoderDims& dims, const Mat& x, LayerTape& t, bool kv_only) {
  t.x_in = x;
  t.kv_only = kv_only;
  layer_norm(x, p.ln1_g, p.ln1_b, t.xhat1, t.rstd1, t.h1);
  t.k = linear(t.h1, p.wk, p.bk);
  t.v = linear(t.h1, p.wv, p.bv);
  if (kv_only) return;
  t.q = linear(t.h1, p.wq, p.bq);
  const int hd = dims.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  t.attn.resize(static_cast<std::size_t>(dims.heads));
  t.o.resize(x.rows(), x.cols());
  for (int h = 0; h < dims.heads; ++h) {
    Mat& a = t.attn[static_cast<std::size_t>(h)];
    a.noalias() = t.q.middleCols(h * hd, hd) * t.k.middleCols(h * hd, hd).transpose();
    a *= scale;
    softmax_rows(a);
    t.o.middleCols(h * hd, hd).noalias() = a * t.v.middleCols(h * hd, hd);
  }
  t.y = x + linear(t.o, p.wo, p.bo);
  layer_norm(t.y, p.ln2_g, p.ln2_b, t.xhat2, t.rstd2, t.h2);
}

Mat layer_output(const LayerParams& p, LayerTape& t) { return t.y + mlp_forward(p, t.h2, t.pre, t.act); }

struct KeyValues {
  std::vector<Mat> keys;    // per fuser layer, N x C
  std::vector<Mat> values;  // per fuser layer, N x C
};

void fuse_core(const EncoderParams& params, const KeyValues& kv, const Eigen::RowVectorXd& cls, const TokenMaskSet& masks,
               FuseTape& tape) {
  const auto& dims = params.dims;
  const Eigen::Index n = dims.tokens();
  if (masks.values.cols() != n) {
    throw EncoderError("mask set has " + std::to_string(masks.values.cols()) + " cells, encoder expects " + std::to_string(n));
  }
  if (masks.count() == 0) throw EncoderError("fuse needs at least one mask");
  const double alpha = params.alpha();
  const Eigen::Index q = masks.count();
  tape.masks = masks.values;
  tape.bias.resize(q, n);
  tape.bias_slope.resize(q, n);
  for (Eigen::Index r = 0; r < q; ++r) {
    tape.bias.row(r) = mask_bias(masks.values.row(r), alpha);
    tape.bias_slope.row(r) = mask_bias_slope(masks.values.row(r));
  }

  const int hd = dims.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Mat e = cls.replicate(q, 1);
  tape.layers.resize(static_cast<std::size_t>(dims.fuser_layers()));
  for (int f = 0; f < dims.fuser_layers(); ++f) {
    const auto& p = params.layers[static_cast<std::size_t>(dims.extractor_layers + f)];
    auto& t = tape.layers[static_cast<std::size_t>(f)];
    const Mat& keys = kv.keys[static_cast<std::size_t>(f)];
    const Mat& values = kv.values[static_cast<std::size_t>(f)];
    t.e_in = e;
    layer_norm(e, p.ln1_g, p.ln1_b, t.xhat1, t.rstd1, t.h1);
    t.q = linear(t.h1, p.wq, p.bq);
    t.phi.resize(static_cast<std::size_t>(dims.heads));
    t.o.resize(q, dims.width);
    for (int h = 0; h < dims.heads; ++h) {
      Mat& phi = t.phi[static_cast<std::size_t>(h)];
      phi.noalias() = t.q.middleCols(h * hd, hd) * keys.middleCols(h * hd, hd).transpose();
      phi *= scale;
      phi += tape.bias;
      softmax_rows(phi);
      t.o.middleCols(h * hd, hd).noalias() = phi * values.middleCols(h * hd, hd);
    }
    t.y = e + linear(t.o, p.wo, p.bo);
    layer_norm(t.y, p.ln2_g, p.ln2_b, t.xhat2, t.rstd2, t.h2);
    e = t.y + mlp_forward(p, t.h2, t.pre, t.act);
  }
  tape.e_final = e;
  Mat ef;
  layer_norm(e, params.lnf_g, params.lnf_b, tape.xhatf, tape.rstdf, ef);
  tape.projected = ef * params.out_proj;
  tape.norms = tape.projected.rowwise().norm();
  tape.embeddings = tape.projected.array().colwise() / tape.norms.array();
}

KeyValues key_values_from_states(const EncoderParams& params, const TokenStates& states) {
  const auto& dims = params.dims;
  if (static_cast<int>(states.states.size()) != dims.fuser_layers() + 1) {
    throw EncoderError("token states hold " + std::to_string(states.states.size()) + " snapshots, expected " +
                       std::to_string(dims.fuser_layers() + 1));
  }
  KeyValues kv;
  for (int f = 0; f < dims.fuser_layers(); ++f) {
    const auto& p = params.layers[static_cast<std::size_t>(dims.extractor_layers + f)];
    Mat xhat, h;
    Eigen::VectorXd rstd;
    layer_norm(states.states[static_cast<std::size_t>(f)].bottomRows(dims.tokens()), p.ln1_g, p.ln1_b, xhat, rstd, h);
    kv.keys.push_back(linear(h, p.wk, p.bk));
    kv.values.push_back(linear(h, p.wv, p.bv));
  }
  return kv;
}

}  // namespace

void EncoderDims::validate() const {
  if (heads <= 0 || width <= 0 || width % heads != 0) {
    throw EncoderError("width " + std::to_string(width) + " is not divisible by head count " + std::to_string(heads));
  }
  if (extractor_layers < 1 || extractor_layers >= layers) {
    throw EncoderError("need 1 <= K < L, got K=" + std::to_string(extractor_layers) + " L=" + std::to_string(layers));
  }
  if (embed_dim < 1 || patch_dim < 1 || grid.rows < 1 || grid.cols < 1) throw EncoderError("encoder dims must be positive");
}

void EncoderParams::for_each(const std::function<void(const std::string&, const Mat&)>& fn) const {
  fn("patch_embed", patch_embed);
  fn("pos_embed", pos_embed);
  fn("cls_token", cls_token);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    fn(p + "ln1_g", l.ln1_g);
    fn(p + "ln1_b", l.ln1_b);
    fn(p + "wq", l.wq);
    fn(p + "bq", l.bq);
    fn(p + "wk", l.wk);
    fn(p + "bk", l.bk);
    fn(p + "wv", l.wv);
    fn(p + "bv", l.bv);
    fn(p + "wo", l.wo);
    fn(p + "bo", l.bo);
    fn(p + "ln2_g", l.ln2_g);
    fn(p + "ln2_b", l.ln2_b);
    fn(p + "w_fc", l.w_fc);
    fn(p + "b_fc", l.b_fc);
    fn(p + "w_out", l.w_out);
    fn(p + "b_out", l.b_out);
  }
  fn("lnf_g", lnf_g);
  fn("lnf_b", lnf_b);
  fn("out_proj", out_proj);
  fn("log_alpha", log_alpha);
}

void EncoderParams::for_each(const std::function<void(const std::string&, Mat&)>& fn) {
  std::as_const(*this).for_each([&](const std::string& name, const Mat& m) { fn(name, const_cast<Mat&>(m)); });
}

Mat* EncoderParams::find(const std::string& name) {
  Mat* found = nullptr;
  for_each([&](const std::string& n, Mat& m) {
    if (n == name) found = &m;
  });
  return found;
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t count = 0;
  for_each([&](const std::string&, const Mat& m) { count += static_cast<std::size_t>(m.size()); });
  return count;
}

EncoderParams EncoderParams::zeros_like() const {
  EncoderParams z = *this;
  z.for_each([](const std::string&, Mat& m) { m.setZero(); });
  return z;
}

EncoderParams init_encoder(const EncoderDims& dims, std::uint64_t seed) {
  dims.validate();
  std::mt19937_64 rng(seed);
  const int c = dims.width;
  constexpr double kStd = 0.02;
  EncoderParams p;
  p.dims = dims;
  p.patch_embed = truncated_normal(dims.patch_dim, c, kStd, rng);
  p.pos_embed = truncated_normal(dims.tokens() + 1, c, kStd, rng);
  p.cls_token = truncated_normal(1, c, kStd, rng);
  for (int i = 0; i < dims.layers; ++i) {
    LayerParams l;
    l.ln1_g = Mat::Ones(1, c);
    l.ln1_b = Mat::Zero(1, c);
    l.wq = truncated_normal(c, c, kStd, rng);
    l.bq = Mat::Zero(1, c);
    l.wk = truncated_normal(c, c, kStd, rng);
    l.bk = Mat::Zero(1, c);
    l.wv = truncated_normal(c, c, kStd, rng);
    l.bv = Mat::Zero(1, c);
    l.wo = truncated_normal(c, c, kStd, rng);
    l.bo = Mat::Zero(1, c);
    l.ln2_g = Mat::Ones(1, c);
    l.ln2_b = Mat::Zero(1, c);
    l.w_fc = truncated_normal(c, 4 * c, kStd, rng);
    l.b_fc = Mat::Zero(1, 4 * c);
    l.w_out = truncated_normal(4 * c, c, kStd, rng);
    l.b_out = Mat::Zero(1, c);
    p.layers.push_back(std::move(l));
  }
  p.lnf_g = Mat::Ones(1, c);
  p.lnf_b = Mat::Zero(1, c);
  p.out_proj = truncated_normal(c, dims.embed_dim, kStd, rng);
  p.log_alpha = Mat::Constant(1, 1, -5.0);
  return p;
}

Eigen::RowVectorXd mask_bias(const Eigen::RowVectorXd& mask_row, double alpha) {
  const double mx = mask_row.size() ? mask_row.maxCoeff() : 0.0;
  if (!(mx > 0.0)) throw EncoderError("mask row is all zero; attention bias is undefined");
  if (!(alpha >= 0.0)) throw EncoderError("alpha must be non-negative");
  const double threshold = mx / 2.0;
  Eigen::RowVectorXd bias(mask_row.size());
  for (Eigen::Index i = 0; i < mask_row.size(); ++i) {
    bias(i) = mask_row(i) >= threshold ? alpha * mask_row(i) : -alpha * kMaskNegative;
  }
  return bias;
}

Eigen::RowVectorXd mask_bias_slope(const Eigen::RowVectorXd& mask_row) {
  const double threshold = mask_row.maxCoeff() / 2.0;
  Eigen::RowVectorXd slope(mask_row.size());
  for (Eigen::Index i = 0; i < mask_row.size(); ++i) slope(i) = mask_row(i) >= threshold ? mask_row(i) : -kMaskNegative;
  return slope;
}

ImageTape forward_image(const EncoderParams& params, const Mat& patches, ExtractMode mode) {
  const auto& dims = params.dims;
  if (patches.rows() != dims.tokens() || patches.cols() != dims.patch_dim) {
    throw EncoderError("patch matrix is " + std::to_string(patches.rows()) + "x" + std::to_string(patches.cols()) +
                       ", encoder expects " + std::to_string(dims.tokens()) + "x" + std::to_string(dims.patch_dim));
  }
  ImageTape tape;
  tape.patches = patches;
  Mat x(dims.tokens() + 1, dims.width);
  x.row(0) = params.cls_token.row(0);
  x.bottomRows(dims.tokens()).noalias() = patches * params.patch_embed;
  x += params.pos_embed;
  tape.layers.resize(static_cast<std::size_t>(dims.layers));
  for (int l = 0; l < dims.layers; ++l) {
    auto& t = tape.layers[static_cast<std::size_t>(l)];
    const auto& p = params.layers[static_cast<std::size_t>(l)];
    const bool kv_only = mode == ExtractMode::kForFusion && l == dims.layers - 1;
    layer_forward(p, dims, x, t, kv_only);
    if (kv_only) break;
    x = layer_output(p, t);
  }
  if (mode == ExtractMode::kFull) tape.final_output = std::move(x);
  return tape;
}

TokenStates states_from_tape(const ImageTape& tape, int extractor_layers) {
  if (tape.final_output.size() == 0) throw EncoderError("tape was recorded without the final layer output");
  TokenStates s;
  for (std::size_t l = static_cast<std::size_t>(extractor_layers); l < tape.layers.size(); ++l) {
    s.states.push_back(tape.layers[l].x_in);
  }
  s.states.push_back(tape.final_output);
  return s;
}

TokenStates extract(const EncoderParams& params, const Mat& patches) {
  return states_from_tape(forward_image(params, patches, ExtractMode::kFull), params.dims.extractor_layers);
}

FuseTape fuse_forward(const EncoderParams& params, const ImageTape& image, const TokenMaskSet& masks) {
  const auto& dims = params.dims;
  KeyValues kv;
  for (int f = 0; f < dims.fuser_layers(); ++f) {
    const auto& t = image.layers[static_cast<std::size_t>(dims.extractor_layers + f)];
    kv.keys.push_back(t.k.bottomRows(dims.tokens()));
    kv.values.push_back(t.v.bottomRows(dims.tokens()));
  }
  FuseTape tape;
  fuse_core(params, kv, image.layers[static_cast<std::size_t>(dims.extractor_layers)].x_in.row(0), masks, tape);
  return tape;
}

MaskEmbeddings fuse(const EncoderParams& params, const TokenStates& states, const TokenMaskSet& masks) {
  const auto kv = key_values_from_states(params, states);
  FuseTape tape;
  fuse_core(params, kv, states.extractor_output().row(0), masks, tape);
  return {tape.embeddings};
}

std::vector<Mat> fusion_weights(const EncoderParams& params, const TokenStates& states, const TokenMaskSet& masks,
                                int fuser_index) {
  const auto kv = key_values_from_states(params, states);
  FuseTape tape;
  fuse_core(params, kv, states.extractor_output().row(0), masks, tape);
  return tape.layers.at(static_cast<std::size_t>(fuser_index)).phi;
}

MaskEmbeddings fuse_avg_pool(const EncoderParams& params, const TokenStates& states, const TokenMaskSet& masks) {
  const auto& dims = params.dims;
  if (masks.values.cols() != dims.tokens()) throw EncoderError("mask set does not match the token grid");
  Eigen::VectorXd mass = masks.values.rowwise().sum();
  for (Eigen::Index r = 0; r < mass.size(); ++r) {
    if (!(mass(r) > 0.0)) throw EncoderError("mask row " + std::to_string(r) + " is all zero");
  }
  Mat weights = masks.values.array().colwise() / mass.array();
  Mat pooled = weights * states.final_output().bottomRows(dims.tokens());
  Mat xhat, ef;
  Eigen::VectorXd rstd;
  layer_norm(pooled, params.lnf_g, params.lnf_b, xhat, rstd, ef);
  Mat projected = ef * params.out_proj;
  Eigen::VectorXd norms = projected.rowwise().norm();
  return {projected.array().colwise() / norms.array()};
}

void backward(const EncoderParams& params, const ImageTape& image, const FuseTape& fused, const Mat& d_embeddings,
              EncoderGradients& grads, const BackwardOptions& options) {
  const auto& dims = params.dims;
  const bool all = options.all_weight_grads;
  const int hd = dims.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const Eigen::Index n = dims.tokens();
  auto& g = grads.params;

  // Unit normalization, output projection, final norm.
  Eigen::VectorXd dots = (fused.embeddings.array() * d_embeddings.array()).rowwise().sum();
  Mat d_proj = (d_embeddings - (fused.embeddings.array().colwise() * dots.array()).matrix()).array().colwise() /
               fused.norms.array();
  if (all) {
    Mat ef = fused.xhatf.array().rowwise() * params.lnf_g.row(0).array();
    ef.rowwise() += params.lnf_b.row(0);
    g.out_proj.noalias() += ef.transpose() * d_proj;
  }
  Mat d_e = layer_norm_backward(d_proj * params.out_proj.transpose(), fused.xhatf, fused.rstdf, params.lnf_g,
                                all ? &g.lnf_g : nullptr, all ? &g.lnf_b : nullptr);

  // Mask-token path through the Fuser, collecting key/value gradients.
  std::vector<Mat> d_keys(static_cast<std::size_t>(dims.fuser_layers()), Mat::Zero(n, dims.width));
  std::vector<Mat> d_values(static_cast<std::size_t>(dims.fuser_layers()), Mat::Zero(n, dims.width));
  double d_alpha = 0.0;
  for (int f = dims.fuser_layers() - 1; f >= 0; --f) {
    const int li = dims.extractor_layers + f;
    const auto& p = params.layers[static_cast<std::size_t>(li)];
    auto& gl = g.layers[static_cast<std::size_t>(li)];
    const auto& t = fused.layers[static_cast<std::size_t>(f)];
    const auto& it = image.layers[static_cast<std::size_t>(li)];

    Mat d_y = mlp_block_backward(p, t, d_e, all ? &gl : nullptr);
    if (all) {
      gl.wo.noalias() += t.o.transpose() * d_y;
      gl.bo += d_y.colwise().sum();
    }
    Mat d_o = d_y * p.wo.transpose();
    Mat d_q = Mat::Zero(t.q.rows(), t.q.cols());
    Mat d_bias = Mat::Zero(fused.bias.rows(), fused.bias.cols());
    for (int h = 0; h < dims.heads; ++h) {
      const Mat& phi = t.phi[static_cast<std::size_t>(h)];
      auto keys = it.k.bottomRows(n).middleCols(h * hd, hd);
      auto values = it.v.bottomRows(n).middleCols(h * hd, hd);
      Mat d_phi = d_o.middleCols(h * hd, hd) * values.transpose();
      d_values[static_cast<std::size_t>(f)].middleCols(h * hd, hd).noalias() += phi.transpose() * d_o.middleCols(h * hd, hd);
      Mat d_logits = softmax_backward(phi, d_phi);
      d_bias += d_logits;
      d_q.middleCols(h * hd, hd).noalias() += scale * d_logits * keys;
      d_keys[static_cast<std::size_t>(f)].middleCols(h * hd, hd).noalias() += scale * d_logits.transpose() * t.q.middleCols(h * hd, hd);
    }
    d_alpha += (d_bias.array() * fused.bias_slope.array()).sum();
    gl.wq.noalias() += t.h1.transpose() * d_q;
    gl.bq += d_q.colwise().sum();
    d_e = d_y + layer_norm_backward(d_q * p.wq.transpose(), t.xhat1, t.rstd1, p.ln1_g, all ? &gl.ln1_g : nullptr,
                                    all ? &gl.ln1_b : nullptr);
  }
  g.log_alpha(0, 0) += params.alpha() * d_alpha;
  const Eigen::RowVectorXd d_cls_state = d_e.colwise().sum();

  // Image stream, top to bottom.
  Mat d_x = Mat::Zero(n + 1, dims.width);
  for (int li = dims.layers - 1; li >= 0; --li) {
    const auto& p = params.layers[static_cast<std::size_t>(li)];
    auto& gl = g.layers[static_cast<std::size_t>(li)];
    const auto& t = image.layers[static_cast<std::size_t>(li)];
    const Eigen::Index tokens = t.x_in.rows();
    Mat d_q = Mat::Zero(tokens, dims.width);
    Mat d_k = Mat::Zero(tokens, dims.width);
    Mat d_v = Mat::Zero(tokens, dims.width);
    Mat d_in;
    if (!t.kv_only) {
      Mat d_y = mlp_block_backward(p, t, d_x, all ? &gl : nullptr);
      if (all) {
        gl.wo.noalias() += t.o.transpose() * d_y;
        gl.bo += d_y.colwise().sum();
      }
      Mat d_o = d_y * p.wo.transpose();
      for (int h = 0; h < dims.heads; ++h) {
        const Mat& a = t.attn[static_cast<std::size_t>(h)];
        Mat d_a = d_o.middleCols(h * hd, hd) * t.v.middleCols(h * hd, hd).transpose();
        d_v.middleCols(h * hd, hd).noalias() += a.transpose() * d_o.middleCols(h * hd, hd);
        Mat d_logits = softmax_backward(a, d_a);
        d_q.middleCols(h * hd, hd).noalias() += scale * d_logits * t.k.middleCols(h * hd, hd);
        d_k.middleCols(h * hd, hd).noalias() += scale * d_logits.transpose() * t.q.middleCols(h * hd, hd);
      }
      d_in = std::move(d_y);
    } else {
      d_in = Mat::Zero(tokens, dims.width);
    }
    if (li >= dims.extractor_layers) {
      const auto f = static_cast<std::size_t>(li - dims.extractor_layers);
      d_k.bottomRows(n) += d_keys[f];
      d_v.bottomRows(n) += d_values[f];
    }
    Mat d_h1 = d_k * p.wk.transpose();
    d_h1.noalias() += d_v * p.wv.transpose();
    if (!t.kv_only) d_h1.noalias() += d_q * p.wq.transpose();
    if (!t.kv_only) {
      gl.wq.noalias() += t.h1.transpose() * d_q;
      gl.bq += d_q.colwise().sum();
    }
    gl.wv.noalias() += t.h1.transpose() * d_v;
    gl.bv += d_v.colwise().sum();
    if (all) {
      gl.wk.noalias() += t.h1.transpose() * d_k;
      gl.bk += d_k.colwise().sum();
    }
    d_in += layer_norm_backward(d_h1, t.xhat1, t.rstd1, p.ln1_g, all ? &gl.ln1_g : nullptr, all ? &gl.ln1_b : nullptr);
    if (li == dims.extractor_layers) d_in.row(0) += d_cls_state;
    d_x = std::move(d_in);
  }

  if (all) {
    g.pos_embed += d_x;
    g.cls_token += d_x.row(0);
    g.patch_embed.noalias() += image.patches.transpose() * d_x.bottomRows(n);
  }
  if (grads.patches.size() == 0) grads.patches = Mat::Zero(n, dims.patch_dim);
  grads.patches.noalias() += d_x.bottomRows(n) * params.patch_embed.transpose();
}

}  // namespace maskclip
