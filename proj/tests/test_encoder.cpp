#include <doctest.h>

#include <random>

#include "maskclip/encoder.hpp"

using namespace maskclip;

namespace {

EncoderDims small_dims() {
  EncoderDims d;
  d.layers = 3;
  d.extractor_layers = 1;
  d.width = 16;
  d.embed_dim = 8;
  d.heads = 2;
  d.grid = {4, 4};
  d.patch_dim = 12;
  return d;
}

// Perturb every tensor so biases and norms are not at their trivial init.
EncoderParams random_params(const EncoderDims& dims, std::uint64_t seed, double scale = 0.3) {
  auto p = init_encoder(dims, seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> n(0.0, scale);
  p.for_each([&](const std::string& name, Mat& m) {
    if (name == "log_alpha") return;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += n(rng);
  });
  return p;
}

Mat random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// ---- naive reference transformer, written loop by loop ----

std::vector<double> ref_layer_norm(const std::vector<double>& x, const Mat& g, const Mat& b) {
  const double n = static_cast<double>(x.size());
  double mean = 0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g(0, i) + b(0, i);
  return y;
}

std::vector<double> ref_linear(const std::vector<double>& x, const Mat& w, const Mat& b) {
  std::vector<double> y(static_cast<std::size_t>(w.cols()));
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    double s = b(0, j);
    for (Eigen::Index i = 0; i < w.rows(); ++i) s += x[static_cast<std::size_t>(i)] * w(i, j);
    y[static_cast<std::size_t>(j)] = s;
  }
  return y;
}

using Tokens = std::vector<std::vector<double>>;

Tokens to_tokens(const Mat& m) {
  Tokens t(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) t[static_cast<std::size_t>(r)].assign(m.row(r).data(), m.row(r).data() + m.cols());
  return t;
}

// One pre-norm block for `queries` attending over `keys` (with optional
// additive bias per query/key). Returns the updated queries.
Tokens ref_block(const LayerParams& lp, int heads, const Tokens& queries, const Tokens& keys,
                 const std::vector<std::vector<double>>* bias, std::vector<Mat>* phi_out = nullptr) {
  const std::size_t c = queries[0].size();
  const std::size_t hd = c / static_cast<std::size_t>(heads);
  Tokens kk, vv;
  for (const auto& t : keys) {
    auto h = ref_layer_norm(t, lp.ln1_g, lp.ln1_b);
    kk.push_back(ref_linear(h, lp.wk, lp.bk));
    vv.push_back(ref_linear(h, lp.wv, lp.bv));
  }
  if (phi_out) phi_out->assign(static_cast<std::size_t>(heads), Mat(queries.size(), keys.size()));
  Tokens out;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    auto q = ref_linear(ref_layer_norm(queries[qi], lp.ln1_g, lp.ln1_b), lp.wq, lp.bq);
    std::vector<double> mixed(c, 0.0);
    for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
      std::vector<double> logits(keys.size());
      double mx = -1e300;
      for (std::size_t j = 0; j < keys.size(); ++j) {
        double s = 0;
        for (std::size_t d = 0; d < hd; ++d) s += q[h * hd + d] * kk[j][h * hd + d];
        logits[j] = s / std::sqrt(static_cast<double>(hd)) + (bias ? (*bias)[qi][j] : 0.0);
        mx = std::max(mx, logits[j]);
      }
      double z = 0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t j = 0; j < keys.size(); ++j) {
        const double w = logits[j] / z;
        if (phi_out) (*phi_out)[h](static_cast<Eigen::Index>(qi), static_cast<Eigen::Index>(j)) = w;
        for (std::size_t d = 0; d < hd; ++d) mixed[h * hd + d] += w * vv[j][h * hd + d];
      }
    }
    auto x = queries[qi];
    auto attn = ref_linear(mixed, lp.wo, lp.bo);
    for (std::size_t i = 0; i < c; ++i) x[i] += attn[i];
    auto hidden = ref_linear(ref_layer_norm(x, lp.ln2_g, lp.ln2_b), lp.w_fc, lp.b_fc);
    for (auto& v : hidden) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    auto mlp = ref_linear(hidden, lp.w_out, lp.b_out);
    for (std::size_t i = 0; i < c; ++i) x[i] += mlp[i];
    out.push_back(x);
  }
  return out;
}

std::vector<Tokens> ref_image_stream(const EncoderParams& p, const Mat& patches) {
  Tokens x;
  std::vector<double> cls(p.cls_token.data(), p.cls_token.data() + p.cls_token.cols());
  for (std::size_t i = 0; i < cls.size(); ++i) cls[i] += p.pos_embed(0, static_cast<Eigen::Index>(i));
  x.push_back(cls);
  for (Eigen::Index r = 0; r < patches.rows(); ++r) {
    std::vector<double> row(patches.row(r).data(), patches.row(r).data() + patches.cols());
    auto t = ref_linear(row, p.patch_embed, Mat::Zero(1, p.patch_embed.cols()));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += p.pos_embed(r + 1, static_cast<Eigen::Index>(i));
    x.push_back(t);
  }
  std::vector<Tokens> inputs;  // input of every layer, then final output
  for (const auto& lp : p.layers) {
    inputs.push_back(x);
    x = ref_block(lp, p.dims.heads, x, x, nullptr);
  }
  inputs.push_back(x);
  return inputs;
}

Mat ref_project(const EncoderParams& p, const Tokens& e) {
  Mat out(static_cast<Eigen::Index>(e.size()), p.dims.embed_dim);
  for (std::size_t q = 0; q < e.size(); ++q) {
    auto y = ref_linear(ref_layer_norm(e[q], p.lnf_g, p.lnf_b), p.out_proj, Mat::Zero(1, p.out_proj.cols()));
    double n = 0;
    for (double v : y) n += v * v;
    for (std::size_t i = 0; i < y.size(); ++i) out(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(i)) = y[i] / std::sqrt(n);
  }
  return out;
}

// Mask tokens start at the CLS of the Extractor output and attend patch tokens
// of each Fuser layer's input under the thresholded bias.
Mat ref_fuse(const EncoderParams& p, const Mat& patches, const Mat& masks, double alpha,
             std::vector<std::vector<Mat>>* phi = nullptr) {
  const auto inputs = ref_image_stream(p, patches);
  const int k = p.dims.extractor_layers;
  Tokens e(static_cast<std::size_t>(masks.rows()), inputs[static_cast<std::size_t>(k)][0]);
  std::vector<std::vector<double>> bias(static_cast<std::size_t>(masks.rows()));
  for (Eigen::Index q = 0; q < masks.rows(); ++q) {
    const double mx = masks.row(q).maxCoeff();
    for (Eigen::Index j = 0; j < masks.cols(); ++j) {
      const double m = masks(q, j);
      bias[static_cast<std::size_t>(q)].push_back(m >= mx / 2 ? alpha * m : -alpha * 1e4);
    }
  }
  for (int l = k; l < p.dims.layers; ++l) {
    const auto& layer_in = inputs[static_cast<std::size_t>(l)];
    Tokens keys(layer_in.begin() + 1, layer_in.end());
    std::vector<Mat> layer_phi;
    e = ref_block(p.layers[static_cast<std::size_t>(l)], p.dims.heads, e, keys, &bias, &layer_phi);
    if (phi) phi->push_back(layer_phi);
  }
  return ref_project(p, e);
}

TokenMaskSet random_masks(int q, int n, std::mt19937_64& rng, bool binary) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TokenMaskSet m{Mat(q, n)};
  for (Eigen::Index i = 0; i < m.values.size(); ++i) m.values.data()[i] = binary ? (u(rng) < 0.4 ? 1.0 : 0.0) : u(rng);
  for (int r = 0; r < q; ++r) m.values(r, r % n) = 1.0;
  return m;
}

}  // namespace

TEST_CASE("parameter count matches the analytic formula") {
  EncoderDims d;
  const auto p = init_encoder(d, 0);
  const std::size_t c = 64, n = 256, pd = 48, dd = 32, l = 4;
  const std::size_t per_layer = 2 * c + 4 * (c * c + c) + 2 * c + (c * 4 * c + 4 * c) + (4 * c * c + c);
  const std::size_t expected = pd * c + (n + 1) * c + c + l * per_layer + 2 * c + c * dd + 1;
  CHECK(p.parameter_count() == expected);
  CHECK(p.alpha() == doctest::Approx(6.7379e-3).epsilon(1e-4));
  CHECK(p.log_alpha(0, 0) == -5.0);
}

TEST_CASE("init is deterministic, truncated and at identity") {
  const auto a = init_encoder(small_dims(), 9);
  const auto b = init_encoder(small_dims(), 9);
  const auto c = init_encoder(small_dims(), 10);
  bool same = true, differs = false;
  a.for_each([&](const std::string& name, const Mat& m) {
    const Mat& mb = *const_cast<EncoderParams&>(b).find(name);
    const Mat& mc = *const_cast<EncoderParams&>(c).find(name);
    same = same && m == mb;
    differs = differs || m != mc;
    if (name.find("_g") != std::string::npos && name.find("ln") != std::string::npos) CHECK(m == Mat::Ones(m.rows(), m.cols()));
    if (name.size() > 3 && name.substr(name.size() - 3) == ".bq") CHECK(m.isZero(0));
    if (name == "patch_embed") CHECK(m.cwiseAbs().maxCoeff() <= 0.04);
  });
  CHECK(same);
  CHECK(differs);
  EncoderDims bad = small_dims();
  bad.heads = 3;
  CHECK_THROWS_AS(init_encoder(bad, 0), EncoderError);
  bad = small_dims();
  bad.extractor_layers = bad.layers;
  CHECK_THROWS_AS(init_encoder(bad, 0), EncoderError);
}

TEST_CASE("image stream matches the naive reference") {
  std::mt19937_64 rng(1);
  const auto p = random_params(small_dims(), 1);
  const Mat patches = random_matrix(16, 12, rng);
  const auto states = extract(p, patches);
  const auto ref = ref_image_stream(p, patches);
  REQUIRE(states.states.size() == 3);  // L-K+1
  for (std::size_t s = 0; s < states.states.size(); ++s) {
    const auto& r = ref[s + 1];
    for (std::size_t t = 0; t < r.size(); ++t) {
      for (std::size_t i = 0; i < r[t].size(); ++i) {
        REQUIRE(states.states[s](static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i)) ==
                doctest::Approx(r[t][i]).epsilon(1e-10));
      }
    }
  }
  EncoderDims two = small_dims();
  two.layers = 2;
  CHECK(extract(init_encoder(two, 0), patches).states.size() == 2);
  CHECK_THROWS_AS(extract(p, random_matrix(15, 12, rng)), EncoderError);
}

TEST_CASE("symmetry and permutation equivariance of the image stream") {
  std::mt19937_64 rng(2);
  auto p = random_params(small_dims(), 2);
  SUBCASE("zero image with zero positions gives identical patch tokens") {
    p.pos_embed.setZero();
    const auto out = extract(p, Mat::Zero(16, 12)).final_output();
    for (Eigen::Index r = 2; r < out.rows(); ++r) CHECK((out.row(r) - out.row(1)).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("swapping two patches and their positions swaps outputs") {
    const Mat patches = random_matrix(16, 12, rng);
    const auto base = extract(p, patches).final_output();
    Mat swapped = patches;
    swapped.row(3).swap(swapped.row(11));
    auto q = p;
    q.pos_embed.row(4).swap(q.pos_embed.row(12));
    Mat out = extract(q, swapped).final_output();
    out.row(4).swap(out.row(12));
    CHECK((out - base).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("mask bias rule") {
  Eigen::RowVectorXd soft(3);
  soft << 1.0, 0.6, 0.4;
  const auto b = mask_bias(soft, 2.0);
  CHECK(b(0) == doctest::Approx(2.0));
  CHECK(b(1) == doctest::Approx(1.2));
  CHECK(b(2) == doctest::Approx(-2e4));

  Eigen::RowVectorXd binary(4);
  binary << 1, 0, 1, 0;
  const auto b1 = mask_bias(binary, 1.0);
  CHECK(b1(0) == 1.0);
  CHECK(b1(1) == -1e4);
  CHECK(mask_bias(binary, 0.0).isZero(0));
  CHECK_THROWS_AS(mask_bias(Eigen::RowVectorXd::Zero(4), 1.0), EncoderError);
  CHECK_THROWS_AS(mask_bias(binary, -1.0), EncoderError);

  const auto slope = mask_bias_slope(soft);
  CHECK(slope(1) == 0.6);
  CHECK(slope(2) == -1e4);
}

TEST_CASE("fusion matches the naive reference") {
  std::mt19937_64 rng(3);
  auto p = random_params(small_dims(), 3);
  p.log_alpha(0, 0) = 0.7;
  const Mat patches = random_matrix(16, 12, rng);
  const auto masks = random_masks(5, 16, rng, false);
  const auto got = fuse(p, extract(p, patches), masks);
  const Mat ref = ref_fuse(p, patches, masks.values, p.alpha());
  CHECK((got.values - ref).cwiseAbs().maxCoeff() < 1e-10);
  for (Eigen::Index r = 0; r < got.values.rows(); ++r) CHECK(std::abs(got.values.row(r).norm() - 1.0) < 1e-12);

  // the tape path agrees with the states path
  const auto tape = forward_image(p, patches, ExtractMode::kForFusion);
  const auto ft = fuse_forward(p, tape, masks);
  CHECK((ft.embeddings - got.values).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(states_from_tape(forward_image(p, patches), 1).states.size() == 3);
}

TEST_CASE("full mask at alpha 0 follows the CLS path over patch tokens") {
  std::mt19937_64 rng(4);
  auto p = random_params(small_dims(), 4);
  p.log_alpha(0, 0) = -1e3;  // exp underflows to exactly 0
  REQUIRE(p.alpha() == 0.0);
  const Mat patches = random_matrix(16, 12, rng);
  const auto states = extract(p, patches);
  const auto got = fuse(p, states, TokenMaskSet{Mat::Ones(1, 16)});

  // Oracle: carry the Extractor's CLS through each Fuser block with plain
  // attention over the layer's patch tokens.
  Tokens cls{to_tokens(states.extractor_output())[0]};
  for (int l = 1; l < 3; ++l) {
    const auto layer_in = to_tokens(states.states[static_cast<std::size_t>(l - 1)]);
    cls = ref_block(p.layers[static_cast<std::size_t>(l)], 2, cls, Tokens(layer_in.begin() + 1, layer_in.end()), nullptr);
  }
  CHECK((got.values - ref_project(p, cls)).cwiseAbs().maxCoeff() < 1e-10);

  // Any mask reduces to the same unbiased attention at alpha 0.
  const auto other = fuse(p, states, random_masks(1, 16, rng, false));
  CHECK((other.values - got.values).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("fusion weights: simplex rows, hard outside, alpha invariance") {
  std::mt19937_64 rng(5);
  auto p = random_params(small_dims(), 5);
  const Mat patches = random_matrix(16, 12, rng);
  const auto states = extract(p, patches);
  const auto masks = random_masks(4, 16, rng, true);
  std::vector<std::vector<Mat>> per_alpha;
  for (double la : {-5.0, 0.0, std::log(50.0)}) {
    p.log_alpha(0, 0) = la;
    for (int f = 0; f < 2; ++f) {
      const auto phi = fusion_weights(p, states, masks, f);
      REQUIRE(phi.size() == 2);
      for (const auto& h : phi) {
        for (Eigen::Index q = 0; q < h.rows(); ++q) {
          CHECK(std::abs(h.row(q).sum() - 1.0) <= 1e-6);
          double outside = 0;
          for (Eigen::Index j = 0; j < h.cols(); ++j) {
            if (masks.values(q, j) == 0.0) outside += h(q, j);
          }
          CHECK(outside <= 1e-12);
        }
      }
      if (f == 0) per_alpha.push_back(phi);
    }
  }
  for (std::size_t a = 1; a < per_alpha.size(); ++a) {
    for (std::size_t h = 0; h < 2; ++h) CHECK((per_alpha[a][h] - per_alpha[0][h]).cwiseAbs().maxCoeff() <= 1e-9);
  }
  // fusion_weights agrees with the reference attention maps
  std::vector<std::vector<Mat>> ref_phi;
  ref_fuse(p, patches, masks.values, p.alpha(), &ref_phi);
  const auto phi1 = fusion_weights(p, states, masks, 1);
  CHECK((phi1[1] - ref_phi[1][1]).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("mask tokens never write into the image stream") {
  std::mt19937_64 rng(6);
  const auto p = random_params(small_dims(), 6);
  const Mat patches = random_matrix(16, 12, rng);
  const auto before = extract(p, patches);
  const auto tape = forward_image(p, patches);
  const Mat final_before = tape.final_output;
  fuse(p, before, random_masks(3, 16, rng, false));
  fuse_forward(p, tape, random_masks(3, 16, rng, true));
  const auto after = extract(p, patches);
  for (std::size_t s = 0; s < before.states.size(); ++s) CHECK(before.states[s] == after.states[s]);
  CHECK(tape.final_output == final_before);
}

TEST_CASE("mask rows: permutation and duplication") {
  std::mt19937_64 rng(7);
  const auto p = random_params(small_dims(), 7);
  const auto states = extract(p, random_matrix(16, 12, rng));
  auto masks = random_masks(4, 16, rng, false);
  masks.values.row(3) = masks.values.row(1);
  const auto e = fuse(p, states, masks);
  CHECK(e.values.row(3) == e.values.row(1));
  const std::vector<int> perm{2, 0, 3, 1};
  TokenMaskSet shuffled{Mat(4, 16)};
  for (int i = 0; i < 4; ++i) shuffled.values.row(i) = masks.values.row(perm[static_cast<std::size_t>(i)]);
  const auto es = fuse(p, states, shuffled);
  for (int i = 0; i < 4; ++i) CHECK((es.values.row(i) - e.values.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() < 1e-12);
  TokenMaskSet with_zero = masks;
  with_zero.values.row(0).setZero();
  CHECK_THROWS_AS(fuse(p, states, with_zero), EncoderError);
}

TEST_CASE("masked average pooling") {
  std::mt19937_64 rng(8);
  const auto p = random_params(small_dims(), 8);
  const auto states = extract(p, random_matrix(16, 12, rng));
  const auto tokens = to_tokens(states.final_output());
  TokenMaskSet m{Mat::Zero(3, 16)};
  m.values(0, 5) = 1.0;          // delta
  m.values.row(1).setConstant(0.3);  // uniform
  m.values(2, 0) = 2.0 / 3.0;    // soft pair
  m.values(2, 1) = 1.0 / 3.0;
  const auto e = fuse_avg_pool(p, states, m);

  Tokens expected{tokens[6], std::vector<double>(16, 0.0), std::vector<double>(16, 0.0)};
  for (std::size_t t = 1; t <= 16; ++t) {
    for (std::size_t i = 0; i < 16; ++i) expected[1][i] += tokens[t][i] / 16.0;
  }
  for (std::size_t i = 0; i < 16; ++i) expected[2][i] = 2.0 / 3.0 * tokens[1][i] + 1.0 / 3.0 * tokens[2][i];
  CHECK((e.values - ref_project(p, expected)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK_THROWS_AS(fuse_avg_pool(p, states, TokenMaskSet{Mat::Zero(1, 16)}), EncoderError);
}

TEST_CASE("backward matches central differences") {
  std::mt19937_64 rng(9);
  auto p = random_params(small_dims(), 9, 0.2);
  p.log_alpha(0, 0) = 0.3;
  Mat patches = random_matrix(16, 12, rng);
  const auto masks = random_masks(3, 16, rng, false);
  const Mat w = random_matrix(3, 8, rng);
  auto objective = [&](const EncoderParams& params, const Mat& x) {
    const auto tape = forward_image(params, x, ExtractMode::kForFusion);
    return (fuse_forward(params, tape, masks).embeddings.array() * w.array()).sum();
  };
  EncoderGradients g{p.zeros_like(), Mat::Zero(16, 12)};
  const auto tape = forward_image(p, patches, ExtractMode::kForFusion);
  backward(p, tape, fuse_forward(p, tape, masks), w, g);

  auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-4}); };
  const double eps = 1e-5;
  double worst = 0;
  std::uniform_int_distribution<int> pick(0, 1 << 30);
  p.for_each([&](const std::string& name, Mat& m) {
    const Mat& gm = *g.params.find(name);
    for (int t = 0; t < 3; ++t) {
      const Eigen::Index i = pick(rng) % m.size();
      const double keep = m.data()[i];
      m.data()[i] = keep + eps;
      const double up = objective(p, patches);
      m.data()[i] = keep - eps;
      const double down = objective(p, patches);
      m.data()[i] = keep;
      const double r = rel((up - down) / (2 * eps), gm.data()[i]);
      worst = std::max(worst, r);
      INFO(name);
      CHECK(r <= 1e-4);
    }
  });
  for (int t = 0; t < 6; ++t) {
    const Eigen::Index i = pick(rng) % patches.size();
    const double keep = patches.data()[i];
    patches.data()[i] = keep + eps;
    const double up = objective(p, patches);
    patches.data()[i] = keep - eps;
    const double down = objective(p, patches);
    patches.data()[i] = keep;
    CHECK(rel((up - down) / (2 * eps), g.patches.data()[i]) <= 1e-4);
  }
  MESSAGE("worst relative error " << worst);
}

TEST_CASE("restricted backward touches only q/v and log_alpha") {
  std::mt19937_64 rng(10);
  const auto p = random_params(small_dims(), 10);
  const Mat patches = random_matrix(16, 12, rng);
  const auto masks = random_masks(2, 16, rng, false);
  const Mat w = random_matrix(2, 8, rng);
  const auto tape = forward_image(p, patches, ExtractMode::kForFusion);
  const auto ft = fuse_forward(p, tape, masks);
  EncoderGradients full{p.zeros_like(), Mat::Zero(16, 12)};
  EncoderGradients part{p.zeros_like(), Mat::Zero(16, 12)};
  backward(p, tape, ft, w, full);
  backward(p, tape, ft, w, part, BackwardOptions{false});
  part.params.for_each([&](const std::string& name, const Mat& m) {
    const bool kept = name == "log_alpha" || name.ends_with(".wq") || name.ends_with(".bq") || name.ends_with(".wv") ||
                      name.ends_with(".bv");
    INFO(name);
    if (kept) {
      CHECK((m - *full.params.find(name)).cwiseAbs().maxCoeff() < 1e-12);
    } else {
      CHECK(m.isZero(0));
    }
  });
}
