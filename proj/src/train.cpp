#include "maskclip/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "maskclip/infer.hpp"

namespace maskclip {

using nlohmann::json;

namespace {

std::string fnv_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json dims_to_json(const EncoderDims& d) {
  return {{"layers", d.layers},
          {"extractor_layers", d.extractor_layers},
          {"width", d.width},
          {"embed_dim", d.embed_dim},
          {"heads", d.heads},
          {"grid", {d.grid.rows, d.grid.cols}},
          {"patch_dim", d.patch_dim}};
}

EncoderDims dims_from_json(const json& j) {
  EncoderDims d;
  d.layers = j.value("layers", d.layers);
  d.extractor_layers = j.value("extractor_layers", d.extractor_layers);
  d.width = j.value("width", d.width);
  d.embed_dim = j.value("embed_dim", d.embed_dim);
  d.heads = j.value("heads", d.heads);
  if (j.contains("grid")) {
    auto g = j.at("grid").get<std::vector<int>>();
    if (g.size() != 2) throw TrainError("encoder.grid must be [rows, cols]");
    d.grid = {g[0], g[1]};
  }
  d.patch_dim = j.value("patch_dim", d.patch_dim);
  return d;
}

json config_to_json(const TrainConfig& c) {
  return {{"base_lr", c.base_lr},
          {"qv_lr_multiplier", c.qv_lr_multiplier},
          {"batch_size", c.batch_size},
          {"total_steps", c.total_steps},
          {"weight_decay", c.weight_decay},
          {"adam_betas", {c.beta1, c.beta2}},
          {"adam_eps", c.adam_eps},
          {"seed", c.seed},
          {"seen_categories", c.seen_categories},
          {"prior", to_string(c.prior)},
          {"psm", to_string(c.psm)},
          {"psm_dim", c.psm_dim},
          {"use_psm", c.use_psm},
          {"full_encoder", c.full_encoder},
          {"encoder", dims_to_json(c.encoder)},
          {"text_seed", c.text_seed},
          {"eval_every", c.eval_every},
          {"val_limit", c.val_limit}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.base_lr = j.value("base_lr", c.base_lr);
  c.qv_lr_multiplier = j.value("qv_lr_multiplier", c.qv_lr_multiplier);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("adam_betas")) {
    auto b = j.at("adam_betas").get<std::vector<double>>();
    if (b.size() != 2) throw TrainError("adam_betas must hold two values");
    c.beta1 = b[0];
    c.beta2 = b[1];
  }
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.seed = j.value("seed", c.seed);
  c.seen_categories = j.value("seen_categories", c.seen_categories);
  c.prior = parse_prior(j.value("prior", to_string(c.prior)));
  c.psm = parse_psm_variant(j.value("psm", to_string(c.psm)));
  c.psm_dim = j.value("psm_dim", c.psm_dim);
  c.use_psm = j.value("use_psm", c.use_psm);
  c.full_encoder = j.value("full_encoder", c.full_encoder);
  if (j.contains("encoder")) c.encoder = dims_from_json(j.at("encoder"));
  c.text_seed = j.value("text_seed", c.text_seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.val_limit = j.value("val_limit", c.val_limit);
  return c;
}

// Batch element g of the run: epoch-wise permutations keyed by (seed, epoch),
// so resuming at any step reproduces the same sequence.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}

  std::size_t at(std::uint64_t g) {
    const std::uint64_t epoch = g / n_;
    if (epoch != epoch_ || order_.empty()) {
      epoch_ = epoch;
      order_.resize(n_);
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      std::mt19937_64 rng(seed_ ^ (0x9e3779b97f4a7c15ULL * (epoch + 1)));
      for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng() % i]);
    }
    return order_[g % n_];
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
};

Mat select_rows(const Mat& m, const std::vector<int>& rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(base_lr >= 0.0)) throw TrainError("base_lr must be >= 0");
  if (!(qv_lr_multiplier >= 1.0)) throw TrainError("qv_lr_multiplier must be >= 1");
  if (batch_size < 1) throw TrainError("batch_size must be >= 1");
  if (total_steps < 1) throw TrainError("total_steps must be >= 1");
  if (weight_decay < 0.0) throw TrainError("weight_decay must be >= 0");
  if (psm_dim < 1) throw TrainError("psm_dim must be >= 1");
  encoder.validate();
}

TrainConfig parse_train_config(const std::string& json_text) {
  try {
    auto c = config_from_json(json::parse(json_text));
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw TrainError(std::string("train config: ") + e.what());
  }
}

std::string train_config_to_json(const TrainConfig& config) { return config_to_json(config).dump(2); }

std::string config_digest(const TrainConfig& config) { return fnv_hex(config_to_json(config).dump()); }

double cosine_lr(double base_lr, int step, int total_steps) {
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

bool is_query_value_param(const std::string& name) {
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return name.rfind("layers.", 0) == 0 && (ends_with(".wq") || ends_with(".bq") || ends_with(".wv") || ends_with(".bv"));
}

std::vector<std::string> trainable_set(const Model& model, bool full_encoder) {
  std::vector<std::string> names;
  model.for_each([&](const std::string& name, const Mat&) {
    if (full_encoder || is_query_value_param(name) || name == "log_alpha" || name.rfind("psm.", 0) == 0) names.push_back(name);
  });
  return names;
}

void AdamW::step(Model& model, const Model& grads, const std::vector<std::string>& names,
                 const std::function<double(const std::string&)>& lr_for) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::map<std::string, const Mat*> grad_of;
  grads.for_each([&](const std::string& name, const Mat& g) { grad_of[name] = &g; });
  const std::set<std::string> active(names.begin(), names.end());
  model.for_each([&](const std::string& name, Mat& p) {
    if (!active.count(name)) return;
    const Mat& g = *grad_of.at(name);
    auto& slot = slots_[name];
    if (slot.m.size() == 0) {
      slot.m = Mat::Zero(p.rows(), p.cols());
      slot.v = Mat::Zero(p.rows(), p.cols());
    }
    const double lr = lr_for(name);
    if (p.rows() > 1 && p.cols() > 1) p *= 1.0 - lr * weight_decay_;
    slot.m = beta1_ * slot.m + (1.0 - beta1_) * g;
    slot.v = beta2_ * slot.v + (1.0 - beta2_) * g.cwiseProduct(g);
    p.array() -= lr * (slot.m.array() / bc1) / ((slot.v.array() / bc2).sqrt() + eps_);
  });
}

TrainState init_train_state(const TrainConfig& config) {
  config.validate();
  TrainState s;
  s.config = config;
  s.model = init_model(config.encoder, config.psm, config.psm_dim, config.seed);
  s.optimizer = AdamW(config.beta1, config.beta2, config.adam_eps, config.weight_decay);
  return s;
}

std::vector<int> seen_label_map(const Vocabulary& vocab, const std::vector<std::string>& seen) {
  std::vector<int> map(vocab.size(), -1);
  if (seen.empty()) {
    std::iota(map.begin(), map.end(), 0);
    return map;
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    auto idx = vocab.index_of(seen[i]);
    if (!idx) throw TrainError("seen category '" + seen[i] + "' is not in the vocabulary");
    map[*idx] = static_cast<int>(i);
  }
  return map;
}

double batch_gradients(const Model& model, const std::vector<const PreparedSample*>& batch, const Mat& text, bool use_psm,
                       Model& grads, bool all_weight_grads) {
  grads = model.zeros_like();
  std::size_t total_masks = 0;
  for (const auto* s : batch) total_masks += s->labels.size();
  if (total_masks == 0) throw TrainError("batch holds no masks");
  BackwardOptions options;
  options.all_weight_grads = all_weight_grads;
  double loss = 0.0;
  for (const auto* s : batch) {
    const double w = static_cast<double>(s->labels.size()) / static_cast<double>(total_masks);
    loss += w * loss_and_gradients(model, *s, text, use_psm, w, grads, options).loss;
  }
  return loss;
}

std::string metrics_csv_header() { return "step,lr,loss,val_maskAcc"; }

std::string metrics_csv_row(const MetricsRow& row) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,", row.step, row.lr, row.loss);
  std::string out = buf;
  if (row.val_mask_acc) {
    std::snprintf(buf, sizeof(buf), "%.6f", *row.val_mask_acc);
    out += buf;
  }
  return out;
}

TrainResult train(TrainState& state, const Dataset& dataset, const TextEmbeddings& text,
                  const std::function<void(const MetricsRow&)>& on_row, int stop_step) {
  const auto& cfg = state.config;
  cfg.validate();
  require_vocab_match(text, dataset.vocab);
  const auto label_map = seen_label_map(dataset.vocab, cfg.seen_categories);
  std::vector<int> seen_rows;
  for (std::size_t k = 0; k < label_map.size(); ++k) {
    if (label_map[k] >= 0) seen_rows.push_back(static_cast<int>(k));
  }
  // seen_rows is ordered by vocabulary index; training labels follow the seen list order.
  std::vector<int> train_rows(seen_rows.size());
  for (int k : seen_rows) train_rows[static_cast<std::size_t>(label_map[static_cast<std::size_t>(k)])] = k;
  const Mat train_text = select_rows(text.values, train_rows);

  const auto train_samples = prepare_samples(dataset.split("train"), cfg.encoder.grid, cfg.prior, label_map);
  if (train_samples.empty()) throw TrainError("no training samples survive the category filter");
  auto val_refs = dataset.split("val");
  if (cfg.val_limit > 0 && val_refs.size() > static_cast<std::size_t>(cfg.val_limit)) val_refs.resize(static_cast<std::size_t>(cfg.val_limit));
  const auto val_samples = prepare_samples(val_refs, cfg.encoder.grid);

  const auto trainable = trainable_set(state.model, cfg.full_encoder);
  auto lr_for_step = [&](int step) { return cosine_lr(cfg.base_lr, step, cfg.total_steps); };

  BatchSampler sampler(train_samples.size(), cfg.seed);
  TrainResult result;
  Model grads;
  const int end = stop_step > 0 ? std::min(stop_step, cfg.total_steps) : cfg.total_steps;
  for (int step = state.step; step < end; ++step) {
    std::vector<const PreparedSample*> batch;
    for (int i = 0; i < cfg.batch_size; ++i) {
      batch.push_back(&train_samples[sampler.at(static_cast<std::uint64_t>(step) * cfg.batch_size + i)]);
    }
    const double loss = batch_gradients(state.model, batch, train_text, cfg.use_psm, grads, cfg.full_encoder);
    if (!std::isfinite(loss)) {
      result.diverged = true;
      break;
    }
    const double lr = lr_for_step(step);
    state.optimizer.step(state.model, grads, trainable,
                         [&](const std::string& name) { return !cfg.full_encoder && is_query_value_param(name) ? lr * cfg.qv_lr_multiplier : lr; });
    state.step = step + 1;

    MetricsRow row{state.step, lr, loss, std::nullopt};
    const bool last = state.step == cfg.total_steps;
    if (!val_samples.empty() && ((cfg.eval_every > 0 && state.step % cfg.eval_every == 0) || last)) {
      row.val_mask_acc = mask_accuracy(state.model, text.values, val_samples, cfg.use_psm);
    }
    result.rows.push_back(row);
    if (on_row) on_row(row);
  }
  return result;
}

double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / scale;
}

GradCheckReport grad_check(const std::function<double()>& loss, std::vector<GradCheckTarget>& targets, double eps, int coords,
                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  GradCheckReport report;
  for (auto& target : targets) {
    GradCheckEntry entry{target.name, 0.0, 0};
    Mat& value = *target.value;
    std::vector<Eigen::Index> picks(static_cast<std::size_t>(value.size()));
    std::iota(picks.begin(), picks.end(), Eigen::Index{0});
    for (std::size_t i = picks.size(); i > 1; --i) std::swap(picks[i - 1], picks[rng() % i]);
    if (picks.size() > static_cast<std::size_t>(coords)) picks.resize(static_cast<std::size_t>(coords));
    for (auto idx : picks) {
      const double saved = value.data()[idx];
      value.data()[idx] = saved + eps;
      const double up = loss();
      value.data()[idx] = saved - eps;
      const double down = loss();
      value.data()[idx] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      entry.max_rel_error = std::max(entry.max_rel_error, relative_error(target.analytic.data()[idx], numeric));
      ++entry.coordinates;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(entry);
  }
  return report;
}

GradCheckReport grad_check_model(Model& model, PreparedSample& sample, const Mat& text, bool use_psm,
                                 const std::vector<std::string>& names, double eps, int coords, std::uint64_t seed) {
  Model grads = model.zeros_like();
  Mat d_patches;
  loss_and_gradients(model, sample, text, use_psm, 1.0, grads, BackwardOptions{true}, &d_patches);
  std::map<std::string, Mat*> value_of;
  std::map<std::string, const Mat*> grad_of;
  model.for_each([&](const std::string& n, Mat& m) { value_of[n] = &m; });
  grads.for_each([&](const std::string& n, const Mat& m) { grad_of[n] = &m; });
  std::vector<GradCheckTarget> targets;
  for (const auto& name : names) {
    if (name == "patches") {
      targets.push_back({name, &sample.patches, d_patches});
      continue;
    }
    auto it = value_of.find(name);
    if (it == value_of.end()) throw TrainError("grad_check: unknown tensor '" + name + "'");
    targets.push_back({name, it->second, *grad_of.at(name)});
  }
  return grad_check([&] { return loss_only(model, sample, text, use_psm); }, targets, eps, coords, seed);
}

void save_checkpoint(const std::filesystem::path& dir, const TrainState& state) {
  std::filesystem::create_directories(dir / "tensors");
  json tensors = json::array();
  auto put = [&](const std::string& name, const Mat& m) {
    const std::string file = "tensors/" + name + ".mcpp";
    write_tensor(dir / file, to_tensor(m));
    tensors.push_back({{"name", name}, {"file", file}, {"dims", {m.rows(), m.cols()}}});
  };
  state.model.for_each(put);
  for (const auto& [name, slot] : state.optimizer.slots()) {
    put("adam.m." + name, slot.m);
    put("adam.v." + name, slot.v);
  }
  json manifest = {{"format", "maskclip-checkpoint"},
                   {"version", 1},
                   {"step", state.step},
                   {"adam_steps", state.optimizer.steps_taken()},
                   {"config", config_to_json(state.config)},
                   {"config_digest", config_digest(state.config)},
                   {"tensors", tensors}};
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw CheckpointError("cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(2) << '\n';
}

TrainState load_checkpoint(const std::filesystem::path& dir) {
  json manifest;
  {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw CheckpointError("missing " + (dir / "manifest.json").string());
    try {
      manifest = json::parse(f);
    } catch (const json::exception& e) {
      throw CheckpointError((dir / "manifest.json").string() + ": " + e.what());
    }
  }
  const auto config = config_from_json(manifest.at("config"));
  if (config_digest(config) != manifest.at("config_digest").get<std::string>()) {
    throw CheckpointError(dir.string() + ": config digest does not match the stored config");
  }
  TrainState state = init_train_state(config);
  state.step = manifest.at("step").get<int>();
  state.optimizer.set_steps_taken(manifest.value("adam_steps", 0LL));

  std::map<std::string, Mat> loaded;
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    try {
      loaded[name] = to_matrix(read_tensor(dir / entry.at("file").get<std::string>()));
    } catch (const TensorFileError& e) {
      throw CheckpointError("tensor '" + name + "': " + e.what());
    }
  }
  state.model.for_each([&](const std::string& name, Mat& m) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols()) {
      throw CheckpointError("tensor '" + name + "' has the wrong shape");
    }
    m = it->second;
  });
  for (const auto& [name, m] : loaded) {
    if (name.rfind("adam.m.", 0) == 0) state.optimizer.slots()[name.substr(7)].m = m;
    if (name.rfind("adam.v.", 0) == 0) state.optimizer.slots()[name.substr(7)].v = m;
  }
  return state;
}

void verify_config(const TrainState& state, const TrainConfig& requested, bool allow_mismatch) {
  const auto have = config_digest(state.config);
  const auto want = config_digest(requested);
  if (have == want) return;
  const std::string msg = "checkpoint config digest " + have + " differs from requested config " + want;
  if (!allow_mismatch) throw CheckpointError(msg + " (pass the override flag to continue)");
  std::cerr << "warning: " << msg << '\n';
}

}  // namespace maskclip
