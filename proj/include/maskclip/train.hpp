#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskclip/model.hpp"
#include "maskclip/textenc.hpp"

namespace maskclip {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double base_lr = 1e-4;
  double qv_lr_multiplier = 100.0;
  int batch_size = 4;
  int total_steps = 2000;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::vector<std::string> seen_categories;  // empty: train on every category
  PriorType prior = PriorType::kMask;
  PsmVariant psm = PsmVariant::kSimAffine;
  int psm_dim = kDefaultPsmDim;
  bool use_psm = true;  // false trains on raw cosine similarity
  bool full_encoder = false;  // every encoder tensor trainable, uniform lr
  EncoderDims encoder;
  std::uint64_t text_seed = 0;
  int eval_every = 100;  // 0 disables periodic validation
  int val_limit = 0;     // 0: all validation samples

  void validate() const;
};

TrainConfig parse_train_config(const std::string& json_text);
std::string train_config_to_json(const TrainConfig& config);
/// FNV-1a digest of the canonical JSON form.
std::string config_digest(const TrainConfig& config);

/// base_lr * (1 + cos(pi * step / total)) / 2.
double cosine_lr(double base_lr, int step, int total_steps);

/// q/v projection weights and biases of every layer, log_alpha, all PSM
/// tensors (including the logit scale). Everything else stays frozen.
std::vector<std::string> trainable_set(const Model& model, bool full_encoder = false);
bool is_query_value_param(const std::string& name);

class AdamW {
 public:
  struct Slot {
    Mat m;
    Mat v;
  };

  AdamW() = default;
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  /// Decoupled weight decay p *= 1 - lr*wd on tensors with both dims > 1,
  /// then the bias-corrected Adam update. `lr_for` gives each tensor's rate.
  void step(Model& model, const Model& grads, const std::vector<std::string>& names,
            const std::function<double(const std::string&)>& lr_for);

  long long steps_taken() const { return t_; }
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }
  void set_steps_taken(long long t) { t_ = t; }

 private:
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  double weight_decay_ = 0.0;
  long long t_ = 0;
  std::map<std::string, Slot> slots_;
};

struct TrainState {
  TrainConfig config;
  Model model;
  AdamW optimizer;
  int step = 0;
};

TrainState init_train_state(const TrainConfig& config);

struct MetricsRow {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> val_mask_acc;
};

struct TrainResult {
  std::vector<MetricsRow> rows;
  bool diverged = false;
};

/// Maps dataset labels to training labels under the seen-category filter.
std::vector<int> seen_label_map(const Vocabulary& vocab, const std::vector<std::string>& seen);

/// Runs steps state.step .. total_steps-1. On a non-finite loss the state
/// is left at the last good step and `diverged` is set. A positive
/// `stop_step` pauses early; the schedule still spans total_steps.
TrainResult train(TrainState& state, const Dataset& dataset, const TextEmbeddings& text,
                  const std::function<void(const MetricsRow&)>& on_row = {}, int stop_step = 0);

/// Mean batch loss and gradients. Unless all_weight_grads is set, tensors
/// outside the fine-tuning set get exactly zero gradient.
double batch_gradients(const Model& model, const std::vector<const PreparedSample*>& batch, const Mat& text, bool use_psm,
                       Model& grads, bool all_weight_grads = false);

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);

// --- gradient verification ---

/// Below this magnitude the comparison is absolute. Central differences of an
/// O(1) loss carry ~1e-9 round-off, so exactly-zero gradients (the affine
/// head's biases under softmax shift invariance) need a floor this size.
inline constexpr double kGradCheckFloor = 1e-4;

/// |a - n| / max(|a|, |n|, kGradCheckFloor).
double relative_error(double analytic, double numeric);

struct GradCheckTarget {
  std::string name;
  Mat* value;
  Mat analytic;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  int coordinates = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> entries;
};

/// Central differences on up to `coords` random coordinates per target.
GradCheckReport grad_check(const std::function<double()>& loss, std::vector<GradCheckTarget>& targets, double eps, int coords,
                           std::uint64_t seed);

/// Checks the named model tensors (and "patches" for the image input) on one sample.
GradCheckReport grad_check_model(Model& model, PreparedSample& sample, const Mat& text, bool use_psm,
                                 const std::vector<std::string>& names, double eps = 1e-5, int coords = 20,
                                 std::uint64_t seed = 0);

// --- checkpoints: <dir>/manifest.json + <dir>/tensors/<name>.mcpp ---

void save_checkpoint(const std::filesystem::path& dir, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& dir);

/// Refuses (throws) when `requested` differs from the checkpoint's config
/// unless `allow_mismatch`, in which case a warning is printed.
void verify_config(const TrainState& state, const TrainConfig& requested, bool allow_mismatch);

}  // namespace maskclip
