// maskclip: dataset generation, fine-tuning, evaluation and analysis tables.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "maskclip/infer.hpp"
#include "maskclip/psm.hpp"
#include "maskclip/textenc.hpp"
#include "maskclip/train.hpp"

namespace fs = std::filesystem;
using namespace maskclip;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw UsageError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(f), {}};
}

// Text embeddings: an explicit file wins, otherwise the toy encoder with the
// run's text seed.
TextEmbeddings text_for(const Dataset& ds, const TrainConfig& cfg, const std::string& text_path) {
  if (!text_path.empty()) return load_text_embeddings(text_path, ds.vocab);
  return toy_encode(ds.vocab, cfg.encoder.embed_dim, cfg.text_seed);
}

int cmd_gen_data(const std::string& spec_path, const std::string& out, bool dry_run) {
  const auto spec = parse_dataset_spec(slurp(spec_path));
  const auto cats = spec.category_names();
  if (dry_run) {
    std::cout << "plan: " << spec.n_train << " train + " << spec.n_val << " val images, " << spec.image_size << "x"
              << spec.image_size << " px, " << cats.size() << " categories -> " << out << "\n";
    for (const auto& c : cats) std::cout << "  " << c << "\n";
    return 0;
  }
  const auto summary = generate_synthetic_dataset(spec, out);
  std::cout << "categories (" << summary.categories.size() << "):\n";
  for (const auto& c : summary.categories) std::cout << "  " << c << "\n";
  std::cout << "train: " << summary.train_samples << "\nval: " << summary.val_samples
            << "\ndropped instances: " << summary.dropped_instances << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, data, out, psm, text;
  bool resume = false;
  bool allow_mismatch = false;
  int checkpoint_every = 0;
};

int cmd_train(const TrainArgs& a) {
  auto cfg = parse_train_config(slurp(a.config));
  if (!a.psm.empty()) cfg.psm = parse_psm_variant(a.psm);
  const auto ds = load_dataset(a.data);
  const auto text = text_for(ds, cfg, a.text);

  const fs::path out = a.out;
  const fs::path metrics = out / "metrics.csv";
  TrainState state;
  if (a.resume && fs::exists(out / "manifest.json")) {
    state = load_checkpoint(out);
    verify_config(state, cfg, a.allow_mismatch);
    state.config = cfg;
    std::cerr << "resuming at step " << state.step << "\n";
  } else {
    state = init_train_state(cfg);
    fs::create_directories(out);
    std::ofstream(metrics, std::ios::trunc) << metrics_csv_header() << "\n";
  }

  std::ofstream log(metrics, std::ios::app);
  const int every = a.checkpoint_every > 0 ? a.checkpoint_every : (cfg.eval_every > 0 ? cfg.eval_every : cfg.total_steps);
  TrainResult result;
  while (state.step < cfg.total_steps) {
    const int stop = std::min(cfg.total_steps, (state.step / every + 1) * every);
    auto part = train(state, ds, text, [&](const MetricsRow& row) {
      log << metrics_csv_row(row) << "\n" << std::flush;
      if (row.val_mask_acc) std::cerr << "step " << row.step << " loss " << row.loss << " val maskAcc " << *row.val_mask_acc << "\n";
    }, stop);
    if (part.diverged) {
      std::cerr << "error: non-finite loss at step " << state.step + 1 << "; last good checkpoint is step " << state.step
                << "\n";
      return 1;
    }
    save_checkpoint(out, state);
  }
  std::cout << "checkpoint: " << out.string() << " (step " << state.step << ")\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, mode = "maskacc", proposals, use_psm = "on", split = "val", text;
  double gamma = 0.1;
  double void_threshold = 0.0;
  bool gt_masks = false;
};

int cmd_eval(const EvalArgs& a) {
  const auto state = load_checkpoint(a.ckpt);
  const auto ds = load_dataset(a.data);
  const auto text = text_for(ds, state.config, a.text);
  require_vocab_match(text, ds.vocab);
  const bool use_psm = a.use_psm == "on";
  const auto samples = ds.split(a.split);
  if (samples.empty()) throw UsageError("split '" + a.split + "' is empty");

  std::cout << "metric,value\n";
  if (a.mode == "maskacc") {
    const auto prepared = prepare_samples(samples, state.config.encoder.grid);
    std::cout << "maskAcc," << mask_accuracy(state.model, text.values, prepared, use_psm) << "\n";
    return 0;
  }
  if (a.proposals.empty() && !a.gt_masks) throw UsageError("miou mode needs --proposals (or --gt-masks)");
  IouAccumulator acc(ds.vocab.size());
  for (const auto* s : samples) {
    MaskProposalSet props;
    if (a.proposals.empty()) {
      props.masks = s->masks;
    } else {
      props = load_proposals(a.proposals, s->id);
      props.validate(ds.vocab.size());
    }
    auto probs = classify_masks(state.model, text.values, s->image, props.masks, state.config.encoder.grid, use_psm);
    if (!a.proposals.empty()) probs = ensemble(probs, props, a.gamma);
    acc.add(assemble_semantic(props.masks, probs.values, a.void_threshold), semantic_raster(*s));
  }
  const auto rep = acc.report();
  std::cout << "mIoU," << rep.mean << "\n";
  for (std::size_t k = 0; k < rep.per_class.size(); ++k) std::cout << "IoU[" << ds.vocab.names[k] << "]," << rep.per_class[k] << "\n";
  return 0;
}

int cmd_oracle(const std::string& proposals, const std::string& data, const std::string& split) {
  const auto ds = load_dataset(data);
  const auto k = ds.vocab.size();
  IouAccumulator gen(k), oracle(k);
  double total_iou = 0;
  std::size_t matched = 0, count = 0;
  for (const auto* s : ds.split(split)) {
    const auto props = load_proposals(proposals, s->id);
    props.validate(k);
    const auto gt = semantic_raster(*s);
    gen.add(assemble_semantic(props.masks, generator_scores(props, k).probs), gt);
    const auto o = oracle_assign(props.masks, s->masks, s->labels, k);
    oracle.add(o.semantic, gt);
    total_iou += o.total_iou;
    for (int m : o.matched_gt) matched += m >= 0;
    count += props.count();
  }
  const double g = gen.report().mean, o = oracle.report().mean;
  std::cout << "metric,value\n"
            << "generator_mIoU," << g << "\n"
            << "oracle_mIoU," << o << "\n"
            << "gap," << o - g << "\n"
            << "matched_proposals," << matched << "\n"
            << "proposals," << count << "\n"
            << "mean_matched_iou," << (matched ? total_iou / static_cast<double>(matched) : 0.0) << "\n";
  return 0;
}

int cmd_make_proposals(const std::string& data, const std::string& out, const std::string& split, double corrupt,
                       int erosion, std::uint64_t seed) {
  const auto ds = load_dataset(data);
  ProposalFixtureOptions opt;
  opt.label_corruption = corrupt;
  opt.erosion = erosion;
  std::mt19937_64 rng(seed);
  std::size_t n = 0;
  for (const auto* s : ds.split(split)) {
    save_proposals(out, s->id, proposals_from_ground_truth(*s, ds.vocab, opt, rng));
    ++n;
  }
  std::cout << "wrote proposals for " << n << " images to " << out << "\n";
  return 0;
}

int cmd_demo(const std::string& out, const std::string& theta, std::optional<double> lr) {
  auto cfg = canonical_inconsistency_config();
  if (theta == "identity") cfg.theta = Mat::Identity(2, 2);
  if (lr) cfg.learning_rate = *lr;
  const auto rep = demo_inconsistency(cfg);
  std::ostringstream csv;
  csv << "step,s1,s2,r1,r2,s_rank_correct,r_rank_correct\n";
  int step = 0;
  for (const auto& snap : {rep.before, rep.after}) {
    csv << step++ << "," << snap.s1 << "," << snap.s2 << "," << snap.r1 << "," << snap.r2 << ","
        << (snap.s_rank_correct ? "true" : "false") << "," << (snap.r_rank_correct ? "true" : "false") << "\n";
  }
  if (out.empty() || out == "-") {
    std::cout << csv.str();
  } else {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out);
    f << csv.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"maskclip: mask-conditioned CLIP fine-tuning at desk scale"};
  app.require_subcommand(1);

  std::string spec_path, out;
  bool dry_run = false;
  auto* gen = app.add_subcommand("gen-data", "render a synthetic shape dataset");
  gen->add_option("--spec", spec_path, "dataset spec (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out, "output directory")->required();
  gen->add_flag("--dry-run", dry_run, "print the plan without writing");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "fine-tune on ground-truth masks");
  tr->add_option("--config", ta.config, "train config (JSON)")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", ta.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", ta.out, "checkpoint directory")->required();
  tr->add_option("--psm", ta.psm, "sim_affine | embed_left | embed_right")
      ->check(CLI::IsMember({"sim_affine", "embed_left", "embed_right"}));
  tr->add_option("--text", ta.text, "text embeddings (TensorFile); default: toy encoder");
  tr->add_option("--checkpoint-every", ta.checkpoint_every, "steps between checkpoints (default: eval_every)");
  tr->add_flag("--resume", ta.resume, "continue from the checkpoint in --out");
  tr->add_flag("--allow-config-mismatch", ta.allow_mismatch, "resume even if the config digest differs");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "maskAcc or mIoU of a checkpoint");
  ev->add_option("--ckpt", ea.ckpt, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--data", ea.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--mode", ea.mode)->check(CLI::IsMember({"maskacc", "miou"}));
  ev->add_option("--proposals", ea.proposals, "proposal directory (miou)")->check(CLI::ExistingDirectory);
  ev->add_option("--gamma", ea.gamma, "ensemble weight of generator scores")->check(CLI::Range(0.0, 1.0));
  ev->add_option("--use-psm", ea.use_psm)->check(CLI::IsMember({"on", "off"}));
  ev->add_option("--split", ea.split);
  ev->add_option("--text", ea.text, "text embeddings (TensorFile)");
  ev->add_option("--void-threshold", ea.void_threshold);
  ev->add_flag("--gt-masks", ea.gt_masks, "miou on ground-truth masks when no proposals are given");

  std::string props_dir, data_dir, split = "val";
  auto* orc = app.add_subcommand("oracle", "generator-only vs IoU-matched oracle mIoU");
  orc->add_option("--proposals", props_dir)->required()->check(CLI::ExistingDirectory);
  orc->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  orc->add_option("--split", split);

  double corrupt = 0.0;
  int erosion = 0;
  std::uint64_t seed = 0;
  auto* mk = app.add_subcommand("make-proposals", "proposal files derived from ground truth");
  mk->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  mk->add_option("--out", out)->required();
  mk->add_option("--split", split);
  mk->add_option("--corrupt", corrupt, "probability of a wrong generator label")->check(CLI::Range(0.0, 1.0));
  mk->add_option("--erode", erosion, "pixels eroded from each mask")->check(CLI::NonNegativeNumber);
  mk->add_option("--seed", seed);

  std::string theta = "canonical";
  std::optional<double> demo_lr;
  auto* demo = app.add_subcommand("demo-inconsistency", "two-mask toy example of inconsistent alignment");
  demo->add_option("--out", out, "CSV path (default stdout)");
  demo->add_option("--theta", theta)->check(CLI::IsMember({"canonical", "identity"}));
  demo->add_option("--lr", demo_lr);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(spec_path, out, dry_run);
    if (*tr) return cmd_train(ta);
    if (*ev) return cmd_eval(ea);
    if (*orc) return cmd_oracle(props_dir, data_dir, split);
    if (*mk) return cmd_make_proposals(data_dir, out, split, corrupt, erosion, seed);
    if (*demo) return cmd_demo(out, theta, demo_lr);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
