#include <fstream>

#include <nlohmann/json.hpp>

#include "maskclip/infer.hpp"

namespace maskclip {

using nlohmann::json;

void save_proposals(const std::filesystem::path& dir, const std::string& id, const MaskProposalSet& set) {
  if (set.masks.empty()) throw InferError("refusing to write an empty proposal set");
  std::filesystem::create_directories(dir);
  const auto h = static_cast<std::uint64_t>(set.masks[0].rows());
  const auto w = static_cast<std::uint64_t>(set.masks[0].cols());
  Tensor stack;
  stack.dims = {set.masks.size(), h, w};
  for (const auto& m : set.masks) stack.values.insert(stack.values.end(), m.data(), m.data() + m.size());
  write_tensor(dir / (id + ".mcpp"), stack);

  json scores = json::array();
  for (Eigen::Index r = 0; r < set.gen_scores.rows(); ++r) {
    std::vector<double> row(set.gen_scores.row(r).data(), set.gen_scores.row(r).data() + set.gen_scores.cols());
    scores.push_back(row);
  }
  json side = {{"id", id}, {"gen_vocab", set.gen_vocab}, {"gen_scores", scores}, {"in_vocab_map", set.in_vocab_map}};
  std::ofstream f(dir / (id + ".json"), std::ios::trunc);
  if (!f) throw InferError("cannot write " + (dir / (id + ".json")).string());
  f << side.dump(2) << '\n';
}

MaskProposalSet load_proposals(const std::filesystem::path& dir, const std::string& id) {
  const auto tensor = read_tensor(dir / (id + ".mcpp"));
  if (tensor.dims.size() != 3) throw InferError((dir / (id + ".mcpp")).string() + ": expected a Q x H x W stack");
  MaskProposalSet set;
  const auto q = tensor.dims[0];
  const auto h = static_cast<Eigen::Index>(tensor.dims[1]);
  const auto w = static_cast<Eigen::Index>(tensor.dims[2]);
  for (std::uint64_t i = 0; i < q; ++i) {
    Mat m(h, w);
    std::copy_n(tensor.values.begin() + static_cast<std::ptrdiff_t>(i * h * w), h * w, m.data());
    set.masks.push_back(std::move(m));
  }
  std::ifstream f(dir / (id + ".json"));
  if (!f) throw InferError("missing " + (dir / (id + ".json")).string());
  try {
    const json side = json::parse(f);
    set.gen_vocab = side.at("gen_vocab").get<std::vector<std::string>>();
    const auto rows = side.at("gen_scores").get<std::vector<std::vector<double>>>();
    set.gen_scores = Mat::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(set.gen_vocab.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != set.gen_vocab.size()) throw InferError("gen_scores row width does not match gen_vocab");
      for (std::size_t c = 0; c < rows[r].size(); ++c) set.gen_scores(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
    if (!side.contains("in_vocab_map")) throw InferError("vocab map missing");
    set.in_vocab_map = side.at("in_vocab_map").get<std::map<std::string, int>>();
  } catch (const json::exception& e) {
    throw InferError((dir / (id + ".json")).string() + ": " + e.what());
  }
  return set;
}

MaskProposalSet proposals_from_ground_truth(const SegmentationSample& sample, const Vocabulary& vocab,
                                            const ProposalFixtureOptions& options, std::mt19937_64& rng) {
  MaskProposalSet set;
  set.gen_vocab = options.gen_vocab.empty() ? vocab.names : options.gen_vocab;
  for (const auto& name : set.gen_vocab) {
    if (auto idx = vocab.index_of(name)) set.in_vocab_map[name] = static_cast<int>(*idx);
  }
  const auto kgen = static_cast<Eigen::Index>(set.gen_vocab.size());
  auto unit = [&rng] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  std::vector<Eigen::RowVectorXd> rows;
  for (std::size_t q = 0; q < sample.masks.size(); ++q) {
    Mat m = options.erosion > 0 ? erode(sample.masks[q], options.erosion) : sample.masks[q];
    if (m.maxCoeff() < 0.5) continue;  // eroded away
    const auto& truth = vocab.names[static_cast<std::size_t>(sample.labels[q])];
    auto pos = std::find(set.gen_vocab.begin(), set.gen_vocab.end(), truth);
    Eigen::Index chosen = pos == set.gen_vocab.end() ? static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(kgen))
                                                     : static_cast<Eigen::Index>(pos - set.gen_vocab.begin());
    if (kgen > 1 && unit() < options.label_corruption) {
      const auto shift = 1 + static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(kgen - 1));
      chosen = (chosen + shift) % kgen;
    }
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Constant(kgen, kgen > 1 ? (1.0 - options.confidence) / static_cast<double>(kgen - 1) : 0.0);
    row(chosen) = kgen > 1 ? options.confidence : 1.0;
    rows.push_back(row);
    set.masks.push_back(std::move(m));
  }
  set.gen_scores.resize(static_cast<Eigen::Index>(rows.size()), kgen);
  for (std::size_t r = 0; r < rows.size(); ++r) set.gen_scores.row(static_cast<Eigen::Index>(r)) = rows[r];
  return set;
}

}  // namespace maskclip
