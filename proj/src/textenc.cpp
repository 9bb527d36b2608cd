#include "maskclip/textenc.hpp"

#include <cstdio>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

namespace maskclip {
namespace {

std::uint64_t fnv1a(std::uint64_t h, const std::string& s) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void normalize_rows(Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (!(n > 0.0)) throw DataError("text embedding row " + std::to_string(r) + " has zero norm");
    m.row(r) /= n;
  }
}

}  // namespace

std::string vocabulary_hash(const Vocabulary& vocab) {
  std::uint64_t h = kFnvOffset;
  for (const auto& n : vocab.names) h = fnv1a(h, n + '\n');
  h = fnv1a(h, "--\n");
  for (const auto& t : vocab.templates) h = fnv1a(h, t + '\n');
  return hex64(h);
}

TextEmbeddings toy_encode(const Vocabulary& vocab, int dim, std::uint64_t seed) {
  vocab.validate();
  if (dim < 2) throw DataError("text embedding dimension must be >= 2");
  TextEmbeddings out;
  out.values = Mat::Zero(static_cast<Eigen::Index>(vocab.size()), dim);
  for (std::size_t k = 0; k < vocab.size(); ++k) {
    for (std::size_t t = 0; t < vocab.templates.size(); ++t) {
      std::uint64_t key = fnv1a(kFnvOffset, std::to_string(seed) + '\x1f' + vocab.expand(t, vocab.names[k]));
      std::mt19937_64 rng(key);
      std::normal_distribution<double> normal(0.0, 1.0);
      for (int d = 0; d < dim; ++d) out.values(static_cast<Eigen::Index>(k), d) += normal(rng);
    }
  }
  out.values /= static_cast<double>(vocab.templates.size());
  normalize_rows(out.values);
  out.vocab_hash = vocabulary_hash(vocab);
  return out;
}

void save_text_embeddings(const std::filesystem::path& path, const TextEmbeddings& emb, const Vocabulary& vocab,
                          std::uint64_t seed) {
  write_tensor(path, to_tensor(emb.values));
  nlohmann::json side = {{"names", vocab.names}, {"templates", vocab.templates}, {"seed", seed}, {"vocab_hash", emb.vocab_hash}};
  std::ofstream f(path.string() + ".json", std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string() + ".json");
  f << side.dump(2) << '\n';
}

TextEmbeddings load_text_embeddings(const std::filesystem::path& path, const Vocabulary& vocab) {
  const auto tensor = read_tensor(path);
  if (tensor.dims.size() != 2) throw DataError(path.string() + ": text embeddings must be a K x D matrix");
  if (tensor.dims[0] != vocab.size()) {
    throw DataError(path.string() + ": embeddings have " + std::to_string(tensor.dims[0]) + " rows but the vocabulary has " +
                    std::to_string(vocab.size()) + " names");
  }
  TextEmbeddings out;
  out.values = to_matrix(tensor);
  normalize_rows(out.values);
  out.vocab_hash = vocabulary_hash(vocab);
  return out;
}

void require_vocab_match(const TextEmbeddings& emb, const Vocabulary& vocab, bool force) {
  if (force) return;
  if (static_cast<std::size_t>(emb.values.rows()) != vocab.size() || emb.vocab_hash != vocabulary_hash(vocab)) {
    throw DataError("text embeddings were built for a different vocabulary (hash " + emb.vocab_hash + " vs " +
                    vocabulary_hash(vocab) + ")");
  }
}

}  // namespace maskclip
