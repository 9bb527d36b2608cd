#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "maskclip/data.hpp"
#include "maskclip/tensor_file.hpp"

namespace maskclip {

/// K x D text embedding matrix with unit rows, bound to one vocabulary.
struct TextEmbeddings {
  Mat values;
  std::string vocab_hash;
};

/// 64-bit FNV-1a digest of names and templates, hex encoded.
std::string vocabulary_hash(const Vocabulary& vocab);

/// Deterministic stand-in text encoder: each template-expanded prompt seeds a
/// Gaussian draw; prompts are averaged per category and L2-normalized.
TextEmbeddings toy_encode(const Vocabulary& vocab, int dim, std::uint64_t seed);

/// Writes `path` (TensorFile) and `path`.json (names, templates, hash).
void save_text_embeddings(const std::filesystem::path& path, const TextEmbeddings& emb, const Vocabulary& vocab,
                          std::uint64_t seed);

TextEmbeddings load_text_embeddings(const std::filesystem::path& path, const Vocabulary& vocab);

/// Throws unless `emb` was produced for `vocab` (or `force` is set).
void require_vocab_match(const TextEmbeddings& emb, const Vocabulary& vocab, bool force = false);

}  // namespace maskclip
