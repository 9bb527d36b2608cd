#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskclip/tensor_file.hpp"

namespace maskclip {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Vocabulary {
  std::vector<std::string> names;
  std::vector<std::string> templates{"A photo of {}"};

  /// Throws DataError on duplicate/empty names, no templates, or a template
  /// without exactly one "{}" placeholder.
  void validate() const;
  std::size_t size() const { return names.size(); }
  std::optional<std::size_t> index_of(const std::string& name) const;
  /// Substitutes `name` into template `t`.
  std::string expand(std::size_t t, const std::string& name) const;
};

struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major

  std::uint8_t at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

/// One image with Q instance masks and their category indices.
struct SegmentationSample {
  std::string id;
  std::string split;
  RgbImage image;
  std::vector<Mat> masks;  // each H x W in [0,1]
  std::vector<int> labels;
};

struct Dataset {
  Vocabulary vocab;
  std::vector<SegmentationSample> samples;

  std::vector<const SegmentationSample*> split(const std::string& name) const;
};

/// Soft masks pooled onto the token grid, one row per mask (Q x N).
struct TokenMaskSet {
  Mat values;

  Eigen::Index count() const { return values.rows(); }
};

struct GridShape {
  int rows = 16;
  int cols = 16;

  int cells() const { return rows * cols; }
};

struct PooledMask {
  Eigen::RowVectorXd cells;
  bool empty = false;  // every cell is zero; caller should drop the instance
};

/// Area-weighted average of the mask over each grid cell's pixel footprint.
PooledMask mask_to_token_grid(const Mat& mask, GridShape grid);

/// Pools every mask of a sample; throws if any pooled row is empty.
TokenMaskSet token_masks(const std::vector<Mat>& masks, GridShape grid);

struct ColorSpec {
  std::string name;
  std::array<int, 3> rgb{};
};

struct SyntheticDatasetSpec {
  int n_train = 200;
  int n_val = 50;
  int image_size = 64;
  std::vector<std::string> shapes{"disk", "square"};
  std::vector<ColorSpec> colors{{"red", {220, 40, 40}}, {"blue", {40, 60, 220}}};
  int min_shapes = 1;
  int max_shapes = 3;
  std::uint64_t seed = 0;

  void validate() const;
  /// Category names in shape-major order: "<color> <shape>".
  std::vector<std::string> category_names() const;
};

SyntheticDatasetSpec parse_dataset_spec(const std::string& json_text);
std::string dataset_spec_to_json(const SyntheticDatasetSpec& spec);

/// Colors known by name when a spec lists only names.
std::optional<ColorSpec> named_color(const std::string& name);

struct GenerationSummary {
  std::size_t train_samples = 0;
  std::size_t val_samples = 0;
  std::size_t dropped_instances = 0;
  std::vector<std::string> categories;
};

/// Renders the dataset into `out` (images/, masks/, index.json, vocab.txt).
GenerationSummary generate_synthetic_dataset(const SyntheticDatasetSpec& spec, const std::filesystem::path& out);

Dataset load_dataset(const std::filesystem::path& dir);

/// Per-pixel category index, -1 where no mask covers the pixel (void).
std::vector<int> semantic_raster(const SegmentationSample& sample);

void write_ppm(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);
void write_pgm16(const std::filesystem::path& path, int height, int width, const std::vector<std::uint16_t>& values);
std::vector<std::uint16_t> read_pgm16(const std::filesystem::path& path, int& height, int& width);

/// Image as non-overlapping p x p patches, one row per patch (N x 3p^2),
/// channel values mapped from [0,255] to roughly zero-mean unit scale.
Mat image_to_patches(const RgbImage& image, GridShape grid);

/// Minimum bounding rectangle of the mask's >= 0.5 support.
Mat box_prior(const Mat& mask);

}  // namespace maskclip
