#include "maskclip/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace maskclip {

using nlohmann::json;

namespace {

std::size_t count_placeholders(const std::string& t) {
  std::size_t n = 0;
  for (auto pos = t.find("{}"); pos != std::string::npos; pos = t.find("{}", pos + 2)) ++n;
  return n;
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

std::string sample_name(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04zu", index);
  return buf;
}

// Reads the next whitespace-delimited header token of a netpbm file,
// skipping '#' comments.
std::string next_token(std::istream& in, const std::string& file) {
  std::string tok;
  while (true) {
    int c = in.get();
    if (c == EOF) throw DataError(file + ": truncated netpbm header");
    if (c == '#') {
      while (c != '\n' && c != EOF) c = in.get();
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
}

int parse_positive(const std::string& tok, const std::string& file) {
  try {
    std::size_t used = 0;
    int v = std::stoi(tok, &used);
    if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw DataError(file + ": malformed netpbm header value '" + tok + "'");
  }
}

struct Shape {
  std::string kind;
  double cx, cy, r;

  bool contains(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    if (kind == "disk") return dx * dx + dy * dy <= r * r;
    if (kind == "square") return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    // upward triangle inscribed in the circle of radius r
    const double top = cy - r;
    const double bottom = cy + 0.5 * r;
    if (y < top || y > bottom) return false;
    const double half = (y - top) / (bottom - top) * (0.866 * r);
    return std::abs(dx) <= half;
  }
};

}  // namespace

void Vocabulary::validate() const {
  if (names.empty()) throw DataError("vocabulary is empty");
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (n.empty()) throw DataError("vocabulary contains an empty name");
    if (!seen.insert(n).second) throw DataError("duplicate vocabulary name '" + n + "'");
  }
  if (templates.empty()) throw DataError("vocabulary has no prompt templates");
  for (const auto& t : templates) {
    if (count_placeholders(t) != 1) throw DataError("template '" + t + "' must contain exactly one {}");
  }
}

std::optional<std::size_t> Vocabulary::index_of(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names.begin());
}

std::string Vocabulary::expand(std::size_t t, const std::string& name) const {
  std::string out = templates.at(t);
  out.replace(out.find("{}"), 2, name);
  return out;
}

std::vector<const SegmentationSample*> Dataset::split(const std::string& name) const {
  std::vector<const SegmentationSample*> out;
  for (const auto& s : samples) {
    if (s.split == name) out.push_back(&s);
  }
  return out;
}

PooledMask mask_to_token_grid(const Mat& mask, GridShape grid) {
  const auto h = static_cast<double>(mask.rows());
  const auto w = static_cast<double>(mask.cols());
  const double cell_h = h / grid.rows;
  const double cell_w = w / grid.cols;
  PooledMask out;
  out.cells = Eigen::RowVectorXd::Zero(grid.cells());
  // Separable overlap weights: pixel row y covers [y, y+1), cell i covers
  // [i*cell_h, (i+1)*cell_h).
  auto overlap = [](double a0, double a1, double b0, double b1) { return std::max(0.0, std::min(a1, b1) - std::max(a0, b0)); };
  Mat row_w = Mat::Zero(grid.rows, mask.rows());
  Mat col_w = Mat::Zero(mask.cols(), grid.cols);
  for (int i = 0; i < grid.rows; ++i) {
    for (Eigen::Index y = 0; y < mask.rows(); ++y) {
      row_w(i, y) = overlap(i * cell_h, (i + 1) * cell_h, static_cast<double>(y), static_cast<double>(y + 1));
    }
  }
  for (int j = 0; j < grid.cols; ++j) {
    for (Eigen::Index x = 0; x < mask.cols(); ++x) {
      col_w(x, j) = overlap(j * cell_w, (j + 1) * cell_w, static_cast<double>(x), static_cast<double>(x + 1));
    }
  }
  Mat pooled = row_w * mask * col_w / (cell_h * cell_w);
  for (int i = 0; i < grid.rows; ++i) {
    for (int j = 0; j < grid.cols; ++j) out.cells(i * grid.cols + j) = std::clamp(pooled(i, j), 0.0, 1.0);
  }
  out.empty = out.cells.maxCoeff() <= 0.0;
  return out;
}

TokenMaskSet token_masks(const std::vector<Mat>& masks, GridShape grid) {
  TokenMaskSet set;
  set.values.resize(static_cast<Eigen::Index>(masks.size()), grid.cells());
  for (std::size_t q = 0; q < masks.size(); ++q) {
    auto pooled = mask_to_token_grid(masks[q], grid);
    if (pooled.empty) throw DataError("mask " + std::to_string(q) + " is empty on the token grid");
    set.values.row(static_cast<Eigen::Index>(q)) = pooled.cells;
  }
  return set;
}

std::optional<ColorSpec> named_color(const std::string& name) {
  static const std::map<std::string, std::array<int, 3>> table = {
      {"red", {220, 40, 40}},   {"green", {40, 190, 60}},  {"blue", {40, 60, 220}},
      {"yellow", {230, 210, 40}}, {"magenta", {200, 50, 200}}, {"cyan", {40, 200, 210}},
      {"white", {235, 235, 235}}, {"orange", {240, 140, 30}},
  };
  auto it = table.find(name);
  if (it == table.end()) return std::nullopt;
  return ColorSpec{name, it->second};
}

void SyntheticDatasetSpec::validate() const {
  if (shapes.empty()) throw DataError("dataset spec: shape list is empty");
  if (colors.empty()) throw DataError("dataset spec: color list is empty");
  for (const auto& s : shapes) {
    if (s != "disk" && s != "square" && s != "triangle") throw DataError("dataset spec: unknown shape '" + s + "'");
  }
  std::set<std::string> color_names;
  for (const auto& c : colors) {
    if (c.name.empty() || !color_names.insert(c.name).second) throw DataError("dataset spec: bad or duplicate color name");
  }
  if (n_train < 0 || n_val < 0 || n_train + n_val == 0) throw DataError("dataset spec: need at least one sample");
  if (image_size < 8) throw DataError("dataset spec: image_size must be >= 8");
  if (min_shapes < 1 || max_shapes < min_shapes) throw DataError("dataset spec: bad shapes_per_image range");
}

std::vector<std::string> SyntheticDatasetSpec::category_names() const {
  std::vector<std::string> out;
  for (const auto& s : shapes) {
    for (const auto& c : colors) out.push_back(c.name + " " + s);
  }
  return out;
}

SyntheticDatasetSpec parse_dataset_spec(const std::string& json_text) {
  SyntheticDatasetSpec spec;
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw DataError(std::string("dataset spec: invalid JSON: ") + e.what());
  }
  try {
    spec.n_train = j.value("n_train", spec.n_train);
    spec.n_val = j.value("n_val", spec.n_val);
    spec.image_size = j.value("image_size", spec.image_size);
    spec.seed = j.value("seed", spec.seed);
    if (j.contains("shapes")) spec.shapes = j.at("shapes").get<std::vector<std::string>>();
    if (j.contains("shapes_per_image")) {
      auto range = j.at("shapes_per_image").get<std::vector<int>>();
      if (range.size() != 2) throw DataError("dataset spec: shapes_per_image must be [min, max]");
      spec.min_shapes = range[0];
      spec.max_shapes = range[1];
    }
    if (j.contains("colors")) {
      spec.colors.clear();
      for (const auto& c : j.at("colors")) {
        if (c.is_string()) {
          auto named = named_color(c.get<std::string>());
          if (!named) throw DataError("dataset spec: unknown color name '" + c.get<std::string>() + "'");
          spec.colors.push_back(*named);
        } else {
          spec.colors.push_back({c.at("name").get<std::string>(), c.at("rgb").get<std::array<int, 3>>()});
        }
      }
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("dataset spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

std::string dataset_spec_to_json(const SyntheticDatasetSpec& spec) {
  json colors = json::array();
  for (const auto& c : spec.colors) colors.push_back({{"name", c.name}, {"rgb", c.rgb}});
  json j = {{"n_train", spec.n_train},
            {"n_val", spec.n_val},
            {"image_size", spec.image_size},
            {"shapes", spec.shapes},
            {"colors", colors},
            {"shapes_per_image", {spec.min_shapes, spec.max_shapes}},
            {"seed", spec.seed}};
  return j.dump(2);
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

RgbImage read_ppm(const std::filesystem::path& path) {
  const auto file = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + file);
  if (next_token(in, file) != "P6") throw DataError(file + ": not a binary PPM (P6)");
  RgbImage img;
  img.width = parse_positive(next_token(in, file), file);
  img.height = parse_positive(next_token(in, file), file);
  if (parse_positive(next_token(in, file), file) != 255) throw DataError(file + ": only maxval 255 is supported");
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw DataError(file + ": truncated pixel data");
  return img;
}

void write_pgm16(const std::filesystem::path& path, int height, int width, const std::vector<std::uint16_t>& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n65535\n";
  std::vector<unsigned char> raw(values.size() * 2);
  for (std::size_t i = 0; i < values.size(); ++i) {
    raw[2 * i] = static_cast<unsigned char>(values[i] >> 8);
    raw[2 * i + 1] = static_cast<unsigned char>(values[i] & 0xff);
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

std::vector<std::uint16_t> read_pgm16(const std::filesystem::path& path, int& height, int& width) {
  const auto file = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + file);
  if (next_token(in, file) != "P5") throw DataError(file + ": not a binary PGM (P5)");
  width = parse_positive(next_token(in, file), file);
  height = parse_positive(next_token(in, file), file);
  if (parse_positive(next_token(in, file), file) != 65535) throw DataError(file + ": expected 16-bit PGM (maxval 65535)");
  std::vector<unsigned char> raw(static_cast<std::size_t>(width) * height * 2);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw DataError(file + ": truncated sample data");
  std::vector<std::uint16_t> values(raw.size() / 2);
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
  }
  return values;
}

GenerationSummary generate_synthetic_dataset(const SyntheticDatasetSpec& spec, const std::filesystem::path& out) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out / "images", ec);
  std::filesystem::create_directories(out / "masks", ec);
  if (ec || !std::filesystem::is_directory(out / "masks")) throw DataError("cannot create dataset directory " + out.string());

  const auto categories = spec.category_names();
  const int n_colors = static_cast<int>(spec.colors.size());
  const int size = spec.image_size;
  std::mt19937_64 rng(spec.seed);
  GenerationSummary summary;
  summary.categories = categories;

  json samples = json::array();
  const int total = spec.n_train + spec.n_val;
  std::size_t split_instance_counter = 0;
  for (int index = 0; index < total; ++index) {
    const bool is_train = index < spec.n_train;
    if (index == spec.n_train) split_instance_counter = 0;
    const std::string name = sample_name(static_cast<std::size_t>(index));

    RgbImage img;
    img.height = img.width = size;
    img.pixels.resize(static_cast<std::size_t>(size) * size * 3);
    const int base = uniform_int(rng, 50, 130);
    std::array<int, 3> tint{uniform_int(rng, -20, 20), uniform_int(rng, -20, 20), uniform_int(rng, -20, 20)};
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        for (int c = 0; c < 3; ++c) {
          int v = base + tint[c] + uniform_int(rng, -25, 25);
          img.pixels[(static_cast<std::size_t>(y) * size + x) * 3 + c] = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
        }
      }
    }

    const int n_shapes = uniform_int(rng, spec.min_shapes, spec.max_shapes);
    std::vector<Shape> shapes;
    std::vector<int> cats;
    for (int s = 0; s < n_shapes; ++s) {
      // Cycle through every category first so each split covers the vocabulary.
      int cat = split_instance_counter < categories.size()
                    ? static_cast<int>(split_instance_counter)
                    : uniform_int(rng, 0, static_cast<int>(categories.size()) - 1);
      ++split_instance_counter;
      Shape shape{spec.shapes[static_cast<std::size_t>(cat / n_colors)], 0, 0, 0};
      for (int attempt = 0; attempt < 20; ++attempt) {
        shape.r = size * (0.12 + 0.10 * uniform01(rng));
        shape.cx = shape.r + uniform01(rng) * (size - 2 * shape.r);
        shape.cy = shape.r + uniform01(rng) * (size - 2 * shape.r);
        bool clear = std::all_of(shapes.begin(), shapes.end(), [&](const Shape& o) {
          return std::hypot(o.cx - shape.cx, o.cy - shape.cy) >= 0.8 * (o.r + shape.r);
        });
        if (clear) break;
      }
      shapes.push_back(shape);
      cats.push_back(cat);
    }

    // Later shapes occlude earlier ones.
    std::vector<std::uint16_t> owner(static_cast<std::size_t>(size) * size, 0);
    for (std::size_t s = 0; s < shapes.size(); ++s) {
      const auto& rgb = spec.colors[static_cast<std::size_t>(cats[s] % n_colors)].rgb;
      std::array<int, 3> jitter{uniform_int(rng, -15, 15), uniform_int(rng, -15, 15), uniform_int(rng, -15, 15)};
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          if (!shapes[s].contains(x + 0.5, y + 0.5)) continue;
          owner[static_cast<std::size_t>(y) * size + x] = static_cast<std::uint16_t>(s + 1);
          for (int c = 0; c < 3; ++c) {
            int v = rgb[c] + jitter[c] + uniform_int(rng, -12, 12);
            img.pixels[(static_cast<std::size_t>(y) * size + x) * 3 + c] = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
          }
        }
      }
    }

    std::vector<std::size_t> visible(shapes.size() + 1, 0);
    for (auto o : owner) ++visible[o];
    std::vector<std::uint16_t> remap(shapes.size() + 1, 0);
    json instances = json::array();
    std::uint16_t next_id = 1;
    for (std::size_t s = 0; s < shapes.size(); ++s) {
      if (visible[s + 1] == 0) {
        std::cerr << "warning: sample " << name << ": instance " << s << " fully occluded, dropped\n";
        ++summary.dropped_instances;
        continue;
      }
      remap[s + 1] = next_id;
      instances.push_back({{"id", next_id}, {"category", cats[s]}, {"name", categories[static_cast<std::size_t>(cats[s])]}});
      ++next_id;
    }
    for (auto& o : owner) o = remap[o];

    write_ppm(out / "images" / (name + ".ppm"), img);
    write_pgm16(out / "masks" / (name + ".pgm"), size, size, owner);
    samples.push_back({{"id", name},
                       {"split", is_train ? "train" : "val"},
                       {"image", "images/" + name + ".ppm"},
                       {"mask", "masks/" + name + ".pgm"},
                       {"instances", instances}});
    (is_train ? summary.train_samples : summary.val_samples)++;
  }

  json index = {{"format", "maskclip-dataset"},
                {"version", 1},
                {"image_size", size},
                {"categories", categories},
                {"spec", json::parse(dataset_spec_to_json(spec))},
                {"samples", samples}};
  {
    std::ofstream f(out / "index.json", std::ios::trunc);
    if (!f) throw DataError("cannot write " + (out / "index.json").string());
    f << index.dump(2) << '\n';
  }
  {
    std::ofstream f(out / "vocab.txt", std::ios::trunc);
    if (!f) throw DataError("cannot write " + (out / "vocab.txt").string());
    for (const auto& c : categories) f << c << '\n';
  }
  return summary;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  {
    std::ifstream f(dir / "vocab.txt");
    if (!f) throw DataError("missing " + (dir / "vocab.txt").string());
    for (std::string line; std::getline(f, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) ds.vocab.names.push_back(line);
    }
  }
  ds.vocab.validate();

  json index;
  {
    std::ifstream f(dir / "index.json");
    if (!f) throw DataError("missing " + (dir / "index.json").string());
    try {
      index = json::parse(f);
    } catch (const json::exception& e) {
      throw DataError((dir / "index.json").string() + ": " + e.what());
    }
  }

  const auto& entries = index.at("samples");
  for (const auto& entry : entries) {
    SegmentationSample sample;
    sample.id = entry.at("id").get<std::string>();
    sample.split = entry.value("split", "train");
    const std::string where = "sample " + sample.id;
    sample.image = read_ppm(dir / entry.at("image").get<std::string>());
    int h = 0;
    int w = 0;
    const auto owner = read_pgm16(dir / entry.at("mask").get<std::string>(), h, w);
    if (h != sample.image.height || w != sample.image.width) throw DataError(where + ": mask and image sizes differ");

    const auto& instances = entry.at("instances");
    std::map<int, std::size_t> slot;
    for (const auto& inst : instances) {
      const int id = inst.at("id").get<int>();
      const int cat = inst.at("category").get<int>();
      if (cat < 0 || static_cast<std::size_t>(cat) >= ds.vocab.size()) {
        throw DataError(where + ": label " + std::to_string(cat) + " out of vocabulary (K=" + std::to_string(ds.vocab.size()) + ")");
      }
      if (id <= 0 || !slot.emplace(id, sample.masks.size()).second) throw DataError(where + ": bad or duplicate instance id");
      sample.masks.push_back(Mat::Zero(h, w));
      sample.labels.push_back(cat);
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const auto v = owner[static_cast<std::size_t>(y) * w + x];
        if (v == 0) continue;
        auto it = slot.find(v);
        if (it == slot.end()) throw DataError(where + ": mask raster references unknown instance " + std::to_string(v));
        sample.masks[it->second](y, x) = 1.0;
      }
    }
    for (std::size_t q = 0; q < sample.masks.size(); ++q) {
      if (sample.masks[q].maxCoeff() < 0.5) throw DataError(where + ": instance " + std::to_string(q) + " has no pixels");
    }
    if (sample.masks.empty()) throw DataError(where + ": no instances");
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

std::vector<int> semantic_raster(const SegmentationSample& sample) {
  const auto h = sample.image.height;
  const auto w = sample.image.width;
  std::vector<int> out(static_cast<std::size_t>(h) * w, -1);
  for (std::size_t q = 0; q < sample.masks.size(); ++q) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (sample.masks[q](y, x) >= 0.5) out[static_cast<std::size_t>(y) * w + x] = sample.labels[q];
      }
    }
  }
  return out;
}

Mat image_to_patches(const RgbImage& image, GridShape grid) {
  if (image.height % grid.rows != 0 || image.width % grid.cols != 0) {
    throw DataError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                    " does not tile into a " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " grid");
  }
  const int ph = image.height / grid.rows;
  const int pw = image.width / grid.cols;
  Mat patches(grid.cells(), 3 * ph * pw);
  for (int gy = 0; gy < grid.rows; ++gy) {
    for (int gx = 0; gx < grid.cols; ++gx) {
      const int row = gy * grid.cols + gx;
      int col = 0;
      for (int y = 0; y < ph; ++y) {
        for (int x = 0; x < pw; ++x) {
          for (int c = 0; c < 3; ++c) {
            patches(row, col++) = (image.at(gy * ph + y, gx * pw + x, c) / 255.0 - 0.5) / 0.25;
          }
        }
      }
    }
  }
  return patches;
}

Mat box_prior(const Mat& mask) {
  Eigen::Index y0 = mask.rows(), y1 = -1, x0 = mask.cols(), x1 = -1;
  for (Eigen::Index y = 0; y < mask.rows(); ++y) {
    for (Eigen::Index x = 0; x < mask.cols(); ++x) {
      if (mask(y, x) >= 0.5) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
    }
  }
  Mat box = Mat::Zero(mask.rows(), mask.cols());
  if (y1 >= 0) box.block(y0, x0, y1 - y0 + 1, x1 - x0 + 1).setOnes();
  return box;
}

}  // namespace maskclip
