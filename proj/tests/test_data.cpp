#include <doctest.h>

#include <fstream>
#include <map>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "maskclip/data.hpp"
#include "test_util.hpp"

using namespace maskclip;

namespace {

SyntheticDatasetSpec tiny_spec() {
  SyntheticDatasetSpec spec;
  spec.n_train = 2;
  spec.n_val = 0;
  spec.shapes = {"disk"};
  spec.colors = {{"red", {220, 40, 40}}};
  spec.image_size = 32;
  spec.seed = 3;
  return spec;
}

std::map<std::string, std::string> read_tree(const std::filesystem::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream f(e.path(), std::ios::binary);
    files[std::filesystem::relative(e.path(), root).string()] = {std::istreambuf_iterator<char>(f), {}};
  }
  return files;
}

}  // namespace

TEST_CASE("vocabulary validation") {
  Vocabulary v{{"cat", "dog"}};
  CHECK_NOTHROW(v.validate());
  CHECK(v.expand(0, "cat") == "A photo of cat");
  CHECK(v.index_of("dog") == 1u);
  CHECK_THROWS_AS((Vocabulary{{"cat", "cat"}}.validate()), DataError);
  CHECK_THROWS_AS((Vocabulary{{"cat", ""}}.validate()), DataError);
  CHECK_THROWS_AS((Vocabulary{{"cat"}, {"no placeholder"}}.validate()), DataError);
  CHECK_THROWS_AS((Vocabulary{{"cat"}, {"{} and {}"}}.validate()), DataError);
  CHECK_THROWS_AS((Vocabulary{{"cat"}, {}}.validate()), DataError);
}

TEST_CASE("single-category dataset") {
  testing::TempDir dir("data");
  const auto summary = generate_synthetic_dataset(tiny_spec(), dir.path());
  CHECK(summary.train_samples == 2);
  CHECK(summary.categories == std::vector<std::string>{"red disk"});
  const auto ds = load_dataset(dir.path());
  CHECK(ds.samples.size() == 2);
  CHECK(ds.vocab.size() == 1);
  CHECK(ds.split("train").size() == 2);
}

TEST_CASE("generation is byte-identical for the same spec and seed") {
  testing::TempDir a("data");
  testing::TempDir b("data");
  auto spec = tiny_spec();
  spec.n_val = 3;
  spec.shapes = {"disk", "square", "triangle"};
  generate_synthetic_dataset(spec, a.path());
  generate_synthetic_dataset(spec, b.path());
  const auto ta = read_tree(a.path());
  CHECK(ta.size() == 2 * 5 + 2);
  CHECK(ta == read_tree(b.path()));
}

TEST_CASE("vocab.txt holds the shape x color cross product") {
  testing::TempDir dir("data");
  auto spec = tiny_spec();
  spec.shapes = {"disk", "square"};
  spec.colors = {{"red", {220, 40, 40}}, {"blue", {40, 60, 220}}};
  generate_synthetic_dataset(spec, dir.path());
  std::ifstream f(dir / "vocab.txt");
  std::vector<std::string> lines;
  for (std::string line; std::getline(f, line);) lines.push_back(line);
  // enumerate: for each shape, for each color
  std::vector<std::string> expected;
  for (const auto& s : spec.shapes) {
    for (const auto& c : spec.colors) expected.push_back(c.name + " " + s);
  }
  CHECK(lines.size() == 4);
  CHECK(lines == expected);
}

TEST_CASE("spec errors") {
  testing::TempDir dir("data");
  auto spec = tiny_spec();
  spec.shapes.clear();
  CHECK_THROWS_AS(generate_synthetic_dataset(spec, dir.path()), DataError);
  spec = tiny_spec();
  spec.colors.clear();
  CHECK_THROWS_AS(generate_synthetic_dataset(spec, dir.path()), DataError);
  // a regular file where the directory should go
  std::ofstream(dir / "blocker") << "x";
  CHECK_THROWS_AS(generate_synthetic_dataset(tiny_spec(), dir / "blocker"), DataError);
  CHECK_THROWS_AS(parse_dataset_spec(R"({"colors": ["no-such-color"]})"), DataError);
  const auto parsed = parse_dataset_spec(R"({"n_train": 5, "shapes": ["square"], "colors": ["green"], "seed": 9})");
  CHECK(parsed.n_train == 5);
  CHECK(parsed.colors[0].name == "green");
}

TEST_CASE("load reproduces instances and labels from the label raster") {
  testing::TempDir dir("data");
  auto spec = tiny_spec();
  spec.n_train = 12;
  spec.shapes = {"disk", "square", "triangle"};
  spec.colors = {{"red", {220, 40, 40}}, {"blue", {40, 60, 220}}};
  spec.min_shapes = 3;
  spec.max_shapes = 3;
  spec.image_size = 48;
  generate_synthetic_dataset(spec, dir.path());
  const auto ds = load_dataset(dir.path());

  std::ifstream f(dir / "index.json");
  const auto index = nlohmann::json::parse(f);
  REQUIRE(ds.samples.size() == index.at("samples").size());
  bool saw_three = false;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    const auto& entry = index.at("samples")[i];
    REQUIRE(s.masks.size() == entry.at("instances").size());
    std::multiset<int> expect, got(s.labels.begin(), s.labels.end());
    for (const auto& inst : entry.at("instances")) expect.insert(inst.at("category").get<int>());
    CHECK(got == expect);

    // independent decode of the raster
    int h = 0, w = 0;
    const auto owner = read_pgm16(dir / entry.at("mask").get<std::string>(), h, w);
    for (std::size_t q = 0; q < s.masks.size(); ++q) {
      const int id = entry.at("instances")[q].at("id").get<int>();
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const bool on = owner[static_cast<std::size_t>(y * w + x)] == id;
          REQUIRE(s.masks[q](y, x) == (on ? 1.0 : 0.0));
        }
      }
    }
    if (s.masks.size() == 3) saw_three = true;
  }
  CHECK(saw_three);
}

TEST_CASE("every category appears in each split") {
  testing::TempDir dir("data");
  auto spec = tiny_spec();
  spec.n_train = 6;
  spec.n_val = 6;
  spec.shapes = {"disk", "square", "triangle"};
  spec.colors = {{"red", {220, 40, 40}}, {"blue", {40, 60, 220}}};
  generate_synthetic_dataset(spec, dir.path());
  const auto ds = load_dataset(dir.path());
  for (const char* split : {"train", "val"}) {
    std::set<int> cats;
    for (const auto* s : ds.split(split)) cats.insert(s->labels.begin(), s->labels.end());
    CHECK(cats.size() == 6);
  }
}

TEST_CASE("corrupted PGM header names the file") {
  testing::TempDir dir("data");
  generate_synthetic_dataset(tiny_spec(), dir.path());
  {
    std::ofstream f(dir / "masks" / "0001.pgm", std::ios::binary | std::ios::trunc);
    f << "P5\n32 xx\n65535\n";
  }
  CHECK_THROWS_WITH_AS(load_dataset(dir.path()), doctest::Contains("0001.pgm"), DataError);
}

TEST_CASE("label outside the vocabulary is reported with the sample id") {
  testing::TempDir dir("data");
  generate_synthetic_dataset(tiny_spec(), dir.path());
  nlohmann::json index;
  {
    std::ifstream f(dir / "index.json");
    index = nlohmann::json::parse(f);
  }
  index["samples"][1]["instances"][0]["category"] = 7;
  std::ofstream(dir / "index.json", std::ios::trunc) << index.dump();
  CHECK_THROWS_WITH_AS(load_dataset(dir.path()), doctest::Contains("sample 0001"), DataError);
}

TEST_CASE("token grid pooling by hand") {
  const GridShape g22{2, 2};
  SUBCASE("constant mask") {
    const auto p = mask_to_token_grid(Mat::Ones(7, 5), {3, 4});
    CHECK((p.cells.array() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK_FALSE(p.empty);
  }
  SUBCASE("top-left quadrant") {
    Mat m = Mat::Zero(4, 4);
    m.topLeftCorner(2, 2).setOnes();
    const auto p = mask_to_token_grid(m, g22);
    CHECK(p.cells(0) == doctest::Approx(1.0));
    CHECK(p.cells(1) == doctest::Approx(0.0));
    CHECK(p.cells(2) == doctest::Approx(0.0));
    CHECK(p.cells(3) == doctest::Approx(0.0));
  }
  SUBCASE("3x3 onto 2x2 keeps mass") {
    const auto p = mask_to_token_grid(Mat::Ones(3, 3), g22);
    for (int i = 0; i < 4; ++i) {
      CHECK(p.cells(i) > 0.0);
      CHECK(p.cells(i) <= 1.0);
    }
    CHECK(p.cells.sum() * 2.25 == doctest::Approx(9.0).epsilon(1e-12));
  }
  SUBCASE("empty mask is flagged") {
    CHECK(mask_to_token_grid(Mat::Zero(8, 8), g22).empty);
    CHECK_THROWS_AS(token_masks({Mat::Zero(8, 8)}, g22), DataError);
  }
}

TEST_CASE("token grid pooling conserves mass on random masks") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const auto h = 1 + static_cast<Eigen::Index>(rng() % 40);
    const auto w = 1 + static_cast<Eigen::Index>(rng() % 40);
    const GridShape grid{1 + static_cast<int>(rng() % 9), 1 + static_cast<int>(rng() % 9)};
    Mat m(h, w);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = unit(rng);
    const auto p = mask_to_token_grid(m, grid);
    const double cell_area = static_cast<double>(h) / grid.rows * static_cast<double>(w) / grid.cols;
    CHECK(std::abs(p.cells.sum() * cell_area - m.sum()) <= 1e-9);
  }
}

TEST_CASE("patches and box priors") {
  RgbImage img{4, 4, std::vector<std::uint8_t>(48, 0)};
  img.pixels[(1 * 4 + 2) * 3 + 1] = 255;  // green at (y=1, x=2)
  const Mat patches = image_to_patches(img, {2, 2});
  REQUIRE(patches.rows() == 4);
  REQUIRE(patches.cols() == 12);
  // patch (0,1), local pixel (1,0), channel 1
  CHECK(patches(1, (1 * 2 + 0) * 3 + 1) == doctest::Approx(2.0));
  CHECK(patches(0, 0) == doctest::Approx(-2.0));
  CHECK_THROWS_AS(image_to_patches(img, {3, 3}), DataError);

  Mat m = Mat::Zero(6, 6);
  m(1, 2) = 1.0;
  m(4, 3) = 1.0;
  const Mat box = box_prior(m);
  CHECK(box.sum() == doctest::Approx(8.0));
  CHECK(box(2, 2) == 1.0);
  CHECK(box(0, 2) == 0.0);
}

TEST_CASE("semantic raster marks uncovered pixels void") {
  SegmentationSample s;
  s.image = {2, 2, std::vector<std::uint8_t>(12, 0)};
  Mat a = Mat::Zero(2, 2);
  a(0, 0) = 1;
  s.masks = {a};
  s.labels = {3};
  const auto r = semantic_raster(s);
  CHECK(r == std::vector<int>{3, -1, -1, -1});
}
