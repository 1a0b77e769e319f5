#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "gaussproto/dataset.hpp"
#include "gaussproto/image.hpp"

namespace gp = gaussproto;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("gaussproto_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string file_bytes(const fs::path& p) { return gp::read_text_file(p); }

}  // namespace

TEST(Png, RgbRoundTripWithText) {
  const auto dir = scratch("png");
  gp::Image img(5, 3, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = std::uint8_t(i * 7);
  gp::write_png(dir / "a.png", img, {{"Caption", "class 1, score -0.5"}});
  const auto back = gp::read_png_full(dir / "a.png");
  EXPECT_EQ(back.image, img);
  EXPECT_EQ(back.text.at("Caption"), "class 1, score -0.5");
  fs::remove_all(dir);
}

TEST(Png, SixteenBitValues) {
  const auto dir = scratch("png16");
  std::vector<int> v{0, 1, 300, 65535, 12, 7};
  gp::write_png16(dir / "s.png", 3, 2, v);
  EXPECT_EQ(gp::read_png_full(dir / "s.png").values16, v);
  fs::remove_all(dir);
}

TEST(Png, MissingFile) { EXPECT_THROW(gp::read_png("/nonexistent/x.png"), gp::IoError); }

TEST(Synthetic, DeterministicAndBinaryMasks) {
  gp::SyntheticOptions opt;
  opt.count = 10;
  opt.seed = 7;
  const auto a = gp::generate_synthetic(opt), b = gp::generate_synthetic(opt);
  ASSERT_EQ(a.train.size() + a.val.size(), 10u);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train.samples[i].image, b.train.samples[i].image);
    EXPECT_EQ(a.train.samples[i].mask, b.train.samples[i].mask);
  }
  const auto d1 = scratch("gen1"), d2 = scratch("gen2");
  gp::write_dataset(d1, a);
  gp::write_dataset(d2, b);
  for (const auto& e : fs::recursive_directory_iterator(d1)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), d1);
    EXPECT_EQ(file_bytes(e.path()), file_bytes(d2 / rel)) << rel;
  }
  std::set<int> values;
  for (const auto& name : gp::read_manifest(d1 / "train.txt")) {
    for (auto v : gp::read_png(d1 / "masks" / name).pixels) values.insert(v);
  }
  EXPECT_TRUE(values.size() <= 2 && !values.empty());
  for (int v : values) EXPECT_TRUE(v == 0 || v == 255);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Synthetic, EveryImageHasFruitAndBackground) {
  for (int difficulty = 0; difficulty <= 2; ++difficulty) {
    gp::SyntheticOptions opt;
    opt.count = 20;
    opt.difficulty = difficulty;
    const auto ds = gp::generate_synthetic(opt);
    for (const auto& s : ds.train.samples) {
      std::size_t fg = 0;
      for (int v : s.mask) fg += v;
      EXPECT_GT(fg, 50u);
      EXPECT_LT(fg, s.mask.size());
    }
  }
}

TEST(Dataset, LoadRoundTripAndValidation) {
  gp::SyntheticOptions opt;
  opt.count = 5;
  const auto ds = gp::generate_synthetic(opt);
  const auto root = scratch("load");
  gp::write_dataset(root, ds);
  const auto train = gp::load_split(root, "train");
  ASSERT_EQ(train.size(), ds.train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    EXPECT_EQ(train.samples[i].image, ds.train.samples[i].image);
    EXPECT_EQ(train.samples[i].mask, ds.train.samples[i].mask);
  }
  const std::string victim = ds.train.samples[1].name;
  fs::remove(root / "masks" / victim);
  try {
    gp::load_split(root, "train");
    FAIL() << "expected a validation error";
  } catch (const gp::IoError& e) {
    EXPECT_NE(std::string(e.what()).find(victim), std::string::npos);
  }
  EXPECT_THROW(gp::load_split(root, "test"), gp::IoError);
  fs::remove_all(root);
}

TEST(Dataset, TilingCoversLargeImages) {
  gp::Dataset ds;
  gp::Sample s;
  s.name = "big";
  s.image = gp::Image(10, 7, 3);
  for (std::size_t i = 0; i < s.image.pixels.size(); ++i) s.image.pixels[i] = std::uint8_t(i);
  s.mask.assign(70, 0);
  s.mask[69] = 1;
  ds.samples.push_back(s);
  const auto tiles = gp::tile_dataset(ds, 4);
  EXPECT_EQ(tiles.size(), 3u * 2u);
  EXPECT_EQ(tiles.samples.back().mask.back(), 1);
  EXPECT_EQ(tiles.samples.back().image.at(3, 3, 2), s.image.at(6, 9, 2));
  EXPECT_THROW(gp::tile_dataset(ds, 8), gp::SizeNotDivisible);
}
