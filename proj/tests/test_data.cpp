#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "dcsau/data.hpp"
#include "dcsau/ops.hpp"
#include "dcsau/selftest.hpp"

using namespace dcsau;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dcsau_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Sample random_sample(std::size_t h, std::size_t w, Rng& rng) {
  Tensor img(Shape{1, 3, h, w});
  for (auto& v : img.vec()) v = static_cast<float>(rng.below(256)) / 255.0f;
  return {img, random_mask(h, w, 3, rng), "s"};
}

}  // namespace

TEST(Netpbm, KnownBytes) {
  const std::string head = "P6\n2 1\n255\n";
  std::vector<std::uint8_t> buf(head.begin(), head.end());
  for (int b : {255, 0, 51, 0, 0, 0}) buf.push_back(static_cast<std::uint8_t>(b));
  const Tensor t = decode_ppm(buf);
  EXPECT_EQ(t.shape(), (Shape{1, 3, 1, 2}));
  EXPECT_EQ(t.at(0, 0, 0, 0), 1.0f);
  EXPECT_EQ(t.at(0, 2, 0, 0), 0.2f);
}

TEST(Netpbm, CommentsInHeader) {
  const std::string s = "P5 # comment\n2 # w\n1\n255\n\x07\x09";
  const LabelMap m = decode_pgm({s.begin(), s.end()});
  EXPECT_EQ(m.labels, (std::vector<std::uint8_t>{7, 9}));
}

TEST(Netpbm, FileRoundTripsAreBitExact) {
  const fs::path dir = temp_dir("pnm");
  Rng rng(1);
  const Sample s = random_sample(5, 7, rng);
  save_ppm((dir / "a.ppm").string(), s.image);
  save_pgm((dir / "a.pgm").string(), s.mask);
  EXPECT_TRUE(load_ppm((dir / "a.ppm").string()).bit_equal(s.image));
  EXPECT_EQ(load_pgm((dir / "a.pgm").string()), s.mask);
  const auto bytes = pnm::read_file((dir / "a.ppm").string());
  EXPECT_EQ(encode_ppm(decode_ppm(bytes)), bytes);
}

TEST(Netpbm, ErrorsNameByteOffsets) {
  const std::string trunc = "P6\n2 2\n255\nabc";
  try {
    decode_ppm({trunc.begin(), trunc.end()}, "x.ppm");
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected 12 bytes, got 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("byte 11"), std::string::npos) << msg;
  }
  const std::string bad_magic = "P3\n1 1\n255\n";
  EXPECT_THROW(decode_ppm({bad_magic.begin(), bad_magic.end()}), FormatError);
  const std::string bad_max = "P5\n1 1\n65535\n\0\0";
  EXPECT_THROW(decode_pgm({bad_max.begin(), bad_max.end()}), FormatError);
  const std::string no_height = "P5\n1 ";
  EXPECT_THROW(decode_pgm({no_height.begin(), no_height.end()}), FormatError);
  EXPECT_THROW(load_ppm("/nonexistent/x.ppm"), DataError);
}

TEST(MaskBytes, BinaryAndMulticlass) {
  LabelMap raw(1, 3);
  raw.labels = {0, 128, 255};
  EXPECT_EQ(mask_from_bytes(raw, 1).labels, (std::vector<std::uint8_t>{0, 1, 1}));
  EXPECT_THROW(mask_from_bytes(raw, 3), DataError);
  LabelMap bin(1, 2);
  bin.labels = {0, 1};
  EXPECT_EQ(mask_to_bytes(bin, 1).labels, (std::vector<std::uint8_t>{0, 255}));
}

TEST(Resize, SameSizeIsIdentity) {
  Rng rng(2);
  const Sample s = random_sample(8, 8, rng);
  const Sample r = resize(s, 8, 8);
  EXPECT_EQ(r.mask, s.mask);
  EXPECT_LE(max_rel_error(r.image, s.image.cast<double>()), 1e-6);
}

TEST(Resize, ConstantStaysConstant) {
  Sample s{Tensor(Shape{1, 3, 5, 7}, 0.3f), LabelMap(5, 7, 2), "c"};
  const Sample r = resize(s, 13, 3);
  for (float v : r.image.vec()) EXPECT_NEAR(v, 0.3f, 1e-6);
  for (auto v : r.mask.labels) EXPECT_EQ(v, 2);
}

TEST(Resize, DoublingMatchesUpsample) {
  Rng rng(3);
  const Tensor x = random_tensor<float>({1, 3, 5, 6}, rng, 0, 1);
  Graph g(false);
  const Tensor up = upsample2x(g.leaf(x)).value();
  EXPECT_LE(max_rel_error(resize_image(x, 10, 12), up.cast<double>()), 1e-5);
}

TEST(Resize, MaskNeverBlendsLabels) {
  Rng rng(4);
  const Sample s = random_sample(6, 6, rng);
  const std::set<std::uint8_t> orig(s.mask.labels.begin(), s.mask.labels.end());
  const Sample r = resize(s, 17, 11);
  for (auto v : r.mask.labels) EXPECT_TRUE(orig.count(v));
}

TEST(Augment, FlipTwiceIsIdentity) {
  Rng rng(5);
  const Sample s = random_sample(6, 9, rng);
  Sample t = s;
  flip_horizontal(t);
  EXPECT_NE(t.mask, s.mask);
  flip_horizontal(t);
  EXPECT_TRUE(t.image.bit_equal(s.image));
  EXPECT_EQ(t.mask, s.mask);
}

TEST(Augment, RotationCoordinateMaps) {
  Sample s{Tensor(Shape{1, 3, 4, 4}), LabelMap(4, 4), "r"};
  s.mask.at(0, 0) = 1;
  Sample half = s;
  rotate(half, 2);
  EXPECT_EQ(half.mask.at(3, 3), 1);
  Sample quarter = s;
  rotate(quarter, 1);
  EXPECT_EQ(quarter.mask.at(0, 3), 1);
  rotate(quarter, 3);
  EXPECT_EQ(quarter.mask, s.mask);
  Sample wide{Tensor(Shape{1, 3, 2, 4}), LabelMap(2, 4), "w"};
  EXPECT_THROW(rotate(wide, 1), ShapeError);
}

TEST(Augment, CutoutTouchesImageOnly) {
  Sample s{Tensor(Shape{1, 3, 8, 8}, 1.0f), LabelMap(8, 8, 1), "c"};
  cutout(s, 2, 3, cutout_side(8, 8));
  EXPECT_EQ(s.image.at(0, 1, 2, 3), 0.0f);
  EXPECT_EQ(s.image.at(0, 1, 3, 4), 0.0f);
  EXPECT_EQ(s.image.at(0, 1, 4, 5), 1.0f);
  for (auto v : s.mask.labels) EXPECT_EQ(v, 1);
}

TEST(Augment, DeterministicAndShapePreserving) {
  Rng rng(6);
  const Sample s = random_sample(8, 8, rng);
  const Sample wide = random_sample(4, 8, rng);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Sample a = augment(s, seed), b = augment(s, seed);
    EXPECT_TRUE(a.image.bit_equal(b.image));
    EXPECT_EQ(a.mask, b.mask);
    EXPECT_EQ(a.image.shape(), s.image.shape());
    const Sample w = augment(wide, seed, {1.0, 1.0, 1.0});
    EXPECT_EQ(w.image.shape(), wide.image.shape());
    for (auto v : w.mask.labels) EXPECT_LT(v, 3);
  }
}

TEST(Split, TableSizes) {
  for (auto [n, tr, va, te] : std::vector<std::array<std::size_t, 4>>{{612, 441, 110, 61}, {670, 483, 120, 67}}) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("id" + std::to_string(i));
    const Split s = split(ids);
    EXPECT_EQ(s.train.size(), tr);
    EXPECT_EQ(s.valid.size(), va);
    EXPECT_EQ(s.test.size(), te);
  }
}

TEST(Split, PartitionForManySizesAndSeeds) {
  for (std::size_t n = 10; n < 200; n += 7) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      std::vector<std::string> ids;
      for (std::size_t i = 0; i < n; ++i) ids.push_back(std::to_string(i));
      SplitSpec spec;
      spec.seed = seed;
      const Split s = split(ids, spec);
      std::multiset<std::string> all(s.train.begin(), s.train.end());
      all.insert(s.valid.begin(), s.valid.end());
      all.insert(s.test.begin(), s.test.end());
      EXPECT_EQ(all, std::multiset<std::string>(ids.begin(), ids.end()));
    }
  }
  EXPECT_THROW(split({"a", "b"}), DataError);
  SplitSpec bad;
  bad.train = 0.9;
  EXPECT_THROW(split({"a", "b", "c"}, bad), ConfigError);
}

TEST(Synthetic, DeterministicLabelsAndForegroundFraction) {
  const auto a = synth_dataset(12, 32, 48, 3, 5), b = synth_dataset(12, 32, 48, 3, 5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(a[i].image.bit_equal(b[i].image));
    EXPECT_EQ(a[i].mask, b[i].mask);
    std::size_t fg = 0;
    for (auto v : a[i].mask.labels) {
      EXPECT_LT(v, 3);
      fg += v != 0;
    }
    const double frac = static_cast<double>(fg) / (32.0 * 48.0);
    EXPECT_GT(frac, 0.05);
    EXPECT_LT(frac, 0.6);
  }
  for (const auto& s : synth_dataset(4, 16, 16, 1, 1))
    for (auto v : s.mask.labels) EXPECT_LT(v, 2);
  EXPECT_THROW(synth_dataset(1, 20, 16, 1, 1), ShapeError);
}

TEST(Manifest, WriteThenLoad) {
  const fs::path dir = temp_dir("manifest");
  const auto data = synth_dataset(3, 16, 16, 1, 9);
  const std::string path = write_dataset(dir, data, 1);
  const auto entries = load_manifest(path);
  ASSERT_EQ(entries.size(), 3u);
  const Sample s = load_sample(entries[1], 1);
  EXPECT_EQ(s.id, data[1].id);
  EXPECT_EQ(s.mask, data[1].mask);
  EXPECT_LE(max_rel_error(s.image, data[1].image.cast<double>()), 2.0 / 255);

  std::ofstream(dir / "empty.json") << "[]";
  EXPECT_THROW(load_manifest((dir / "empty.json").string()), DataError);
  std::ofstream(dir / "broken.json") << "{";
  EXPECT_THROW(load_manifest((dir / "broken.json").string()), DataError);
}
