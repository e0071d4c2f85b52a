#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "psieve/common.hpp"
#include "psieve/dataset.hpp"
#include "psieve/synth.hpp"
#include "psieve/trigger.hpp"

using namespace psieve;
using namespace psieve::data;

namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  auto dir = fs::temp_directory_path() / "psieve_test_data";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Synth, SplitSizesAndBalance) {
  auto b = generate_synthetic_dataset(8, 200, 7);
  EXPECT_EQ(b.train.size(), 1080u);
  EXPECT_EQ(b.val.size(), 120u);
  EXPECT_EQ(b.test.size(), 400u);
  for (uint16_t c = 0; c < 8; ++c) {
    EXPECT_EQ(indices_of_class(b.train, c).size(), 135u);
    EXPECT_EQ(indices_of_class(b.val, c).size(), 15u);
    EXPECT_EQ(indices_of_class(b.test, c).size(), 50u);
  }
  for (auto* ds : {&b.train, &b.val, &b.test})
    for (uint8_t f : ds->poison_flags) EXPECT_EQ(f, 0);
}

TEST(Synth, DeterministicInSeed) {
  auto a = generate_synthetic_dataset(4, 40, 123);
  auto b = generate_synthetic_dataset(4, 40, 123);
  auto c = generate_synthetic_dataset(4, 40, 124);
  EXPECT_TRUE(a.train == b.train);
  EXPECT_TRUE(a.val == b.val);
  EXPECT_TRUE(a.test == b.test);
  EXPECT_FALSE(a.train == c.train);
}

TEST(Synth, ClassesDifferInAppearance) {
  // Mean channel values of the glyph region should separate class 0 (red
  // disk) from class 2 (cyan-ish triangle) with K=4.
  auto img0 = render_glyph(9, 4, 0, 0);
  auto img2 = render_glyph(9, 4, 2, 0);
  double r0 = 0, r2 = 0, b0 = 0, b2 = 0;
  for (int row = 10; row < 22; ++row)
    for (int col = 10; col < 22; ++col) {
      r0 += img0.at(row, col, 0);
      r2 += img2.at(row, col, 0);
      b0 += img0.at(row, col, 2);
      b2 += img2.at(row, col, 2);
    }
  EXPECT_GT(r0, r2);
  EXPECT_GT(b2, b0);
}

TEST(Synth, RejectsBadParameters) {
  EXPECT_THROW(generate_synthetic_dataset(1, 200, 0), ParameterError);
  EXPECT_THROW(generate_synthetic_dataset(8, 10, 0), ParameterError);
}

TEST(DatasetIO, RoundTripAndRewriteBitIdentical) {
  auto b = generate_synthetic_dataset(3, 24, 5);
  auto p1 = temp_file("rt1.psds");
  auto p2 = temp_file("rt2.psds");
  save_dataset(b.train, p1.string());
  auto back = load_dataset(p1.string(), Split::train);
  EXPECT_TRUE(back == b.train);
  save_dataset(back, p2.string());
  EXPECT_EQ(slurp(p1), slurp(p2));
}

TEST(DatasetIO, BadMagicNamesOffset) {
  auto p = temp_file("badmagic.psds");
  {
    std::ofstream os(p, std::ios::binary);
    os << "XXXX";
    for (int i = 0; i < 16; ++i) os.put(0);
  }
  try {
    load_dataset(p.string());
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos);
  }
}

TEST(DatasetIO, TruncatedPayloadNamesOffset) {
  auto b = generate_synthetic_dataset(2, 20, 5);
  auto p = temp_file("trunc.psds");
  save_dataset(b.test, p.string());
  auto bytes = slurp(p);
  {
    std::ofstream os(p, std::ios::binary);
    os.write(bytes.data(), std::streamsize(bytes.size() / 2));
  }
  try {
    load_dataset(p.string());
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    std::string w = e.what();
    EXPECT_NE(w.find("truncated"), std::string::npos);
    EXPECT_NE(w.find("offset"), std::string::npos);
  }
}

TEST(DatasetIO, VersionMismatchRejected) {
  auto b = generate_synthetic_dataset(2, 20, 5);
  auto p = temp_file("ver.psds");
  save_dataset(b.val, p.string());
  auto bytes = slurp(p);
  bytes[4] = char(99);
  {
    std::ofstream os(p, std::ios::binary);
    os.write(bytes.data(), std::streamsize(bytes.size()));
  }
  EXPECT_THROW(load_dataset(p.string()), FormatError);
}

TEST(DatasetIO, MissingFileThrows) {
  EXPECT_THROW(load_dataset("/nonexistent/nope.psds"), DataError);
}

TEST(DatasetIO, BundleStemConvention) {
  auto b = generate_synthetic_dataset(2, 20, 11);
  auto stem = (temp_file("stem").parent_path() / "bundle_a").string();
  save_bundle(b, stem);
  EXPECT_TRUE(fs::exists(stem + ".train.psds"));
  EXPECT_TRUE(fs::exists(stem + ".val.psds"));
  EXPECT_TRUE(fs::exists(stem + ".test.psds"));
  auto back = load_bundle(stem);
  EXPECT_TRUE(back.train == b.train);
  EXPECT_TRUE(back.val == b.val);
  EXPECT_TRUE(back.test == b.test);
  EXPECT_EQ(back.num_classes, 2);
}

TEST(Trigger, StandardCheckerboardColors) {
  Image img;  // all zero
  apply_standard_trigger(img, 11, 8, 3);
  for (int dr = 0; dr < 3; ++dr)
    for (int dc = 0; dc < 3; ++dc) {
      bool yellow = (dr + dc) % 2 == 0;
      EXPECT_EQ(img.at(11 + dr, 8 + dc, 0), yellow ? 255 : 0);
      EXPECT_EQ(img.at(11 + dr, 8 + dc, 1), 255);
      EXPECT_EQ(img.at(11 + dr, 8 + dc, 2), 0);
    }
  // Neighbours untouched.
  EXPECT_EQ(img.at(10, 8, 1), 0);
  EXPECT_EQ(img.at(11, 11, 1), 0);
  EXPECT_EQ(img.at(14, 8, 1), 0);
}

TEST(Trigger, PlacementStaysInWindow) {
  Rng rng(3);
  for (int s = 1; s <= 3; ++s) {
    std::set<std::pair<int, int>> seen;
    for (int i = 0; i < 2000; ++i) {
      auto [row, col] = sample_standard_placement(rng, s);
      EXPECT_GE(row, kWindowRow0);
      EXPECT_LE(row + s - 1, kWindowRow1);
      EXPECT_GE(col, kWindowCol0);
      EXPECT_LE(col + s - 1, kWindowCol1);
      seen.insert({row, col});
    }
    // Uniform draws should cover every legal cell.
    size_t cells = size_t(kWindowRow1 - kWindowRow0 + 2 - s) * size_t(kWindowCol1 - kWindowCol0 + 2 - s);
    EXPECT_EQ(seen.size(), cells);
  }
}

TEST(Trigger, OutOfWindowRejected) {
  Image img;
  EXPECT_THROW(apply_standard_trigger(img, 10, 8, 3), ParameterError);
  EXPECT_THROW(apply_standard_trigger(img, 11, 7, 3), ParameterError);
  EXPECT_THROW(apply_standard_trigger(img, 19, 8, 3), ParameterError);
  EXPECT_THROW(apply_standard_trigger(img, 11, 21, 3), ParameterError);
  EXPECT_NO_THROW(apply_standard_trigger(img, 18, 20, 3));
  EXPECT_NO_THROW(apply_standard_trigger(img, 20, 22, 1));
}

TEST(Trigger, AmplitudeAddsAndSaturates) {
  Image img;
  img.pix.fill(128);
  apply_amplitude_trigger(img, 100);
  for (int dr = 0; dr < 3; ++dr)
    for (int dc = 0; dc < 3; ++dc) {
      int expect = (dr + dc) % 2 == 0 ? 228 : 28;
      for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(img.at(19 + dr, 19 + dc, ch), expect);
    }
  EXPECT_EQ(img.at(18, 19, 0), 128);
  EXPECT_EQ(img.at(22, 21, 0), 128);
  EXPECT_EQ(img.at(19, 18, 0), 128);

  Image lo;  // all zero: negative cells saturate at 0
  apply_amplitude_trigger(lo, 200);
  EXPECT_EQ(lo.at(19, 20, 0), 0);
  EXPECT_EQ(lo.at(21, 21, 0), 200);

  Image hi;
  hi.pix.fill(255);
  apply_amplitude_trigger(hi, 200);
  EXPECT_EQ(hi.at(21, 21, 0), 255);
  EXPECT_EQ(hi.at(20, 21, 0), 55);
}

TEST(Trigger, SpecValidation) {
  TriggerSpec bad_size{TriggerKind::standard, 4, 255};
  EXPECT_THROW(bad_size.validate(), ParameterError);
  TriggerSpec amp_wrong_size{TriggerKind::amplitude, 2, 128};
  EXPECT_THROW(amp_wrong_size.validate(), ParameterError);
  TriggerSpec amp_zero{TriggerKind::amplitude, 3, 0};
  EXPECT_THROW(amp_zero.validate(), ParameterError);
  TriggerSpec ok{TriggerKind::amplitude, 3, 128};
  EXPECT_NO_THROW(ok.validate());
}

TEST(Rng, DeterministicStreams) {
  Rng a(seed_mix({1, 2, 3}));
  Rng b(seed_mix({1, 2, 3}));
  Rng c(seed_mix({1, 2, 4}));
  bool all_eq = true, any_diff = false;
  for (int i = 0; i < 64; ++i) {
    uint64_t x = a.next_u64(), y = b.next_u64(), z = c.next_u64();
    all_eq = all_eq && x == y;
    any_diff = any_diff || x != z;
  }
  EXPECT_TRUE(all_eq);
  EXPECT_TRUE(any_diff);
}

TEST(Rng, BoundedDrawsCoverRange) {
  Rng rng(99);
  std::set<uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    uint64_t v = rng.next_below(7);
    EXPECT_LT(v, 7u);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 7u);
}
