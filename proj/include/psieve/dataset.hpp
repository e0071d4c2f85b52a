#pragma once

#include <array>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "psieve/common.hpp"

namespace psieve::data {

constexpr int kImageSide = 32;
constexpr int kChannels = 3;
constexpr int kImageBytes = kImageSide * kImageSide * kChannels;

// 32x32 RGB image, 8-bit channels, row-major interleaved.
struct Image {
  std::array<uint8_t, kImageBytes> pix{};

  uint8_t& at(int row, int col, int ch) { return pix[size_t((row * kImageSide + col) * kChannels + ch)]; }
  uint8_t at(int row, int col, int ch) const { return pix[size_t((row * kImageSide + col) * kChannels + ch)]; }

  // Unit-interval view of a channel value; state stays 8-bit.
  double unit(int row, int col, int ch) const { return at(row, col, ch) / 255.0; }

  bool operator==(const Image& o) const { return pix == o.pix; }
};

inline uint8_t quantize_unit(double v) {
  double s = v * 255.0;
  if (s <= 0.0) return 0;
  if (s >= 255.0) return 255;
  return uint8_t(std::lround(s));
}

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

// One split of a dataset. poison_flags is ground truth bookkeeping; the
// detection pipelines only ever read it for scoring.
struct LabeledDataset {
  std::vector<Image> images;
  std::vector<uint16_t> labels;
  std::vector<uint8_t> poison_flags;
  uint16_t num_classes = 0;
  Split split = Split::train;

  size_t size() const { return images.size(); }

  void check() const {
    if (labels.size() != images.size() || poison_flags.size() != images.size())
      throw DataError("dataset field lengths disagree");
    for (uint16_t l : labels)
      if (l >= num_classes) throw DataError("label out of range");
  }

  bool operator==(const LabeledDataset& o) const {
    return images == o.images && labels == o.labels && poison_flags == o.poison_flags &&
           num_classes == o.num_classes;
  }
};

struct DatasetBundle {
  LabeledDataset train, val, test;
  uint16_t num_classes = 0;
};

// ---------------------------------------------------------------------------
// PSDS container: magic "PSDS", version u16, K u16, N u32, H u8, W u8, then
// N records of (label u16, poison_flag u8, H*W*3 pixel bytes row-major RGB).
// Little-endian throughout.
// ---------------------------------------------------------------------------

constexpr uint16_t kDatasetVersion = 1;

inline void save_dataset_stream(const LabeledDataset& ds, std::ostream& os) {
  ds.check();
  io::write_bytes(os, "PSDS", 4);
  io::write_u16(os, kDatasetVersion);
  io::write_u16(os, ds.num_classes);
  io::write_u32(os, uint32_t(ds.size()));
  io::write_u8(os, uint8_t(kImageSide));
  io::write_u8(os, uint8_t(kImageSide));
  for (size_t i = 0; i < ds.size(); ++i) {
    io::write_u16(os, ds.labels[i]);
    io::write_u8(os, ds.poison_flags[i]);
    io::write_bytes(os, ds.images[i].pix.data(), kImageBytes);
  }
}

inline void save_dataset(const LabeledDataset& ds, const std::string& path) {
  io::atomic_write(path, [&](std::ostream& os) { save_dataset_stream(ds, os); });
}

inline LabeledDataset load_dataset_stream(std::istream& is, Split split = Split::train) {
  io::expect_magic(is, "PSDS");
  io::expect_version(is, kDatasetVersion);
  LabeledDataset ds;
  ds.split = split;
  ds.num_classes = io::read_u16(is, "class count");
  uint32_t n = io::read_u32(is, "record count");
  uint8_t h = io::read_u8(is, "height");
  uint8_t w = io::read_u8(is, "width");
  if (h != kImageSide || w != kImageSide)
    throw FormatError("unsupported image size " + std::to_string(h) + "x" + std::to_string(w) +
                      " at offset 12 (expected 32x32)");
  ds.images.resize(n);
  ds.labels.resize(n);
  ds.poison_flags.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    ds.labels[i] = io::read_u16(is, "record label");
    ds.poison_flags[i] = io::read_u8(is, "record poison flag");
    io::read_bytes(is, ds.images[i].pix.data(), kImageBytes, "record pixels");
  }
  ds.check();
  return ds;
}

inline LabeledDataset load_dataset(const std::string& path, Split split = Split::train) {
  auto is = io::open_input(path);
  return load_dataset_stream(is, split);
}

// Datasets travel as three split files sharing a stem.
inline std::string split_path(const std::string& stem, Split s) {
  return stem + "." + split_name(s) + ".psds";
}

inline void save_bundle(const DatasetBundle& b, const std::string& stem) {
  save_dataset(b.train, split_path(stem, Split::train));
  save_dataset(b.val, split_path(stem, Split::val));
  save_dataset(b.test, split_path(stem, Split::test));
}

inline DatasetBundle load_bundle(const std::string& stem) {
  DatasetBundle b;
  b.train = load_dataset(split_path(stem, Split::train), Split::train);
  b.val = load_dataset(split_path(stem, Split::val), Split::val);
  b.test = load_dataset(split_path(stem, Split::test), Split::test);
  if (b.train.num_classes != b.val.num_classes || b.train.num_classes != b.test.num_classes)
    throw DataError("split files disagree on class count under stem " + stem);
  b.num_classes = b.train.num_classes;
  return b;
}

inline std::vector<size_t> indices_of_class(const LabeledDataset& ds, uint16_t cls) {
  std::vector<size_t> out;
  for (size_t i = 0; i < ds.size(); ++i)
    if (ds.labels[i] == cls) out.push_back(i);
  return out;
}

}  // namespace psieve::data
