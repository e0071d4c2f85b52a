#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>

#include "psieve/common.hpp"
#include "psieve/dataset.hpp"

namespace psieve::data {

// Sticker placement window for the standard trigger: a 10x15 region centred
// in the image, rows 11..20 and cols 8..22 inclusive.
constexpr int kWindowRow0 = 11;
constexpr int kWindowRow1 = 20;
constexpr int kWindowCol0 = 8;
constexpr int kWindowCol1 = 22;

// The amplitude sticker is always 3x3 in the lower-right corner, 10 pixels
// in from each edge: rows and cols 19..21.
constexpr int kAmpRow0 = 19;
constexpr int kAmpCol0 = 19;
constexpr int kAmpSize = 3;

enum class TriggerKind { standard, amplitude };

struct TriggerSpec {
  TriggerKind kind = TriggerKind::standard;
  int size = 3;       // side length of the sticker, 1..3
  int amplitude = 255;  // amplitude kind only, 1..255

  void validate() const {
    if (size < 1 || size > 3)
      throw ParameterError("trigger size must be 1..3, got " + std::to_string(size));
    if (kind == TriggerKind::amplitude) {
      if (size != kAmpSize) throw ParameterError("amplitude trigger is fixed at size 3");
      if (amplitude < 1 || amplitude > 255)
        throw ParameterError("trigger amplitude must be 1..255, got " + std::to_string(amplitude));
    }
  }
};

// Yellow/green checkerboard sticker with its top-left cell at (row,col).
// Parity is local to the sticker: cell (0,0) is yellow, odd cells green.
inline void apply_standard_trigger(Image& img, int row, int col, int size) {
  if (size < 1 || size > 3)
    throw ParameterError("trigger size must be 1..3, got " + std::to_string(size));
  if (row < kWindowRow0 || row + size - 1 > kWindowRow1 || col < kWindowCol0 ||
      col + size - 1 > kWindowCol1)
    throw ParameterError("sticker at (" + std::to_string(row) + "," + std::to_string(col) +
                         ") size " + std::to_string(size) + " leaves the placement window");
  for (int dr = 0; dr < size; ++dr) {
    for (int dc = 0; dc < size; ++dc) {
      bool yellow = (dr + dc) % 2 == 0;
      img.at(row + dr, col + dc, 0) = yellow ? 255 : 0;
      img.at(row + dr, col + dc, 1) = 255;
      img.at(row + dr, col + dc, 2) = 0;
    }
  }
}

// Uniform placement of the sticker's top-left cell within the window.
inline std::pair<int, int> sample_standard_placement(Rng& rng, int size) {
  int row = kWindowRow0 + int(rng.next_below(uint64_t(kWindowRow1 - kWindowRow0 + 2 - size)));
  int col = kWindowCol0 + int(rng.next_below(uint64_t(kWindowCol1 - kWindowCol0 + 2 - size)));
  return {row, col};
}

// Reduced-amplitude checkerboard: adds +amp on even-parity cells and -amp on
// odd ones, per channel, saturating at the 8-bit range. amp=255 reproduces a
// full-contrast sticker on mid-gray backgrounds.
inline void apply_amplitude_trigger(Image& img, int amplitude) {
  if (amplitude < 1 || amplitude > 255)
    throw ParameterError("trigger amplitude must be 1..255, got " + std::to_string(amplitude));
  for (int dr = 0; dr < kAmpSize; ++dr) {
    for (int dc = 0; dc < kAmpSize; ++dc) {
      int delta = (dr + dc) % 2 == 0 ? amplitude : -amplitude;
      for (int ch = 0; ch < kChannels; ++ch) {
        int v = int(img.at(kAmpRow0 + dr, kAmpCol0 + dc, ch)) + delta;
        img.at(kAmpRow0 + dr, kAmpCol0 + dc, ch) = uint8_t(std::clamp(v, 0, 255));
      }
    }
  }
}

inline void apply_trigger(Image& img, const TriggerSpec& spec, Rng& rng) {
  spec.validate();
  if (spec.kind == TriggerKind::standard) {
    auto [row, col] = sample_standard_placement(rng, spec.size);
    apply_standard_trigger(img, row, col, spec.size);
  } else {
    apply_amplitude_trigger(img, spec.amplitude);
  }
}

}  // namespace psieve::data
