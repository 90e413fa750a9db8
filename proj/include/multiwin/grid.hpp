#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "multiwin/errors.hpp"
#include "multiwin/rng.hpp"

namespace multiwin {

/// The patch lattice of an input image: every token is a patch_size x
/// patch_size pixel block, tokens are indexed row-major.
struct TokenGrid {
  int width_tokens = 0;
  int height_tokens = 0;
  int patch_size = 1;

  int64_t total_tokens() const { return int64_t(width_tokens) * height_tokens; }
  int width_px() const { return width_tokens * patch_size; }
  int height_px() const { return height_tokens * patch_size; }

  int index_of(int x, int y) const { return y * width_tokens + x; }
  std::pair<int, int> coord_of(int index) const {
    return {index % width_tokens, index / width_tokens};
  }

  bool operator==(const TokenGrid&) const = default;
};

/// Axis-aligned rectangle in token units, top-left inclusive.
struct Window {
  int x0 = 0;
  int y0 = 0;
  int w = 1;
  int h = 1;

  int64_t token_count() const { return int64_t(w) * h; }
  bool contains(int x, int y) const { return x >= x0 && x < x0 + w && y >= y0 && y < y0 + h; }
  bool overlaps(const Window& o) const {
    return x0 < o.x0 + o.w && o.x0 < x0 + w && y0 < o.y0 + o.h && o.y0 < y0 + h;
  }
  bool fits(const TokenGrid& g) const {
    return x0 >= 0 && y0 >= 0 && w >= 1 && h >= 1 && x0 + w <= g.width_tokens &&
           y0 + h <= g.height_tokens;
  }

  bool operator==(const Window&) const = default;
};

/// The selected token subset: disjoint windows plus optional isolated extra
/// tokens. Extra tokens are visible to the encoder but excluded from the
/// head and the loss.
struct WindowSet {
  std::vector<Window> windows;
  std::vector<std::pair<int, int>> extra_tokens;  // (x, y) token coords

  int64_t token_count() const;
  bool contains_token(int x, int y) const;
  /// Smallest window side; the conv head needs >= 3.
  int min_window_side() const;
  bool conv_head_compatible() const { return !windows.empty() && min_window_side() >= 3; }

  /// Validates all invariants against a grid; throws on violation.
  void validate(const TokenGrid& grid) const;

  /// Line-oriented text form: `win x0 y0 w h` / `tok x y`.
  std::string serialize() const;
  static WindowSet parse(const std::string& text);

  bool operator==(const WindowSet&) const = default;
};

enum class SamplerMode {
  multi_window,
  randomized_window,
  windows_plus_extra,
  random_tokens,
  single_crop,
  full,
};

std::string to_string(SamplerMode m);
SamplerMode sampler_mode_from_string(const std::string& s);

/// What to sample. Fixed-shape modes use n_windows/window_w/window_h; the
/// randomized mode draws budget, window count, token ratio and aspect ratio
/// from the ranges below.
struct SamplerSpec {
  SamplerMode mode = SamplerMode::multi_window;
  int n_windows = 2;
  int window_w = 0;
  int window_h = 0;
  int n_extra_tokens = 0;   // windows_plus_extra
  int n_random_tokens = 0;  // random_tokens

  // randomized_window ranges
  int budget_lo = 0;
  int budget_hi = 0;
  int n_windows_lo = 2;
  int n_windows_hi = 2;
  double ratio_lo = 1.0;  // per-window relative token weight
  double ratio_hi = 1.0;
  double aspect_lo = 1.0;  // w/h
  double aspect_hi = 1.0;

  void validate(const TokenGrid& grid) const;
};

/// Samples N non-overlapping windows. Uniform rejection over feasible
/// corners, bounded at 100 attempts per window; falls back to a
/// deterministic row-major packing scan before giving up.
WindowSet sample_windows(const TokenGrid& grid, const SamplerSpec& spec, Rng& rng);

/// randomized_window mode: per-call random budget / count / token-ratio /
/// aspect-ratio, then the same placement procedure.
WindowSet sample_randomized_windows(const TokenGrid& grid, const SamplerSpec& spec, Rng& rng);

/// Adds k distinct isolated tokens outside all windows of `ws`.
WindowSet sample_extra_tokens(const TokenGrid& grid, const WindowSet& ws, int k, Rng& rng);

/// k distinct tokens as 1x1 windows; linear head only (sides < 3).
WindowSet sample_random_tokens(const TokenGrid& grid, int k, Rng& rng);

/// Row-major sorted, duplicate-free flat indices of all tokens covered by
/// windows and extra tokens.
std::vector<int> token_indices(const WindowSet& ws, const TokenGrid& grid);

/// ASCII rendering for debugging fixtures: letters per window, '+' for
/// extra tokens, '.' elsewhere.
std::string ascii_grid(const WindowSet& ws, const TokenGrid& grid);

}  // namespace multiwin
