#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "multiwin/grid.hpp"
#include "multiwin/rng.hpp"

namespace multiwin {

/// Dense per-pixel 2D displacement with a validity mask. Invalid pixels are
/// excluded from binning and from the loss.
struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<double> u;      // horizontal displacement, pixels
  std::vector<double> v;      // vertical displacement, pixels
  std::vector<uint8_t> valid; // 1 = supervisable

  int at(int x, int y) const { return y * width + x; }
  void resize(int w, int h) {
    width = w;
    height = h;
    u.assign(size_t(w) * h, 0.0);
    v.assign(size_t(w) * h, 0.0);
    valid.assign(size_t(w) * h, 1);
  }
};

/// Per-token accumulator on the second frame's grid: how many visible
/// first-frame pixels land in each token.
struct EndpointBinMap {
  TokenGrid grid;
  std::vector<double> counts;  // row-major per token

  double total() const;
  double mean() const;
  double stddev() const;  // population

  /// CSV dump `row,col,count`, row-major order.
  std::string to_csv() const;
};

struct BinocularSamplerSpec {
  int n_first = 2;
  int first_w = 10;
  int first_h = 10;
  int m_second = 4;
  int second_w = 7;
  int second_h = 7;
  double std_ratio = 0.3;  // noise std as a ratio of the bin map's std
};

/// Bins flow endpoints of valid pixels inside first-frame windows onto the
/// second frame's token grid. Endpoints landing outside the second frame
/// are dropped.
EndpointBinMap bin_flow_endpoints(const FlowField& flow, const WindowSet& first_windows,
                                  const TokenGrid& grid1, const TokenGrid& grid2);

/// Adds per-bin Gaussian noise g ~ N(mean(bins), std_ratio * std(bins)).
/// std_ratio = 0 degenerates to a uniform shift by the mean, which never
/// changes the greedy selection.
EndpointBinMap perturb_counts(const EndpointBinMap& bins, double std_ratio, Rng& rng);

/// Sequentially picks m windows of the given shape maximizing the window
/// sum of bins among placements disjoint from the already selected ones.
/// Ties break on smallest (y0, x0).
WindowSet greedy_select(const EndpointBinMap& bins, int m, int shape_w, int shape_h);

/// Full second-frame procedure: bin, perturb, greedy-select.
WindowSet sample_second_frame_windows(const FlowField& flow, const WindowSet& first_windows,
                                      const BinocularSamplerSpec& spec, const TokenGrid& grid1,
                                      const TokenGrid& grid2, Rng& rng);

/// "same windows" baseline: identity copy onto the second grid.
WindowSet same_windows_second_frame(const WindowSet& first_windows, const TokenGrid& grid1,
                                    const TokenGrid& grid2);

/// Fraction of valid in-window first-frame pixels whose endpoints land
/// inside the given second-frame windows. Used to compare selection
/// strategies.
double matched_fraction(const FlowField& flow, const WindowSet& first_windows,
                        const WindowSet& second_windows, const TokenGrid& grid1,
                        const TokenGrid& grid2);

}  // namespace multiwin
