#include "multiwin/flow_sampling.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace multiwin {

double EndpointBinMap::total() const {
  double t = 0.0;
  for (double c : counts) t += c;
  return t;
}

double EndpointBinMap::mean() const {
  return counts.empty() ? 0.0 : total() / double(counts.size());
}

double EndpointBinMap::stddev() const {
  if (counts.empty()) return 0.0;
  const double m = mean();
  double acc = 0.0;
  for (double c : counts) acc += (c - m) * (c - m);
  return std::sqrt(acc / double(counts.size()));
}

std::string EndpointBinMap::to_csv() const {
  std::ostringstream os;
  os << "row,col,count\n";
  char buf[64];
  for (int y = 0; y < grid.height_tokens; ++y)
    for (int x = 0; x < grid.width_tokens; ++x) {
      std::snprintf(buf, sizeof(buf), "%d,%d,%.17g\n", y, x, counts[grid.index_of(x, y)]);
      os << buf;
    }
  return os.str();
}

EndpointBinMap bin_flow_endpoints(const FlowField& flow, const WindowSet& first_windows,
                                  const TokenGrid& grid1, const TokenGrid& grid2) {
  if (flow.width != grid1.width_px() || flow.height != grid1.height_px())
    throw ShapeMismatch("flow resolution does not match the first grid");
  first_windows.validate(grid1);

  EndpointBinMap bins;
  bins.grid = grid2;
  bins.counts.assign(grid2.total_tokens(), 0.0);

  const int p1 = grid1.patch_size;
  const int p2 = grid2.patch_size;
  const int w2px = grid2.width_px();
  const int h2px = grid2.height_px();

  for (const auto& win : first_windows.windows) {
    const int px0 = win.x0 * p1;
    const int py0 = win.y0 * p1;
    const int px1 = (win.x0 + win.w) * p1;
    const int py1 = (win.y0 + win.h) * p1;
    for (int y = py0; y < py1; ++y) {
      for (int x = px0; x < px1; ++x) {
        const int i = flow.at(x, y);
        if (!flow.valid[i]) continue;
        const int ex = static_cast<int>(std::floor(x + flow.u[i]));
        const int ey = static_cast<int>(std::floor(y + flow.v[i]));
        if (ex < 0 || ey < 0 || ex >= w2px || ey >= h2px) continue;
        bins.counts[grid2.index_of(ex / p2, ey / p2)] += 1.0;
      }
    }
  }
  return bins;
}

EndpointBinMap perturb_counts(const EndpointBinMap& bins, double std_ratio, Rng& rng) {
  if (std_ratio < 0.0) throw InvalidSpec("std_ratio must be >= 0");
  const double mean = bins.mean();
  const double std = std_ratio * bins.stddev();
  EndpointBinMap out = bins;
  for (double& c : out.counts) c += rng.normal(mean, std);
  return out;
}

WindowSet greedy_select(const EndpointBinMap& bins, int m, int shape_w, int shape_h) {
  const TokenGrid& g = bins.grid;
  if (shape_w < 1 || shape_h < 1 || shape_w > g.width_tokens || shape_h > g.height_tokens)
    throw InvalidSpec("greedy_select shape does not fit the grid");

  // 2D prefix sums over the count map.
  const int W = g.width_tokens, H = g.height_tokens;
  std::vector<double> pref((W + 1) * (H + 1), 0.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      pref[(y + 1) * (W + 1) + (x + 1)] = bins.counts[g.index_of(x, y)] +
                                          pref[y * (W + 1) + (x + 1)] +
                                          pref[(y + 1) * (W + 1) + x] - pref[y * (W + 1) + x];
  auto rect_sum = [&](int x0, int y0) {
    const int x1 = x0 + shape_w, y1 = y0 + shape_h;
    return pref[y1 * (W + 1) + x1] - pref[y0 * (W + 1) + x1] - pref[y1 * (W + 1) + x0] +
           pref[y0 * (W + 1) + x0];
  };

  WindowSet out;
  for (int step = 0; step < m; ++step) {
    bool found = false;
    double best = 0.0;
    Window best_win;
    for (int y0 = 0; y0 + shape_h <= H; ++y0) {
      for (int x0 = 0; x0 + shape_w <= W; ++x0) {
        Window cand{x0, y0, shape_w, shape_h};
        bool disjoint = true;
        for (const auto& w : out.windows)
          if (cand.overlaps(w)) {
            disjoint = false;
            break;
          }
        if (!disjoint) continue;
        const double s = rect_sum(x0, y0);
        if (!found || s > best) {  // row-major scan makes ties pick smallest (y0, x0)
          found = true;
          best = s;
          best_win = cand;
        }
      }
    }
    if (!found) throw InfeasibleSpec("fewer disjoint placements than requested windows");
    out.windows.push_back(best_win);
  }
  std::sort(out.windows.begin(), out.windows.end(), [](const Window& a, const Window& b) {
    return std::tie(a.y0, a.x0) < std::tie(b.y0, b.x0);
  });
  return out;
}

WindowSet sample_second_frame_windows(const FlowField& flow, const WindowSet& first_windows,
                                      const BinocularSamplerSpec& spec, const TokenGrid& grid1,
                                      const TokenGrid& grid2, Rng& rng) {
  EndpointBinMap bins = bin_flow_endpoints(flow, first_windows, grid1, grid2);
  EndpointBinMap noisy = perturb_counts(bins, spec.std_ratio, rng);
  return greedy_select(noisy, spec.m_second, spec.second_w, spec.second_h);
}

WindowSet same_windows_second_frame(const WindowSet& first_windows, const TokenGrid& grid1,
                                    const TokenGrid& grid2) {
  if (grid1 != grid2) throw ShapeMismatch("same-window baseline requires identical grids");
  return first_windows;
}

double matched_fraction(const FlowField& flow, const WindowSet& first_windows,
                        const WindowSet& second_windows, const TokenGrid& grid1,
                        const TokenGrid& grid2) {
  if (flow.width != grid1.width_px() || flow.height != grid1.height_px())
    throw ShapeMismatch("flow resolution does not match the first grid");
  const int p1 = grid1.patch_size;
  const int p2 = grid2.patch_size;
  int64_t visible = 0, matched = 0;
  for (const auto& win : first_windows.windows) {
    for (int y = win.y0 * p1; y < (win.y0 + win.h) * p1; ++y) {
      for (int x = win.x0 * p1; x < (win.x0 + win.w) * p1; ++x) {
        const int i = flow.at(x, y);
        if (!flow.valid[i]) continue;
        ++visible;
        const int ex = static_cast<int>(std::floor(x + flow.u[i]));
        const int ey = static_cast<int>(std::floor(y + flow.v[i]));
        if (ex < 0 || ey < 0 || ex >= grid2.width_px() || ey >= grid2.height_px()) continue;
        const int tx = ex / p2, ty = ey / p2;
        for (const auto& w2 : second_windows.windows)
          if (w2.contains(tx, ty)) {
            ++matched;
            break;
          }
      }
    }
  }
  return visible == 0 ? 0.0 : double(matched) / double(visible);
}

}  // namespace multiwin
