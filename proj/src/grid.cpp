#include "multiwin/grid.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace multiwin {

int64_t WindowSet::token_count() const {
  int64_t n = 0;
  for (const auto& w : windows) n += w.token_count();
  return n + static_cast<int64_t>(extra_tokens.size());
}

bool WindowSet::contains_token(int x, int y) const {
  for (const auto& w : windows)
    if (w.contains(x, y)) return true;
  for (const auto& [ex, ey] : extra_tokens)
    if (ex == x && ey == y) return true;
  return false;
}

int WindowSet::min_window_side() const {
  int m = INT32_MAX;
  for (const auto& w : windows) m = std::min({m, w.w, w.h});
  return windows.empty() ? 0 : m;
}

void WindowSet::validate(const TokenGrid& grid) const {
  for (const auto& w : windows) {
    if (!w.fits(grid)) throw InvalidSpec("window outside grid bounds");
  }
  for (size_t i = 0; i < windows.size(); ++i)
    for (size_t j = i + 1; j < windows.size(); ++j)
      if (windows[i].overlaps(windows[j])) throw InvalidSpec("windows overlap");
  for (const auto& [x, y] : extra_tokens) {
    if (x < 0 || y < 0 || x >= grid.width_tokens || y >= grid.height_tokens)
      throw InvalidSpec("extra token outside grid");
    for (const auto& w : windows)
      if (w.contains(x, y)) throw InvalidSpec("extra token inside a window");
  }
  for (size_t i = 0; i + 1 < extra_tokens.size(); ++i)
    for (size_t j = i + 1; j < extra_tokens.size(); ++j)
      if (extra_tokens[i] == extra_tokens[j]) throw InvalidSpec("duplicate extra token");
}

std::string WindowSet::serialize() const {
  std::ostringstream os;
  for (const auto& w : windows) os << "win " << w.x0 << ' ' << w.y0 << ' ' << w.w << ' ' << w.h << '\n';
  for (const auto& [x, y] : extra_tokens) os << "tok " << x << ' ' << y << '\n';
  return os.str();
}

WindowSet WindowSet::parse(const std::string& text) {
  WindowSet ws;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "win") {
      Window w;
      ls >> w.x0 >> w.y0 >> w.w >> w.h;
      if (ls.fail()) throw InvalidSpec("bad window line: " + line);
      ws.windows.push_back(w);
    } else if (kind == "tok") {
      int x, y;
      ls >> x >> y;
      if (ls.fail()) throw InvalidSpec("bad token line: " + line);
      ws.extra_tokens.emplace_back(x, y);
    } else {
      throw InvalidSpec("unknown record kind: " + kind);
    }
  }
  return ws;
}

std::string to_string(SamplerMode m) {
  switch (m) {
    case SamplerMode::multi_window: return "multi_window";
    case SamplerMode::randomized_window: return "randomized_window";
    case SamplerMode::windows_plus_extra: return "windows_plus_extra";
    case SamplerMode::random_tokens: return "random_tokens";
    case SamplerMode::single_crop: return "single_crop";
    case SamplerMode::full: return "full";
  }
  return "?";
}

SamplerMode sampler_mode_from_string(const std::string& s) {
  if (s == "multi_window") return SamplerMode::multi_window;
  if (s == "randomized_window") return SamplerMode::randomized_window;
  if (s == "windows_plus_extra") return SamplerMode::windows_plus_extra;
  if (s == "random_tokens") return SamplerMode::random_tokens;
  if (s == "single_crop") return SamplerMode::single_crop;
  if (s == "full") return SamplerMode::full;
  throw InvalidSpec("unknown sampler mode: " + s);
}

void SamplerSpec::validate(const TokenGrid& grid) const {
  if (grid.width_tokens < 1 || grid.height_tokens < 1 || grid.patch_size < 1)
    throw InvalidSpec("degenerate grid");
  const int64_t total = grid.total_tokens();
  switch (mode) {
    case SamplerMode::full:
      return;
    case SamplerMode::single_crop:
    case SamplerMode::multi_window:
    case SamplerMode::windows_plus_extra: {
      const int n = (mode == SamplerMode::single_crop) ? 1 : n_windows;
      if (n < 1) throw InvalidSpec("n_windows must be >= 1");
      if (window_w < 1 || window_h < 1) throw InvalidSpec("window shape must be >= 1x1");
      if (window_w > grid.width_tokens || window_h > grid.height_tokens)
        throw InvalidSpec("window shape exceeds grid");
      const int64_t budget = int64_t(n) * window_w * window_h +
                             (mode == SamplerMode::windows_plus_extra ? n_extra_tokens : 0);
      if (budget > total) throw InvalidSpec("token budget exceeds grid capacity");
      if (mode == SamplerMode::windows_plus_extra && n_extra_tokens < 0)
        throw InvalidSpec("negative extra token count");
      return;
    }
    case SamplerMode::random_tokens:
      if (n_random_tokens < 0 || n_random_tokens > total)
        throw InvalidSpec("random token count out of range");
      return;
    case SamplerMode::randomized_window:
      if (budget_lo < 1 || budget_hi < budget_lo) throw InvalidSpec("empty budget range");
      if (budget_hi > total) throw InvalidSpec("budget range exceeds grid capacity");
      if (n_windows_lo < 1 || n_windows_hi < n_windows_lo)
        throw InvalidSpec("empty window count range");
      if (ratio_hi < ratio_lo || ratio_hi <= 0) throw InvalidSpec("empty token ratio range");
      if (aspect_lo <= 0 || aspect_hi < aspect_lo) throw InvalidSpec("empty aspect range");
      return;
  }
}

namespace {

bool disjoint_from_all(const Window& w, const std::vector<Window>& placed) {
  for (const auto& p : placed)
    if (w.overlaps(p)) return false;
  return true;
}

// Row-major first-fit scan; the deterministic fallback when rejection fails.
bool pack_scan(const TokenGrid& grid, const std::vector<std::pair<int, int>>& shapes,
               std::vector<Window>& out) {
  out.clear();
  for (const auto& [w, h] : shapes) {
    bool placed = false;
    for (int y = 0; y + h <= grid.height_tokens && !placed; ++y) {
      for (int x = 0; x + w <= grid.width_tokens && !placed; ++x) {
        Window cand{x, y, w, h};
        if (disjoint_from_all(cand, out)) {
          out.push_back(cand);
          placed = true;
        }
      }
    }
    if (!placed) return false;
  }
  return true;
}

constexpr int kMaxRejectionAttempts = 100;

std::vector<Window> place_windows(const TokenGrid& grid,
                                  const std::vector<std::pair<int, int>>& shapes, Rng& rng) {
  std::vector<Window> placed;
  placed.reserve(shapes.size());
  bool ok = true;
  for (const auto& [w, h] : shapes) {
    bool got = false;
    for (int attempt = 0; attempt < kMaxRejectionAttempts && !got; ++attempt) {
      Window cand;
      cand.w = w;
      cand.h = h;
      cand.x0 = static_cast<int>(rng.uniform_int(0, grid.width_tokens - w));
      cand.y0 = static_cast<int>(rng.uniform_int(0, grid.height_tokens - h));
      if (disjoint_from_all(cand, placed)) {
        placed.push_back(cand);
        got = true;
      }
    }
    if (!got) {
      ok = false;
      break;
    }
  }
  if (!ok) {
    if (!pack_scan(grid, shapes, placed))
      throw InfeasibleSpec("no non-overlapping placement found");
  }
  std::sort(placed.begin(), placed.end(),
            [](const Window& a, const Window& b) { return std::tie(a.y0, a.x0) < std::tie(b.y0, b.x0); });
  return placed;
}

}  // namespace

WindowSet sample_windows(const TokenGrid& grid, const SamplerSpec& spec, Rng& rng) {
  spec.validate(grid);
  WindowSet ws;
  switch (spec.mode) {
    case SamplerMode::full:
      ws.windows.push_back(Window{0, 0, grid.width_tokens, grid.height_tokens});
      return ws;
    case SamplerMode::single_crop:
    case SamplerMode::multi_window:
    case SamplerMode::windows_plus_extra: {
      const int n = (spec.mode == SamplerMode::single_crop) ? 1 : spec.n_windows;
      std::vector<std::pair<int, int>> shapes(n, {spec.window_w, spec.window_h});
      ws.windows = place_windows(grid, shapes, rng);
      if (spec.mode == SamplerMode::windows_plus_extra)
        ws = sample_extra_tokens(grid, ws, spec.n_extra_tokens, rng);
      return ws;
    }
    case SamplerMode::random_tokens:
      return sample_random_tokens(grid, spec.n_random_tokens, rng);
    case SamplerMode::randomized_window:
      return sample_randomized_windows(grid, spec, rng);
  }
  throw InvalidSpec("unreachable sampler mode");
}

WindowSet sample_randomized_windows(const TokenGrid& grid, const SamplerSpec& spec, Rng& rng) {
  if (spec.mode != SamplerMode::randomized_window)
    throw InvalidSpec("sample_randomized_windows requires randomized_window mode");
  spec.validate(grid);

  const int64_t budget = rng.uniform_int(spec.budget_lo, spec.budget_hi);
  const int n = static_cast<int>(rng.uniform_int(spec.n_windows_lo, spec.n_windows_hi));

  // Relative token weights; with a degenerate [1,1] ratio range all windows
  // get budget/n tokens.
  std::vector<double> weight(n);
  double wsum = 0.0;
  for (int i = 0; i < n; ++i) {
    weight[i] = rng.uniform_real(spec.ratio_lo, spec.ratio_hi);
    wsum += weight[i];
  }
  if (wsum <= 0.0) {
    std::fill(weight.begin(), weight.end(), 1.0);
    wsum = n;
  }

  std::vector<std::pair<int, int>> shapes(n);
  for (int i = 0; i < n; ++i) {
    const double tokens_i = std::max(1.0, double(budget) * weight[i] / wsum);
    const double aspect = rng.uniform_real(spec.aspect_lo, spec.aspect_hi);
    int w = std::max(1, static_cast<int>(std::lround(std::sqrt(tokens_i * aspect))));
    int h = std::max(1, static_cast<int>(std::lround(std::sqrt(tokens_i / aspect))));
    w = std::min(w, grid.width_tokens);
    h = std::min(h, grid.height_tokens);
    shapes[i] = {w, h};
  }

  // Rounding drifts the total; resize the last window until the total is
  // back inside [budget_lo, budget_hi].
  auto total = [&] {
    int64_t t = 0;
    for (auto& [w, h] : shapes) t += int64_t(w) * h;
    return t;
  };
  auto& [lw, lh] = shapes.back();
  int guard = 0;
  while (total() > spec.budget_hi && ++guard < 10000) {
    if (lw >= lh && lw > 1)
      --lw;
    else if (lh > 1)
      --lh;
    else {
      // Last window already 1x1; shrink the largest remaining one.
      auto it = std::max_element(shapes.begin(), shapes.end(), [](auto& a, auto& b) {
        return int64_t(a.first) * a.second < int64_t(b.first) * b.second;
      });
      if (it->first >= it->second && it->first > 1)
        --it->first;
      else if (it->second > 1)
        --it->second;
      else
        break;
    }
  }
  while (total() < spec.budget_lo && ++guard < 10000) {
    if (lw <= lh && lw < grid.width_tokens)
      ++lw;
    else if (lh < grid.height_tokens)
      ++lh;
    else
      break;
  }
  if (total() < spec.budget_lo || total() > spec.budget_hi)
    throw InfeasibleSpec("could not meet the randomized token budget on this grid");

  WindowSet ws;
  ws.windows = place_windows(grid, shapes, rng);
  return ws;
}

WindowSet sample_extra_tokens(const TokenGrid& grid, const WindowSet& ws, int k, Rng& rng) {
  if (k == 0) return ws;
  std::vector<int> outside;
  outside.reserve(grid.total_tokens());
  for (int y = 0; y < grid.height_tokens; ++y)
    for (int x = 0; x < grid.width_tokens; ++x) {
      bool inside = false;
      for (const auto& w : ws.windows)
        if (w.contains(x, y)) {
          inside = true;
          break;
        }
      if (!inside) outside.push_back(grid.index_of(x, y));
    }
  if (k < 0 || static_cast<size_t>(k) > outside.size())
    throw InvalidSpec("extra token count exceeds remaining tokens");

  // Partial Fisher-Yates, then sort for a canonical order.
  for (int i = 0; i < k; ++i) {
    const auto j = i + static_cast<int>(rng.uniform_below(outside.size() - i));
    std::swap(outside[i], outside[j]);
  }
  WindowSet out = ws;
  std::vector<int> chosen(outside.begin(), outside.begin() + k);
  std::sort(chosen.begin(), chosen.end());
  for (int idx : chosen) out.extra_tokens.push_back(grid.coord_of(idx));
  return out;
}

WindowSet sample_random_tokens(const TokenGrid& grid, int k, Rng& rng) {
  const int64_t total = grid.total_tokens();
  if (k < 0 || k > total) throw InvalidSpec("random token count exceeds grid capacity");
  std::vector<int> all(total);
  std::iota(all.begin(), all.end(), 0);
  for (int i = 0; i < k; ++i) {
    const auto j = i + static_cast<int>(rng.uniform_below(all.size() - i));
    std::swap(all[i], all[j]);
  }
  std::vector<int> chosen(all.begin(), all.begin() + k);
  std::sort(chosen.begin(), chosen.end());
  WindowSet ws;
  ws.windows.reserve(k);
  for (int idx : chosen) {
    const auto [x, y] = grid.coord_of(idx);
    ws.windows.push_back(Window{x, y, 1, 1});
  }
  return ws;
}

std::vector<int> token_indices(const WindowSet& ws, const TokenGrid& grid) {
  std::vector<int> out;
  out.reserve(ws.token_count());
  for (const auto& w : ws.windows)
    for (int y = w.y0; y < w.y0 + w.h; ++y)
      for (int x = w.x0; x < w.x0 + w.w; ++x) out.push_back(grid.index_of(x, y));
  for (const auto& [x, y] : ws.extra_tokens) out.push_back(grid.index_of(x, y));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::string ascii_grid(const WindowSet& ws, const TokenGrid& grid) {
  std::string canvas(grid.total_tokens(), '.');
  for (size_t i = 0; i < ws.windows.size(); ++i) {
    const auto& w = ws.windows[i];
    const char c = static_cast<char>('A' + (i % 26));
    for (int y = w.y0; y < w.y0 + w.h; ++y)
      for (int x = w.x0; x < w.x0 + w.w; ++x) canvas[grid.index_of(x, y)] = c;
  }
  for (const auto& [x, y] : ws.extra_tokens) canvas[grid.index_of(x, y)] = '+';
  std::string out;
  out.reserve(grid.total_tokens() + grid.height_tokens);
  for (int y = 0; y < grid.height_tokens; ++y) {
    out.append(canvas, size_t(y) * grid.width_tokens, grid.width_tokens);
    out.push_back('\n');
  }
  return out;
}

}  // namespace multiwin
