#include "multiwin/infer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "multiwin/train.hpp"

namespace multiwin {

void TilingSpec::validate(int image_w, int image_h) const {
  check(crop_w >= 1 && crop_h >= 1, "tiling: crop must be positive");
  check(crop_w <= image_w && crop_h <= image_h, "tiling: crop exceeds the image");
  check(overlap_ratio >= 0.0 && overlap_ratio < 1.0, "tiling: overlap must be in [0,1)");
  check(stride_x() >= 1 && stride_y() >= 1, "tiling: stride collapsed below one pixel");
}

int TilingSpec::stride_x() const {
  return std::max(1, static_cast<int>(std::lround(crop_w * (1.0 - overlap_ratio))));
}
int TilingSpec::stride_y() const {
  return std::max(1, static_cast<int>(std::lround(crop_h * (1.0 - overlap_ratio))));
}

namespace {

WindowSet full_window_set(const TokenGrid& grid) {
  WindowSet ws;
  ws.windows.push_back(Window{0, 0, grid.width_tokens, grid.height_tokens});
  return ws;
}

TokenGrid grid_for(const TransformerModel& m, int w, int h) {
  const int p = m.cfg.patch_size;
  if (w % p != 0 || h % p != 0)
    throw ShapeMismatch("image resolution must be divisible by patch_size");
  return TokenGrid{w / p, h / p, p};
}

DensePrediction map_to_prediction(const FeatureMap& map, int channels) {
  DensePrediction out;
  out.width = map.w;
  out.height = map.h;
  out.channels = channels;
  out.values = map.data.data();
  return out;
}

std::vector<int> tile_positions(int image, int crop, int stride) {
  std::vector<int> xs;
  int x = 0;
  while (true) {
    if (x + crop >= image) {
      xs.push_back(image - crop);
      break;
    }
    xs.push_back(x);
    x += stride;
  }
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  return xs;
}

}  // namespace

DensePrediction predict_full(const TransformerModel& m, const std::vector<double>& image, int w,
                             int h, double tau_mult) {
  NoGradGuard ng;
  const TokenGrid grid = grid_for(m, w, h);
  Tensor img = Tensor::from_data({w * h, 3}, image, false);
  auto maps = dense_forward_mono(m, img, grid, full_window_set(grid), tau_mult);
  return map_to_prediction(maps[0], m.cfg.out_channels());
}

DensePrediction predict_full_pair(const TransformerModel& m, const std::vector<double>& frame1,
                                  const std::vector<double>& frame2, int w, int h,
                                  double tau_mult) {
  NoGradGuard ng;
  const TokenGrid grid = grid_for(m, w, h);
  Tensor f1 = Tensor::from_data({w * h, 3}, frame1, false);
  Tensor f2 = Tensor::from_data({w * h, 3}, frame2, false);
  const WindowSet ws = full_window_set(grid);
  auto maps = dense_forward_bino(m, f1, f2, grid, ws, ws, tau_mult);
  return map_to_prediction(maps[0], m.cfg.out_channels());
}

std::vector<double> bilinear_resize(const std::vector<double>& src, int w, int h, int channels,
                                    int new_w, int new_h) {
  std::vector<double> out(size_t(new_w) * new_h * channels);
  const double sx = double(w) / double(new_w);
  const double sy = double(h) / double(new_h);
  for (int y = 0; y < new_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(h - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < new_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(w - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      for (int c = 0; c < channels; ++c) {
        const auto at = [&](int yy, int xx) { return src[(size_t(yy) * w + xx) * channels + c]; };
        out[(size_t(y) * new_w + x) * channels + c] =
            (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
            wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
      }
    }
  }
  return out;
}

std::vector<double> crop_image(const std::vector<double>& src, int w, int h, int channels, int x0,
                               int y0, int cw, int ch) {
  check(x0 >= 0 && y0 >= 0 && x0 + cw <= w && y0 + ch <= h, "crop outside the image");
  std::vector<double> out(size_t(cw) * ch * channels);
  for (int y = 0; y < ch; ++y)
    std::copy_n(src.begin() + (size_t(y0 + y) * w + x0) * channels, size_t(cw) * channels,
                out.begin() + size_t(y) * cw * channels);
  return out;
}

namespace {

DensePrediction upscale_prediction(const DensePrediction& pred, int out_w, int out_h,
                                   bool flow_values) {
  DensePrediction out;
  out.width = out_w;
  out.height = out_h;
  out.channels = pred.channels;
  out.values = bilinear_resize(pred.values, pred.width, pred.height, pred.channels, out_w, out_h);
  if (flow_values) {
    const double su = double(out_w) / double(pred.width);
    const double sv = double(out_h) / double(pred.height);
    for (size_t i = 0; i < out.values.size(); i += size_t(out.channels)) {
      out.values[i] *= su;
      out.values[i + 1] *= sv;
    }
  }
  return out;
}

}  // namespace

DensePrediction predict_resize(const TransformerModel& m, const std::vector<double>& image, int w,
                               int h, int train_w, int train_h, double tau_mult) {
  std::vector<double> small = bilinear_resize(image, w, h, 3, train_w, train_h);
  DensePrediction pred = predict_full(m, small, train_w, train_h, tau_mult);
  return upscale_prediction(pred, w, h, false);
}

DensePrediction predict_resize_pair(const TransformerModel& m, const std::vector<double>& frame1,
                                    const std::vector<double>& frame2, int w, int h, int train_w,
                                    int train_h, double tau_mult) {
  std::vector<double> s1 = bilinear_resize(frame1, w, h, 3, train_w, train_h);
  std::vector<double> s2 = bilinear_resize(frame2, w, h, 3, train_w, train_h);
  // Displacements shrink with the image; predictions are scaled back up.
  DensePrediction pred = predict_full_pair(m, s1, s2, train_w, train_h, tau_mult);
  return upscale_prediction(pred, w, h, true);
}

std::vector<int> tile_count_map(int w, int h, const TilingSpec& tiling) {
  tiling.validate(w, h);
  std::vector<int> counts(size_t(w) * h, 0);
  for (int ty : tile_positions(h, tiling.crop_h, tiling.stride_y()))
    for (int tx : tile_positions(w, tiling.crop_w, tiling.stride_x()))
      for (int y = ty; y < ty + tiling.crop_h; ++y)
        for (int x = tx; x < tx + tiling.crop_w; ++x) ++counts[size_t(y) * w + x];
  return counts;
}

namespace {

template <typename PredictCrop>
DensePrediction tiled_aggregate(int w, int h, int channels, const TilingSpec& tiling,
                                PredictCrop&& predict_crop) {
  tiling.validate(w, h);
  DensePrediction out;
  out.width = w;
  out.height = h;
  out.channels = channels;
  out.values.assign(size_t(w) * h * channels, 0.0);
  std::vector<int> counts(size_t(w) * h, 0);
  for (int ty : tile_positions(h, tiling.crop_h, tiling.stride_y())) {
    for (int tx : tile_positions(w, tiling.crop_w, tiling.stride_x())) {
      const DensePrediction pred = predict_crop(tx, ty);
      for (int y = 0; y < tiling.crop_h; ++y)
        for (int x = 0; x < tiling.crop_w; ++x) {
          const size_t dst = (size_t(ty + y) * w + (tx + x)) * channels;
          const size_t src = (size_t(y) * tiling.crop_w + x) * channels;
          for (int c = 0; c < channels; ++c) out.values[dst + c] += pred.values[src + c];
          ++counts[size_t(ty + y) * w + (tx + x)];
        }
    }
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double inv = 1.0 / double(counts[size_t(y) * w + x]);
      for (int c = 0; c < channels; ++c) out.values[(size_t(y) * w + x) * channels + c] *= inv;
    }
  return out;
}

}  // namespace

DensePrediction predict_tiled(const TransformerModel& m, const std::vector<double>& image, int w,
                              int h, const TilingSpec& tiling, double tau_mult) {
  return tiled_aggregate(w, h, m.cfg.out_channels(), tiling, [&](int tx, int ty) {
    std::vector<double> crop = crop_image(image, w, h, 3, tx, ty, tiling.crop_w, tiling.crop_h);
    return predict_full(m, crop, tiling.crop_w, tiling.crop_h, tau_mult);
  });
}

DensePrediction predict_tiled_pair(const TransformerModel& m, const std::vector<double>& frame1,
                                   const std::vector<double>& frame2, int w, int h,
                                   const TilingSpec& tiling, double tau_mult) {
  return tiled_aggregate(w, h, m.cfg.out_channels(), tiling, [&](int tx, int ty) {
    std::vector<double> c1 = crop_image(frame1, w, h, 3, tx, ty, tiling.crop_w, tiling.crop_h);
    std::vector<double> c2 = crop_image(frame2, w, h, 3, tx, ty, tiling.crop_w, tiling.crop_h);
    return predict_full_pair(m, c1, c2, tiling.crop_w, tiling.crop_h, tau_mult);
  });
}

// ---- metrics ----

std::vector<int> argmax_labels(const DensePrediction& pred) {
  std::vector<int> out(size_t(pred.width) * pred.height);
  for (size_t i = 0; i < out.size(); ++i) {
    const double* row = pred.values.data() + i * size_t(pred.channels);
    int best = 0;
    for (int c = 1; c < pred.channels; ++c)
      if (row[c] > row[best]) best = c;
    out[i] = best;
  }
  return out;
}

double metric_miou(std::span<const int> pred, std::span<const int> gt, int k) {
  check(pred.size() == gt.size(), "miou: size mismatch");
  std::vector<int64_t> tp(k, 0), fp(k, 0), fn(k, 0);
  for (size_t i = 0; i < pred.size(); ++i) {
    check(pred[i] >= 0 && pred[i] < k && gt[i] >= 0 && gt[i] < k, "miou: class out of range");
    if (pred[i] == gt[i])
      ++tp[size_t(pred[i])];
    else {
      ++fp[size_t(pred[i])];
      ++fn[size_t(gt[i])];
    }
  }
  double acc = 0.0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    const int64_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;  // class absent from both gt and prediction
    acc += double(tp[c]) / double(denom);
    ++present;
  }
  return present == 0 ? 0.0 : acc / double(present);
}

namespace {

struct EpeAccum {
  double err_sum = 0, out_sum = 0;
  double b0 = 0, b1 = 0, b2 = 0;
  int64_t n = 0, n0 = 0, n1 = 0, n2 = 0;

  void add(const DensePrediction& pred, const FlowField& gt) {
    for (int y = 0; y < gt.height; ++y)
      for (int x = 0; x < gt.width; ++x) {
        const size_t i = size_t(y) * gt.width + x;
        if (!gt.valid[i]) continue;
        const double du = pred.at(x, y, 0) - gt.u[i];
        const double dv = pred.at(x, y, 1) - gt.v[i];
        const double err = std::hypot(du, dv);
        err_sum += err;
        out_sum += err > 1.0 ? 1.0 : 0.0;
        ++n;
        const double norm = std::hypot(gt.u[i], gt.v[i]);
        if (norm <= 10.0) {
          b0 += err;
          ++n0;
        } else if (norm <= 40.0) {
          b1 += err;
          ++n1;
        } else {
          b2 += err;
          ++n2;
        }
      }
  }

  MetricReport report() const {
    if (n == 0) throw EmptyMask("metric_epe: no valid pixel");
    MetricReport r;
    r.epe = err_sum / double(n);
    r.outlier_1px = out_sum / double(n);
    r.epe_s0_10 = n0 ? b0 / double(n0) : 0.0;
    r.epe_s10_40 = n1 ? b1 / double(n1) : 0.0;
    r.epe_s40 = n2 ? b2 / double(n2) : 0.0;
    r.n_valid = n;
    return r;
  }
};

}  // namespace

MetricReport metric_epe(const DensePrediction& pred, const FlowField& gt) {
  check(pred.width == gt.width && pred.height == gt.height && pred.channels >= 2,
        "metric_epe: shape mismatch");
  EpeAccum acc;
  acc.add(pred, gt);
  return acc.report();
}

std::string MetricReport::to_csv(TaskKind task) const {
  std::ostringstream os;
  os << "metric,value\n";
  char buf[64];
  auto line = [&](const char* name, double v) {
    std::snprintf(buf, sizeof(buf), "%s,%.8g\n", name, v);
    os << buf;
  };
  if (task == TaskKind::segmentation) {
    line("miou", miou);
  } else {
    line("epe", epe);
    line("outlier_1px", outlier_1px);
    line("epe_s0_10", epe_s0_10);
    line("epe_s10_40", epe_s10_40);
    line("epe_s40", epe_s40);
  }
  return os.str();
}

MetricReport evaluate_seg(const TransformerModel& m, const std::vector<SegSample>& samples,
                          const EvalSpec& eval, int train_w, int train_h, double tau_mult) {
  check(!samples.empty(), "evaluate_seg: empty sample list");
  double acc = 0.0;
  for (const auto& s : samples) {
    DensePrediction pred;
    if (eval.strategy == "full") {
      pred = predict_full(m, s.image, s.width, s.height, tau_mult);
    } else if (eval.strategy == "resize") {
      const int tw = eval.crop_w > 0 ? eval.crop_w : train_w;
      const int th = eval.crop_h > 0 ? eval.crop_h : train_h;
      pred = predict_resize(m, s.image, s.width, s.height, tw, th, tau_mult);
    } else if (eval.strategy == "tiling") {
      TilingSpec t{eval.crop_w > 0 ? eval.crop_w : train_w,
                   eval.crop_h > 0 ? eval.crop_h : train_h, eval.overlap};
      pred = predict_tiled(m, s.image, s.width, s.height, t, tau_mult);
    } else {
      throw ConfigError("unknown eval strategy: " + eval.strategy);
    }
    acc += metric_miou(argmax_labels(pred), s.labels, m.cfg.n_classes);
  }
  MetricReport r;
  r.miou = acc / double(samples.size());
  return r;
}

MetricReport evaluate_flow(const TransformerModel& m, const std::vector<FlowSample>& samples,
                           const EvalSpec& eval, int train_w, int train_h, double tau_mult) {
  check(!samples.empty(), "evaluate_flow: empty sample list");
  EpeAccum acc;
  for (const auto& s : samples) {
    DensePrediction pred;
    if (eval.strategy == "full") {
      pred = predict_full_pair(m, s.frame1, s.frame2, s.width, s.height, tau_mult);
    } else if (eval.strategy == "resize") {
      const int tw = eval.crop_w > 0 ? eval.crop_w : train_w;
      const int th = eval.crop_h > 0 ? eval.crop_h : train_h;
      pred = predict_resize_pair(m, s.frame1, s.frame2, s.width, s.height, tw, th, tau_mult);
    } else if (eval.strategy == "tiling") {
      TilingSpec t{eval.crop_w > 0 ? eval.crop_w : train_w,
                   eval.crop_h > 0 ? eval.crop_h : train_h, eval.overlap};
      pred = predict_tiled_pair(m, s.frame1, s.frame2, s.width, s.height, t, tau_mult);
    } else {
      throw ConfigError("unknown eval strategy: " + eval.strategy);
    }
    acc.add(pred, s.flow);
  }
  return acc.report();
}

// ---- calibration ----

std::string SweepResult::to_csv() const {
  std::ostringstream os;
  os << "tau,objective\n";
  char buf[80];
  for (const auto& [tau, obj] : curve) {
    std::snprintf(buf, sizeof(buf), "%.6g,%.10g\n", tau, obj);
    os << buf;
  }
  return os.str();
}

SweepResult temperature_sweep(const std::function<double(double)>& objective, double lo, double hi,
                              double step) {
  check(step > 0 && hi >= lo, "temperature_sweep: empty grid");
  SweepResult res;
  const int n = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
  double best = 0.0;
  for (int i = 0; i < n; ++i) {
    const double tau = lo + i * step;
    const double obj = objective(tau);
    res.curve.emplace_back(tau, obj);
    if (i == 0 || obj < best) {
      best = obj;
      res.best_tau = tau;
    }
  }
  return res;
}

double calibration_objective_seg(const TransformerModel& m, const std::vector<SegSample>& samples,
                                 double tau_mult) {
  NoGradGuard ng;
  check(!samples.empty(), "calibration: empty sample list");
  double total = 0.0;
  int64_t count = 0;
  for (const auto& s : samples) {
    const TokenGrid grid = grid_for(m, s.width, s.height);
    Tensor img = Tensor::from_data({s.width * s.height, 3}, s.image, false);
    const WindowSet ws = full_window_set(grid);
    auto maps = dense_forward_mono(m, img, grid, ws, tau_mult);
    int64_t n = 0;
    Tensor sum = window_cross_entropy_sum(maps, ws, grid, s.labels, &n);
    total += sum.item();
    count += n;
  }
  if (count == 0) throw EmptyMask("calibration: no supervised pixel");
  return total / double(count);
}

double calibration_objective_flow(const TransformerModel& m,
                                  const std::vector<FlowSample>& samples, double tau_mult) {
  NoGradGuard ng;
  check(!samples.empty(), "calibration: empty sample list");
  double total = 0.0;
  int64_t count = 0;
  for (const auto& s : samples) {
    const TokenGrid grid = grid_for(m, s.width, s.height);
    Tensor f1 = Tensor::from_data({s.width * s.height, 3}, s.frame1, false);
    Tensor f2 = Tensor::from_data({s.width * s.height, 3}, s.frame2, false);
    const WindowSet ws = full_window_set(grid);
    auto maps = dense_forward_bino(m, f1, f2, grid, ws, ws, tau_mult);
    int64_t n = 0;
    Tensor sum = window_laplacian_sum(maps, ws, grid, s.flow, &n);
    total += sum.item();
    count += n;
  }
  if (count == 0) throw EmptyMask("calibration: no supervised pixel");
  return total / double(count);
}

SweepResult calibrate_temperature_sweep_seg(const TransformerModel& m,
                                            const std::vector<SegSample>& train_subset, double lo,
                                            double hi, double step) {
  return temperature_sweep(
      [&](double tau) { return calibration_objective_seg(m, train_subset, tau); }, lo, hi, step);
}

SweepResult calibrate_temperature_sweep_flow(const TransformerModel& m,
                                             const std::vector<FlowSample>& train_subset,
                                             double lo, double hi, double step) {
  return temperature_sweep(
      [&](double tau) {
        EpeAccum acc;
        for (const auto& s : train_subset)
          acc.add(predict_full_pair(m, s.frame1, s.frame2, s.width, s.height, tau), s.flow);
        return acc.report().epe;
      },
      lo, hi, step);
}

namespace {

/// Shared descent loop for the temperature finetuning. objective_graph
/// must build the differentiable objective (mean over the subset);
/// objective_value evaluates it without a graph.
TemperatureTable finetune_impl(TransformerModel& m,
                               const std::function<Tensor()>& objective_graph,
                               const std::function<double()>& objective_value, int steps,
                               double lr) {
  const auto sites = m.temperature_sites();
  std::vector<bool> saved_flags;
  for (auto& [name, t] : m.params) {
    saved_flags.push_back(t.requires_grad());
    const bool is_tau = name.size() >= 4 && name.compare(name.size() - 4, 4, ".tau") == 0;
    t.set_requires_grad(is_tau);
  }

  double current = objective_value();
  double step_size = lr;
  for (int it = 0; it < steps && step_size > 1e-8; ++it) {
    m.params.zero_grads();
    Tensor obj = objective_graph();
    obj.backward();

    std::vector<std::vector<double>> saved;
    for (const auto& s : sites) saved.push_back(m.params.at(s).data());
    for (const auto& s : sites) {
      Tensor& t = m.params.at(s);
      for (size_t i = 0; i < t.data().size(); ++i)
        t.data()[i] = std::max(1e-3, t.data()[i] - step_size * t.grad()[i]);
    }
    const double proposed = objective_value();
    if (proposed <= current) {
      current = proposed;
    } else {
      for (size_t si = 0; si < sites.size(); ++si) m.params.at(sites[si]).data() = saved[si];
      step_size *= 0.5;
    }
  }

  size_t pi = 0;
  for (auto& [name, t] : m.params) t.set_requires_grad(saved_flags[pi++]);
  return m.temperatures();
}

}  // namespace

TemperatureTable finetune_temperatures_seg(TransformerModel& m,
                                           const std::vector<SegSample>& train_subset, int steps,
                                           double lr) {
  auto graph = [&]() -> Tensor {
    Tensor total;
    int64_t count = 0;
    for (const auto& s : train_subset) {
      const TokenGrid grid = grid_for(m, s.width, s.height);
      Tensor img = Tensor::from_data({s.width * s.height, 3}, s.image, false);
      const WindowSet ws = full_window_set(grid);
      auto maps = dense_forward_mono(m, img, grid, ws);
      int64_t n = 0;
      Tensor sum = window_cross_entropy_sum(maps, ws, grid, s.labels, &n);
      count += n;
      total = total.defined() ? add(total, sum) : sum;
    }
    return scale(total, 1.0 / double(count));
  };
  auto value = [&]() { return calibration_objective_seg(m, train_subset); };
  return finetune_impl(m, graph, value, steps, lr);
}

TemperatureTable finetune_temperatures_flow(TransformerModel& m,
                                            const std::vector<FlowSample>& train_subset, int steps,
                                            double lr) {
  auto graph = [&]() -> Tensor {
    Tensor total;
    int64_t count = 0;
    for (const auto& s : train_subset) {
      const TokenGrid grid = grid_for(m, s.width, s.height);
      Tensor f1 = Tensor::from_data({s.width * s.height, 3}, s.frame1, false);
      Tensor f2 = Tensor::from_data({s.width * s.height, 3}, s.frame2, false);
      const WindowSet ws = full_window_set(grid);
      auto maps = dense_forward_bino(m, f1, f2, grid, ws, ws);
      int64_t n = 0;
      Tensor sum = window_laplacian_sum(maps, ws, grid, s.flow, &n);
      count += n;
      total = total.defined() ? add(total, sum) : sum;
    }
    return scale(total, 1.0 / double(count));
  };
  auto value = [&]() { return calibration_objective_flow(m, train_subset); };
  return finetune_impl(m, graph, value, steps, lr);
}

// ---- resolution robustness ----

namespace {

template <typename Sample, typename MetricFn>
std::vector<RobustnessPoint> robustness_impl(const std::vector<Sample>& samples,
                                             const std::vector<std::pair<int, int>>& sizes,
                                             int crops_per_sample, uint64_t seed,
                                             MetricFn&& metric_on_crop) {
  std::vector<RobustnessPoint> points;
  for (const auto& [cw, chh] : sizes) {
    Rng rng(Rng::derive(seed, uint64_t(cw) * 100003 + uint64_t(chh)));
    double acc = 0.0;
    int n = 0;
    for (const auto& s : samples) {
      check(cw <= s.width && chh <= s.height, "robustness: crop exceeds sample");
      for (int c = 0; c < crops_per_sample; ++c) {
        const int x0 = static_cast<int>(rng.uniform_int(0, s.width - cw));
        const int y0 = static_cast<int>(rng.uniform_int(0, s.height - chh));
        acc += metric_on_crop(s, x0, y0, cw, chh);
        ++n;
      }
    }
    points.push_back(RobustnessPoint{cw, chh, acc / double(n)});
  }
  return points;
}

}  // namespace

std::vector<RobustnessPoint> robustness_sweep_seg(const TransformerModel& m,
                                                  const std::vector<SegSample>& samples,
                                                  const std::vector<std::pair<int, int>>& sizes,
                                                  int crops_per_sample, uint64_t seed,
                                                  double tau_mult) {
  return robustness_impl(samples, sizes, crops_per_sample, seed,
                         [&](const SegSample& s, int x0, int y0, int cw, int ch) {
                           auto img = crop_image(s.image, s.width, s.height, 3, x0, y0, cw, ch);
                           std::vector<int> lbl(size_t(cw) * ch);
                           for (int y = 0; y < ch; ++y)
                             for (int x = 0; x < cw; ++x)
                               lbl[size_t(y) * cw + x] = s.labels[size_t(y0 + y) * s.width + x0 + x];
                           DensePrediction pred = predict_full(m, img, cw, ch, tau_mult);
                           return metric_miou(argmax_labels(pred), lbl, m.cfg.n_classes);
                         });
}

std::vector<RobustnessPoint> robustness_sweep_flow(const TransformerModel& m,
                                                   const std::vector<FlowSample>& samples,
                                                   const std::vector<std::pair<int, int>>& sizes,
                                                   int crops_per_sample, uint64_t seed,
                                                   double tau_mult) {
  return robustness_impl(
      samples, sizes, crops_per_sample, seed,
      [&](const FlowSample& s, int x0, int y0, int cw, int ch) {
        auto f1 = crop_image(s.frame1, s.width, s.height, 3, x0, y0, cw, ch);
        auto f2 = crop_image(s.frame2, s.width, s.height, 3, x0, y0, cw, ch);
        FlowField gt;
        gt.resize(cw, ch);
        for (int y = 0; y < ch; ++y)
          for (int x = 0; x < cw; ++x) {
            const size_t src = size_t(y0 + y) * s.width + (x0 + x);
            const size_t dst = size_t(y) * cw + x;
            gt.u[dst] = s.flow.u[src];
            gt.v[dst] = s.flow.v[src];
            // Endpoints must stay inside the crop to remain supervisable.
            const double ex = x0 + x + s.flow.u[src], ey = y0 + y + s.flow.v[src];
            gt.valid[dst] = s.flow.valid[src] && ex >= x0 && ex <= x0 + cw - 1.0 && ey >= y0 &&
                                    ey <= y0 + ch - 1.0
                                ? 1
                                : 0;
          }
        DensePrediction pred = predict_full_pair(m, f1, f2, cw, ch, tau_mult);
        EpeAccum acc;
        acc.add(pred, gt);
        return acc.n == 0 ? 0.0 : acc.report().epe;
      });
}

std::string robustness_csv(const std::vector<RobustnessPoint>& points) {
  std::ostringstream os;
  os << "resolution,metric\n";
  char buf[80];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof(buf), "%dx%d,%.8g\n", p.width, p.height, p.metric);
    os << buf;
  }
  return os.str();
}

}  // namespace multiwin
