#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "multiwin/model.hpp"
#include "multiwin/runconfig.hpp"
#include "multiwin/synth.hpp"

namespace multiwin {

/// Test-time tiling: fixed-size crops on a regular stride with the last
/// row/column snapped to the image edge; overlapping outputs averaged.
struct TilingSpec {
  int crop_w = 0;  // pixels
  int crop_h = 0;
  double overlap_ratio = 0.0;  // in [0, 1)

  void validate(int image_w, int image_h) const;
  int stride_x() const;
  int stride_y() const;
};

/// Dense per-pixel output: logits for segmentation, (u, v, log-scale) for
/// flow.
struct DensePrediction {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> values;  // H*W*C row-major

  double at(int x, int y, int c) const { return values[(size_t(y) * width + x) * channels + c]; }
};

struct MetricReport {
  // segmentation
  double miou = 0.0;
  // flow
  double epe = 0.0;
  double outlier_1px = 0.0;
  double epe_s0_10 = 0.0;
  double epe_s10_40 = 0.0;
  double epe_s40 = 0.0;
  int64_t n_valid = 0;

  std::string to_csv(TaskKind task) const;  // `metric,value` lines
};

// ---- prediction strategies ----

/// Single forward over the full token set; no masking, no aggregation.
DensePrediction predict_full(const TransformerModel& m, const std::vector<double>& image, int w,
                             int h, double tau_mult = 1.0);
DensePrediction predict_full_pair(const TransformerModel& m, const std::vector<double>& frame1,
                                  const std::vector<double>& frame2, int w, int h,
                                  double tau_mult = 1.0);

/// Downscale to the train resolution, forward, upscale predictions
/// (bilinear logits; flow values rescaled per axis).
DensePrediction predict_resize(const TransformerModel& m, const std::vector<double>& image, int w,
                               int h, int train_w, int train_h, double tau_mult = 1.0);
DensePrediction predict_resize_pair(const TransformerModel& m, const std::vector<double>& frame1,
                                    const std::vector<double>& frame2, int w, int h, int train_w,
                                    int train_h, double tau_mult = 1.0);

DensePrediction predict_tiled(const TransformerModel& m, const std::vector<double>& image, int w,
                              int h, const TilingSpec& tiling, double tau_mult = 1.0);
DensePrediction predict_tiled_pair(const TransformerModel& m, const std::vector<double>& frame1,
                                   const std::vector<double>& frame2, int w, int h,
                                   const TilingSpec& tiling, double tau_mult = 1.0);

/// Per-pixel number of crops covering each pixel under a tiling spec.
std::vector<int> tile_count_map(int w, int h, const TilingSpec& tiling);

// ---- metrics ----

std::vector<int> argmax_labels(const DensePrediction& pred);

/// Per-class IoU averaged over classes present in gt or prediction.
double metric_miou(std::span<const int> pred, std::span<const int> gt, int k);

/// EPE / outlier rate / gt-norm-bucketed EPE over valid pixels.
MetricReport metric_epe(const DensePrediction& pred, const FlowField& gt);

MetricReport evaluate_seg(const TransformerModel& m, const std::vector<SegSample>& samples,
                          const EvalSpec& eval, int train_w, int train_h, double tau_mult = 1.0);
MetricReport evaluate_flow(const TransformerModel& m, const std::vector<FlowSample>& samples,
                           const EvalSpec& eval, int train_w, int train_h, double tau_mult = 1.0);

// ---- temperature calibration ----

struct SweepResult {
  double best_tau = 1.0;
  std::vector<std::pair<double, double>> curve;  // (tau, objective)

  std::string to_csv() const;  // `tau,objective`
};

/// Evaluates `objective` on a uniform tau grid; argmin, ties to smallest.
SweepResult temperature_sweep(const std::function<double(double)>& objective, double lo, double hi,
                              double step);

/// Objective: full-resolution train loss (segmentation).
SweepResult calibrate_temperature_sweep_seg(const TransformerModel& m,
                                            const std::vector<SegSample>& train_subset, double lo,
                                            double hi, double step);
/// Objective: full-resolution train EPE (flow).
SweepResult calibrate_temperature_sweep_flow(const TransformerModel& m,
                                             const std::vector<FlowSample>& train_subset,
                                             double lo, double hi, double step);

/// Gradient descent on the train objective w.r.t. the per-layer per-head
/// temperatures only; weights frozen. Steps that increase the objective
/// are rejected (with step-size backoff), so the objective never rises
/// above its starting point.
TemperatureTable finetune_temperatures_seg(TransformerModel& m,
                                           const std::vector<SegSample>& train_subset, int steps,
                                           double lr);
TemperatureTable finetune_temperatures_flow(TransformerModel& m,
                                            const std::vector<FlowSample>& train_subset, int steps,
                                            double lr);

/// Full-resolution train objective at the current temperatures (the
/// quantity the calibration minimizes).
double calibration_objective_seg(const TransformerModel& m, const std::vector<SegSample>& samples,
                                 double tau_mult = 1.0);
double calibration_objective_flow(const TransformerModel& m,
                                  const std::vector<FlowSample>& samples, double tau_mult = 1.0);

// ---- resolution robustness ----

struct RobustnessPoint {
  int width = 0;
  int height = 0;
  double metric = 0.0;
};

std::vector<RobustnessPoint> robustness_sweep_seg(const TransformerModel& m,
                                                  const std::vector<SegSample>& samples,
                                                  const std::vector<std::pair<int, int>>& sizes,
                                                  int crops_per_sample, uint64_t seed,
                                                  double tau_mult = 1.0);
std::vector<RobustnessPoint> robustness_sweep_flow(const TransformerModel& m,
                                                   const std::vector<FlowSample>& samples,
                                                   const std::vector<std::pair<int, int>>& sizes,
                                                   int crops_per_sample, uint64_t seed,
                                                   double tau_mult = 1.0);
std::string robustness_csv(const std::vector<RobustnessPoint>& points);

// ---- resizing helpers (shared with tests) ----

std::vector<double> bilinear_resize(const std::vector<double>& src, int w, int h, int channels,
                                    int new_w, int new_h);
std::vector<double> crop_image(const std::vector<double>& src, int w, int h, int channels, int x0,
                               int y0, int cw, int ch);

}  // namespace multiwin
