#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "multiwin/model.hpp"
#include "multiwin/runconfig.hpp"
#include "multiwin/synth.hpp"

namespace multiwin {

// ---- losses ----

/// Mean negative log-softmax over masked pixels; EmptyMask if none.
Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> labels,
                          std::span<const uint8_t> mask, int64_t* n_supervised = nullptr);

/// Mean Laplacian objective (|du| + |dv|) e^{-s} + 2s over masked pixels.
Tensor laplacian_flow_loss(const Tensor& pred, std::span<const double> gt_u,
                           std::span<const double> gt_v, std::span<const uint8_t> mask,
                           int64_t* n_supervised = nullptr);

/// Window-aware losses: per-window pixel maps are compared against the
/// global ground truth restricted to each window's pixel rectangle. Returns
/// the un-normalized sum; count accumulates supervised pixels.
Tensor window_cross_entropy_sum(const std::vector<FeatureMap>& maps, const WindowSet& ws,
                                const TokenGrid& grid, const std::vector<int>& labels,
                                int64_t* count);
Tensor window_laplacian_sum(const std::vector<FeatureMap>& maps, const WindowSet& ws,
                            const TokenGrid& grid, const FlowField& gt, int64_t* count);

// ---- window-masked forward passes ----

std::vector<FeatureMap> dense_forward_mono(const TransformerModel& m, const Tensor& image,
                                           const TokenGrid& grid, const WindowSet& ws,
                                           double tau_mult = 1.0);
std::vector<FeatureMap> dense_forward_bino(const TransformerModel& m, const Tensor& frame1,
                                           const Tensor& frame2, const TokenGrid& grid,
                                           const WindowSet& ws1, const WindowSet& ws2,
                                           double tau_mult = 1.0);

// ---- optimizer / schedule ----

struct OptimizerState {
  std::vector<std::vector<double>> m;  // first moments, per parameter tensor
  std::vector<std::vector<double>> v;  // second moments
  int64_t step = 0;

  static OptimizerState init(const ParamStore& params);
};

/// Decoupled-weight-decay Adam update with bias correction. lr_scale holds
/// an optional per-parameter multiplier (layer decay); empty = all ones.
void adamw_step(ParamStore& params, OptimizerState& state, double lr, const TrainConfig& cfg,
                const std::vector<double>& lr_scale = {});

/// Linear warmup from 0 to base_lr, then cosine decay to min_lr at the
/// final step.
double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr,
             double min_lr);

/// Per-parameter lr multipliers decay^(depth_max - depth); identity when
/// decay <= 0.
std::vector<double> layer_decay_scales(const ParamStore& params, const ModelConfig& cfg,
                                       double decay);

// ---- training loop ----

struct TrainResult {
  ModelConfig model_cfg;
  double final_val_metric = 0.0;
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  std::vector<double> epoch_val_metrics;
  std::string metrics_csv;
  std::string checkpoint_path;  // empty when out_dir unset
};

/// Owns the model, data and optimizer for one run. Exposed so callers can
/// drive and time individual steps.
class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg);

  double step();     // one batch: sample windows, forward, backward, update
  double validate(); // full-resolution direct evaluation on the val split

  TrainResult run();  // full schedule; writes logs/checkpoint when out_dir set

  TransformerModel& model() { return model_; }
  const RunConfig& config() const { return cfg_; }
  int64_t total_steps() const { return total_steps_; }
  int64_t step_index() const { return step_index_; }

  const std::vector<SegSample>& seg_train() const { return seg_train_; }
  const std::vector<SegSample>& seg_val() const { return seg_val_; }
  const std::vector<FlowSample>& flow_train() const { return flow_train_; }
  const std::vector<FlowSample>& flow_val() const { return flow_val_; }

 private:
  void sample_loss(int sample_idx, Tensor* sum_out, int64_t* count_out);
  WindowSet draw_first_windows();
  WindowSet draw_second_windows(const FlowSample& s, const WindowSet& ws1);

  RunConfig cfg_;
  TokenGrid grid_;
  TransformerModel model_;
  OptimizerState opt_;
  std::vector<double> lr_scales_;
  Rng win_rng_;
  Rng order_rng_;
  std::vector<SegSample> seg_train_, seg_val_;
  std::vector<FlowSample> flow_train_, flow_val_;
  std::vector<Tensor> train_images_, train_images2_;  // cached [H*W,3] tensors
  std::vector<int> epoch_order_;
  int64_t steps_per_epoch_ = 0;
  int64_t total_steps_ = 0;
  int64_t step_index_ = 0;
};

TrainResult train_run(const RunConfig& cfg);

struct MultiSeedResult {
  std::vector<double> per_seed;
  double mean = 0.0;
  double std = 0.0;  // population
};

/// Runs train_run with seeds 0..n-1 (offset by the base config seed).
MultiSeedResult multi_seed(const RunConfig& base, int n_seeds);

}  // namespace multiwin
