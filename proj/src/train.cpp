#include "multiwin/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "multiwin/infer.hpp"

namespace multiwin {

const char* kCodeVersion = "multiwin 0.1.0";

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::winwin: return "winwin";
    case TrainMode::single_crop: return "single_crop";
    case TrainMode::full_res: return "full_res";
  }
  return "?";
}

std::string to_string(SecondFrameMode m) {
  switch (m) {
    case SecondFrameMode::flow_guided: return "flow_guided";
    case SecondFrameMode::same: return "same";
    case SecondFrameMode::random_tokens: return "random_tokens";
  }
  return "?";
}

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "winwin") return TrainMode::winwin;
  if (s == "single_crop") return TrainMode::single_crop;
  if (s == "full_res") return TrainMode::full_res;
  throw ConfigError("unknown train mode: " + s);
}

SecondFrameMode second_mode_from_string(const std::string& s) {
  if (s == "flow_guided") return SecondFrameMode::flow_guided;
  if (s == "same") return SecondFrameMode::same;
  if (s == "random_tokens") return SecondFrameMode::random_tokens;
  throw ConfigError("unknown second-frame mode: " + s);
}

void TrainConfig::validate() const {
  check(epochs >= 1 && batch_size >= 1, "train: epochs and batch_size must be positive");
  check(base_lr > 0 && min_lr >= 0, "train: learning rates must be positive");
  check(warmup_epochs >= 0 && warmup_epochs < epochs, "train: warmup_epochs must be < epochs");
  check(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, "train: betas must be in (0,1)");
  check(weight_decay >= 0, "train: weight_decay must be >= 0");
}

// ---- losses ----

Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> labels,
                          std::span<const uint8_t> mask, int64_t* n_supervised) {
  int64_t count = 0;
  Tensor sum = cross_entropy_sum(logits, labels, mask, &count);
  if (count == 0) throw EmptyMask("cross_entropy_loss: no supervised pixel");
  if (n_supervised) *n_supervised = count;
  return scale(sum, 1.0 / double(count));
}

Tensor laplacian_flow_loss(const Tensor& pred, std::span<const double> gt_u,
                           std::span<const double> gt_v, std::span<const uint8_t> mask,
                           int64_t* n_supervised) {
  int64_t count = 0;
  Tensor sum = laplacian_sum(pred, gt_u, gt_v, mask, &count);
  if (count == 0) throw EmptyMask("laplacian_flow_loss: no supervised pixel");
  if (n_supervised) *n_supervised = count;
  return scale(sum, 1.0 / double(count));
}

Tensor window_cross_entropy_sum(const std::vector<FeatureMap>& maps, const WindowSet& ws,
                                const TokenGrid& grid, const std::vector<int>& labels,
                                int64_t* count) {
  check(maps.size() == ws.windows.size(), "loss: map count must match window count");
  const int p = grid.patch_size;
  const int img_w = grid.width_px();
  Tensor total;
  int64_t n_total = 0;
  for (size_t i = 0; i < maps.size(); ++i) {
    const Window& w = ws.windows[i];
    const int wpx = w.w * p, hpx = w.h * p;
    std::vector<int> win_labels(size_t(wpx) * hpx);
    std::vector<uint8_t> sup(size_t(wpx) * hpx, 1);
    for (int y = 0; y < hpx; ++y)
      for (int x = 0; x < wpx; ++x)
        win_labels[size_t(y) * wpx + x] = labels[size_t(w.y0 * p + y) * img_w + (w.x0 * p + x)];
    int64_t n = 0;
    Tensor s = cross_entropy_sum(maps[i].data, win_labels, sup, &n);
    n_total += n;
    total = total.defined() ? add(total, s) : s;
  }
  if (count) *count = n_total;
  return total;
}

Tensor window_laplacian_sum(const std::vector<FeatureMap>& maps, const WindowSet& ws,
                            const TokenGrid& grid, const FlowField& gt, int64_t* count) {
  check(maps.size() == ws.windows.size(), "loss: map count must match window count");
  const int p = grid.patch_size;
  const int img_w = grid.width_px();
  Tensor total;
  int64_t n_total = 0;
  for (size_t i = 0; i < maps.size(); ++i) {
    const Window& w = ws.windows[i];
    const int wpx = w.w * p, hpx = w.h * p;
    std::vector<double> gu(size_t(wpx) * hpx), gv(size_t(wpx) * hpx);
    std::vector<uint8_t> sup(size_t(wpx) * hpx);
    for (int y = 0; y < hpx; ++y)
      for (int x = 0; x < wpx; ++x) {
        const size_t src = size_t(w.y0 * p + y) * img_w + (w.x0 * p + x);
        const size_t dst = size_t(y) * wpx + x;
        gu[dst] = gt.u[src];
        gv[dst] = gt.v[src];
        sup[dst] = gt.valid[src];
      }
    int64_t n = 0;
    Tensor s = laplacian_sum(maps[i].data, gu, gv, sup, &n);
    n_total += n;
    total = total.defined() ? add(total, s) : s;
  }
  if (count) *count = n_total;
  return total;
}

// ---- forwards ----

std::vector<FeatureMap> dense_forward_mono(const TransformerModel& m, const Tensor& image,
                                           const TokenGrid& grid, const WindowSet& ws,
                                           double tau_mult) {
  const std::vector<int> ids = token_indices(ws, grid);
  Tensor feats = m.encode_image(image, grid, ids, tau_mult);
  return m.apply_head(scatter_to_feature_maps(feats, ws, grid));
}

std::vector<FeatureMap> dense_forward_bino(const TransformerModel& m, const Tensor& frame1,
                                           const Tensor& frame2, const TokenGrid& grid,
                                           const WindowSet& ws1, const WindowSet& ws2,
                                           double tau_mult) {
  const std::vector<int> ids1 = token_indices(ws1, grid);
  const std::vector<int> ids2 = token_indices(ws2, grid);
  Tensor enc1 = m.encode_image(frame1, grid, ids1, tau_mult);
  Tensor enc2 = m.encode_image(frame2, grid, ids2, tau_mult);
  Tensor dec = m.decode(enc1, positions_of(ids1, grid), enc2, positions_of(ids2, grid), tau_mult);
  return m.apply_head(scatter_to_feature_maps(dec, ws1, grid));
}

// ---- optimizer / schedule ----

OptimizerState OptimizerState::init(const ParamStore& params) {
  OptimizerState st;
  for (const auto& [name, t] : params) {
    st.m.emplace_back(t.numel(), 0.0);
    st.v.emplace_back(t.numel(), 0.0);
  }
  return st;
}

void adamw_step(ParamStore& params, OptimizerState& state, double lr, const TrainConfig& cfg,
                const std::vector<double>& lr_scale) {
  check(state.m.size() == params.size(), "optimizer state does not match parameters");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  size_t pi = 0;
  for (auto& [name, t] : params) {
    const double plr = lr * (lr_scale.empty() ? 1.0 : lr_scale[pi]);
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    auto& w = t.data();
    const auto& g = t.grad();
    for (size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= plr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * w[i]);
    }
    ++pi;
  }
}

double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr,
             double min_lr) {
  check(step >= 0 && step < total_steps, "lr_at: step outside schedule");
  if (step < warmup_steps) return base_lr * double(step + 1) / double(warmup_steps);
  if (total_steps - 1 == warmup_steps || step == warmup_steps) return base_lr;
  const double progress = double(step - warmup_steps) / double(total_steps - 1 - warmup_steps);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(M_PI * progress));
}

std::vector<double> layer_decay_scales(const ParamStore& params, const ModelConfig& cfg,
                                       double decay) {
  std::vector<double> scales;
  scales.reserve(params.size());
  if (decay <= 0.0) {
    scales.assign(params.size(), 1.0);
    return scales;
  }
  const int n_layers = cfg.n_encoder_blocks + 1;  // embedding sits at depth 0
  for (const auto& [name, t] : params) {
    int depth = n_layers;  // head/decoder/norms keep full lr
    if (name.rfind("patch_embed", 0) == 0)
      depth = 0;
    else if (name.rfind("enc", 0) == 0 && name[3] >= '0' && name[3] <= '9')
      depth = std::stoi(name.substr(3, name.find('.') - 3)) + 1;
    scales.push_back(std::pow(decay, double(n_layers - depth)));
  }
  return scales;
}

// ---- trainer ----

SamplerSpec RunConfig::effective_sampler() const {
  SamplerSpec s = sampler;
  if (train.mode == TrainMode::full_res) {
    s = SamplerSpec{};
    s.mode = SamplerMode::full;
  } else if (train.mode == TrainMode::single_crop) {
    s.mode = SamplerMode::single_crop;
  }
  return s;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  check(data.width > 0 && data.height > 0, "data: resolution must be positive");
  check(data.width % model.patch_size == 0 && data.height % model.patch_size == 0,
        "data: resolution must be divisible by patch_size");
  check(data.n_train >= 1 && data.n_val >= 0, "data: dataset sizes must be positive");
  check(train.batch_size <= data.n_train, "train: batch_size exceeds the training set");
  effective_sampler().validate(grid());
  if (model.task == TaskKind::flow) {
    check(data.max_disp > 0 && data.max_disp < std::min(data.width, data.height) / 2.0,
          "data: max_disp out of range");
    check(bino.std_ratio >= 0, "bino: std_ratio must be >= 0");
  }
}

namespace {

Tensor image_tensor(const std::vector<double>& image, int w, int h) {
  return Tensor::from_data({w * h, 3}, image, false);
}

}  // namespace

Trainer::Trainer(const RunConfig& cfg)
    : cfg_(cfg),
      grid_(cfg.grid()),
      model_(TransformerModel::init(cfg.model, Rng::derive(cfg.seed, 0x696e6974ULL))),
      win_rng_(Rng::derive(cfg.seed, 0x77696eULL)),
      order_rng_(Rng::derive(cfg.seed, 0x6f72646572ULL)) {
  cfg_.validate();
  opt_ = OptimizerState::init(model_.params);
  lr_scales_ = layer_decay_scales(model_.params, cfg_.model, cfg_.train.lr_layer_decay);

  // The dataset depends only on (seed, data config) so that sampler/mode
  // variants with the same seed train on identical samples.
  const uint64_t data_seed = Rng::derive(cfg_.seed, 0x64617461ULL);
  if (cfg_.model.task == TaskKind::segmentation) {
    if (!cfg_.data.dir.empty()) {
      auto all = read_seg_dataset(cfg_.data.dir);
      check(static_cast<int>(all.size()) >= cfg_.data.n_train + cfg_.data.n_val,
            "dataset dir has fewer samples than n_train + n_val");
      seg_train_.assign(all.begin(), all.begin() + cfg_.data.n_train);
      seg_val_.assign(all.begin() + cfg_.data.n_train,
                      all.begin() + cfg_.data.n_train + cfg_.data.n_val);
    } else {
      for (int i = 0; i < cfg_.data.n_train; ++i)
        seg_train_.push_back(gen_seg_sample(cfg_.data.height, cfg_.data.width,
                                            cfg_.model.n_classes, Rng::derive(data_seed, i)));
      for (int i = 0; i < cfg_.data.n_val; ++i)
        seg_val_.push_back(gen_seg_sample(cfg_.data.height, cfg_.data.width, cfg_.model.n_classes,
                                          Rng::derive(data_seed, 100000 + i)));
    }
    for (const auto& s : seg_train_)
      train_images_.push_back(image_tensor(s.image, s.width, s.height));
  } else {
    if (!cfg_.data.dir.empty()) {
      auto all = read_flow_dataset(cfg_.data.dir);
      check(static_cast<int>(all.size()) >= cfg_.data.n_train + cfg_.data.n_val,
            "dataset dir has fewer samples than n_train + n_val");
      flow_train_.assign(all.begin(), all.begin() + cfg_.data.n_train);
      flow_val_.assign(all.begin() + cfg_.data.n_train,
                       all.begin() + cfg_.data.n_train + cfg_.data.n_val);
    } else {
      for (int i = 0; i < cfg_.data.n_train; ++i)
        flow_train_.push_back(gen_flow_sample(cfg_.data.height, cfg_.data.width,
                                              cfg_.data.max_disp, Rng::derive(data_seed, i)));
      for (int i = 0; i < cfg_.data.n_val; ++i)
        flow_val_.push_back(gen_flow_sample(cfg_.data.height, cfg_.data.width, cfg_.data.max_disp,
                                            Rng::derive(data_seed, 100000 + i)));
    }
    for (const auto& s : flow_train_) {
      train_images_.push_back(image_tensor(s.frame1, s.width, s.height));
      train_images2_.push_back(image_tensor(s.frame2, s.width, s.height));
    }
  }

  steps_per_epoch_ = cfg_.data.n_train / cfg_.train.batch_size;
  total_steps_ = steps_per_epoch_ * cfg_.train.epochs;
}

WindowSet Trainer::draw_first_windows() {
  return sample_windows(grid_, cfg_.effective_sampler(), win_rng_);
}

WindowSet Trainer::draw_second_windows(const FlowSample& s, const WindowSet& ws1) {
  switch (cfg_.second_mode) {
    case SecondFrameMode::same:
      return same_windows_second_frame(ws1, grid_, grid_);
    case SecondFrameMode::flow_guided:
      return sample_second_frame_windows(s.flow, ws1, cfg_.bino, grid_, grid_, win_rng_);
    case SecondFrameMode::random_tokens: {
      EndpointBinMap bins = bin_flow_endpoints(s.flow, ws1, grid_, grid_);
      EndpointBinMap noisy = perturb_counts(bins, cfg_.bino.std_ratio, win_rng_);
      return greedy_select(noisy, cfg_.second_random_tokens, 1, 1);
    }
  }
  throw InvalidSpec("unreachable second-frame mode");
}

void Trainer::sample_loss(int sample_idx, Tensor* sum_out, int64_t* count_out) {
  const WindowSet ws1 = draw_first_windows();
  if (cfg_.model.task == TaskKind::segmentation) {
    const SegSample& s = seg_train_[size_t(sample_idx)];
    auto maps = dense_forward_mono(model_, train_images_[size_t(sample_idx)], grid_, ws1);
    *sum_out = window_cross_entropy_sum(maps, ws1, grid_, s.labels, count_out);
  } else {
    const FlowSample& s = flow_train_[size_t(sample_idx)];
    const WindowSet ws2 = draw_second_windows(s, ws1);
    auto maps = dense_forward_bino(model_, train_images_[size_t(sample_idx)],
                                   train_images2_[size_t(sample_idx)], grid_, ws1, ws2);
    *sum_out = window_laplacian_sum(maps, ws1, grid_, s.flow, count_out);
  }
}

double Trainer::step() {
  check(step_index_ < total_steps_, "step() past the end of the schedule");
  const int64_t epoch_pos = step_index_ % steps_per_epoch_;
  if (epoch_pos == 0) {
    epoch_order_.resize(cfg_.data.n_train);
    std::iota(epoch_order_.begin(), epoch_order_.end(), 0);
    for (size_t i = 0; i + 1 < epoch_order_.size(); ++i) {
      const size_t j = i + size_t(order_rng_.uniform_below(epoch_order_.size() - i));
      std::swap(epoch_order_[i], epoch_order_[j]);
    }
  }

  Tensor total_sum;
  int64_t total_count = 0;
  for (int b = 0; b < cfg_.train.batch_size; ++b) {
    const int idx = epoch_order_[size_t(epoch_pos * cfg_.train.batch_size + b)];
    Tensor s;
    int64_t n = 0;
    sample_loss(idx, &s, &n);
    total_count += n;
    total_sum = total_sum.defined() ? add(total_sum, s) : s;
  }
  if (total_count == 0) throw EmptyMask("training batch has no supervised pixel");
  Tensor loss = scale(total_sum, 1.0 / double(total_count));

  const double loss_value = loss.item();
  if (!std::isfinite(loss_value)) {
    if (!cfg_.out_dir.empty()) {
      std::filesystem::create_directories(cfg_.out_dir);
      std::ofstream diag(std::filesystem::path(cfg_.out_dir) / "diagnostic.txt");
      diag << "non-finite loss at step " << step_index_ << "\n";
      for (const auto& [name, t] : model_.params) {
        double mx = 0;
        for (double x : t.data()) mx = std::max(mx, std::abs(x));
        diag << name << " max_abs " << mx << "\n";
      }
    }
    throw std::runtime_error("training aborted: non-finite loss at step " +
                             std::to_string(step_index_));
  }

  model_.params.zero_grads();
  loss.backward();

  const double lr = lr_at(step_index_, total_steps_, steps_per_epoch_ * cfg_.train.warmup_epochs,
                          cfg_.train.base_lr, cfg_.train.min_lr);
  adamw_step(model_.params, opt_, lr, cfg_.train, lr_scales_);
  ++step_index_;
  return loss_value;
}

double Trainer::validate() {
  NoGradGuard ng;
  if (cfg_.model.task == TaskKind::segmentation) {
    if (seg_val_.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& s : seg_val_) {
      DensePrediction pred = predict_full(model_, s.image, s.width, s.height);
      acc += metric_miou(argmax_labels(pred), s.labels, cfg_.model.n_classes);
    }
    return acc / double(seg_val_.size());
  }
  if (flow_val_.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& s : flow_val_) {
    DensePrediction pred = predict_full_pair(model_, s.frame1, s.frame2, s.width, s.height);
    acc += metric_epe(pred, s.flow).epe;
  }
  return acc / double(flow_val_.size());
}

TrainResult Trainer::run() {
  namespace fs = std::filesystem;
  TrainResult res;
  res.model_cfg = cfg_.model;

  std::ostringstream csv;
  csv << "epoch,step,lr,train_loss,val_metric,seconds\n";
  const auto t0 = std::chrono::steady_clock::now();

  for (int epoch = 0; epoch < cfg_.train.epochs; ++epoch) {
    double epoch_loss = 0.0;
    double last_lr = 0.0;
    for (int64_t s = 0; s < steps_per_epoch_; ++s) {
      last_lr = lr_at(step_index_, total_steps_, steps_per_epoch_ * cfg_.train.warmup_epochs,
                      cfg_.train.base_lr, cfg_.train.min_lr);
      const double l = step();
      res.step_losses.push_back(l);
      epoch_loss += l;
    }
    epoch_loss /= double(steps_per_epoch_);
    const double val = validate();
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.epoch_losses.push_back(epoch_loss);
    res.epoch_val_metrics.push_back(val);
    char line[160];
    std::snprintf(line, sizeof(line), "%d,%lld,%.8g,%.8g,%.8g,%.3f\n", epoch,
                  static_cast<long long>(step_index_), last_lr, epoch_loss, val, secs);
    csv << line;
  }
  res.final_val_metric = res.epoch_val_metrics.empty() ? 0.0 : res.epoch_val_metrics.back();
  res.metrics_csv = csv.str();

  if (!cfg_.out_dir.empty()) {
    fs::create_directories(cfg_.out_dir);
    std::ofstream(fs::path(cfg_.out_dir) / "metrics.csv") << res.metrics_csv;
    KvMap kv = cfg_.to_kv();
    kv.set("version", kCodeVersion);
    std::ofstream(fs::path(cfg_.out_dir) / "config.used.cfg") << kv.serialize();
    res.checkpoint_path = (fs::path(cfg_.out_dir) / "checkpoint.bin").string();
    save_checkpoint(res.checkpoint_path, model_.cfg, model_.params);
  }
  return res;
}

TrainResult train_run(const RunConfig& cfg) { return Trainer(cfg).run(); }

MultiSeedResult multi_seed(const RunConfig& base, int n_seeds) {
  check(n_seeds >= 2, "multi_seed: need at least 2 seeds");
  MultiSeedResult res;
  for (int i = 0; i < n_seeds; ++i) {
    RunConfig cfg = base;
    cfg.seed = base.seed + uint64_t(i);
    if (!base.out_dir.empty()) cfg.out_dir = base.out_dir + "/seed" + std::to_string(i);
    res.per_seed.push_back(train_run(cfg).final_val_metric);
  }
  const double n = double(res.per_seed.size());
  for (double x : res.per_seed) res.mean += x;
  res.mean /= n;
  double acc = 0.0;
  for (double x : res.per_seed) acc += (x - res.mean) * (x - res.mean);
  res.std = std::sqrt(acc / n);
  return res;
}

}  // namespace multiwin
