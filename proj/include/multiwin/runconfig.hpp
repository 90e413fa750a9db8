#pragma once

#include <cstdint>
#include <string>

#include "multiwin/config.hpp"
#include "multiwin/flow_sampling.hpp"
#include "multiwin/grid.hpp"
#include "multiwin/model.hpp"

namespace multiwin {

enum class TrainMode { winwin, single_crop, full_res };
enum class SecondFrameMode { flow_guided, same, random_tokens };

std::string to_string(TrainMode m);
std::string to_string(SecondFrameMode m);
TrainMode train_mode_from_string(const std::string& s);
SecondFrameMode second_mode_from_string(const std::string& s);

struct DataConfig {
  int width = 128;
  int height = 128;
  int n_train = 32;
  int n_val = 8;
  double max_disp = 24.0;  // flow task
  std::string dir;         // optional on-disk dataset; empty = generate
};

struct TrainConfig {
  TrainMode mode = TrainMode::winwin;
  int epochs = 20;
  int batch_size = 2;
  double base_lr = 1e-3;
  int warmup_epochs = 2;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double min_lr = 1e-6;
  double lr_layer_decay = 0.0;  // 0 disables per-layer lr scaling
  double eps = 1e-8;

  void validate() const;
};

struct EvalSpec {
  std::string strategy = "full";  // full | resize | tiling
  int crop_w = 0;                 // tiling crop / resize target, pixels
  int crop_h = 0;
  double overlap = 0.5;
};

struct CalibSpec {
  double lo = 1.0;
  double hi = 2.0;
  double step = 0.02;
  int subset = 8;  // samples in the sweep set
  int finetune_steps = 0;
  double finetune_lr = 0.05;
};

/// A complete serializable experiment description; round-trips losslessly
/// through the flat `key = value` text form.
struct RunConfig {
  uint64_t seed = 0;
  std::string out_dir;
  ModelConfig model;
  DataConfig data;
  SamplerSpec sampler;
  BinocularSamplerSpec bino;
  SecondFrameMode second_mode = SecondFrameMode::flow_guided;
  int second_random_tokens = 0;  // frame-2 token count when random_tokens
  TrainConfig train;
  EvalSpec eval;
  CalibSpec calib;

  TokenGrid grid() const {
    return TokenGrid{data.width / model.patch_size, data.height / model.patch_size,
                     model.patch_size};
  }

  /// The sampler actually used at train time; baseline modes override it.
  SamplerSpec effective_sampler() const;

  void validate() const;
  KvMap to_kv() const;
  static RunConfig from_kv(const KvMap& kv);
  std::string to_text() const { return to_kv().serialize(); }
  static RunConfig from_text(const std::string& text) { return from_kv(KvMap::parse(text)); }
};

extern const char* kCodeVersion;

}  // namespace multiwin
