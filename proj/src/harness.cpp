#include "multiwin/harness.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "multiwin/infer.hpp"
#include "multiwin/train.hpp"

namespace multiwin {

namespace fs = std::filesystem;

// ---- RunConfig serialization ----

KvMap RunConfig::to_kv() const {
  KvMap kv;
  kv.set("task", multiwin::to_string(model.task));
  kv.set_int("seed", int64_t(seed));
  kv.set("out_dir", out_dir);

  kv.set_int("model.patch_size", model.patch_size);
  kv.set_int("model.embed_dim", model.embed_dim);
  kv.set_int("model.n_heads", model.n_heads);
  kv.set_int("model.n_encoder_blocks", model.n_encoder_blocks);
  kv.set_int("model.n_decoder_blocks", model.n_decoder_blocks);
  kv.set_double("model.mlp_ratio", model.mlp_ratio);
  kv.set_double("model.rope_base", model.rope_base);
  kv.set("model.pos_embedding", multiwin::to_string(model.pos_embedding));
  kv.set("model.head", multiwin::to_string(model.head));
  kv.set_int("model.n_classes", model.n_classes);
  kv.set_int("model.head_channels", model.head_channels);
  kv.set_int("model.ref_grid_w", model.ref_grid_w);
  kv.set_int("model.ref_grid_h", model.ref_grid_h);

  kv.set_int("data.width", data.width);
  kv.set_int("data.height", data.height);
  kv.set_int("data.n_train", data.n_train);
  kv.set_int("data.n_val", data.n_val);
  kv.set_double("data.max_disp", data.max_disp);
  kv.set("data.dir", data.dir);

  kv.set("sampler.mode", multiwin::to_string(sampler.mode));
  kv.set_int("sampler.n_windows", sampler.n_windows);
  kv.set_int("sampler.window_w", sampler.window_w);
  kv.set_int("sampler.window_h", sampler.window_h);
  kv.set_int("sampler.n_extra_tokens", sampler.n_extra_tokens);
  kv.set_int("sampler.n_random_tokens", sampler.n_random_tokens);
  kv.set_int("sampler.budget_lo", sampler.budget_lo);
  kv.set_int("sampler.budget_hi", sampler.budget_hi);
  kv.set_int("sampler.n_windows_lo", sampler.n_windows_lo);
  kv.set_int("sampler.n_windows_hi", sampler.n_windows_hi);
  kv.set_double("sampler.ratio_lo", sampler.ratio_lo);
  kv.set_double("sampler.ratio_hi", sampler.ratio_hi);
  kv.set_double("sampler.aspect_lo", sampler.aspect_lo);
  kv.set_double("sampler.aspect_hi", sampler.aspect_hi);

  kv.set_int("bino.n_first", bino.n_first);
  kv.set_int("bino.first_w", bino.first_w);
  kv.set_int("bino.first_h", bino.first_h);
  kv.set_int("bino.m_second", bino.m_second);
  kv.set_int("bino.second_w", bino.second_w);
  kv.set_int("bino.second_h", bino.second_h);
  kv.set_double("bino.std_ratio", bino.std_ratio);
  kv.set("bino.second_mode", multiwin::to_string(second_mode));
  kv.set_int("bino.second_random_tokens", second_random_tokens);

  kv.set("train.mode", multiwin::to_string(train.mode));
  kv.set_int("train.epochs", train.epochs);
  kv.set_int("train.batch_size", train.batch_size);
  kv.set_double("train.base_lr", train.base_lr);
  kv.set_int("train.warmup_epochs", train.warmup_epochs);
  kv.set_double("train.weight_decay", train.weight_decay);
  kv.set_double("train.beta1", train.beta1);
  kv.set_double("train.beta2", train.beta2);
  kv.set_double("train.min_lr", train.min_lr);
  kv.set_double("train.lr_layer_decay", train.lr_layer_decay);

  kv.set("eval.strategy", eval.strategy);
  kv.set_int("eval.crop_w", eval.crop_w);
  kv.set_int("eval.crop_h", eval.crop_h);
  kv.set_double("eval.overlap", eval.overlap);

  kv.set_double("calib.lo", calib.lo);
  kv.set_double("calib.hi", calib.hi);
  kv.set_double("calib.step", calib.step);
  kv.set_int("calib.subset", calib.subset);
  kv.set_int("calib.finetune_steps", calib.finetune_steps);
  kv.set_double("calib.finetune_lr", calib.finetune_lr);
  return kv;
}

RunConfig RunConfig::from_kv(const KvMap& kv) {
  RunConfig c;
  const std::vector<std::string> known = {
      "task", "seed", "out_dir", "version",
      "model.patch_size", "model.embed_dim", "model.n_heads", "model.n_encoder_blocks",
      "model.n_decoder_blocks", "model.mlp_ratio", "model.rope_base", "model.pos_embedding",
      "model.head", "model.n_classes", "model.head_channels", "model.ref_grid_w",
      "model.ref_grid_h",
      "data.width", "data.height", "data.n_train", "data.n_val", "data.max_disp", "data.dir",
      "sampler.mode", "sampler.n_windows", "sampler.window_w", "sampler.window_h",
      "sampler.n_extra_tokens", "sampler.n_random_tokens", "sampler.budget_lo",
      "sampler.budget_hi", "sampler.n_windows_lo", "sampler.n_windows_hi", "sampler.ratio_lo",
      "sampler.ratio_hi", "sampler.aspect_lo", "sampler.aspect_hi",
      "bino.n_first", "bino.first_w", "bino.first_h", "bino.m_second", "bino.second_w",
      "bino.second_h", "bino.std_ratio", "bino.second_mode", "bino.second_random_tokens",
      "train.mode", "train.epochs", "train.batch_size", "train.base_lr", "train.warmup_epochs",
      "train.weight_decay", "train.beta1", "train.beta2", "train.min_lr", "train.lr_layer_decay",
      "eval.strategy", "eval.crop_w", "eval.crop_h", "eval.overlap",
      "calib.lo", "calib.hi", "calib.step", "calib.subset", "calib.finetune_steps",
      "calib.finetune_lr"};
  const auto unknown = kv.unknown_keys(known);
  if (!unknown.empty()) throw ConfigError("unknown config field: " + unknown.front());

  c.model.task = task_from_string(kv.get_string("task", "segmentation"));
  c.seed = uint64_t(kv.get_int("seed", 0));
  c.out_dir = kv.get_string("out_dir", "");

  c.model.patch_size = int(kv.get_int("model.patch_size", c.model.patch_size));
  c.model.embed_dim = int(kv.get_int("model.embed_dim", c.model.embed_dim));
  c.model.n_heads = int(kv.get_int("model.n_heads", c.model.n_heads));
  c.model.n_encoder_blocks = int(kv.get_int("model.n_encoder_blocks", c.model.n_encoder_blocks));
  c.model.n_decoder_blocks = int(kv.get_int("model.n_decoder_blocks", c.model.n_decoder_blocks));
  c.model.mlp_ratio = kv.get_double("model.mlp_ratio", c.model.mlp_ratio);
  c.model.rope_base = kv.get_double("model.rope_base", c.model.rope_base);
  c.model.pos_embedding =
      pos_embedding_from_string(kv.get_string("model.pos_embedding", "rope"));
  c.model.head = head_kind_from_string(kv.get_string("model.head", "conv"));
  c.model.n_classes = int(kv.get_int("model.n_classes", c.model.n_classes));
  c.model.head_channels = int(kv.get_int("model.head_channels", c.model.head_channels));
  c.model.ref_grid_w = int(kv.get_int("model.ref_grid_w", c.model.ref_grid_w));
  c.model.ref_grid_h = int(kv.get_int("model.ref_grid_h", c.model.ref_grid_h));

  c.data.width = int(kv.get_int("data.width", c.data.width));
  c.data.height = int(kv.get_int("data.height", c.data.height));
  c.data.n_train = int(kv.get_int("data.n_train", c.data.n_train));
  c.data.n_val = int(kv.get_int("data.n_val", c.data.n_val));
  c.data.max_disp = kv.get_double("data.max_disp", c.data.max_disp);
  c.data.dir = kv.get_string("data.dir", "");

  c.sampler.mode = sampler_mode_from_string(kv.get_string("sampler.mode", "multi_window"));
  c.sampler.n_windows = int(kv.get_int("sampler.n_windows", c.sampler.n_windows));
  c.sampler.window_w = int(kv.get_int("sampler.window_w", c.sampler.window_w));
  c.sampler.window_h = int(kv.get_int("sampler.window_h", c.sampler.window_h));
  c.sampler.n_extra_tokens = int(kv.get_int("sampler.n_extra_tokens", 0));
  c.sampler.n_random_tokens = int(kv.get_int("sampler.n_random_tokens", 0));
  c.sampler.budget_lo = int(kv.get_int("sampler.budget_lo", 0));
  c.sampler.budget_hi = int(kv.get_int("sampler.budget_hi", 0));
  c.sampler.n_windows_lo = int(kv.get_int("sampler.n_windows_lo", 2));
  c.sampler.n_windows_hi = int(kv.get_int("sampler.n_windows_hi", 2));
  c.sampler.ratio_lo = kv.get_double("sampler.ratio_lo", 1.0);
  c.sampler.ratio_hi = kv.get_double("sampler.ratio_hi", 1.0);
  c.sampler.aspect_lo = kv.get_double("sampler.aspect_lo", 1.0);
  c.sampler.aspect_hi = kv.get_double("sampler.aspect_hi", 1.0);

  c.bino.n_first = int(kv.get_int("bino.n_first", c.bino.n_first));
  c.bino.first_w = int(kv.get_int("bino.first_w", c.bino.first_w));
  c.bino.first_h = int(kv.get_int("bino.first_h", c.bino.first_h));
  c.bino.m_second = int(kv.get_int("bino.m_second", c.bino.m_second));
  c.bino.second_w = int(kv.get_int("bino.second_w", c.bino.second_w));
  c.bino.second_h = int(kv.get_int("bino.second_h", c.bino.second_h));
  c.bino.std_ratio = kv.get_double("bino.std_ratio", c.bino.std_ratio);
  c.second_mode = second_mode_from_string(kv.get_string("bino.second_mode", "flow_guided"));
  c.second_random_tokens = int(kv.get_int("bino.second_random_tokens", 0));

  c.train.mode = train_mode_from_string(kv.get_string("train.mode", "winwin"));
  c.train.epochs = int(kv.get_int("train.epochs", c.train.epochs));
  c.train.batch_size = int(kv.get_int("train.batch_size", c.train.batch_size));
  c.train.base_lr = kv.get_double("train.base_lr", c.train.base_lr);
  c.train.warmup_epochs = int(kv.get_int("train.warmup_epochs", c.train.warmup_epochs));
  c.train.weight_decay = kv.get_double("train.weight_decay", c.train.weight_decay);
  c.train.beta1 = kv.get_double("train.beta1", c.train.beta1);
  c.train.beta2 = kv.get_double("train.beta2", c.train.beta2);
  c.train.min_lr = kv.get_double("train.min_lr", c.train.min_lr);
  c.train.lr_layer_decay = kv.get_double("train.lr_layer_decay", c.train.lr_layer_decay);

  c.eval.strategy = kv.get_string("eval.strategy", "full");
  c.eval.crop_w = int(kv.get_int("eval.crop_w", 0));
  c.eval.crop_h = int(kv.get_int("eval.crop_h", 0));
  c.eval.overlap = kv.get_double("eval.overlap", 0.5);

  c.calib.lo = kv.get_double("calib.lo", c.calib.lo);
  c.calib.hi = kv.get_double("calib.hi", c.calib.hi);
  c.calib.step = kv.get_double("calib.step", c.calib.step);
  c.calib.subset = int(kv.get_int("calib.subset", c.calib.subset));
  c.calib.finetune_steps = int(kv.get_int("calib.finetune_steps", 0));
  c.calib.finetune_lr = kv.get_double("calib.finetune_lr", c.calib.finetune_lr);
  return c;
}

// ---- data splits ----

std::vector<SegSample> make_seg_split(const RunConfig& cfg, bool train_split) {
  const uint64_t data_seed = Rng::derive(cfg.seed, 0x64617461ULL);
  std::vector<SegSample> out;
  if (!cfg.data.dir.empty()) {
    auto all = read_seg_dataset(cfg.data.dir);
    check(static_cast<int>(all.size()) >= cfg.data.n_train + cfg.data.n_val,
          "dataset dir has fewer samples than n_train + n_val");
    if (train_split)
      out.assign(all.begin(), all.begin() + cfg.data.n_train);
    else
      out.assign(all.begin() + cfg.data.n_train, all.begin() + cfg.data.n_train + cfg.data.n_val);
    return out;
  }
  const int n = train_split ? cfg.data.n_train : cfg.data.n_val;
  const uint64_t base = train_split ? 0 : 100000;
  for (int i = 0; i < n; ++i)
    out.push_back(gen_seg_sample(cfg.data.height, cfg.data.width, cfg.model.n_classes,
                                 Rng::derive(data_seed, base + uint64_t(i))));
  return out;
}

std::vector<FlowSample> make_flow_split(const RunConfig& cfg, bool train_split) {
  const uint64_t data_seed = Rng::derive(cfg.seed, 0x64617461ULL);
  std::vector<FlowSample> out;
  if (!cfg.data.dir.empty()) {
    auto all = read_flow_dataset(cfg.data.dir);
    check(static_cast<int>(all.size()) >= cfg.data.n_train + cfg.data.n_val,
          "dataset dir has fewer samples than n_train + n_val");
    if (train_split)
      out.assign(all.begin(), all.begin() + cfg.data.n_train);
    else
      out.assign(all.begin() + cfg.data.n_train, all.begin() + cfg.data.n_train + cfg.data.n_val);
    return out;
  }
  const int n = train_split ? cfg.data.n_train : cfg.data.n_val;
  const uint64_t base = train_split ? 0 : 100000;
  for (int i = 0; i < n; ++i)
    out.push_back(gen_flow_sample(cfg.data.height, cfg.data.width, cfg.data.max_disp,
                                  Rng::derive(data_seed, base + uint64_t(i))));
  return out;
}

// ---- ablation grid ----

namespace {

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

struct CellOutcome {
  double metric_no_temp = 0;
  double metric_with_temp = 0;
  int64_t tokens = 0;
};

CellOutcome run_cell(const RunConfig& cfg) {
  CellOutcome out;
  out.tokens = [&] {
    Rng probe(1);
    return sample_windows(cfg.grid(), cfg.effective_sampler(), probe).token_count();
  }();

  std::vector<double> no_temp, with_temp;
  Trainer trainer(cfg);
  TrainResult res = trainer.run();
  TransformerModel& model = trainer.model();

  if (cfg.model.task == TaskKind::segmentation) {
    auto val = make_seg_split(cfg, false);
    auto sweep_set = make_seg_split(cfg, true);
    sweep_set.resize(std::min<size_t>(sweep_set.size(), size_t(cfg.calib.subset)));
    out.metric_no_temp =
        evaluate_seg(model, val, cfg.eval, cfg.data.width, cfg.data.height, 1.0).miou;
    const SweepResult sw =
        calibrate_temperature_sweep_seg(model, sweep_set, cfg.calib.lo, cfg.calib.hi,
                                        cfg.calib.step);
    out.metric_with_temp =
        evaluate_seg(model, val, cfg.eval, cfg.data.width, cfg.data.height, sw.best_tau).miou;
  } else {
    auto val = make_flow_split(cfg, false);
    auto sweep_set = make_flow_split(cfg, true);
    sweep_set.resize(std::min<size_t>(sweep_set.size(), size_t(cfg.calib.subset)));
    out.metric_no_temp =
        evaluate_flow(model, val, cfg.eval, cfg.data.width, cfg.data.height, 1.0).epe;
    const SweepResult sw = calibrate_temperature_sweep_flow(model, sweep_set, cfg.calib.lo,
                                                            cfg.calib.hi, cfg.calib.step);
    out.metric_with_temp =
        evaluate_flow(model, val, cfg.eval, cfg.data.width, cfg.data.height, sw.best_tau).epe;
  }
  return out;
}

RunConfig apply_axis(const RunConfig& base, const std::string& axis, const std::string& value) {
  RunConfig cfg = base;
  if (axis == "windows") {
    const int n = std::stoi(value);
    check(n >= 1, "ablation: window count must be >= 1");
    const int64_t budget =
        int64_t(base.sampler.n_windows) * base.sampler.window_w * base.sampler.window_h;
    const int side = std::max(1, static_cast<int>(std::floor(std::sqrt(double(budget) / n))));
    cfg.sampler.mode = n == 1 ? SamplerMode::single_crop : SamplerMode::multi_window;
    cfg.sampler.n_windows = n;
    cfg.sampler.window_w = side;
    cfg.sampler.window_h = side;
    cfg.train.mode = TrainMode::winwin;
  } else if (axis == "strategy") {
    if (value == "full") {
      cfg.train.mode = TrainMode::full_res;
      cfg.eval.strategy = "full";
    } else if (value == "crop_resize") {
      cfg.train.mode = TrainMode::single_crop;
      cfg.eval.strategy = "resize";
      cfg.eval.crop_w = cfg.sampler.window_w * cfg.model.patch_size;
      cfg.eval.crop_h = cfg.sampler.window_h * cfg.model.patch_size;
    } else if (value == "crop_tiling") {
      cfg.train.mode = TrainMode::single_crop;
      cfg.eval.strategy = "tiling";
      cfg.eval.crop_w = cfg.sampler.window_w * cfg.model.patch_size;
      cfg.eval.crop_h = cfg.sampler.window_h * cfg.model.patch_size;
    } else if (value == "winwin") {
      cfg.train.mode = TrainMode::winwin;
      cfg.eval.strategy = "full";
    } else {
      throw ConfigError("unknown strategy variant: " + value);
    }
  } else if (axis == "std_ratio") {
    cfg.bino.std_ratio = std::stod(value);
  } else if (axis == "extra_tokens") {
    cfg.sampler.mode = SamplerMode::windows_plus_extra;
    cfg.sampler.n_extra_tokens = std::stoi(value);
  } else {
    throw ConfigError("unknown ablation axis: " + axis);
  }
  return cfg;
}

}  // namespace

std::string ablation_grid(const RunConfig& base, const std::vector<AblationAxis>& axes,
                          int n_seeds) {
  std::vector<std::pair<std::string, RunConfig>> cells;
  cells.emplace_back("base", base);
  for (const auto& axis : axes) {
    std::vector<std::pair<std::string, RunConfig>> next;
    for (const auto& [label, cfg] : cells) {
      for (const auto& v : axis.values) {
        const std::string cell_label =
            (label == "base" ? "" : label + ";") + axis.name + "=" + v;
        next.emplace_back(cell_label, apply_axis(cfg, axis.name, v));
      }
    }
    if (!axis.values.empty()) cells = std::move(next);
  }

  std::ostringstream csv;
  csv << "variant,tokens,metric_no_temp,metric_with_temp,status\n";
  for (auto& [label, cfg] : cells) {
    try {
      std::vector<double> no_t, with_t;
      CellOutcome first{};
      for (int s = 0; s < std::max(1, n_seeds); ++s) {
        RunConfig c = cfg;
        c.seed = cfg.seed + uint64_t(s);
        if (!cfg.out_dir.empty())
          c.out_dir = cfg.out_dir + "/" + label + "/seed" + std::to_string(s);
        const CellOutcome o = run_cell(c);
        if (s == 0) first = o;
        no_t.push_back(o.metric_no_temp);
        with_t.push_back(o.metric_with_temp);
      }
      char line[256];
      std::snprintf(line, sizeof(line), "%s,%lld,%.6g,%.6g,ok\n", label.c_str(),
                    static_cast<long long>(first.tokens), median(no_t), median(with_t));
      csv << line;
    } catch (const std::exception& e) {
      csv << label << ",,,," << "failed: " << e.what() << "\n";
    }
  }
  return csv.str();
}

// ---- CLI ----

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  check(f.good(), "cannot open file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides,
                      int64_t seed_override, const std::string& out_override) {
  KvMap kv = path.empty() ? KvMap{} : KvMap::parse(read_file(path));
  for (const auto& ov : overrides) {
    const size_t eq = ov.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value: " + ov);
    kv.set(ov.substr(0, eq), ov.substr(eq + 1));
  }
  if (seed_override >= 0) kv.set_int("seed", seed_override);
  if (!out_override.empty()) kv.set("out_dir", out_override);
  return RunConfig::from_kv(kv);
}

std::vector<std::pair<int, int>> parse_resolutions(const std::string& s) {
  std::vector<std::pair<int, int>> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const size_t x = item.find('x');
    check(x != std::string::npos, "resolution must look like 96x96: " + item);
    out.emplace_back(std::stoi(item.substr(0, x)), std::stoi(item.substr(x + 1)));
  }
  return out;
}

std::string ascii_bin_map(const EndpointBinMap& bins) {
  double mx = 0;
  for (double c : bins.counts) mx = std::max(mx, c);
  std::string out;
  for (int y = 0; y < bins.grid.height_tokens; ++y) {
    for (int x = 0; x < bins.grid.width_tokens; ++x) {
      const double c = bins.counts[bins.grid.index_of(x, y)];
      const int level = mx > 0 ? static_cast<int>(std::floor(9.0 * c / mx)) : 0;
      out.push_back(static_cast<char>('0' + std::clamp(level, 0, 9)));
    }
    out.push_back('\n');
  }
  return out;
}

void write_text(const std::string& dir, const std::string& name, const std::string& text) {
  if (dir.empty()) return;
  fs::create_directories(dir);
  std::ofstream(fs::path(dir) / name) << text;
}

int cmd_gen_data(const RunConfig& cfg, int n) {
  check(!cfg.out_dir.empty(), "gen-data needs out_dir");
  RunConfig c = cfg;
  c.data.n_train = n;
  c.data.n_val = 0;
  c.data.dir.clear();
  if (cfg.model.task == TaskKind::segmentation)
    write_seg_dataset(cfg.out_dir, make_seg_split(c, true));
  else
    write_flow_dataset(cfg.out_dir, make_flow_split(c, true));
  std::cout << "wrote " << n << " samples to " << cfg.out_dir << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  TrainResult res = train_run(cfg);
  std::printf("final val metric: %.6g\n", res.final_val_metric);
  if (!res.checkpoint_path.empty()) std::printf("checkpoint: %s\n", res.checkpoint_path.c_str());
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, double tau) {
  TransformerModel model = load_checkpoint(checkpoint);
  MetricReport report;
  if (model.cfg.task == TaskKind::segmentation)
    report = evaluate_seg(model, make_seg_split(cfg, false), cfg.eval, cfg.data.width,
                          cfg.data.height, tau);
  else
    report = evaluate_flow(model, make_flow_split(cfg, false), cfg.eval, cfg.data.width,
                           cfg.data.height, tau);
  const std::string csv = report.to_csv(model.cfg.task);
  std::cout << csv;
  write_text(cfg.out_dir, "eval.csv", csv);
  return 0;
}

int cmd_calibrate(const RunConfig& cfg, const std::string& checkpoint, const std::string& mode,
                  const std::string& save_path) {
  TransformerModel model = load_checkpoint(checkpoint);
  SweepResult sweep;
  if (model.cfg.task == TaskKind::segmentation) {
    auto subset = make_seg_split(cfg, true);
    subset.resize(std::min<size_t>(subset.size(), size_t(cfg.calib.subset)));
    sweep = calibrate_temperature_sweep_seg(model, subset, cfg.calib.lo, cfg.calib.hi,
                                            cfg.calib.step);
    if (mode == "finetune") {
      model.set_all_temperatures(sweep.best_tau);
      finetune_temperatures_seg(model, subset, cfg.calib.finetune_steps, cfg.calib.finetune_lr);
    }
  } else {
    auto subset = make_flow_split(cfg, true);
    subset.resize(std::min<size_t>(subset.size(), size_t(cfg.calib.subset)));
    sweep = calibrate_temperature_sweep_flow(model, subset, cfg.calib.lo, cfg.calib.hi,
                                             cfg.calib.step);
    if (mode == "finetune") {
      model.set_all_temperatures(sweep.best_tau);
      finetune_temperatures_flow(model, subset, cfg.calib.finetune_steps, cfg.calib.finetune_lr);
    }
  }
  std::cout << sweep.to_csv();
  std::printf("best_tau,%.6g\n", sweep.best_tau);
  write_text(cfg.out_dir, "sweep.csv", sweep.to_csv());
  if (mode == "finetune" && !save_path.empty()) {
    save_checkpoint(save_path, model.cfg, model.params);
    std::printf("saved finetuned checkpoint: %s\n", save_path.c_str());
  }
  return 0;
}

int cmd_sweep_ablation(const RunConfig& cfg, const std::vector<std::string>& grid_specs,
                       int seeds) {
  std::vector<AblationAxis> axes;
  for (const auto& g : grid_specs) {
    const size_t eq = g.find('=');
    check(eq != std::string::npos, "--grid expects axis=v1,v2,...");
    AblationAxis axis;
    axis.name = g.substr(0, eq);
    std::stringstream ss(g.substr(eq + 1));
    std::string v;
    while (std::getline(ss, v, ',')) axis.values.push_back(v);
    axes.push_back(axis);
  }
  const std::string csv = ablation_grid(cfg, axes, seeds);
  std::cout << csv;
  write_text(cfg.out_dir, "ablation.csv", csv);
  return 0;
}

int cmd_robustness(const RunConfig& cfg, const std::string& checkpoint,
                   const std::string& resolutions, int crops, double tau) {
  TransformerModel model = load_checkpoint(checkpoint);
  const auto sizes = parse_resolutions(resolutions);
  std::string csv;
  if (model.cfg.task == TaskKind::segmentation)
    csv = robustness_csv(
        robustness_sweep_seg(model, make_seg_split(cfg, false), sizes, crops, cfg.seed, tau));
  else
    csv = robustness_csv(
        robustness_sweep_flow(model, make_flow_split(cfg, false), sizes, crops, cfg.seed, tau));
  std::cout << csv;
  write_text(cfg.out_dir, "robustness.csv", csv);
  return 0;
}

int cmd_sample_windows(const RunConfig& cfg) {
  const TokenGrid grid = cfg.grid();
  Rng rng(cfg.seed);
  const WindowSet ws = sample_windows(grid, cfg.effective_sampler(), rng);
  std::cout << "first frame (" << ws.token_count() << " tokens):\n"
            << ascii_grid(ws, grid) << ws.serialize();
  if (cfg.model.task == TaskKind::flow) {
    const FlowSample s =
        gen_flow_sample(cfg.data.height, cfg.data.width, cfg.data.max_disp, cfg.seed);
    const EndpointBinMap bins = bin_flow_endpoints(s.flow, ws, grid, grid);
    Rng rng2(cfg.seed + 1);
    const EndpointBinMap noisy = perturb_counts(bins, cfg.bino.std_ratio, rng2);
    const WindowSet ws2 = greedy_select(noisy, cfg.bino.m_second, cfg.bino.second_w,
                                        cfg.bino.second_h);
    std::cout << "endpoint bins:\n"
              << ascii_bin_map(bins) << "second frame (" << ws2.token_count() << " tokens):\n"
              << ascii_grid(ws2, grid) << ws2.serialize();
    write_text(cfg.out_dir, "bins.csv", bins.to_csv());
  }
  return 0;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv) {
  CLI::App app{"multi-window masked training laboratory"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out_dir, mode = "sweep", resolutions, save_path;
  std::string strategy, crop_spec;
  std::vector<std::string> overrides, grid_specs;
  int64_t seed = -1;
  int n_samples = 32, seeds = 1, crops = 4;
  double tau = 1.0, overlap = -1.0;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file (key = value lines)");
    cmd->add_option("--set", overrides, "override config fields, key=value")->take_all();
    cmd->add_option("--seed", seed, "seed override");
    cmd->add_option("--out", out_dir, "output directory override");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset on disk");
  add_common(gen);
  gen->add_option("--n", n_samples, "number of samples");

  CLI::App* train = app.add_subcommand("train", "train a model");
  add_common(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the val split");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--strategy", strategy, "full | resize | tiling");
  eval->add_option("--overlap", overlap, "tiling overlap ratio");
  eval->add_option("--crop", crop_spec, "crop size, e.g. 64x64");
  eval->add_option("--temp", tau, "uniform temperature multiplier");

  CLI::App* calib = app.add_subcommand("calibrate", "temperature sweep / finetune");
  add_common(calib);
  calib->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  calib->add_option("--mode", mode, "sweep | finetune");
  calib->add_option("--save", save_path, "write the finetuned checkpoint here");

  CLI::App* ablation = app.add_subcommand("sweep-ablation", "run an ablation grid");
  add_common(ablation);
  ablation->add_option("--grid", grid_specs, "axis=v1,v2,... (repeatable)")->take_all();
  ablation->add_option("--seeds", seeds, "seeds per cell (median reported)");

  CLI::App* robust = app.add_subcommand("robustness", "metric vs test resolution");
  add_common(robust);
  robust->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  robust->add_option("--resolutions", resolutions, "e.g. 64x64,96x96,128x128")->required();
  robust->add_option("--crops", crops, "crops per sample");
  robust->add_option("--temp", tau, "uniform temperature multiplier");

  CLI::App* sw = app.add_subcommand("sample-windows", "dump sampled windows as ASCII");
  add_common(sw);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    RunConfig cfg = load_config(config_path, overrides, seed, out_dir);
    if (!strategy.empty()) cfg.eval.strategy = strategy;
    if (overlap >= 0.0) cfg.eval.overlap = overlap;
    if (!crop_spec.empty()) {
      const auto sizes = parse_resolutions(crop_spec);
      cfg.eval.crop_w = sizes[0].first;
      cfg.eval.crop_h = sizes[0].second;
    }
    if (gen->parsed()) return cmd_gen_data(cfg, n_samples);
    if (train->parsed()) return cmd_train(cfg);
    if (eval->parsed()) return cmd_eval(cfg, checkpoint, tau);
    if (calib->parsed()) return cmd_calibrate(cfg, checkpoint, mode, save_path);
    if (ablation->parsed()) return cmd_sweep_ablation(cfg, grid_specs, seeds);
    if (robust->parsed()) return cmd_robustness(cfg, checkpoint, resolutions, crops, tau);
    if (sw->parsed()) return cmd_sample_windows(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace multiwin
