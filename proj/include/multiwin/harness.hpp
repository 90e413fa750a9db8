#pragma once

#include <string>
#include <vector>

#include "multiwin/runconfig.hpp"
#include "multiwin/synth.hpp"

namespace multiwin {

/// Train/val splits derived from the run config (generated or loaded from
/// data.dir). The split depends only on (seed, data config) so that
/// sampler variants with the same seed see identical samples.
std::vector<SegSample> make_seg_split(const RunConfig& cfg, bool train_split);
std::vector<FlowSample> make_flow_split(const RunConfig& cfg, bool train_split);

struct AblationAxis {
  std::string name;                 // windows | strategy | std_ratio | extra_tokens
  std::vector<std::string> values;
};

/// Runs every cell of the axis product (train + direct full-resolution
/// eval + temperature sweep + eval at the swept temperature) and returns a
/// CSV table `variant,tokens,metric_no_temp,metric_with_temp,status`.
/// Failed cells are recorded and the grid continues.
std::string ablation_grid(const RunConfig& base, const std::vector<AblationAxis>& axes,
                          int n_seeds = 1);

/// Command-line entry point; returns the process exit status.
int cli_dispatch(int argc, const char* const* argv);

}  // namespace multiwin
