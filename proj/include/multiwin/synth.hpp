#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "multiwin/flow_sampling.hpp"

namespace multiwin {

/// Toy semantic-segmentation sample: layered textured shapes over a
/// textured background; labels follow the topmost shape.
struct SegSample {
  int width = 0;
  int height = 0;
  std::vector<double> image;  // H*W*3 row-major, values in [0,1]
  std::vector<int> labels;    // H*W class indices
};

/// Toy optical-flow pair: rigidly moving textured layers with exact
/// forward flow and an occlusion/out-of-frame validity mask.
struct FlowSample {
  int width = 0;
  int height = 0;
  std::vector<double> frame1;  // H*W*3
  std::vector<double> frame2;  // H*W*3
  FlowField flow;              // frame1 -> frame2
};

/// Deterministic given (resolution, k_classes, seed). Shapes have locally
/// ambiguous class textures (stripe periods longer than a patch) so that
/// context matters; at least one shape spans more than half the width.
SegSample gen_seg_sample(int height, int width, int k_classes, uint64_t seed);

/// Deterministic given (resolution, max_disp, seed). Background affine
/// motion plus 3-8 foreground shapes with independent rigid motions,
/// displacements bounded by max_disp.
FlowSample gen_flow_sample(int height, int width, double max_disp, uint64_t seed);

// ---- on-disk dataset dump (binary records + index file) ----

void write_seg_dataset(const std::string& dir, const std::vector<SegSample>& samples);
std::vector<SegSample> read_seg_dataset(const std::string& dir);
void write_flow_dataset(const std::string& dir, const std::vector<FlowSample>& samples);
std::vector<FlowSample> read_flow_dataset(const std::string& dir);

}  // namespace multiwin
