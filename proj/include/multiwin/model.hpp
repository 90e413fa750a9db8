#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "multiwin/grid.hpp"
#include "multiwin/tensor.hpp"

namespace multiwin {

enum class PosEmbedding { rope, cosine_absolute };
enum class HeadKind { conv, linear };
enum class TaskKind { segmentation, flow };

std::string to_string(PosEmbedding p);
std::string to_string(HeadKind h);
std::string to_string(TaskKind t);
PosEmbedding pos_embedding_from_string(const std::string& s);
HeadKind head_kind_from_string(const std::string& s);
TaskKind task_from_string(const std::string& s);

struct ModelConfig {
  int patch_size = 8;
  int embed_dim = 64;
  int n_heads = 4;
  int n_encoder_blocks = 4;
  int n_decoder_blocks = 2;  // flow task only
  double mlp_ratio = 4.0;
  double rope_base = 100.0;
  PosEmbedding pos_embedding = PosEmbedding::rope;
  HeadKind head = HeadKind::conv;
  TaskKind task = TaskKind::segmentation;
  int n_classes = 5;       // segmentation
  int head_channels = 64;  // conv head width
  int ref_grid_w = 16;     // cosine_absolute reference grid
  int ref_grid_h = 16;

  int head_dim() const { return embed_dim / n_heads; }
  int out_channels() const { return task == TaskKind::segmentation ? n_classes : 3; }

  void validate() const;
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

/// Named parameter registry with stable iteration order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  void zero_grads();
  int64_t total_numel() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, size_t> index_;
};

/// Per-layer, per-head softmax temperature multipliers (default 1.0).
struct TemperatureTable {
  std::vector<std::string> sites;        // attention site names, graph order
  std::vector<std::vector<double>> tau;  // [site][head]
};

/// Per-window token feature map, row-major [h*w, channels].
struct FeatureMap {
  Tensor data;
  int w = 0;
  int h = 0;
};

/// The toy dense-prediction transformer: patch embedding, pre-norm encoder
/// blocks with rotary relative positions and per-head temperatures, an
/// optional cross-attention decoder for binocular inputs, and a
/// window-local convolutional or linear head.
struct TransformerModel {
  ModelConfig cfg;
  ParamStore params;

  static TransformerModel init(const ModelConfig& cfg, uint64_t seed);

  /// Gathers the pixels of the listed tokens and projects them to
  /// embed_dim. image: [H*W, 3] row-major; token order follows `ids`.
  Tensor embed(const Tensor& image, const TokenGrid& grid, const std::vector<int>& ids) const;

  /// Pre-norm encoder over one token set.
  Tensor encode(const Tensor& tokens, const std::vector<std::pair<int, int>>& positions,
                double tau_mult = 1.0) const;

  /// Decoder: self-attention over frame-1 tokens, cross-attention into the
  /// frame-2 token features, MLP; output aligned to frame-1 tokens.
  Tensor decode(const Tensor& tokens1, const std::vector<std::pair<int, int>>& pos1,
                const Tensor& tokens2, const std::vector<std::pair<int, int>>& pos2,
                double tau_mult = 1.0) const;

  /// Per-token affine map to patch_size^2 * out_channels; no spatial mixing.
  Tensor linear_head_tokens(const Tensor& features) const;

  /// Applies the configured head to per-window maps, producing pixel-level
  /// maps [h*p * w*p, out_channels] per window.
  std::vector<FeatureMap> apply_head(const std::vector<FeatureMap>& maps) const;

  /// Convenience: embed + encode all/visible tokens of one image.
  Tensor encode_image(const Tensor& image, const TokenGrid& grid, const std::vector<int>& ids,
                      double tau_mult = 1.0) const;

  std::vector<std::string> temperature_sites() const;
  TemperatureTable temperatures() const;
  void set_temperatures(const TemperatureTable& table);
  void set_all_temperatures(double v);

 private:
  Tensor attention_block(const Tensor& x_q, const Tensor& x_kv,
                         const std::vector<std::pair<int, int>>& pos_q,
                         const std::vector<std::pair<int, int>>& pos_kv, const std::string& prefix,
                         double tau_mult) const;
  Tensor mlp_block(const Tensor& x, const std::string& prefix) const;
};

/// Splits visible-token features into one row-major map per window.
/// `features` rows follow token_indices(ws, grid); extra tokens are
/// excluded from the maps. gather(scatter(x)) is the identity on window
/// tokens.
std::vector<FeatureMap> scatter_to_feature_maps(const Tensor& features, const WindowSet& ws,
                                                const TokenGrid& grid);

/// Token (x, y) coordinates for a list of flat indices.
std::vector<std::pair<int, int>> positions_of(const std::vector<int>& ids, const TokenGrid& grid);

/// 2D sine/cosine absolute embedding for the listed tokens, bilinearly
/// interpolated from a fixed reference grid.
std::vector<double> sincos_embedding(const TokenGrid& grid, const std::vector<int>& ids,
                                     int embed_dim, int ref_w, int ref_h);

// ---- checkpoint io ----

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamStore& params);
TransformerModel load_checkpoint(const std::string& path);
std::vector<uint8_t> checkpoint_bytes(const ModelConfig& cfg, const ParamStore& params);

}  // namespace multiwin
