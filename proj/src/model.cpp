#include "multiwin/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "multiwin/config.hpp"
#include "multiwin/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace multiwin {

std::string to_string(PosEmbedding p) {
  return p == PosEmbedding::rope ? "rope" : "cosine_absolute";
}
std::string to_string(HeadKind h) { return h == HeadKind::conv ? "conv" : "linear"; }
std::string to_string(TaskKind t) { return t == TaskKind::segmentation ? "segmentation" : "flow"; }

PosEmbedding pos_embedding_from_string(const std::string& s) {
  if (s == "rope") return PosEmbedding::rope;
  if (s == "cosine_absolute") return PosEmbedding::cosine_absolute;
  throw ConfigError("unknown positional embedding: " + s);
}
HeadKind head_kind_from_string(const std::string& s) {
  if (s == "conv") return HeadKind::conv;
  if (s == "linear") return HeadKind::linear;
  throw ConfigError("unknown head kind: " + s);
}
TaskKind task_from_string(const std::string& s) {
  if (s == "segmentation") return TaskKind::segmentation;
  if (s == "flow") return TaskKind::flow;
  throw ConfigError("unknown task: " + s);
}

void ModelConfig::validate() const {
  check(patch_size >= 1, "model: patch_size must be positive");
  check(embed_dim >= 1 && n_heads >= 1, "model: embed_dim and n_heads must be positive");
  check(embed_dim % n_heads == 0, "model: embed_dim must be divisible by n_heads");
  check(head_dim() % 2 == 0, "model: head_dim must be even");
  if (pos_embedding == PosEmbedding::rope)
    check(head_dim() % 4 == 0, "model: 2D rotary pairing needs head_dim divisible by 4");
  else
    check(embed_dim % 4 == 0, "model: sincos embedding needs embed_dim divisible by 4");
  check(n_encoder_blocks >= 0 && n_decoder_blocks >= 0, "model: negative block count");
  check(mlp_ratio > 0 && rope_base > 0, "model: ratios must be positive");
  if (task == TaskKind::segmentation) check(n_classes >= 2, "model: need at least 2 classes");
}

std::string ModelConfig::to_text() const {
  KvMap kv;
  kv.set_int("patch_size", patch_size);
  kv.set_int("embed_dim", embed_dim);
  kv.set_int("n_heads", n_heads);
  kv.set_int("n_encoder_blocks", n_encoder_blocks);
  kv.set_int("n_decoder_blocks", n_decoder_blocks);
  kv.set_double("mlp_ratio", mlp_ratio);
  kv.set_double("rope_base", rope_base);
  kv.set("pos_embedding", to_string(pos_embedding));
  kv.set("head", to_string(head));
  kv.set("task", to_string(task));
  kv.set_int("n_classes", n_classes);
  kv.set_int("head_channels", head_channels);
  kv.set_int("ref_grid_w", ref_grid_w);
  kv.set_int("ref_grid_h", ref_grid_h);
  return kv.serialize();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  const KvMap kv = KvMap::parse(text);
  ModelConfig c;
  c.patch_size = static_cast<int>(kv.require_int("patch_size"));
  c.embed_dim = static_cast<int>(kv.require_int("embed_dim"));
  c.n_heads = static_cast<int>(kv.require_int("n_heads"));
  c.n_encoder_blocks = static_cast<int>(kv.require_int("n_encoder_blocks"));
  c.n_decoder_blocks = static_cast<int>(kv.require_int("n_decoder_blocks"));
  c.mlp_ratio = kv.require_double("mlp_ratio");
  c.rope_base = kv.require_double("rope_base");
  c.pos_embedding = pos_embedding_from_string(kv.require_string("pos_embedding"));
  c.head = head_kind_from_string(kv.require_string("head"));
  c.task = task_from_string(kv.require_string("task"));
  c.n_classes = static_cast<int>(kv.require_int("n_classes"));
  c.head_channels = static_cast<int>(kv.require_int("head_channels"));
  c.ref_grid_w = static_cast<int>(kv.require_int("ref_grid_w"));
  c.ref_grid_h = static_cast<int>(kv.require_int("ref_grid_h"));
  c.validate();
  return c;
}

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  check(!has(name), "duplicate parameter name: " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  check(it != index_.end(), "unknown parameter: " + name);
  return items_[it->second].second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  check(it != index_.end(), "unknown parameter: " + name);
  return items_[it->second].second;
}

void ParamStore::zero_grads() {
  for (auto& [name, t] : items_) t.zero_grad();
}

int64_t ParamStore::total_numel() const {
  int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

namespace {

Tensor trunc_normal(std::vector<int> shape, double std, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& x : t.data()) {
    double v;
    do {
      v = rng.normal();
    } while (std::abs(v) > 2.0);
    x = v * std;
  }
  return t;
}

void add_linear(ParamStore& p, const std::string& prefix, int in, int out, Rng& rng) {
  p.add(prefix + ".w", trunc_normal({in, out}, 0.02, rng));
  p.add(prefix + ".b", Tensor::zeros({out}, true));
}

void add_norm(ParamStore& p, const std::string& prefix, int dim) {
  p.add(prefix + ".g", Tensor::full({dim}, 1.0, true));
  p.add(prefix + ".b", Tensor::zeros({dim}, true));
}

void add_attention(ParamStore& p, const std::string& prefix, int embed, int heads, Rng& rng) {
  add_linear(p, prefix + ".wq", embed, embed, rng);
  add_linear(p, prefix + ".wk", embed, embed, rng);
  add_linear(p, prefix + ".wv", embed, embed, rng);
  add_linear(p, prefix + ".wo", embed, embed, rng);
  p.add(prefix + ".tau", Tensor::full({heads}, 1.0, true));
}

}  // namespace

TransformerModel TransformerModel::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  TransformerModel m;
  m.cfg = cfg;
  Rng rng(Rng::derive(seed, 0x6d6f64656cULL));

  const int E = cfg.embed_dim;
  const int hidden = static_cast<int>(std::lround(E * cfg.mlp_ratio));
  add_linear(m.params, "patch_embed", cfg.patch_size * cfg.patch_size * 3, E, rng);
  for (int i = 0; i < cfg.n_encoder_blocks; ++i) {
    const std::string b = "enc" + std::to_string(i);
    add_norm(m.params, b + ".ln1", E);
    add_attention(m.params, b + ".attn", E, cfg.n_heads, rng);
    add_norm(m.params, b + ".ln2", E);
    add_linear(m.params, b + ".mlp.fc1", E, hidden, rng);
    add_linear(m.params, b + ".mlp.fc2", hidden, E, rng);
  }
  add_norm(m.params, "enc_norm", E);

  if (cfg.task == TaskKind::flow) {
    add_linear(m.params, "dec_embed", E, E, rng);
    for (int i = 0; i < cfg.n_decoder_blocks; ++i) {
      const std::string b = "dec" + std::to_string(i);
      add_norm(m.params, b + ".ln1", E);
      add_attention(m.params, b + ".self", E, cfg.n_heads, rng);
      add_norm(m.params, b + ".ln2", E);
      add_attention(m.params, b + ".cross", E, cfg.n_heads, rng);
      add_norm(m.params, b + ".ln3", E);
      add_linear(m.params, b + ".mlp.fc1", E, hidden, rng);
      add_linear(m.params, b + ".mlp.fc2", hidden, E, rng);
    }
    add_norm(m.params, "dec_norm", E);
  }

  const int out = cfg.out_channels();
  const int up = cfg.patch_size * cfg.patch_size * out;
  if (cfg.head == HeadKind::conv) {
    const int ch = cfg.head_channels;
    add_linear(m.params, "head.conv1", 9 * E, ch, rng);
    add_linear(m.params, "head.conv2", 9 * ch, ch, rng);
    add_linear(m.params, "head.up", ch, up, rng);
  } else {
    add_linear(m.params, "head.lin", E, up, rng);
  }
  return m;
}

std::vector<std::pair<int, int>> positions_of(const std::vector<int>& ids, const TokenGrid& grid) {
  std::vector<std::pair<int, int>> pos;
  pos.reserve(ids.size());
  for (int id : ids) pos.push_back(grid.coord_of(id));
  return pos;
}

std::vector<double> sincos_embedding(const TokenGrid& grid, const std::vector<int>& ids,
                                     int embed_dim, int ref_w, int ref_h) {
  check(embed_dim % 4 == 0, "sincos embedding needs embed_dim divisible by 4");
  const int half = embed_dim / 2;     // per axis
  const int quarter = embed_dim / 4;  // frequencies per axis

  auto axis_embed = [&](double pos, double* out) {
    for (int j = 0; j < quarter; ++j) {
      const double freq = std::pow(10000.0, -2.0 * j / half);
      out[2 * j] = std::sin(pos * freq);
      out[2 * j + 1] = std::cos(pos * freq);
    }
  };

  // Reference tables per axis; queried by bilinear interpolation so that a
  // grid equal to the reference reproduces them exactly.
  auto interp_axis = [&](double coord, int ref_n, double* out) {
    const double c = std::clamp(coord, 0.0, double(ref_n - 1));
    const int i0 = static_cast<int>(std::floor(c));
    const int i1 = std::min(i0 + 1, ref_n - 1);
    const double f = c - i0;
    std::vector<double> e0(half), e1(half);
    axis_embed(double(i0), e0.data());
    axis_embed(double(i1), e1.data());
    for (int j = 0; j < half; ++j) out[j] = (1.0 - f) * e0[j] + f * e1[j];
  };

  const double sx = grid.width_tokens > 1 ? double(ref_w - 1) / double(grid.width_tokens - 1) : 0.0;
  const double sy =
      grid.height_tokens > 1 ? double(ref_h - 1) / double(grid.height_tokens - 1) : 0.0;

  std::vector<double> out(ids.size() * size_t(embed_dim));
  for (size_t i = 0; i < ids.size(); ++i) {
    const auto [x, y] = grid.coord_of(ids[i]);
    interp_axis(x * sx, ref_w, out.data() + i * embed_dim);
    interp_axis(y * sy, ref_h, out.data() + i * embed_dim + half);
  }
  return out;
}

Tensor TransformerModel::embed(const Tensor& image, const TokenGrid& grid,
                               const std::vector<int>& ids) const {
  check(image.shape().size() == 2 && image.dim(1) == 3, "embed: image must be [H*W, 3]");
  if (image.dim(0) != grid.width_px() * grid.height_px())
    throw ShapeMismatch("image resolution does not match the token grid");
  const int p = cfg.patch_size;

  std::vector<int> pixel_rows;
  pixel_rows.reserve(ids.size() * size_t(p) * p);
  for (int id : ids) {
    const auto [tx, ty] = grid.coord_of(id);
    for (int py = 0; py < p; ++py)
      for (int px = 0; px < p; ++px)
        pixel_rows.push_back((ty * p + py) * grid.width_px() + (tx * p + px));
  }
  Tensor patches = gather_rows(image, std::move(pixel_rows));
  patches = reshape(patches, {static_cast<int>(ids.size()), p * p * 3});
  Tensor tokens = add_rowvec(matmul(patches, params.at("patch_embed.w")), params.at("patch_embed.b"));
  if (cfg.pos_embedding == PosEmbedding::cosine_absolute)
    tokens = add_const(tokens,
                       sincos_embedding(grid, ids, cfg.embed_dim, cfg.ref_grid_w, cfg.ref_grid_h));
  return tokens;
}

Tensor TransformerModel::attention_block(const Tensor& x_q, const Tensor& x_kv,
                                         const std::vector<std::pair<int, int>>& pos_q,
                                         const std::vector<std::pair<int, int>>& pos_kv,
                                         const std::string& prefix, double tau_mult) const {
  const int H = cfg.n_heads, d = cfg.head_dim();
  Tensor q = add_rowvec(matmul(x_q, params.at(prefix + ".wq.w")), params.at(prefix + ".wq.b"));
  Tensor k = add_rowvec(matmul(x_kv, params.at(prefix + ".wk.w")), params.at(prefix + ".wk.b"));
  Tensor v = add_rowvec(matmul(x_kv, params.at(prefix + ".wv.w")), params.at(prefix + ".wv.b"));
  const Tensor& taus = params.at(prefix + ".tau");

  const bool rope = cfg.pos_embedding == PosEmbedding::rope;
  std::vector<Tensor> heads;
  heads.reserve(H);
  for (int h = 0; h < H; ++h) {
    Tensor qh = slice_cols(q, h * d, (h + 1) * d);
    Tensor kh = slice_cols(k, h * d, (h + 1) * d);
    Tensor vh = slice_cols(v, h * d, (h + 1) * d);
    if (rope) {
      qh = rope_apply(qh, pos_q, cfg.rope_base);
      kh = rope_apply(kh, pos_kv, cfg.rope_base);
    }
    heads.push_back(attention_head(qh, kh, vh, select_scalar(taus, h), tau_mult));
  }
  Tensor merged = concat_cols(heads);
  return add_rowvec(matmul(merged, params.at(prefix + ".wo.w")), params.at(prefix + ".wo.b"));
}

Tensor TransformerModel::mlp_block(const Tensor& x, const std::string& prefix) const {
  Tensor h = add_rowvec(matmul(x, params.at(prefix + ".fc1.w")), params.at(prefix + ".fc1.b"));
  h = gelu(h);
  return add_rowvec(matmul(h, params.at(prefix + ".fc2.w")), params.at(prefix + ".fc2.b"));
}

Tensor TransformerModel::encode(const Tensor& tokens,
                                const std::vector<std::pair<int, int>>& positions,
                                double tau_mult) const {
  check(tokens.dim(0) == static_cast<int>(positions.size()), "encode: position count mismatch");
  if (cfg.n_encoder_blocks == 0) return tokens;  // zero-depth: identity on embeddings
  Tensor x = tokens;
  for (int i = 0; i < cfg.n_encoder_blocks; ++i) {
    const std::string b = "enc" + std::to_string(i);
    Tensor n1 = layer_norm(x, params.at(b + ".ln1.g"), params.at(b + ".ln1.b"));
    x = add(x, attention_block(n1, n1, positions, positions, b + ".attn", tau_mult));
    Tensor n2 = layer_norm(x, params.at(b + ".ln2.g"), params.at(b + ".ln2.b"));
    x = add(x, mlp_block(n2, b + ".mlp"));
  }
  return layer_norm(x, params.at("enc_norm.g"), params.at("enc_norm.b"));
}

Tensor TransformerModel::decode(const Tensor& tokens1,
                                const std::vector<std::pair<int, int>>& pos1,
                                const Tensor& tokens2,
                                const std::vector<std::pair<int, int>>& pos2,
                                double tau_mult) const {
  check(cfg.task == TaskKind::flow, "decode: model has no decoder");
  Tensor x = add_rowvec(matmul(tokens1, params.at("dec_embed.w")), params.at("dec_embed.b"));
  for (int i = 0; i < cfg.n_decoder_blocks; ++i) {
    const std::string b = "dec" + std::to_string(i);
    Tensor n1 = layer_norm(x, params.at(b + ".ln1.g"), params.at(b + ".ln1.b"));
    x = add(x, attention_block(n1, n1, pos1, pos1, b + ".self", tau_mult));
    Tensor n2 = layer_norm(x, params.at(b + ".ln2.g"), params.at(b + ".ln2.b"));
    x = add(x, attention_block(n2, tokens2, pos1, pos2, b + ".cross", tau_mult));
    Tensor n3 = layer_norm(x, params.at(b + ".ln3.g"), params.at(b + ".ln3.b"));
    x = add(x, mlp_block(n3, b + ".mlp"));
  }
  return layer_norm(x, params.at("dec_norm.g"), params.at("dec_norm.b"));
}

Tensor TransformerModel::encode_image(const Tensor& image, const TokenGrid& grid,
                                      const std::vector<int>& ids, double tau_mult) const {
  return encode(embed(image, grid, ids), positions_of(ids, grid), tau_mult);
}

Tensor TransformerModel::linear_head_tokens(const Tensor& features) const {
  check(cfg.head == HeadKind::linear, "linear_head_tokens: model head is not linear");
  return add_rowvec(matmul(features, params.at("head.lin.w")), params.at("head.lin.b"));
}

std::vector<FeatureMap> TransformerModel::apply_head(const std::vector<FeatureMap>& maps) const {
  const int p = cfg.patch_size;
  std::vector<FeatureMap> out;
  out.reserve(maps.size());
  for (const auto& m : maps) {
    Tensor y;
    if (cfg.head == HeadKind::conv) {
      if (m.w < 3 || m.h < 3)
        throw WindowTooSmall("conv head requires every window side >= 3 tokens");
      y = gelu(conv3x3(m.data, m.h, m.w, params.at("head.conv1.w"), params.at("head.conv1.b")));
      y = gelu(conv3x3(y, m.h, m.w, params.at("head.conv2.w"), params.at("head.conv2.b")));
      y = add_rowvec(matmul(y, params.at("head.up.w")), params.at("head.up.b"));
    } else {
      y = add_rowvec(matmul(m.data, params.at("head.lin.w")), params.at("head.lin.b"));
    }
    out.push_back(FeatureMap{pixel_shuffle(y, m.h, m.w, p), m.w * p, m.h * p});
  }
  return out;
}

std::vector<std::string> TransformerModel::temperature_sites() const {
  std::vector<std::string> sites;
  for (int i = 0; i < cfg.n_encoder_blocks; ++i)
    sites.push_back("enc" + std::to_string(i) + ".attn.tau");
  if (cfg.task == TaskKind::flow) {
    for (int i = 0; i < cfg.n_decoder_blocks; ++i) {
      sites.push_back("dec" + std::to_string(i) + ".self.tau");
      sites.push_back("dec" + std::to_string(i) + ".cross.tau");
    }
  }
  return sites;
}

TemperatureTable TransformerModel::temperatures() const {
  TemperatureTable t;
  t.sites = temperature_sites();
  for (const auto& s : t.sites) t.tau.push_back(params.at(s).data());
  return t;
}

void TransformerModel::set_temperatures(const TemperatureTable& table) {
  check(table.sites.size() == table.tau.size(), "temperature table shape mismatch");
  for (size_t i = 0; i < table.sites.size(); ++i) {
    Tensor& t = params.at(table.sites[i]);
    check(t.numel() == static_cast<int64_t>(table.tau[i].size()),
          "temperature table head count mismatch");
    for (double v : table.tau[i]) check(v > 0.0, "temperatures must be positive");
    t.data() = table.tau[i];
  }
}

void TransformerModel::set_all_temperatures(double v) {
  check(v > 0.0, "temperatures must be positive");
  for (const auto& s : temperature_sites())
    std::fill(params.at(s).data().begin(), params.at(s).data().end(), v);
}

std::vector<FeatureMap> scatter_to_feature_maps(const Tensor& features, const WindowSet& ws,
                                                const TokenGrid& grid) {
  const std::vector<int> ids = token_indices(ws, grid);
  if (features.dim(0) != static_cast<int>(ids.size()))
    throw ShapeMismatch("feature rows do not match the window set's token count");
  std::vector<FeatureMap> maps;
  maps.reserve(ws.windows.size());
  for (const auto& w : ws.windows) {
    std::vector<int> rows;
    rows.reserve(w.token_count());
    for (int y = w.y0; y < w.y0 + w.h; ++y)
      for (int x = w.x0; x < w.x0 + w.w; ++x) {
        const int id = grid.index_of(x, y);
        const auto it = std::lower_bound(ids.begin(), ids.end(), id);
        check(it != ids.end() && *it == id, "window token missing from feature rows");
        rows.push_back(static_cast<int>(it - ids.begin()));
      }
    maps.push_back(FeatureMap{gather_rows(features, std::move(rows)), w.w, w.h});
  }
  return maps;
}

// ---- checkpoint io ----

namespace {

constexpr char kMagic[8] = {'M', 'W', 'C', 'K', 'P', 'T', '0', '1'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 24));
}

uint32_t take_u32(const std::vector<uint8_t>& in, size_t& pos) {
  check(pos + 4 <= in.size(), "checkpoint truncated");
  uint32_t v = uint32_t(in[pos]) | uint32_t(in[pos + 1]) << 8 | uint32_t(in[pos + 2]) << 16 |
               uint32_t(in[pos + 3]) << 24;
  pos += 4;
  return v;
}

}  // namespace

std::vector<uint8_t> checkpoint_bytes(const ModelConfig& cfg, const ParamStore& params) {
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 8);
  const std::string cfg_text = cfg.to_text();
  put_u32(out, static_cast<uint32_t>(cfg_text.size()));
  out.insert(out.end(), cfg_text.begin(), cfg_text.end());
  put_u32(out, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) put_u32(out, static_cast<uint32_t>(d));
    for (double x : t.data()) {
      const float f = static_cast<float>(x);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  }
  return out;
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamStore& params) {
  const std::vector<uint8_t> bytes = checkpoint_bytes(cfg, params);
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "cannot open checkpoint for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  check(f.good(), "checkpoint write failed: " + path);
}

TransformerModel load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "cannot open checkpoint: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  size_t pos = 0;
  check(bytes.size() >= 8 && std::memcmp(bytes.data(), kMagic, 8) == 0,
        "not a checkpoint file: " + path);
  pos = 8;
  const uint32_t cfg_len = take_u32(bytes, pos);
  check(pos + cfg_len <= bytes.size(), "checkpoint truncated");
  const std::string cfg_text(bytes.begin() + long(pos), bytes.begin() + long(pos + cfg_len));
  pos += cfg_len;

  TransformerModel m = TransformerModel::init(ModelConfig::from_text(cfg_text), 0);
  const uint32_t n_tensors = take_u32(bytes, pos);
  check(n_tensors == m.params.size(), "checkpoint parameter count mismatch");
  for (uint32_t i = 0; i < n_tensors; ++i) {
    const uint32_t name_len = take_u32(bytes, pos);
    check(pos + name_len <= bytes.size(), "checkpoint truncated");
    const std::string name(bytes.begin() + long(pos), bytes.begin() + long(pos + name_len));
    pos += name_len;
    const uint32_t ndim = take_u32(bytes, pos);
    std::vector<int> shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int>(take_u32(bytes, pos));
    Tensor& t = m.params.at(name);
    check(t.shape() == shape, "checkpoint shape mismatch for " + name);
    for (double& x : t.data()) {
      const uint32_t bits = take_u32(bytes, pos);
      float fv;
      std::memcpy(&fv, &bits, 4);
      x = fv;
    }
  }
  check(pos == bytes.size(), "trailing bytes in checkpoint");
  return m;
}

}  // namespace multiwin
