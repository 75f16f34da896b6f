#include "echoflow/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "echoflow/io.hpp"

namespace echoflow::model {

using nlohmann::json;
using nn::Conv2d;
using nn::Init;
using nn::Scalar;

void BackboneConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidSpec, "backbone: " + m); };
  if (resolution <= 0 || stem_width <= 0 || depth <= 0 || embed_dim <= 0 || heads <= 0 || patch <= 0)
    fail("all sizes must be positive");
  if (patch % 8 != 0) fail("patch must be a multiple of 8");
  if (resolution % patch != 0) fail("resolution must be divisible by patch");
  if (embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
  if (stem_width % 2 != 0) fail("stem_width must be even");
}

Backbone::Backbone(const BackboneConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg.validate();
  const int cs = cfg.stem_width, d = cfg.embed_dim, pk = cfg.patch / 8;
  stem1_ = Conv2d(1, cs / 2, 3, 2, 1, rng);
  stem2_ = Conv2d(cs / 2, cs, 3, 2, 1, rng);
  down_ = Conv2d(cs, 2 * cs, 3, 2, 1, rng);
  patch_embed_ = Conv2d(2 * cs, d, pk, pk, 0, rng);
  pos_embed_ = nn::make_param({cfg.grid() * cfg.grid(), d}, Init::SmallNormal, d, rng);
  for (int i = 0; i < cfg.depth; ++i) {
    Block b;
    b.ln1 = nn::LayerNorm(d);
    b.ln2 = nn::LayerNorm(d);
    b.qkv = nn::Linear(d, 3 * d, rng, Init::SmallNormal);
    b.proj = nn::Linear(d, d, rng, Init::SmallNormal);
    b.fc1 = nn::Linear(d, 4 * d, rng, Init::SmallNormal);
    b.fc2 = nn::Linear(4 * d, d, rng, Init::SmallNormal);
    blocks_.push_back(std::move(b));
  }
  final_ln_ = nn::LayerNorm(d);
}

Tensor Backbone::encode_stem(const Tensor& images) const {
  return nn::relu(stem2_(nn::relu(stem1_(images))));
}

FeatureBundle Backbone::encode(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != cfg_.resolution ||
      images.dim(3) != cfg_.resolution)
    throw Error(ErrorCode::ShapeMismatch, "encode expects [N,1," + std::to_string(cfg_.resolution) +
                                              "," + std::to_string(cfg_.resolution) + "], got " +
                                              nn::shape_str(images.shape()));
  FeatureBundle f;
  f.grid = cfg_.grid();
  f.stem = encode_stem(images);
  Tensor mid = nn::relu(down_(f.stem));
  f.scales = {f.stem, mid};
  Tensor x = nn::add_broadcast(nn::map_to_tokens(patch_embed_(mid)), pos_embed_);
  for (const auto& b : blocks_) {
    x = nn::add(x, b.proj(nn::multi_head_attention(b.qkv(b.ln1(x)), cfg_.heads)));
    x = nn::add(x, b.fc2(nn::gelu(b.fc1(b.ln2(x)))));
  }
  f.tokens = final_ln_(x);
  return f;
}

void Backbone::collect(ParamList& out, const std::string& prefix) const {
  stem1_.collect(out, prefix + ".stem1");
  stem2_.collect(out, prefix + ".stem2");
  down_.collect(out, prefix + ".down");
  patch_embed_.collect(out, prefix + ".patch_embed");
  out.push_back({prefix + ".pos_embed", pos_embed_});
  for (size_t i = 0; i < blocks_.size(); ++i) {
    const auto p = prefix + ".block" + std::to_string(i);
    blocks_[i].ln1.collect(out, p + ".ln1");
    blocks_[i].qkv.collect(out, p + ".qkv");
    blocks_[i].proj.collect(out, p + ".proj");
    blocks_[i].ln2.collect(out, p + ".ln2");
    blocks_[i].fc1.collect(out, p + ".fc1");
    blocks_[i].fc2.collect(out, p + ".fc2");
  }
  final_ln_.collect(out, prefix + ".final_ln");
}

HeadConfig default_head_config(TaskKind kind, int out_channels, const BackboneConfig& bb) {
  HeadConfig h;
  h.kind = kind;
  h.out_channels = kind == TaskKind::Det ? 4 : out_channels;
  h.width = 64;
  h.heatmap_size = kind == TaskKind::Reg ? bb.resolution / 2 : 0;
  return h;
}

StemAdapter::StemAdapter(int stem_width, const AdapterConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  if (cfg.ratio < 1) throw Error(ErrorCode::InvalidSpec, "adapter ratio must be >= 1");
  const int hidden = std::max(1, stem_width / cfg.ratio);
  reduce_ = Conv2d(stem_width, hidden, 1, 1, 0, rng);
  mix_ = Conv2d(hidden, hidden, kAdapterKernel, 1, kAdapterKernel / 2, rng);
  expand_ = Conv2d(hidden, stem_width, 1, 1, 0, rng, Init::Zero);
}

Tensor StemAdapter::operator()(const Tensor& stem) const {
  if (!cfg_.enabled) return stem;
  return nn::add(stem, expand_(nn::relu(mix_(nn::relu(reduce_(stem))))));
}

void StemAdapter::collect(ParamList& out, const std::string& prefix) const {
  reduce_.collect(out, prefix + ".reduce");
  mix_.collect(out, prefix + ".mix");
  expand_.collect(out, prefix + ".expand");
}

namespace {

Tensor token_map(const FeatureBundle& f) { return nn::tokens_to_map(f.tokens, f.grid, f.grid); }

// Token grid brought up to the stride-8 map (patch 16 needs one x2, patch 8 none).
Tensor lift_to(Tensor x, const Tensor& ref) {
  while (x.dim(2) < ref.dim(2)) x = nn::upsample2x(x);
  return x;
}

class SegHead final : public TaskHead {
 public:
  SegHead(const HeadConfig& cfg, const BackboneConfig& bb, std::mt19937_64& rng) : TaskHead(cfg) {
    const int w = cfg.width, cs = bb.stem_width;
    c1 = Conv2d(bb.embed_dim, w, 3, 1, 1, rng);
    c2 = Conv2d(w + 2 * cs, 3 * w / 4, 3, 1, 1, rng);
    c3 = Conv2d(3 * w / 4 + cs, w / 2, 3, 1, 1, rng);
    c4 = Conv2d(w / 2, w / 4, 3, 1, 1, rng);
    c5 = Conv2d(w / 4, w / 8, 3, 1, 1, rng);
    out = Conv2d(w / 8, cfg.out_channels, 1, 1, 0, rng);
  }
  Tensor forward(const FeatureBundle& f) const {
    using namespace nn;
    Tensor x = relu(c1(token_map(f)));
    x = relu(c2(concat_channels({lift_to(x, f.scales[1]), f.scales[1]})));
    x = relu(c3(concat_channels({upsample2x(x), f.scales[0]})));
    x = relu(c4(upsample2x(x)));
    x = relu(c5(upsample2x(x)));
    return out(x);
  }
  void collect(ParamList& o, const std::string& p) const override {
    c1.collect(o, p + ".c1");
    c2.collect(o, p + ".c2");
    c3.collect(o, p + ".c3");
    c4.collect(o, p + ".c4");
    c5.collect(o, p + ".c5");
    out.collect(o, p + ".out");
  }
  Conv2d c1, c2, c3, c4, c5, out;
};

// Constant [N, 4, H, W] map: x, y and their squares. Attention-pooling it
// gives the attended region's centre and spread.
Tensor coord_moments(int n, int height, int width) {
  auto out = Tensor::zeros({n, 4, height, width});
  auto o = out.data();
  const size_t hw = size_t(height) * width;
  for (int b = 0; b < n; ++b)
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c) {
        const nn::Scalar x = (nn::Scalar(c) + nn::Scalar(0.5)) / nn::Scalar(width);
        const nn::Scalar y = (nn::Scalar(r) + nn::Scalar(0.5)) / nn::Scalar(height);
        const size_t i = size_t(r) * width + c;
        o[(size_t(b) * 4 + 0) * hw + i] = x;
        o[(size_t(b) * 4 + 1) * hw + i] = y;
        o[(size_t(b) * 4 + 2) * hw + i] = x * x;
        o[(size_t(b) * 4 + 3) * hw + i] = y * y;
      }
  return out;
}

class DetHead final : public TaskHead {
 public:
  DetHead(const HeadConfig& cfg, const BackboneConfig& bb, std::mt19937_64& rng) : TaskHead(cfg) {
    const int w = cfg.width, cs = bb.stem_width;
    c1 = Conv2d(bb.embed_dim, w, 3, 1, 1, rng);
    c2 = Conv2d(w + 2 * cs, w, 3, 1, 1, rng);
    refine = Conv2d(w + 2, w, 3, 1, 1, rng);
    attend = Conv2d(w, 1, 1, 1, 0, rng, Init::Zero);
    fc1 = nn::Linear(w + 4, w, rng);
    fc2 = nn::Linear(w, 4, rng, Init::SmallNormal);
  }
  Tensor forward(const FeatureBundle& f) const {
    using namespace nn;
    Tensor x = relu(c1(token_map(f)));
    x = relu(c2(concat_channels({lift_to(x, f.scales[1]), f.scales[1]})));
    x = relu(refine(concat_channels({x, coord_channels(x.dim(0), x.dim(2), x.dim(3))})));
    const Tensor moments = coord_moments(x.dim(0), x.dim(2), x.dim(3));
    return fc2(relu(fc1(attention_pool(concat_channels({x, moments}), attend(x)))));
  }
  void collect(ParamList& o, const std::string& p) const override {
    c1.collect(o, p + ".c1");
    c2.collect(o, p + ".c2");
    refine.collect(o, p + ".refine");
    attend.collect(o, p + ".attend");
    fc1.collect(o, p + ".fc1");
    fc2.collect(o, p + ".fc2");
  }
  Conv2d c1, c2, refine, attend;
  nn::Linear fc1, fc2;
};

class RegHead final : public TaskHead {
 public:
  RegHead(const HeadConfig& cfg, const BackboneConfig& bb, std::mt19937_64& rng) : TaskHead(cfg) {
    if (cfg.heatmap_size != bb.resolution / 2)
      throw Error(ErrorCode::InvalidSpec, "REG heatmap_size must be resolution / 2");
    const int w = cfg.width, cs = bb.stem_width;
    c1 = Conv2d(bb.embed_dim, w, 3, 1, 1, rng);
    c2 = Conv2d(w + 2 * cs, w, 3, 1, 1, rng);
    c3 = Conv2d(w + cs, w / 2, 3, 1, 1, rng);
    out = Conv2d(w / 2, cfg.out_channels, 1, 1, 0, rng);
  }
  Tensor forward(const FeatureBundle& f) const {
    using namespace nn;
    // gelu: relu here could die wholesale and pin heatmaps at zero
    Tensor x = gelu(c1(token_map(f)));
    x = gelu(c2(concat_channels({lift_to(x, f.scales[1]), f.scales[1]})));
    x = gelu(c3(concat_channels({upsample2x(x), f.scales[0]})));
    return upsample2x(out(x));  // head-native R/4, fixed x2 to R/2
  }
  void collect(ParamList& o, const std::string& p) const override {
    c1.collect(o, p + ".c1");
    c2.collect(o, p + ".c2");
    c3.collect(o, p + ".c3");
    out.collect(o, p + ".out");
  }
  Conv2d c1, c2, c3, out;
};

class ClsHead final : public TaskHead {
 public:
  ClsHead(const HeadConfig& cfg, const BackboneConfig& bb, std::mt19937_64& rng) : TaskHead(cfg) {
    // Fixed input standardization, set from data by calibrate_cls_head.
    shift = Tensor::zeros({bb.stem_width});
    scale = Tensor::filled({bb.stem_width}, 1);
    fc1 = nn::Linear(bb.stem_width, cfg.width, rng);
    fc2 = nn::Linear(cfg.width, cfg.out_channels, rng, Init::SmallNormal);
  }
  Tensor forward(const Tensor& stem) const {
    return fc2(nn::relu(fc1(nn::scale_shift(nn::global_avg_pool(stem), scale, shift))));
  }
  void collect(ParamList& o, const std::string& p) const override {
    o.push_back({p + ".norm.shift", shift});
    o.push_back({p + ".norm.scale", scale});
    fc1.collect(o, p + ".fc1");
    fc2.collect(o, p + ".fc2");
  }
  Tensor shift, scale;
  nn::Linear fc1, fc2;
};

template <typename H>
const H& expect_head(const TaskHead& head, TaskKind kind) {
  if (head.kind() != kind)
    throw Error(ErrorCode::HeadKindMismatch, "expected a " + std::string(to_string(kind)) +
                                                 " head, got " + std::string(to_string(head.kind())));
  return static_cast<const H&>(head);
}

}  // namespace

std::unique_ptr<TaskHead> make_head(const HeadConfig& cfg, const BackboneConfig& bb,
                                    std::mt19937_64& rng) {
  if (cfg.out_channels < 1 || cfg.width < 8)
    throw Error(ErrorCode::InvalidSpec, "head: out_channels >= 1 and width >= 8 required");
  switch (cfg.kind) {
    case TaskKind::Seg: return std::make_unique<SegHead>(cfg, bb, rng);
    case TaskKind::Det: return std::make_unique<DetHead>(cfg, bb, rng);
    case TaskKind::Reg: return std::make_unique<RegHead>(cfg, bb, rng);
    case TaskKind::Cls: return std::make_unique<ClsHead>(cfg, bb, rng);
  }
  return nullptr;
}

std::unique_ptr<TaskHead> clone_head(const TaskHead& head, const BackboneConfig& bb) {
  std::mt19937_64 rng(0);
  auto copy = make_head(head.config(), bb, rng);
  ParamList src, dst;
  head.collect(src, "h");
  copy->collect(dst, "h");
  for (size_t i = 0; i < src.size(); ++i) {
    auto d = dst[i].tensor;
    std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), d.data().begin());
  }
  return copy;
}

Tensor seg_forward(const FeatureBundle& f, const TaskHead& head) {
  return expect_head<SegHead>(head, TaskKind::Seg).forward(f);
}

Tensor det_forward(const FeatureBundle& f, const TaskHead& head) {
  return expect_head<DetHead>(head, TaskKind::Det).forward(f);
}

Tensor reg_forward(const FeatureBundle& f, const TaskHead& head) {
  return expect_head<RegHead>(head, TaskKind::Reg).forward(f);
}

void calibrate_cls_head(TaskHead& head, const Tensor& pooled) {
  auto& h = const_cast<ClsHead&>(expect_head<ClsHead>(head, TaskKind::Cls));
  const int n = pooled.dim(0), c = pooled.dim(1);
  if (pooled.rank() != 2 || c != int(h.shift.numel()) || n < 2)
    throw Error(ErrorCode::ShapeMismatch, "calibrate_cls_head: pooled " + nn::shape_str(pooled.shape()));
  std::vector<double> mean(static_cast<size_t>(c)), sd(static_cast<size_t>(c));
  for (int b = 0; b < n; ++b)
    for (int j = 0; j < c; ++j) mean[size_t(j)] += pooled.data()[size_t(b) * c + j] / n;
  for (int b = 0; b < n; ++b)
    for (int j = 0; j < c; ++j) {
      const double d = pooled.data()[size_t(b) * c + j] - mean[size_t(j)];
      sd[size_t(j)] += d * d / n;
    }
  double avg_sd = 0;
  for (auto& v : sd) avg_sd += (v = std::sqrt(v)) / c;
  // Near-constant channels would otherwise be blown up to noise.
  const double floor = 0.1 * avg_sd + 1e-12;
  for (int j = 0; j < c; ++j) {
    h.shift.data()[size_t(j)] = nn::Scalar(mean[size_t(j)]);
    h.scale.data()[size_t(j)] = nn::Scalar(1.0 / (sd[size_t(j)] + floor));
  }
}

Tensor cls_pooled(const Tensor& stem, const StemAdapter* adapter) {
  return nn::global_avg_pool(adapter ? (*adapter)(stem) : stem);
}

Tensor cls_forward(const Tensor& stem, const StemAdapter* adapter, const TaskHead& head) {
  const auto& h = expect_head<ClsHead>(head, TaskKind::Cls);
  return h.forward(adapter ? (*adapter)(stem) : stem);
}

namespace {
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

NormBox box_from_raw(std::span<const double, 4> u) {
  const double x0 = sigmoid(u[0]), y0 = sigmoid(u[1]);
  return {x0, y0, x0 + (1 - x0) * sigmoid(u[2]), y0 + (1 - y0) * sigmoid(u[3])};
}

std::array<double, 4> box_raw_grad(std::span<const double, 4> u, std::span<const double, 4> db) {
  std::array<double, 4> g{};
  for (int axis = 0; axis < 2; ++axis) {
    const double s0 = sigmoid(u[size_t(axis)]), s1 = sigmoid(u[size_t(axis) + 2]);
    const double ds0 = s0 * (1 - s0), ds1 = s1 * (1 - s1);
    const double d_min = db[size_t(axis)], d_max = db[size_t(axis) + 2];
    // max = s0 + (1 - s0) s1
    g[size_t(axis)] = ds0 * (d_min + d_max * (1 - s1));
    g[size_t(axis) + 2] = d_max * (1 - s0) * ds1;
  }
  return g;
}

Heatmap encode_target(const KeypointSet& points, int height, int width, double sigma) {
  Heatmap h{int(points.points.size()), height, width, {}};
  h.values.assign(size_t(h.channels) * height * width, 0.0);
  const double inv = 1.0 / (2 * sigma * sigma);
  for (int k = 0; k < h.channels; ++k) {
    const auto& p = points.points[size_t(k)];
    const int c0 = std::clamp(int(std::floor(p.x * width)), 0, width - 1);
    const int r0 = std::clamp(int(std::floor(p.y * height)), 0, height - 1);
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c) {
        const double d2 = double((r - r0) * (r - r0) + (c - c0) * (c - c0));
        h.values[(size_t(k) * height + r) * width + c] = std::exp(-d2 * inv);
      }
  }
  return h;
}

KeypointSet decode_keypoints(const Heatmap& h) {
  KeypointSet out;
  for (int k = 0; k < h.channels; ++k) {
    int best_r = 0, best_c = 0;
    double best = h.at(k, 0, 0);
    for (int r = 0; r < h.height; ++r)
      for (int c = 0; c < h.width; ++c)
        if (h.at(k, r, c) > best) {
          best = h.at(k, r, c);
          best_r = r;
          best_c = c;
        }
    out.points.push_back(pixel_center(best_r, best_c, h.height, h.width));
  }
  return out;
}

MultiTaskModel::MultiTaskModel(const BackboneConfig& cfg, std::uint64_t seed) : rng_(seed) {
  backbone = Backbone(cfg, rng_);
}

void MultiTaskModel::ensure_generalist(const std::vector<DatasetSpec>& specs, std::uint64_t seed) {
  std::map<TaskKind, int> widest;
  for (const auto& s : specs) {
    const int n = s.task == TaskKind::Reg ? s.num_keypoints
                  : s.task == TaskKind::Det ? 4
                                            : s.num_classes;
    widest[s.task] = std::max(widest[s.task], n);
  }
  std::mt19937_64 rng(seed);
  for (const auto& [kind, n] : widest) {
    auto it = generalist_heads.find(kind);
    if (it == generalist_heads.end() || it->second->config().out_channels < n)
      generalist_heads[kind] = make_head(default_head_config(kind, n, config()), config(), rng);
  }
  for (const auto& s : specs) {
    const int n = s.task == TaskKind::Reg ? s.num_keypoints
                  : s.task == TaskKind::Det ? 4
                                            : s.num_classes;
    std::vector<int> map(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) map[size_t(i)] = i;
    channel_maps[s.dataset_id] = map;
  }
}

ParamList MultiTaskModel::backbone_params() const {
  ParamList out;
  backbone.collect(out, "backbone");
  return out;
}

ParamList MultiTaskModel::generalist_params() const {
  ParamList out;
  for (const auto& [kind, head] : generalist_heads)
    head->collect(out, "generalist." + std::string(to_string(kind)));
  return out;
}

ParamList MultiTaskModel::specialist_params(const std::string& id) const {
  ParamList out;
  auto it = specialists.find(id);
  if (it == specialists.end()) throw Error(ErrorCode::UnknownDataset, "no specialist for '" + id + "'");
  it->second.head->collect(out, "specialist." + id + ".head");
  if (it->second.adapter) it->second.adapter->collect(out, "specialist." + id + ".adapter");
  return out;
}

ParamList MultiTaskModel::all_params() const {
  ParamList out = backbone_params();
  for (auto& p : generalist_params()) out.push_back(p);
  for (const auto& [id, _] : specialists)
    for (auto& p : specialist_params(id)) out.push_back(p);
  return out;
}

std::string hash_params(const ParamList& params) {
  std::vector<std::uint8_t> buf;
  for (const auto& p : params) {
    buf.insert(buf.end(), p.name.begin(), p.name.end());
    buf.push_back(0);
    for (int d : p.tensor.shape()) {
      auto b = reinterpret_cast<const std::uint8_t*>(&d);
      buf.insert(buf.end(), b, b + sizeof d);
    }
    for (Scalar v : p.tensor.data()) {
      const float f = float(v);
      auto b = reinterpret_cast<const std::uint8_t*>(&f);
      buf.insert(buf.end(), b, b + sizeof f);
    }
  }
  return io::sha256_hex(buf);
}

json to_json(const BackboneConfig& c) {
  return {{"resolution", c.resolution}, {"stem_width", c.stem_width}, {"depth", c.depth},
          {"embed_dim", c.embed_dim},   {"heads", c.heads},           {"patch", c.patch}};
}

BackboneConfig backbone_config_from_json(const json& j) {
  BackboneConfig c;
  c.resolution = j.value("resolution", c.resolution);
  c.stem_width = j.value("stem_width", c.stem_width);
  c.depth = j.value("depth", c.depth);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.heads = j.value("heads", c.heads);
  c.patch = j.value("patch", c.patch);
  return c;
}

json to_json(const HeadConfig& c) {
  return {{"kind", std::string(to_string(c.kind))},
          {"out_channels", c.out_channels},
          {"width", c.width},
          {"heatmap_size", c.heatmap_size}};
}

HeadConfig head_config_from_json(const json& j) {
  HeadConfig c;
  c.kind = parse_task_kind(j.at("kind").get<std::string>());
  c.out_channels = j.at("out_channels").get<int>();
  c.width = j.at("width").get<int>();
  c.heatmap_size = j.at("heatmap_size").get<int>();
  return c;
}

namespace {

constexpr char kMagic[] = "ECHOFLOW-CKPT";
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const MultiTaskModel& m) {
  json header;
  header["schema_version"] = io::kSchemaVersion;
  header["backbone"] = to_json(m.config());
  header["generalist_heads"] = json::object();
  for (const auto& [kind, head] : m.generalist_heads)
    header["generalist_heads"][std::string(to_string(kind))] = to_json(head->config());
  header["channel_maps"] = m.channel_maps;
  header["specialists"] = json::object();
  for (const auto& [id, s] : m.specialists) {
    json e = {{"dataset", io::to_json(s.dataset)}, {"head", to_json(s.head->config())}};
    AdapterConfig ac = s.adapter ? s.adapter->config() : AdapterConfig{};
    e["adapter"] = {{"present", s.adapter.has_value()}, {"enabled", ac.enabled}, {"ratio", ac.ratio}};
    header["specialists"][id] = e;
  }
  header["visit_log"] = m.visit_log;
  header["meta"] = m.meta;

  const auto params = m.all_params();
  json tensors = json::array();
  size_t offset = 0;
  for (const auto& p : params) {
    tensors.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
    offset += p.tensor.numel();
  }
  header["tensors"] = tensors;
  header["parameter_hash"] = hash_params(params);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write checkpoint '" + path.string() + "'");
  const std::string h = header.dump();
  const std::uint64_t hlen = h.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);
  out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out.write(h.data(), std::streamsize(h.size()));
  for (const auto& p : params) {
    std::vector<float> f(p.tensor.data().begin(), p.tensor.data().end());
    out.write(reinterpret_cast<const char*>(f.data()), std::streamsize(f.size() * sizeof(float)));
  }
}

MultiTaskModel load_checkpoint(const std::filesystem::path& path,
                               const std::optional<BackboneConfig>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open checkpoint '" + path.string() + "'");
  char magic[sizeof kMagic];
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw Error(ErrorCode::Parse, "'" + path.string() + "' is not a checkpoint");
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::ConfigMismatch, "unsupported checkpoint version " + std::to_string(version));
  std::string h(hlen, '\0');
  in.read(h.data(), std::streamsize(hlen));
  json header;
  try {
    header = json::parse(h);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("checkpoint header: ") + e.what());
  }

  const auto cfg = backbone_config_from_json(header.at("backbone"));
  if (expected && !(*expected == cfg))
    throw Error(ErrorCode::ConfigMismatch, "checkpoint backbone " + header.at("backbone").dump() +
                                               " differs from expected " + to_json(*expected).dump());
  MultiTaskModel m(cfg, 0);
  std::mt19937_64 rng(0);
  for (const auto& [kind, hc] : header.at("generalist_heads").items())
    m.generalist_heads[parse_task_kind(kind)] = make_head(head_config_from_json(hc), cfg, rng);
  m.channel_maps = header.at("channel_maps").get<std::map<std::string, std::vector<int>>>();
  for (const auto& [id, e] : header.at("specialists").items()) {
    Specialist s;
    s.dataset = io::dataset_spec_from_json(e.at("dataset"));
    s.head = make_head(head_config_from_json(e.at("head")), cfg, rng);
    if (e.at("adapter").at("present").get<bool>())
      s.adapter = StemAdapter(cfg.stem_width,
                              {e["adapter"]["enabled"].get<bool>(), e["adapter"]["ratio"].get<int>()},
                              rng);
    m.specialists.emplace(id, std::move(s));
  }
  m.visit_log = header.value("visit_log", std::vector<std::string>{});
  m.meta = header.value("meta", json::object());

  const auto params = m.all_params();
  const auto& tensors = header.at("tensors");
  if (tensors.size() != params.size())
    throw Error(ErrorCode::ConfigMismatch, "checkpoint tensor count " + std::to_string(tensors.size()) +
                                               " differs from model's " + std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& rec = tensors[i];
    if (rec.at("name").get<std::string>() != params[i].name ||
        rec.at("shape").get<nn::Shape>() != params[i].tensor.shape())
      throw Error(ErrorCode::ConfigMismatch, "tensor '" + rec.at("name").get<std::string>() +
                                                 "' does not match module parameter '" + params[i].name +
                                                 "' " + nn::shape_str(params[i].tensor.shape()));
    std::vector<float> f(params[i].tensor.numel());
    in.read(reinterpret_cast<char*>(f.data()), std::streamsize(f.size() * sizeof(float)));
    if (!in) throw Error(ErrorCode::Parse, "checkpoint truncated at '" + params[i].name + "'");
    auto t = params[i].tensor;
    std::copy(f.begin(), f.end(), t.data().begin());
  }
  return m;
}

Tensor images_to_tensor(const std::vector<const ImageGray*>& images) {
  if (images.empty()) throw Error(ErrorCode::ShapeMismatch, "empty image batch");
  const int h = images[0]->height, w = images[0]->width;
  auto t = Tensor::zeros({int(images.size()), 1, h, w});
  auto d = t.data();
  for (size_t i = 0; i < images.size(); ++i) {
    if (images[i]->height != h || images[i]->width != w)
      throw Error(ErrorCode::ShapeMismatch, "images in a batch must share a size");
    std::copy(images[i]->pixels.begin(), images[i]->pixels.end(), d.begin() + std::ptrdiff_t(i * h * w));
  }
  return t;
}

}  // namespace echoflow::model
