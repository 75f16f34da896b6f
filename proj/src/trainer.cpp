#include "echoflow/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "echoflow/io.hpp"

namespace echoflow::trainer {

using nlohmann::json;

void StageOneConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidSpec, "stage1: " + m); };
  if (datasets.empty()) fail("dataset list is empty");
  if (granularity.count < 1) fail("granularity must be >= 1");
  if (cycles < 1) fail("cycles must be >= 1");
  if (!(backbone_lr > 0) || !(head_lr > 0)) fail("learning rates must be > 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  loss.validate();
  augmentation.validate();
}

void StageTwoConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidSpec, "stage2: " + m); };
  if (dataset_id.empty()) fail("dataset_id is empty");
  if (!(head_lr > 0)) fail("head_lr must be > 0");
  if (steps < 0) fail("steps must be >= 0");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  loss.validate();
  augmentation.validate();
}

namespace {

json loss_json(const losses::LossConfig& l) {
  return {{"alpha", l.alpha}, {"eps_iou", l.eps_iou}, {"dice_smooth", l.dice_smooth}};
}

losses::LossConfig loss_from(const json& j) {
  losses::LossConfig l;
  l.alpha = j.value("alpha", l.alpha);
  l.eps_iou = j.value("eps_iou", l.eps_iou);
  l.dice_smooth = j.value("dice_smooth", l.dice_smooth);
  return l;
}

}  // namespace

json to_json(const StageOneConfig& c) {
  return {{"datasets", c.datasets},
          {"granularity",
           {{"unit", c.granularity.unit == Granularity::Unit::Epochs ? "epochs" : "steps"},
            {"count", c.granularity.count}}},
          {"cycles", c.cycles},
          {"backbone_lr", c.backbone_lr},
          {"head_lr", c.head_lr},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"loss", loss_json(c.loss)},
          {"augmentation", augment::to_json(c.augmentation)}};
}

StageOneConfig stage_one_from_json(const json& j) {
  StageOneConfig c;
  c.datasets = j.value("datasets", c.datasets);
  if (j.contains("granularity")) {
    const auto& g = j["granularity"];
    const std::string unit = g.value("unit", "epochs");
    if (unit != "epochs" && unit != "steps")
      throw Error(ErrorCode::InvalidSpec, "granularity unit must be 'epochs' or 'steps'");
    c.granularity.unit = unit == "epochs" ? Granularity::Unit::Epochs : Granularity::Unit::Steps;
    c.granularity.count = g.value("count", 1);
  }
  c.cycles = j.value("cycles", c.cycles);
  c.backbone_lr = j.value("backbone_lr", c.backbone_lr);
  c.head_lr = j.value("head_lr", c.head_lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  if (j.contains("loss")) c.loss = loss_from(j["loss"]);
  if (j.contains("augmentation")) c.augmentation = augment::policy_from_json(j["augmentation"]);
  return c;
}

json to_json(const StageTwoConfig& c) {
  return {{"dataset_id", c.dataset_id}, {"head_lr", c.head_lr},       {"adapter", c.adapter},
          {"steps", c.steps},           {"warmup_steps", c.warmup_steps}, {"batch_size", c.batch_size}, {"seed", c.seed},
          {"loss", loss_json(c.loss)},  {"augmentation", augment::to_json(c.augmentation)}};
}

StageTwoConfig stage_two_from_json(const json& j) {
  StageTwoConfig c;
  c.dataset_id = j.value("dataset_id", c.dataset_id);
  c.head_lr = j.value("head_lr", c.head_lr);
  c.adapter = j.value("adapter", c.adapter);
  c.steps = j.value("steps", c.steps);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  if (j.contains("loss")) c.loss = loss_from(j["loss"]);
  if (j.contains("augmentation")) c.augmentation = augment::policy_from_json(j["augmentation"]);
  return c;
}

std::string RunLog::to_jsonl() const {
  std::ostringstream out;
  for (size_t i = 0; i < visits.size(); ++i)
    out << json{{"type", "visit"}, {"visit", i}, {"dataset_id", visits[i]}}.dump() << '\n';
  for (const auto& s : steps)
    out << json{{"type", "step"},  {"stage", s.stage}, {"dataset_id", s.dataset_id},
                {"visit", s.visit}, {"step", s.step},   {"loss", s.loss}}
               .dump()
        << '\n';
  return out.str();
}

std::pair<double, double> RunLog::first_last_loss(const std::string& id, int window) const {
  std::vector<double> v;
  for (const auto& s : steps)
    if (s.dataset_id == id && std::isfinite(s.loss)) v.push_back(s.loss);
  if (v.empty()) return {0, 0};
  const size_t w = std::min(v.size(), size_t(std::max(1, window)));
  const double first = std::accumulate(v.begin(), v.begin() + std::ptrdiff_t(w), 0.0) / double(w);
  const double last = std::accumulate(v.end() - std::ptrdiff_t(w), v.end(), 0.0) / double(w);
  return {first, last};
}

std::vector<std::string> visit_schedule(const StageOneConfig& config) {
  std::vector<std::string> out;
  for (int c = 0; c < config.cycles; ++c)
    for (const auto& id : config.datasets) out.push_back(id);
  return out;
}

namespace {

// Walks a dataset in reshuffled epochs.
class Cursor {
 public:
  Cursor(size_t n, std::mt19937_64& rng) : order_(n), rng_(&rng) {
    std::iota(order_.begin(), order_.end(), 0);
    reshuffle();
  }

  std::vector<size_t> next(int batch) {
    if (pos_ >= order_.size()) reshuffle();
    const size_t end = std::min(order_.size(), pos_ + size_t(batch));
    std::vector<size_t> out(order_.begin() + std::ptrdiff_t(pos_), order_.begin() + std::ptrdiff_t(end));
    pos_ = end;
    return out;
  }

  static long batches_per_epoch(size_t n, int batch) { return long((n + size_t(batch) - 1) / size_t(batch)); }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), *rng_);
    pos_ = 0;
  }
  std::vector<size_t> order_;
  std::mt19937_64* rng_;
  size_t pos_ = 0;
};

const std::vector<Sample>& dataset_samples(const DataMap& data, const Registry& registry, const std::string& id) {
  registry.get(id);  // UnknownDataset
  auto it = data.find(id);
  if (it == data.end() || it->second.empty())
    throw Error(ErrorCode::EmptyDataset, "no training samples for '" + id + "'");
  return it->second;
}

struct HeadRef {
  const model::TaskHead* head;
  const model::StemAdapter* adapter;
  std::vector<int> channels;
};

// One optimization step; returns the batch loss (non-finite losses skip the update).
double train_step(const model::MultiTaskModel& m, const HeadRef& ref, const DatasetSpec& spec,
                  const std::vector<Sample>& batch, const losses::LossConfig& lc, nn::Adam& opt) {
  std::vector<const ImageGray*> imgs;
  for (const auto& s : batch) imgs.push_back(&s.image);
  const auto x = model::images_to_tensor(imgs);
  model::FeatureBundle f;
  if (spec.task == TaskKind::Cls)
    f.stem = m.backbone.encode_stem(x);
  else
    f = m.backbone.encode(x);
  const int n = int(batch.size());
  nn::Tensor out;
  losses::BatchLoss bl;
  switch (spec.task) {
    case TaskKind::Seg: {
      out = model::seg_forward(f, *ref.head);
      std::vector<const MaskMap*> masks;
      for (const auto& s : batch) masks.push_back(&std::get<MaskMap>(s.target));
      bl = losses::seg_batch_loss(out.data(), n, out.dim(1), out.dim(2), out.dim(3), masks, ref.channels, lc);
      break;
    }
    case TaskKind::Cls: {
      out = model::cls_forward(f.stem, ref.adapter, *ref.head);
      std::vector<int> labels;
      for (const auto& s : batch) labels.push_back(std::get<ClassLabel>(s.target).index);
      bl = losses::cls_batch_loss(out.data(), n, out.dim(1), labels, ref.channels);
      break;
    }
    case TaskKind::Det: {
      out = model::det_forward(f, *ref.head);
      std::vector<NormBox> boxes;
      for (const auto& s : batch) boxes.push_back(std::get<NormBox>(s.target));
      bl = losses::det_batch_loss(out.data(), n, boxes, lc);
      break;
    }
    case TaskKind::Reg: {
      out = model::reg_forward(f, *ref.head);
      std::vector<const KeypointSet*> pts;
      for (const auto& s : batch) pts.push_back(&std::get<KeypointSet>(s.target));
      bl = losses::reg_batch_loss(out.data(), n, out.dim(1), out.dim(2), out.dim(3), pts, ref.channels);
      break;
    }
  }
  if (!std::isfinite(bl.value)) {
    opt.zero_grad();
    return bl.value;
  }
  if (bl.count > 0 && out.requires_grad()) {
    std::vector<nn::Scalar> seed(bl.seed.begin(), bl.seed.end());
    nn::backward(out, seed);
    opt.step();
  }
  opt.zero_grad();
  return bl.value;
}

std::vector<Sample> make_batch(const std::vector<Sample>& src, const std::vector<size_t>& idx,
                               const augment::AugmentationPolicy& policy, std::mt19937_64& rng) {
  std::vector<Sample> out;
  for (size_t i : idx) out.push_back(augment::augment(src[i], policy, rng));
  return out;
}

class DivergenceGuard {
 public:
  void check(double loss, const std::string& stage, const std::string& id, long step) {
    consecutive_ = std::isfinite(loss) ? 0 : consecutive_ + 1;
    if (consecutive_ >= 3)
      throw Error(ErrorCode::DivergenceDetected, stage + " diverged on '" + id + "' at step " +
                                                     std::to_string(step) + ": 3 consecutive non-finite losses");
  }

 private:
  int consecutive_ = 0;
};

std::vector<int> identity_channels(int n) {
  std::vector<int> c(static_cast<size_t>(n));
  std::iota(c.begin(), c.end(), 0);
  return c;
}

// Parameter initialization draws from its own stream so that it does not shift
// the shuffling and augmentation stream.
std::uint64_t head_seed(std::uint64_t seed) { return seed ^ 0x9e3779b97f4a7c15ULL; }

int label_channels(const DatasetSpec& s) {
  switch (s.task) {
    case TaskKind::Seg:
    case TaskKind::Cls: return s.num_classes;
    case TaskKind::Det: return 4;
    case TaskKind::Reg: return s.num_keypoints;
  }
  return 0;
}

// Sets the classifier's input standardization from un-augmented samples.
void calibrate_cls(const model::MultiTaskModel& m, model::TaskHead& head, const model::StemAdapter* adapter,
                   const std::vector<const std::vector<Sample>*>& sets) {
  nn::NoGradGuard guard;
  nn::Buffer pooled;
  int n = 0;
  for (const auto* set : sets)
    for (size_t start = 0; start < set->size(); start += 32) {
      std::vector<const ImageGray*> imgs;
      for (size_t i = start; i < std::min(set->size(), start + 32); ++i) imgs.push_back(&(*set)[i].image);
      const auto p = model::cls_pooled(m.backbone.encode_stem(model::images_to_tensor(imgs)), adapter);
      pooled.insert(pooled.end(), p.data().begin(), p.data().end());
      n += p.dim(0);
    }
  model::calibrate_cls_head(head, nn::Tensor::from({n, m.config().stem_width}, pooled));
}

}  // namespace

RunLog stage1_train(model::MultiTaskModel& m, const StageOneConfig& cfg, const Registry& registry,
                    const DataMap& data, const Progress& progress) {
  cfg.validate();
  std::vector<DatasetSpec> specs;
  for (const auto& id : cfg.datasets) {
    specs.push_back(registry.get(id));
    dataset_samples(data, registry, id);
    if (specs.back().train_resolution != m.config().resolution)
      throw Error(ErrorCode::ShapeMismatch, "dataset '" + id + "' resolution differs from the backbone");
  }
  m.ensure_generalist(specs, head_seed(cfg.seed));

  nn::set_requires_grad(m.backbone_params(), true);
  std::vector<nn::Tensor> bb, heads;
  for (auto& p : m.backbone_params()) bb.push_back(p.tensor);
  for (auto& p : m.generalist_params()) heads.push_back(p.tensor);
  nn::Adam opt({{bb, cfg.backbone_lr}, {heads, cfg.head_lr}});

  std::mt19937_64 rng(cfg.seed);
  std::map<std::string, Cursor> cursors;
  for (const auto& id : cfg.datasets) cursors.emplace(id, Cursor(data.at(id).size(), rng));

  RunLog log;
  DivergenceGuard guard;
  long step = 0;
  const auto schedule = visit_schedule(cfg);
  for (size_t v = 0; v < schedule.size(); ++v) {
    const auto& id = schedule[v];
    const auto& spec = registry.get(id);
    const auto& samples = data.at(id);
    log.visits.push_back(id);
    m.visit_log.push_back(id);
    const HeadRef ref{m.generalist_heads.at(spec.task).get(), nullptr, m.channel_maps.at(id)};
    if (spec.task == TaskKind::Cls) {
      std::vector<const std::vector<Sample>*> sets;
      for (const auto& other : cfg.datasets)
        if (registry.get(other).task == TaskKind::Cls && std::find(sets.begin(), sets.end(), &data.at(other)) == sets.end())
          sets.push_back(&data.at(other));
      calibrate_cls(m, *m.generalist_heads.at(spec.task), nullptr, sets);
    }
    const long steps = cfg.granularity.unit == Granularity::Unit::Epochs
                           ? cfg.granularity.count * Cursor::batches_per_epoch(samples.size(), cfg.batch_size)
                           : cfg.granularity.count;
    for (long s = 0; s < steps; ++s, ++step) {
      const auto batch = make_batch(samples, cursors.at(id).next(cfg.batch_size), cfg.augmentation, rng);
      const double loss = train_step(m, ref, spec, batch, cfg.loss, opt);
      StepRecord rec{"stage1", id, int(v), step, loss};
      log.steps.push_back(rec);
      if (progress) progress(rec);
      guard.check(loss, "stage1", id, step);
    }
  }
  m.meta["stage1"] = to_json(cfg);
  return log;
}

RunLog stage2_specialize(model::MultiTaskModel& m, const StageTwoConfig& cfg, const Registry& registry,
                         const DataMap& data, const Progress& progress) {
  cfg.validate();
  const auto& spec = registry.get(cfg.dataset_id);
  const auto& samples = dataset_samples(data, registry, cfg.dataset_id);
  if (spec.train_resolution != m.config().resolution)
    throw Error(ErrorCode::ShapeMismatch, "dataset '" + spec.dataset_id + "' resolution differs from the backbone");

  std::mt19937_64 init_rng(head_seed(cfg.seed));
  const int k = label_channels(spec);
  model::Specialist sp;
  sp.dataset = spec;
  auto g = m.generalist_heads.find(spec.task);
  if (g != m.generalist_heads.end() && g->second->config().out_channels == k)
    sp.head = model::clone_head(*g->second, m.config());
  else
    sp.head = model::make_head(model::default_head_config(spec.task, k, m.config()), m.config(), init_rng);
  if (spec.task == TaskKind::Cls && cfg.adapter)
    sp.adapter = model::StemAdapter(m.config().stem_width, {true, 4}, init_rng);
  m.specialists[spec.dataset_id] = std::move(sp);
  const auto& placed = m.specialists.at(spec.dataset_id);

  const auto bb = m.backbone_params();
  nn::set_requires_grad(bb, false);
  std::vector<nn::Tensor> params;
  for (auto& p : m.specialist_params(spec.dataset_id)) params.push_back(p.tensor);
  nn::Adam opt({{params, cfg.head_lr}});

  std::mt19937_64 rng(cfg.seed);
  Cursor cursor(samples.size(), rng);
  const HeadRef ref{placed.head.get(), placed.adapter ? &*placed.adapter : nullptr, identity_channels(k)};
  if (spec.task == TaskKind::Cls) calibrate_cls(m, *placed.head, ref.adapter, {&samples});
  RunLog log;
  DivergenceGuard guard;
  try {
    for (long s = 0; s < cfg.steps; ++s) {
      if (cfg.warmup_steps > 0) opt.set_lr_scale(std::min(1.0, double(s + 1) / cfg.warmup_steps));
      const auto batch = make_batch(samples, cursor.next(cfg.batch_size), cfg.augmentation, rng);
      const double loss = train_step(m, ref, spec, batch, cfg.loss, opt);
      StepRecord rec{"stage2", spec.dataset_id, 0, s, loss};
      log.steps.push_back(rec);
      if (progress) progress(rec);
      guard.check(loss, "stage2", spec.dataset_id, s);
    }
  } catch (...) {
    nn::set_requires_grad(bb, true);
    throw;
  }
  nn::set_requires_grad(bb, true);
  m.meta["stage2"][spec.dataset_id] = to_json(cfg);
  return log;
}

Evaluation evaluate(const model::MultiTaskModel& m, const DatasetSpec& spec, const std::vector<Sample>& samples,
                    predict::ModelPredictor::Source source, predict::TtaMode tta) {
  predict::ModelPredictor predictor(m, spec, source);
  std::vector<const ImageGray*> imgs;
  for (const auto& s : samples) imgs.push_back(&s.image);
  Evaluation ev;
  for (const auto& p : predict::predict_all(predictor, imgs, tta)) ev.predictions.push_back(p.to_target());
  ev.score = metrics::score_dataset(spec, samples, ev.predictions);
  return ev;
}

}  // namespace echoflow::trainer
