// Command-line entry points: dataset generation, both training stages,
// evaluation and scoring, and agent sessions.
#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "echoflow/agent.hpp"
#include "echoflow/io.hpp"
#include "echoflow/metrics.hpp"
#include "echoflow/model.hpp"
#include "echoflow/synthdata.hpp"
#include "echoflow/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace echoflow;

namespace {

// Bad arguments or missing inputs: exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw UsageError(what + " not found: " + p.string());
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  require_file(path, "config file");
  return io::read_json(path);
}

Registry load_registry(const std::string& path) {
  if (path.empty()) return default_registry();
  require_file(path, "registry file");
  return io::read_registry(path);
}

std::vector<std::string> split_ids(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

// <data>/registry.json plus one directory per dataset.
struct DataDir {
  Registry registry;
  fs::path root;

  explicit DataDir(const std::string& dir) : root(dir) {
    require_file(root / "registry.json", "data directory registry");
    registry = io::read_registry(root / "registry.json");
  }

  std::vector<std::string> present() const {
    std::vector<std::string> out;
    for (const auto& id : registry.ids())
      if (fs::exists(root / id / "manifest.json")) out.push_back(id);
    return out;
  }

  synth::GeneratedDataset load(const std::string& id) const {
    registry.get(id);
    require_file(root / id / "manifest.json", "manifest for '" + id + "'");
    return synth::read_dataset(root / id);
  }
};

model::BackboneConfig backbone_from(const json& cfg, const std::map<std::string, int>& overrides) {
  auto bc = model::backbone_config_from_json(cfg.value("backbone", json::object()));
  for (const auto& [k, v] : overrides) {
    if (v <= 0) continue;
    if (k == "depth") bc.depth = v;
    if (k == "embed_dim") bc.embed_dim = v;
    if (k == "heads") bc.heads = v;
    if (k == "patch") bc.patch = v;
    if (k == "stem_width") bc.stem_width = v;
    if (k == "resolution") bc.resolution = v;
  }
  bc.validate();
  return bc;
}

void print_progress(const trainer::StepRecord& r, long every) {
  if (every > 0 && r.step % every == 0)
    std::cerr << r.stage << " step " << r.step << " " << r.dataset_id << " loss " << r.loss << "\n";
}

// ---------------------------------------------------------------- registry
struct RegistryArgs {
  std::string out;
  int resolution = 128;
};

int cmd_registry(const RegistryArgs& a) {
  const auto reg = default_registry(a.resolution);
  io::write_registry(a.out, reg);
  std::cout << "wrote " << reg.size() << " dataset specs to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- gen
struct GenArgs {
  std::string registry, out, datasets, config;
  int n = 200;
  long long first_index = 0;
  std::uint64_t seed = 1;
  double unannotated = -1;
};

int cmd_gen(const GenArgs& a) {
  const auto reg = load_registry(a.registry);
  const json cfg = load_config(a.config);
  synth::GeneratorOptions opts;
  opts.speckle_sigma = cfg.value("speckle_sigma", opts.speckle_sigma);
  opts.eccentricity_threshold = cfg.value("eccentricity_threshold", opts.eccentricity_threshold);
  opts.native_scale = cfg.value("native_scale", opts.native_scale);
  opts.unannotated_fraction = cfg.value("unannotated_fraction", opts.unannotated_fraction);
  if (a.unannotated >= 0) opts.unannotated_fraction = a.unannotated;
  if (a.n < 1) throw UsageError("--n must be >= 1");
  const auto ids = a.datasets.empty() ? reg.ids() : split_ids(a.datasets);
  fs::create_directories(a.out);
  Registry written;
  for (const auto& id : ids) {
    const auto data = synth::generate_dataset(a.seed, reg, id, a.n, opts, a.first_index);
    synth::write_dataset(fs::path(a.out) / id, data);
    written.add(reg.get(id));
    std::cout << id << ": " << data.samples.size() << " samples\n";
  }
  io::write_registry(fs::path(a.out) / "registry.json", written);
  return 0;
}

// ---------------------------------------------------------------- train-stage1
struct Stage1Args {
  std::string data, out, config, datasets, log;
  std::optional<std::uint64_t> seed;
  int cycles = 0, batch_size = 0, steps_per_visit = 0;
  std::map<std::string, int> backbone;
  long progress = 0;
};

int cmd_stage1(const Stage1Args& a) {
  const DataDir dir(a.data);
  const json cfg = load_config(a.config);
  auto sc = trainer::stage_one_from_json(cfg.value("stage1", json::object()));
  if (!a.datasets.empty()) sc.datasets = split_ids(a.datasets);
  if (sc.datasets.empty()) sc.datasets = dir.present();
  if (a.seed) sc.seed = *a.seed;
  if (a.cycles > 0) sc.cycles = a.cycles;
  if (a.batch_size > 0) sc.batch_size = a.batch_size;
  if (a.steps_per_visit > 0) sc.granularity = {trainer::Granularity::Unit::Steps, a.steps_per_visit};
  auto overrides = a.backbone;
  // resolution follows the data unless the config pins it
  if (!cfg.value("backbone", json::object()).contains("resolution") && !sc.datasets.empty())
    overrides["resolution"] = dir.registry.get(sc.datasets.front()).train_resolution;
  const auto bc = backbone_from(cfg, overrides);

  trainer::DataMap data;
  for (const auto& id : sc.datasets) data[id] = dir.load(id).samples;
  model::MultiTaskModel m(bc, sc.seed);
  const auto log = trainer::stage1_train(m, sc, dir.registry, data,
                                         [&](const trainer::StepRecord& r) { print_progress(r, a.progress); });
  m.meta["seed"] = sc.seed;
  model::save_checkpoint(a.out, m);
  const fs::path log_path = a.log.empty() ? fs::path(a.out).concat(".runlog.jsonl") : fs::path(a.log);
  io::write_text(log_path, json{{"type", "header"}, {"schema_version", io::kSchemaVersion},
                                {"command", "train-stage1"}, {"seed", sc.seed}, {"config", trainer::to_json(sc)},
                                {"backbone", model::to_json(bc)}}.dump() + "\n" + log.to_jsonl());
  std::cout << "visits:";
  for (const auto& v : log.visits) std::cout << " " << v;
  std::cout << "\ncheckpoint " << a.out << " parameter_hash " << model::hash_params(m.all_params()) << "\n";
  return 0;
}

// ---------------------------------------------------------------- train-stage2
struct Stage2Args {
  std::string checkpoint, data, out, config, datasets, log;
  std::optional<std::uint64_t> seed;
  int steps = 0, batch_size = 0, warmup_steps = -1;
  double lr = 0;
  bool no_adapter = false;
  long progress = 0;
};

int cmd_stage2(const Stage2Args& a) {
  require_file(a.checkpoint, "stage-1 checkpoint");
  const DataDir dir(a.data);
  const json cfg = load_config(a.config);
  auto m = model::load_checkpoint(a.checkpoint);
  auto ids = a.datasets.empty() ? dir.present() : split_ids(a.datasets);
  std::string jsonl = json{{"type", "header"}, {"schema_version", io::kSchemaVersion}, {"command", "train-stage2"}}.dump() + "\n";
  const std::string before = model::hash_params(m.backbone_params());
  for (const auto& id : ids) {
    json base = cfg.value("stage2", json::object());
    if (cfg.contains("per_dataset") && cfg["per_dataset"].contains(id)) base.update(cfg["per_dataset"][id]);
    auto sc = trainer::stage_two_from_json(base);
    sc.dataset_id = id;
    if (a.seed) sc.seed = *a.seed;
    if (a.steps > 0) sc.steps = a.steps;
    if (a.batch_size > 0) sc.batch_size = a.batch_size;
    if (a.warmup_steps >= 0) sc.warmup_steps = a.warmup_steps;
    if (a.lr > 0) sc.head_lr = a.lr;
    if (a.no_adapter) sc.adapter = false;
    trainer::DataMap data{{id, dir.load(id).samples}};
    const auto log = trainer::stage2_specialize(m, sc, dir.registry, data,
                                                [&](const trainer::StepRecord& r) { print_progress(r, a.progress); });
    jsonl += json{{"type", "config"}, {"dataset_id", id}, {"config", trainer::to_json(sc)}}.dump() + "\n";
    jsonl += log.to_jsonl();
    std::cout << id << ": " << sc.steps << " steps\n";
  }
  const std::string after = model::hash_params(m.backbone_params());
  if (before != after) throw Error(ErrorCode::InvalidSpec, "backbone changed during specialization");
  model::save_checkpoint(a.out, m);
  io::write_text(a.log.empty() ? fs::path(a.out).concat(".runlog.jsonl") : fs::path(a.log), jsonl);
  std::cout << "checkpoint " << a.out << " backbone_hash " << after << "\n";
  return 0;
}

// ---------------------------------------------------------------- eval / score
void write_predictions(const fs::path& dir, const std::string& id, const synth::GeneratedDataset& data,
                       const std::vector<Target>& preds, const json& meta) {
  json items = json::array();
  for (size_t i = 0; i < preds.size(); ++i) {
    const std::string stem = synth::sample_stem(data.manifest.records[i].index);
    std::string mask_file;
    if (auto* m = std::get_if<MaskMap>(&preds[i])) {
      mask_file = "masks/" + stem + ".png";
      io::write_png_gray(dir / id / mask_file, m->height, m->width, m->labels);
    }
    items.push_back({{"stem", stem}, {"target", io::target_to_json(preds[i], mask_file)}});
  }
  json j = meta;
  j["schema_version"] = io::kSchemaVersion;
  j["dataset_id"] = id;
  j["items"] = items;
  io::write_json(dir / id / "predictions.json", j);
}

struct EvalArgs {
  std::string checkpoint, data, out, datasets, source = "specialist", tta = "off", predictions;
};

int cmd_eval(const EvalArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  const DataDir dir(a.data);
  predict::TtaMode tta;
  try {
    tta = predict::parse_tta_mode(a.tta);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  if (a.source != "specialist" && a.source != "generalist") throw UsageError("--source must be specialist|generalist");
  const auto source = a.source == "specialist" ? predict::ModelPredictor::Source::Specialist
                                               : predict::ModelPredictor::Source::Generalist;
  const auto m = model::load_checkpoint(a.checkpoint);
  std::vector<metrics::DatasetScore> scores;
  for (const auto& id : a.datasets.empty() ? dir.present() : split_ids(a.datasets)) {
    const auto data = dir.load(id);
    const auto ev = trainer::evaluate(m, dir.registry.get(id), data.samples, source, tta);
    scores.push_back(ev.score);
    if (!a.predictions.empty())
      write_predictions(a.predictions, id, data, ev.predictions, {{"source", a.source}, {"tta", a.tta}});
  }
  json results = metrics::results_json(scores);
  results["source"] = a.source;
  results["tta"] = a.tta;
  results["checkpoint_hash"] = model::hash_params(m.all_params());
  io::write_json(a.out, results);
  std::cout << results["datasets"].dump(2) << "\n";
  return 0;
}

struct ScoreArgs {
  std::string predictions, data, out;
};

int cmd_score(const ScoreArgs& a) {
  const DataDir dir(a.data);
  require_file(a.predictions, "predictions directory");
  std::vector<metrics::DatasetScore> scores;
  for (const auto& id : dir.present()) {
    const fs::path pfile = fs::path(a.predictions) / id / "predictions.json";
    if (!fs::exists(pfile)) continue;
    const auto data = dir.load(id);
    const json pj = io::read_json(pfile);
    std::map<std::string, Target> by_stem;
    for (const auto& item : pj.at("items"))
      by_stem[item.at("stem").get<std::string>()] = io::target_from_json(item.at("target"), pfile.parent_path());
    std::vector<Target> preds;
    for (const auto& r : data.manifest.records) {
      auto it = by_stem.find(synth::sample_stem(r.index));
      if (it == by_stem.end())
        throw Error(ErrorCode::CountMismatch, "no prediction for " + id + "/" + synth::sample_stem(r.index));
      preds.push_back(it->second);
    }
    scores.push_back(metrics::score_dataset(dir.registry.get(id), data.samples, preds));
  }
  if (scores.empty()) throw UsageError("no predictions matched datasets in " + a.data);
  const json results = metrics::results_json(scores);
  io::write_json(a.out, results);
  std::cout << results["datasets"].dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------- agent
struct AgentArgs {
  std::string checkpoint, image, request, out, replay;
  std::string original_size;
  int budget = agent::kDefaultBudget;
};

Size2 parse_size(const std::string& s, const ImageGray& img) {
  if (s.empty()) return {img.height, img.width};
  const auto x = s.find('x');
  if (x == std::string::npos) throw UsageError("--original-size must look like HxW");
  return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
}

int cmd_agent(const AgentArgs& a) {
  if (!a.replay.empty()) {
    require_file(a.replay, "session record");
    const json rec = io::read_json(a.replay);
    const auto& in = rec.at("inputs");
    const std::string ckpt = a.checkpoint.empty() ? in.at("checkpoint").get<std::string>() : a.checkpoint;
    const std::string image_path = a.image.empty() ? in.at("image").get<std::string>() : a.image;
    require_file(ckpt, "checkpoint");
    require_file(image_path, "image");
    const auto m = model::load_checkpoint(ckpt);
    const auto img = io::read_image(image_path);
    const Size2 size{in.at("original_size").at(0).get<int>(), in.at("original_size").at(1).get<int>()};
    const auto tools = agent::ToolSet::from_model(m);
    const auto r = agent::replay(rec, img, size, agent::RulePolicy(), tools);
    std::cout << r.message << "\n";
    return r.ok ? 0 : 1;
  }
  if (a.request.empty()) throw UsageError("--request is required unless --replay is given");
  if (a.budget < 1) throw UsageError("--budget must be >= 1");
  require_file(a.checkpoint, "checkpoint");
  require_file(a.image, "image");
  const auto m = model::load_checkpoint(a.checkpoint);
  const auto img = io::read_image(a.image);
  const Size2 size = parse_size(a.original_size, img);
  const auto tools = agent::ToolSet::from_model(m);
  const auto session = agent::run_workflow(img, size, a.request, agent::RulePolicy(), tools, a.budget);
  fs::create_directories(a.out);
  io::write_text(fs::path(a.out) / "report.txt", session.report);
  const json inputs = {{"checkpoint", fs::absolute(a.checkpoint).string()},
                       {"image", fs::absolute(a.image).string()},
                       {"original_size", {size.height, size.width}},
                       {"image_sha256", io::sha256_hex(io::read_text(a.image))},
                       {"checkpoint_hash", model::hash_params(m.all_params())}};
  io::write_json(fs::path(a.out) / "session.json", agent::session_record(session, inputs));
  std::cout << session.report;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"echoflow: multi-task ultrasound analysis pipeline"};
  app.require_subcommand(1);
  int rc = 0;

  RegistryArgs reg_a;
  auto* reg = app.add_subcommand("registry", "Write the default synthetic dataset registry");
  reg->add_option("--out", reg_a.out, "Output registry file")->required();
  reg->add_option("--resolution", reg_a.resolution, "Training resolution");
  reg->callback([&] { rc = cmd_registry(reg_a); });

  GenArgs gen_a;
  auto* gen = app.add_subcommand("gen", "Generate synthetic datasets");
  gen->add_option("--registry", gen_a.registry, "Registry file (default: built-in registry)");
  gen->add_option("--config", gen_a.config, "Generator options file");
  gen->add_option("--out", gen_a.out, "Output directory")->required();
  gen->add_option("--datasets", gen_a.datasets, "Comma-separated dataset ids (default: all)");
  gen->add_option("--n", gen_a.n, "Samples per dataset");
  gen->add_option("--first-index", gen_a.first_index, "Index of the first scene");
  gen->add_option("--seed", gen_a.seed, "Generator seed");
  gen->add_option("--unannotated-fraction", gen_a.unannotated, "DET samples without a box");
  gen->callback([&] { rc = cmd_gen(gen_a); });

  Stage1Args s1;
  auto* st1 = app.add_subcommand("train-stage1", "Dataset-rotating generalist training");
  st1->add_option("--data", s1.data, "Training data directory")->required();
  st1->add_option("--out", s1.out, "Checkpoint to write")->required();
  st1->add_option("--config", s1.config, "Config file with 'backbone' and 'stage1' sections");
  st1->add_option("--datasets", s1.datasets, "Comma-separated rotation order");
  st1->add_option("--seed", s1.seed, "Seed");
  st1->add_option("--cycles", s1.cycles, "Rotation cycles");
  st1->add_option("--batch-size", s1.batch_size, "Batch size");
  st1->add_option("--steps-per-visit", s1.steps_per_visit, "Rotation granularity in steps (default: 1 epoch)");
  for (const char* k : {"depth", "embed_dim", "heads", "patch", "stem_width"}) {
    std::string flag = std::string("--") + k;
    std::replace(flag.begin(), flag.end(), '_', '-');
    s1.backbone[k] = 0;
    st1->add_option(flag, s1.backbone[k], std::string("Backbone ") + k);
  }
  st1->add_option("--log", s1.log, "Run log path (default: <out>.runlog.jsonl)");
  st1->add_option("--progress", s1.progress, "Print every N steps");
  st1->add_flag("--deterministic", "Single-threaded deterministic mode (always on)");
  st1->callback([&] { rc = cmd_stage1(s1); });

  Stage2Args s2;
  auto* st2 = app.add_subcommand("train-stage2", "Frozen-backbone specialization");
  st2->add_option("--checkpoint", s2.checkpoint, "Stage-1 checkpoint")->required();
  st2->add_option("--data", s2.data, "Training data directory")->required();
  st2->add_option("--out", s2.out, "Checkpoint to write")->required();
  st2->add_option("--config", s2.config, "Config file with 'stage2' and optional 'per_dataset' sections");
  st2->add_option("--datasets", s2.datasets, "Comma-separated dataset ids (default: all present)");
  st2->add_option("--seed", s2.seed, "Seed");
  st2->add_option("--steps", s2.steps, "Steps per dataset");
  st2->add_option("--batch-size", s2.batch_size, "Batch size");
  st2->add_option("--lr", s2.lr, "Head learning rate");
  st2->add_option("--warmup-steps", s2.warmup_steps, "Linear lr warmup steps");
  st2->add_flag("--no-adapter", s2.no_adapter, "Disable the classification adapter");
  st2->add_option("--log", s2.log, "Run log path");
  st2->add_option("--progress", s2.progress, "Print every N steps");
  st2->add_flag("--deterministic", "Single-threaded deterministic mode (always on)");
  st2->callback([&] { rc = cmd_stage2(s2); });

  EvalArgs ev;
  auto* evc = app.add_subcommand("eval", "Predict and score datasets");
  evc->add_option("--checkpoint", ev.checkpoint, "Checkpoint")->required();
  evc->add_option("--data", ev.data, "Evaluation data directory")->required();
  evc->add_option("--out", ev.out, "Results file")->required();
  evc->add_option("--datasets", ev.datasets, "Comma-separated dataset ids");
  evc->add_option("--source", ev.source, "specialist|generalist");
  evc->add_option("--tta", ev.tta, "off|identity-only|full");
  evc->add_option("--predictions", ev.predictions, "Directory for per-sample predictions");
  evc->callback([&] { rc = cmd_eval(ev); });

  ScoreArgs sc;
  auto* scc = app.add_subcommand("score", "Score a predictions directory against ground truth");
  scc->add_option("--predictions", sc.predictions, "Predictions directory")->required();
  scc->add_option("--data", sc.data, "Ground-truth data directory")->required();
  scc->add_option("--out", sc.out, "Results file")->required();
  scc->callback([&] { rc = cmd_score(sc); });

  AgentArgs ag;
  auto* agc = app.add_subcommand("agent", "Run or replay an agent session");
  agc->add_option("--checkpoint", ag.checkpoint, "Checkpoint with specialists");
  agc->add_option("--image", ag.image, "Input PNG");
  agc->add_option("--original-size", ag.original_size, "Original image size HxW (default: image size)");
  agc->add_option("--request", ag.request, "Request text");
  agc->add_option("--budget", ag.budget, "Step budget");
  agc->add_option("--out", ag.out, "Output directory")->default_val("agent_out");
  agc->add_option("--replay", ag.replay, "Session record to re-execute and verify");
  agc->callback([&] { rc = cmd_agent(ag); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
