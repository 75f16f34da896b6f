#include "echoflow/agent.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "echoflow/augment.hpp"
#include "echoflow/io.hpp"

namespace echoflow::agent {

using nlohmann::json;

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string f3(double v) { return fmt("%.3f", v); }

std::string box_str(const NormBox& b) {
  return "[" + f3(b.x_min) + ", " + f3(b.y_min) + ", " + f3(b.x_max) + ", " + f3(b.y_max) + "]";
}

json box_json(const NormBox& b) { return {b.x_min, b.y_min, b.x_max, b.y_max}; }

NormBox box_from(const json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

}  // namespace

std::string to_string(const ToolAction& a) {
  if (a.is_null) return "NULL";
  std::string s = std::string(echoflow::to_string(a.tool.kind)) + " " + a.tool.dataset_id;
  if (a.params.roi) s += " roi=" + box_str(*a.params.roi);
  return s;
}

json to_json(const ToolAction& a) {
  if (a.is_null) return {{"null", true}, {"reason", a.reason}};
  json j = {{"null", false}, {"kind", std::string(echoflow::to_string(a.tool.kind))}, {"dataset_id", a.tool.dataset_id}};
  j["params"] = json::object();
  if (a.params.roi) j["params"]["roi"] = box_json(*a.params.roi);
  return j;
}

ToolAction action_from_json(const json& j) {
  if (j.at("null").get<bool>()) return ToolAction::null(j.value("reason", ""));
  ToolParams p;
  if (j.contains("params") && j["params"].contains("roi")) p.roi = box_from(j["params"]["roi"]);
  return ToolAction::call({parse_task_kind(j.at("kind").get<std::string>()), j.at("dataset_id").get<std::string>()}, p);
}

std::string result_digest(const ToolResult& r) {
  std::string bytes = std::string(echoflow::to_string(task_of(r))) + "\n";
  std::visit(
      [&](const auto& v) {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, MaskMap>) {
          bytes += std::to_string(v.height) + "x" + std::to_string(v.width) + "\n";
          bytes.append(v.labels.begin(), v.labels.end());
        } else if constexpr (std::is_same_v<V, ClassLabel>) {
          bytes += json{{"index", v.index}, {"p", v.probabilities.value_or(std::vector<double>{})}}.dump();
        } else if constexpr (std::is_same_v<V, NormBox>) {
          bytes += box_json(v).dump();
        } else {
          json pts = json::array();
          for (const auto& p : v.points) pts.push_back({p.x, p.y});
          bytes += pts.dump();
        }
      },
      r);
  return io::sha256_hex(bytes);
}

void ToolSet::add(const DatasetSpec& spec, std::shared_ptr<const predict::Predictor> predictor, int resolution) {
  if (!predictor || predictor->task() != spec.task)
    throw Error(ErrorCode::HeadKindMismatch, "tool predictor kind differs from dataset '" + spec.dataset_id + "'");
  tools_[{spec.task, spec.dataset_id}] = {spec, std::move(predictor), resolution};
}

ToolSet ToolSet::from_model(const model::MultiTaskModel& m) {
  ToolSet set;
  for (const auto& [id, sp] : m.specialists)
    set.add(sp.dataset,
            std::make_shared<predict::ModelPredictor>(m, sp.dataset, predict::ModelPredictor::Source::Specialist),
            m.config().resolution);
  return set;
}

std::vector<ToolId> ToolSet::ids() const {
  std::vector<ToolId> out;
  for (const auto& [id, _] : tools_) out.push_back(id);
  return out;
}

namespace {
std::string tool_name(const ToolId& id) { return std::string(echoflow::to_string(id.kind)) + ":" + id.dataset_id; }
}  // namespace

const DatasetSpec& ToolSet::spec(const ToolId& id) const {
  auto it = tools_.find(id);
  if (it == tools_.end()) throw Error(ErrorCode::ToolNotInSet, tool_name(id) + " is not in the tool set");
  return it->second.spec;
}

const predict::Predictor& ToolSet::predictor(const ToolId& id) const {
  auto it = tools_.find(id);
  if (it == tools_.end()) throw Error(ErrorCode::ToolNotInSet, tool_name(id) + " is not in the tool set");
  return *it->second.predictor;
}

int ToolSet::resolution(const ToolId& id) const {
  auto it = tools_.find(id);
  if (it == tools_.end()) throw Error(ErrorCode::ToolNotInSet, tool_name(id) + " is not in the tool set");
  return it->second.resolution;
}

std::set<std::string> AgentState::keys() const {
  std::set<std::string> out;
  for (const auto& [k, _] : rois) out.insert(k);
  for (const auto& [k, _] : masks) out.insert(k);
  for (const auto& [k, _] : semantics) out.insert(k);
  for (const auto& [k, _] : points) out.insert(k);
  for (const auto& [k, _] : measurements) out.insert(k);
  return out;
}

std::string state_key(const ToolId& tool, int k) { return tool_name(tool) + ":" + std::to_string(k); }

RulePolicy::RulePolicy()
    : RulePolicy({{"breast_lesion_workup",
                   {"breast", "lesion"},
                   {{TaskKind::Det, "lesion_det"}, {TaskKind::Seg, "lesion_seg"}, {TaskKind::Cls, "lesion_cls"}}},
                  {"labor_progress",
                   {"labor", "intrapartum", "progress"},
                   {{TaskKind::Det, "lesion_det"}, {TaskKind::Seg, "lesion_seg"}, {TaskKind::Reg, "labor_reg"}}}}) {}

RulePolicy::RulePolicy(std::vector<Intent> intents, double roi_expand)
    : intents_(std::move(intents)), roi_expand_(roi_expand) {}

const RulePolicy::Intent* RulePolicy::match(const std::string& request) const {
  std::string text = request;
  std::transform(text.begin(), text.end(), text.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  for (const auto& intent : intents_)
    for (const auto& kw : intent.keywords)
      if (text.find(kw) != std::string::npos) return &intent;
  return nullptr;
}

namespace {

bool has_result(const AgentState& s, const ToolId& id) {
  const std::string prefix = tool_name(id) + ":";
  auto any = [&](const auto& m) {
    auto it = m.lower_bound(prefix);
    return it != m.end() && it->first.compare(0, prefix.size(), prefix) == 0;
  };
  switch (id.kind) {
    case TaskKind::Det: return any(s.rois);
    case TaskKind::Seg: return any(s.masks);
    case TaskKind::Cls: return any(s.semantics);
    case TaskKind::Reg: return any(s.points);
  }
  return false;
}

// Most recent ROI by step index.
std::optional<NormBox> latest_roi(const AgentState& s) {
  std::optional<NormBox> best;
  int best_k = -1;
  for (const auto& [key, box] : s.rois) {
    const int k = std::stoi(key.substr(key.rfind(':') + 1));
    if (k > best_k) {
      best_k = k;
      best = box;
    }
  }
  return best;
}

NormBox expand_box(const NormBox& b, double factor) {
  const double cx = 0.5 * (b.x_min + b.x_max), cy = 0.5 * (b.y_min + b.y_max);
  const double hw = 0.5 * factor * b.width(), hh = 0.5 * factor * b.height();
  return {std::clamp(cx - hw, 0.0, 1.0), std::clamp(cy - hh, 0.0, 1.0), std::clamp(cx + hw, 0.0, 1.0),
          std::clamp(cy + hh, 0.0, 1.0)};
}

}  // namespace

ToolAction RulePolicy::plan(const std::string& request, const AgentState& state, const ToolSet& tools) const {
  const Intent* intent = match(request);
  if (!intent) return ToolAction::null("UnknownIntent");
  for (const auto& step : intent->recipe) {
    if (has_result(state, step)) continue;
    if (!tools.contains(step)) return ToolAction::null("MissingTool " + tool_name(step));
    ToolParams params;
    if (step.kind == TaskKind::Seg)
      if (auto roi = latest_roi(state)) params.roi = expand_box(*roi, roi_expand_);
    return ToolAction::call(step, params);
  }
  return ToolAction::null("complete");
}

ToolAction plan_step(const PlannerPolicy& policy, const std::string& request, const AgentState& state,
                     const ToolSet& tools) {
  return policy.plan(request, state, tools);
}

namespace {

struct CropGeometry {
  int r0, c0, side;
};

}  // namespace

ToolResult execute(const ToolAction& action, const ImageGray& image, const AgentState&, const ToolSet& tools) {
  if (action.is_null) throw Error(ErrorCode::InvalidSpec, "cannot execute the NULL action");
  if (!tools.contains(action.tool))
    throw Error(ErrorCode::ToolNotInSet, tool_name(action.tool) + " is not in the tool set");
  const int res = tools.resolution(action.tool);
  const int h = image.height, w = image.width;

  NormBox roi = action.params.roi.value_or(NormBox{0, 0, 1, 1});
  if (roi.is_invalid() || !(roi.x_min <= roi.x_max && roi.y_min <= roi.y_max) || roi.area() < 1e-4)
    throw Error(ErrorCode::CropDegenerate, "roi " + box_str(roi) + " is degenerate");
  const int c0 = std::clamp(int(std::floor(roi.x_min * w)), 0, w - 1);
  const int r0 = std::clamp(int(std::floor(roi.y_min * h)), 0, h - 1);
  const int c1 = std::clamp(int(std::ceil(roi.x_max * w)), c0 + 1, w);
  const int r1 = std::clamp(int(std::ceil(roi.y_max * h)), r0 + 1, h);
  const CropGeometry g{r0, c0, std::max(r1 - r0, c1 - c0)};

  // Square crop with edge replication beyond the roi rectangle.
  ImageGray crop(g.side, g.side);
  for (int r = 0; r < g.side; ++r)
    for (int c = 0; c < g.side; ++c)
      crop.at(r, c) = image.at(std::min(r0 + r, r1 - 1), std::min(c0 + c, c1 - 1));
  const ImageGray input = augment::resize_bilinear(crop, res, res);
  const auto pred = tools.predictor(action.tool).predict(input);

  auto to_full = [&](Point2 p) {
    return Point2{(g.c0 + p.x * g.side) / w, (g.r0 + p.y * g.side) / h};
  };
  switch (action.tool.kind) {
    case TaskKind::Seg: {
      const auto local = std::get<MaskMap>(pred.to_target());
      MaskMap full(h, w);
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) {
          const int lr = std::min(int((r - r0 + 0.5) * local.height / g.side), local.height - 1);
          const int lc = std::min(int((c - c0 + 0.5) * local.width / g.side), local.width - 1);
          full.at(r, c) = local.at(lr, lc);
        }
      return full;
    }
    case TaskKind::Cls: return pred.to_target();
    case TaskKind::Det: {
      const Point2 a = to_full({pred.box.x_min, pred.box.y_min}), b = to_full({pred.box.x_max, pred.box.y_max});
      return NormBox{std::clamp(a.x, 0.0, 1.0), std::clamp(a.y, 0.0, 1.0), std::clamp(b.x, 0.0, 1.0),
                     std::clamp(b.y, 0.0, 1.0)};
    }
    case TaskKind::Reg: {
      KeypointSet out;
      for (const auto& p : pred.points.points) {
        const Point2 q = to_full(p);
        out.points.push_back({std::clamp(q.x, 0.0, 1.0), std::clamp(q.y, 0.0, 1.0)});
      }
      return out;
    }
  }
  return pred.to_target();
}

AgentState update_state(const AgentState& state, const ToolAction& action, const ToolResult& result,
                        const ToolSet& tools) {
  if (action.is_null) throw Error(ErrorCode::InvalidSpec, "update_state called with the NULL action");
  if (task_of(result) != action.tool.kind)
    throw Error(ErrorCode::HeadKindMismatch, "result kind differs from the action's tool kind");
  AgentState next = state;
  const std::string key = state_key(action.tool, state.k);
  if (state.keys().count(key)) throw Error(ErrorCode::InvalidSpec, "state key collision on " + key);
  switch (action.tool.kind) {
    case TaskKind::Det: next.rois.emplace(key, std::get<NormBox>(result)); break;
    case TaskKind::Seg: next.masks.emplace(key, std::get<MaskMap>(result)); break;
    case TaskKind::Reg: next.points.emplace(key, std::get<KeypointSet>(result)); break;
    case TaskKind::Cls: {
      const auto& c = std::get<ClassLabel>(result);
      Semantics s;
      s.class_names = tools.spec(action.tool).class_names;
      if (c.probabilities) {
        s.probabilities = *c.probabilities;
      } else {
        s.probabilities.assign(s.class_names.size(), 0.0);
        s.probabilities.at(size_t(c.index)) = 1.0;
      }
      next.semantics.emplace(key, std::move(s));
      break;
    }
  }
  next.trace.push_back({action, result_digest(result)});
  ++next.k;
  return derive_measurements(next);
}

double vertex_angle_px(Point2 p1, Point2 p2, Point2 p3) {
  const double ax = p1.x - p2.x, ay = p1.y - p2.y, bx = p3.x - p2.x, by = p3.y - p2.y;
  const double na = std::hypot(ax, ay), nb = std::hypot(bx, by);
  if (na == 0 || nb == 0) return 0.0;
  const double c = std::clamp((ax * bx + ay * by) / (na * nb), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

AgentState derive_measurements(const AgentState& state) {
  AgentState next = state;
  const double h0 = state.original_size.height, w0 = state.original_size.width;
  bool any = false;
  for (const auto& [key, kp] : state.points) {
    if (kp.points.size() != 3) continue;
    any = true;
    const std::string name = "angle_of_progression:" + key;
    if (next.measurements.count(name)) continue;
    auto px = [&](const Point2& p) { return Point2{p.x * w0, p.y * h0}; };
    next.measurements[name] = {vertex_angle_px(px(kp.points[0]), px(kp.points[1]), px(kp.points[2])), "deg"};
  }
  for (const auto& [key, m] : state.masks) {
    any = true;
    if (next.measurements.count("area_fraction:" + key)) continue;
    long fg = 0;
    for (auto v : m.labels) fg += v != 0;
    const double frac = m.labels.empty() ? 0.0 : double(fg) / double(m.labels.size());
    next.measurements["area_fraction:" + key] = {frac, "fraction"};
    next.measurements["equivalent_diameter:" + key] = {2 * std::sqrt(frac * h0 * w0 / std::numbers::pi), "px"};
  }
  if (!any && !state.rois.empty() && state.semantics.empty()) {
    const std::string note = "measurements: no mask or keypoint inputs yet";
    if (std::find(next.notes.begin(), next.notes.end(), note) == next.notes.end()) next.notes.push_back(note);
  }
  return next;
}

std::string to_string(Termination t) {
  switch (t) {
    case Termination::Null: return "null";
    case Termination::Budget: return "budget";
    case Termination::ToolError: return "tool_error";
    case Termination::UnknownIntent: return "unknown_intent";
  }
  return "";
}

std::vector<std::string> Session::trace_names() const {
  std::vector<std::string> out;
  for (const auto& t : state.trace) out.push_back(std::string(echoflow::to_string(t.action.tool.kind)));
  if (terminated_by == Termination::Null) out.push_back("NULL");
  return out;
}

namespace {

int step_of(const std::string& key) { return std::stoi(key.substr(key.rfind(':') + 1)); }

}  // namespace

std::string render_report(const AgentState& s, const std::string& request, Termination terminated_by,
                          const std::vector<std::string>& flags) {
  std::ostringstream out;
  out << "Request: " << request << "\n";

  out << "Findings:\n";
  for (const auto& [key, b] : s.rois) out << "  ROI " << key << " " << box_str(b) << "\n";
  for (const auto& [key, m] : s.masks) {
    const NormBox extent = augment::box_of_mask(m);
    const auto area = s.measurements.find("area_fraction:" + key);
    out << "  Mask " << key << " area=" << (area == s.measurements.end() ? "n/a" : f3(area->second.value))
        << " extent=" << (extent.is_invalid() ? std::string("empty") : box_str(extent)) << "\n";
  }
  for (const auto& [key, kp] : s.points) {
    out << "  Keypoints " << key;
    for (size_t i = 0; i < kp.points.size(); ++i)
      out << " p" << i + 1 << "=(" << f3(kp.points[i].x) << ", " << f3(kp.points[i].y) << ")";
    out << "\n";
  }
  for (const auto& [key, sem] : s.semantics) {
    out << "  Semantics " << key;
    for (size_t i = 0; i < sem.probabilities.size(); ++i)
      out << " " << (i < sem.class_names.size() ? sem.class_names[i] : std::to_string(i)) << "="
          << f3(sem.probabilities[i]);
    out << "\n";
  }

  out << "Measurements:\n";
  for (const auto& [name, m] : s.measurements)
    out << "  " << name << " = " << (m.unit == "deg" ? fmt("%.1f", m.value) : f3(m.value)) << " " << m.unit << "\n";

  // Impression from the most recent classification.
  const Semantics* latest = nullptr;
  int latest_k = -1;
  for (const auto& [key, sem] : s.semantics)
    if (step_of(key) > latest_k) {
      latest_k = step_of(key);
      latest = &sem;
    }
  if (latest && !latest->probabilities.empty()) {
    const size_t best = size_t(std::max_element(latest->probabilities.begin(), latest->probabilities.end()) -
                               latest->probabilities.begin());
    const std::string name = best < latest->class_names.size() ? latest->class_names[best] : std::to_string(best);
    out << "Impression: " << name << " (p=" << f3(latest->probabilities[best]) << ")\n";
  } else {
    out << "Impression: none\n";
  }

  out << "Trace:\n";
  for (size_t i = 0; i < s.trace.size(); ++i)
    out << "  " << i + 1 << ". " << to_string(s.trace[i].action) << " -> " << s.trace[i].digest.substr(0, 12) << "\n";
  if (terminated_by == Termination::Null) out << "  " << s.trace.size() + 1 << ". NULL\n";

  out << "Flags:\n";
  for (const auto& f : flags) out << "  " << f << "\n";
  for (const auto& n : s.notes) out << "  " << n << "\n";
  return out.str();
}

Session run_workflow(const ImageGray& image, Size2 original_size, const std::string& request,
                     const PlannerPolicy& policy, const ToolSet& tools, int budget) {
  if (budget < 1) throw Error(ErrorCode::InvalidSpec, "budget must be >= 1");
  Session s;
  s.request = request;
  s.budget = budget;
  s.state.original_size = original_size;
  s.history.push_back(s.state);
  bool finished = false;
  while (s.state.k < budget) {
    const ToolAction action = plan_step(policy, request, s.state, tools);
    if (action.is_null) {
      if (action.reason == "UnknownIntent") {
        s.terminated_by = Termination::UnknownIntent;
        s.flags.push_back("UnknownIntent: no workflow matches the request");
      } else {
        s.terminated_by = Termination::Null;
        if (action.reason != "complete") s.flags.push_back(action.reason);
      }
      finished = true;
      break;
    }
    try {
      const ToolResult result = execute(action, image, s.state, tools);
      s.state = update_state(s.state, action, result, tools);
      s.history.push_back(s.state);
    } catch (const Error& e) {
      s.terminated_by = Termination::ToolError;
      s.flags.push_back("tool error at step " + std::to_string(s.state.k) + " (" + to_string(action) +
                        "): " + e.what());
      finished = true;
      break;
    }
  }
  if (!finished) {
    s.terminated_by = Termination::Budget;
    s.flags.push_back("budget exhausted after " + std::to_string(budget) + " steps");
  }
  s.report = render_report(s.state, request, s.terminated_by, s.flags);
  return s;
}

json session_record(const Session& s, const json& inputs) {
  json steps = json::array();
  for (size_t i = 0; i < s.state.trace.size(); ++i)
    steps.push_back({{"k", i}, {"action", to_json(s.state.trace[i].action)}, {"digest", s.state.trace[i].digest}});
  return {{"schema_version", io::kSchemaVersion},
          {"request", s.request},
          {"budget", s.budget},
          {"inputs", inputs},
          {"steps", steps},
          {"terminated_by", to_string(s.terminated_by)},
          {"flags", s.flags},
          {"report_sha256", io::sha256_hex(s.report)}};
}

ReplayResult replay(const json& record, const ImageGray& image, Size2 original_size, const PlannerPolicy& policy,
                    const ToolSet& tools) {
  ReplayResult r;
  r.session = run_workflow(image, original_size, record.at("request").get<std::string>(), policy, tools,
                           record.at("budget").get<int>());
  const auto& steps = record.at("steps");
  const auto& trace = r.session.state.trace;
  if (steps.size() != trace.size()) {
    r.message = "step count differs: recorded " + std::to_string(steps.size()) + ", replayed " +
                std::to_string(trace.size());
    return r;
  }
  for (size_t i = 0; i < trace.size(); ++i) {
    if (action_from_json(steps[i].at("action")) != trace[i].action) {
      r.message = "action differs at step " + std::to_string(i);
      return r;
    }
    if (steps[i].at("digest").get<std::string>() != trace[i].digest) {
      r.message = "result digest differs at step " + std::to_string(i);
      return r;
    }
  }
  const std::string hash = io::sha256_hex(r.session.report);
  if (hash != record.at("report_sha256").get<std::string>()) {
    r.message = "report hash differs: recorded " + record.at("report_sha256").get<std::string>() + ", replayed " + hash;
    return r;
  }
  r.ok = true;
  r.message = "replay verified, report sha256 " + hash;
  return r;
}

}  // namespace echoflow::agent
