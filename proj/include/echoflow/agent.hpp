#pragma once

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "echoflow/core.hpp"
#include "echoflow/model.hpp"
#include "echoflow/predict.hpp"

namespace echoflow::agent {

struct ToolId {
  TaskKind kind = TaskKind::Det;
  std::string dataset_id;

  auto operator<=>(const ToolId&) const = default;
};

struct ToolParams {
  std::optional<NormBox> roi;  // restricts the tool's input crop
  bool operator==(const ToolParams&) const = default;
};

struct ToolAction {
  bool is_null = false;
  std::string reason;  // why a NULL action was emitted, e.g. "complete", "UnknownIntent"
  ToolId tool;
  ToolParams params;

  static ToolAction null(std::string reason) { return {true, std::move(reason), {}, {}}; }
  static ToolAction call(ToolId tool, ToolParams params = {}) { return {false, "", std::move(tool), params}; }
  bool operator==(const ToolAction&) const = default;
};

std::string to_string(const ToolAction& action);
nlohmann::json to_json(const ToolAction& action);
ToolAction action_from_json(const nlohmann::json& j);

// Det -> NormBox, Seg -> MaskMap, Cls -> ClassLabel with probabilities, Reg -> KeypointSet.
using ToolResult = Target;

std::string result_digest(const ToolResult& result);

// The closed tool set: one predictor per (kind, dataset).
class ToolSet {
 public:
  void add(const DatasetSpec& spec, std::shared_ptr<const predict::Predictor> predictor, int resolution);
  // Every specialist of the model, run without TTA.
  static ToolSet from_model(const model::MultiTaskModel& model);

  bool contains(const ToolId& id) const { return tools_.count(id) > 0; }
  std::vector<ToolId> ids() const;
  const DatasetSpec& spec(const ToolId& id) const;
  const predict::Predictor& predictor(const ToolId& id) const;
  int resolution(const ToolId& id) const;

 private:
  struct Entry {
    DatasetSpec spec;
    std::shared_ptr<const predict::Predictor> predictor;
    int resolution = 0;
  };
  std::map<ToolId, Entry> tools_;
};

struct Semantics {
  std::vector<double> probabilities;
  std::vector<std::string> class_names;
  bool operator==(const Semantics&) const = default;
};

struct Measurement {
  double value = 0;
  std::string unit;
  bool operator==(const Measurement&) const = default;
};

struct TraceEntry {
  ToolAction action;
  std::string digest;
  bool operator==(const TraceEntry&) const = default;
};

// Append-only cache of workflow results. Keys are "<KIND>:<dataset_id>:<k>".
struct AgentState {
  int k = 0;
  Size2 original_size;
  std::map<std::string, NormBox> rois;
  std::map<std::string, MaskMap> masks;
  std::map<std::string, Semantics> semantics;
  std::map<std::string, KeypointSet> points;
  std::map<std::string, Measurement> measurements;
  std::vector<TraceEntry> trace;
  std::vector<std::string> notes;

  std::set<std::string> keys() const;
  bool operator==(const AgentState&) const = default;
};

std::string state_key(const ToolId& tool, int k);

class PlannerPolicy {
 public:
  virtual ~PlannerPolicy() = default;
  virtual ToolAction plan(const std::string& request, const AgentState& state, const ToolSet& tools) const = 0;
};

// Intent -> ordered tool recipe. The next step is the first recipe entry whose
// result kind is not yet cached for its dataset. SEG steps receive the latest
// ROI expanded by `roi_expand` about its center.
class RulePolicy final : public PlannerPolicy {
 public:
  struct Intent {
    std::string name;
    std::vector<std::string> keywords;
    std::vector<ToolId> recipe;
  };

  RulePolicy();  // default intents over the default registry
  explicit RulePolicy(std::vector<Intent> intents, double roi_expand = 2.0);

  const Intent* match(const std::string& request) const;
  ToolAction plan(const std::string& request, const AgentState& state, const ToolSet& tools) const override;

 private:
  std::vector<Intent> intents_;
  double roi_expand_;
};

ToolAction plan_step(const PlannerPolicy& policy, const std::string& request, const AgentState& state,
                     const ToolSet& tools);

// Throws ToolNotInSet (before any model call) and CropDegenerate.
ToolResult execute(const ToolAction& action, const ImageGray& image, const AgentState& state, const ToolSet& tools);

// Returns the successor state; never modifies or removes existing entries.
AgentState update_state(const AgentState& state, const ToolAction& action, const ToolResult& result,
                        const ToolSet& tools);

// Adds vertex angles (deg, original pixels), mask area fractions and
// equivalent diameters (original pixels) for entries not yet measured.
AgentState derive_measurements(const AgentState& state);

double vertex_angle_px(Point2 p1, Point2 p2, Point2 p3);

enum class Termination { Null, Budget, ToolError, UnknownIntent };
std::string to_string(Termination t);

struct Session {
  std::string request;
  int budget = 8;
  AgentState state;
  std::vector<AgentState> history;  // s_0 .. s_k
  Termination terminated_by = Termination::Null;
  std::vector<std::string> flags;
  std::string report;

  // Tool kinds in trace order plus "NULL" when the planner terminated.
  std::vector<std::string> trace_names() const;
};

std::string render_report(const AgentState& state, const std::string& request, Termination terminated_by,
                          const std::vector<std::string>& flags);

inline constexpr int kDefaultBudget = 8;

Session run_workflow(const ImageGray& image, Size2 original_size, const std::string& request,
                     const PlannerPolicy& policy, const ToolSet& tools, int budget = kDefaultBudget);

// Replayable session record.
nlohmann::json session_record(const Session& session, const nlohmann::json& inputs);
// Re-executes with the same inputs and compares per-step digests and the report hash.
struct ReplayResult {
  bool ok = false;
  std::string message;
  Session session;
};
ReplayResult replay(const nlohmann::json& record, const ImageGray& image, Size2 original_size,
                    const PlannerPolicy& policy, const ToolSet& tools);

}  // namespace echoflow::agent
