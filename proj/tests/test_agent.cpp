#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "echoflow/agent.hpp"
#include "echoflow/io.hpp"
#include "echoflow/synthdata.hpp"
#include "test_util.hpp"

using namespace echoflow;
using namespace echoflow::agent;
using predict::Prediction;

namespace {

constexpr int kRes = 64;

Prediction det_pred(NormBox b) {
  Prediction p;
  p.task = TaskKind::Det;
  p.box = b;
  return p;
}

Prediction full_mask_pred() {
  Prediction p;
  p.task = TaskKind::Seg;
  p.channels = 2;
  p.height = p.width = kRes;
  p.probs.assign(2 * kRes * kRes, 0.0);
  for (int i = 0; i < kRes * kRes; ++i) p.probs[size_t(kRes * kRes + i)] = 1.0;
  return p;
}

Prediction cls_pred(double p_malignant) {
  Prediction p;
  p.task = TaskKind::Cls;
  p.channels = 2;
  p.height = p.width = 1;
  p.probs = {1 - p_malignant, p_malignant};
  return p;
}

Prediction reg_pred(KeypointSet k) {
  Prediction p;
  p.task = TaskKind::Reg;
  p.points = std::move(k);
  return p;
}

struct Tools {
  Registry reg = default_registry(kRes);
  ToolSet set;
  std::shared_ptr<int> calls = std::make_shared<int>(0);

  void add(const std::string& id, std::function<Prediction(const ImageGray&)> fn) {
    auto c = calls;
    set.add(reg.get(id),
            std::make_shared<testutil::FnPredictor>(reg.get(id).task,
                                                    [c, fn](const ImageGray& img) {
                                                      ++*c;
                                                      return fn(img);
                                                    }),
            kRes);
  }
};

// DET at a fixed quarter box, SEG says "all foreground", CLS p=0.88, REG a right angle.
Tools constant_tools(NormBox box = {0.25, 0.25, 0.5, 0.5}) {
  Tools t;
  t.add("lesion_det", [box](const ImageGray&) { return det_pred(box); });
  t.add("lesion_seg", [](const ImageGray&) { return full_mask_pred(); });
  t.add("lesion_cls", [](const ImageGray&) { return cls_pred(0.88); });
  t.add("labor_reg", [](const ImageGray&) { return reg_pred({{{0.25, 0.5}, {0.5, 0.5}, {0.5, 0.25}}}); });
  return t;
}

ImageGray blank() { return ImageGray(kRes, kRes, 0.3f); }

}  // namespace

TEST(Policy, IntentMatching) {
  RulePolicy p;
  ASSERT_NE(p.match("Please work up this BREAST lesion"), nullptr);
  EXPECT_EQ(p.match("breast lesion")->name, "breast_lesion_workup");
  EXPECT_EQ(p.match("assess intrapartum progress")->name, "labor_progress");
  EXPECT_EQ(p.match("what is the weather"), nullptr);
}

TEST(Workflow, BreastLesionRecipeAndReport) {
  auto t = constant_tools();
  const auto s = run_workflow(blank(), {128, 128}, "breast lesion workup", RulePolicy(), t.set);
  EXPECT_EQ(s.trace_names(), (std::vector<std::string>{"DET", "SEG", "CLS", "NULL"}));
  EXPECT_EQ(s.terminated_by, Termination::Null);
  EXPECT_TRUE(s.flags.empty());
  // SEG got the DET box expanded x2 about its center
  ASSERT_TRUE(s.state.trace[1].action.params.roi);
  const NormBox roi = *s.state.trace[1].action.params.roi;
  EXPECT_NEAR(roi.x_min, 0.125, 1e-12);
  EXPECT_NEAR(roi.x_max, 0.625, 1e-12);
  // full-foreground crop -> mask covers exactly the 32x32 roi pixels
  const std::string key = "SEG:lesion_seg:1";
  ASSERT_TRUE(s.state.masks.count(key));
  EXPECT_NEAR(s.state.measurements.at("area_fraction:" + key).value, 0.25, 1e-12);
  EXPECT_NEAR(s.state.measurements.at("equivalent_diameter:" + key).value,
              2 * std::sqrt(0.25 * 128 * 128 / std::numbers::pi), 1e-9);
  EXPECT_NE(s.report.find("Impression: malignant (p=0.880)"), std::string::npos) << s.report;
  EXPECT_EQ(s.history.size(), 4u);
}

TEST(Workflow, LaborRecipeMeasuresAngle) {
  auto t = constant_tools();
  const auto s = run_workflow(blank(), {100, 100}, "labor progress check", RulePolicy(), t.set);
  EXPECT_EQ(s.trace_names(), (std::vector<std::string>{"DET", "SEG", "REG", "NULL"}));
  EXPECT_NEAR(s.state.measurements.at("angle_of_progression:REG:labor_reg:2").value, 90.0, 1e-9);
  EXPECT_NE(s.report.find("Impression: none"), std::string::npos);
}

// Reg oracle answers with the scene's true landmarks; the derived angle must
// equal the generator's own landmark angle in the original frame.
TEST(Workflow, AngleMatchesGeneratorOnScene) {
  const auto reg = default_registry(kRes);
  for (int i = 0; i < 10; ++i) {
    const auto smp = synth::generate_scene(4, reg, "labor_reg", i);
    const auto params = synth::draw_scene(4, i, {});
    ToolSet only_reg;
    only_reg.add(reg.get("labor_reg"), std::make_shared<testutil::FnPredictor>(TaskKind::Reg, [smp](const ImageGray&) {
                   return reg_pred(std::get<KeypointSet>(smp.target));
                 }),
                 kRes);
    RulePolicy policy({{"labor", {"labor"}, {{TaskKind::Reg, "labor_reg"}}}});
    const auto s = run_workflow(smp.image, smp.original_size, "labor", policy, only_reg);
    const double angle = s.state.measurements.at("angle_of_progression:REG:labor_reg:0").value;
    EXPECT_NEAR(angle, synth::landmark_angle_deg(params, smp.original_size), 1e-6) << i;
  }
}

TEST(Measurements, VertexAngles) {
  EXPECT_NEAR(vertex_angle_px({1, 0}, {0, 0}, {0, 1}), 90.0, 1e-12);
  EXPECT_NEAR(vertex_angle_px({1, 0}, {0, 0}, {-1, 1}), 135.0, 1e-12);
  EXPECT_NEAR(vertex_angle_px({1, 0}, {0, 0}, {-1, 0}), 180.0, 1e-12);
}

// Angles are taken in original pixels, so a non-square frame changes them.
TEST(Measurements, AngleUsesOriginalPixelFrame) {
  AgentState s;
  s.original_size = {100, 200};
  s.points["REG:labor_reg:0"] = {{{0.25, 0.5}, {0.5, 0.5}, {0.75, 0.25}}};
  const auto out = derive_measurements(s);
  // vectors (-50, 0) and (50, -25) in pixels
  const double want = std::acos(-50.0 * 50 / (50 * std::hypot(50.0, 25.0))) * 180 / std::numbers::pi;
  EXPECT_NEAR(out.measurements.at("angle_of_progression:REG:labor_reg:0").value, want, 1e-9);
  s.original_size = {200, 200};
  EXPECT_NEAR(derive_measurements(s).measurements.at("angle_of_progression:REG:labor_reg:0").value, 135.0, 1e-9);
}

TEST(State, AppendOnlyAcrossHistory) {
  auto t = constant_tools();
  const auto s = run_workflow(blank(), {128, 128}, "breast lesion", RulePolicy(), t.set);
  for (size_t i = 0; i + 1 < s.history.size(); ++i) {
    const auto& a = s.history[i];
    const auto& b = s.history[i + 1];
    for (const auto& k : a.keys()) EXPECT_TRUE(b.keys().count(k)) << k;
    for (const auto& [k, v] : a.rois) EXPECT_EQ(b.rois.at(k), v);
    for (const auto& [k, v] : a.masks) EXPECT_EQ(b.masks.at(k), v);
    for (const auto& [k, v] : a.measurements) EXPECT_EQ(b.measurements.at(k), v);
    EXPECT_EQ(b.k, a.k + 1);
    EXPECT_GT(b.keys().size(), a.keys().size());
    ASSERT_GE(b.trace.size(), a.trace.size());
    EXPECT_TRUE(std::equal(a.trace.begin(), a.trace.end(), b.trace.begin()));
  }
}

TEST(State, UpdateRejectsKindMismatch) {
  auto t = constant_tools();
  AgentState s;
  EXPECT_THROW(update_state(s, ToolAction::call({TaskKind::Det, "lesion_det"}), MaskMap(2, 2), t.set), Error);
}

TEST(Termination, BudgetOne) {
  auto t = constant_tools();
  const auto s = run_workflow(blank(), {128, 128}, "breast lesion", RulePolicy(), t.set, 1);
  EXPECT_EQ(s.state.trace.size(), 1u);
  EXPECT_EQ(s.terminated_by, Termination::Budget);
  ASSERT_EQ(s.flags.size(), 1u);
  EXPECT_EQ(s.flags[0], "budget exhausted after 1 steps");
  EXPECT_NE(s.report.find("budget exhausted after 1 steps"), std::string::npos);
}

TEST(Termination, UnknownIntent) {
  auto t = constant_tools();
  const auto s = run_workflow(blank(), {128, 128}, "tell me a joke", RulePolicy(), t.set);
  EXPECT_TRUE(s.state.trace.empty());
  EXPECT_EQ(*t.calls, 0);
  EXPECT_EQ(s.terminated_by, Termination::UnknownIntent);
  EXPECT_EQ(s.flags, (std::vector<std::string>{"UnknownIntent: no workflow matches the request"}));
  EXPECT_NE(s.report.find("Impression: none"), std::string::npos);
}

TEST(Termination, ToolErrorStopsWithFlag) {
  // a degenerate DET box makes the SEG crop degenerate
  auto t = constant_tools({0.5, 0.5, 0.5, 0.5});
  const auto s = run_workflow(blank(), {128, 128}, "breast lesion", RulePolicy(), t.set);
  EXPECT_EQ(s.terminated_by, Termination::ToolError);
  EXPECT_EQ(s.state.trace.size(), 1u);
  ASSERT_EQ(s.flags.size(), 1u);
  EXPECT_NE(s.flags[0].find("tool error at step 1"), std::string::npos);
}

TEST(Execute, ToolNotInSetBeforeAnyModelCall) {
  auto t = constant_tools();
  try {
    execute(ToolAction::call({TaskKind::Seg, "lesion_det"}), blank(), {}, t.set);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ToolNotInSet);
  }
  EXPECT_EQ(*t.calls, 0);
}

TEST(Execute, CropDegenerate) {
  auto t = constant_tools();
  for (const NormBox roi : {NormBox{0.3, 0.3, 0.3, 0.6}, NormBox::invalid(), NormBox{0.6, 0.2, 0.4, 0.5}}) {
    try {
      execute(ToolAction::call({TaskKind::Seg, "lesion_seg"}, {roi}), blank(), {}, t.set);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::CropDegenerate);
    }
  }
  EXPECT_EQ(*t.calls, 0);
}

TEST(Execute, DetBoxMapsBackFromCrop) {
  auto t = constant_tools({0.0, 0.0, 1.0, 1.0});
  const auto r = execute(ToolAction::call({TaskKind::Det, "lesion_det"}, {NormBox{0.25, 0.25, 0.75, 0.75}}), blank(),
                         {}, t.set);
  const auto b = std::get<NormBox>(r);
  EXPECT_NEAR(b.x_min, 0.25, 1e-12);
  EXPECT_NEAR(b.y_max, 0.75, 1e-12);
}

TEST(Replay, VerifiesAndDetectsTampering) {
  auto t = constant_tools();
  const auto img = blank();
  const auto s = run_workflow(img, {128, 128}, "breast lesion", RulePolicy(), t.set);
  auto rec = session_record(s, {{"image", "mem"}});
  const auto r = replay(rec, img, {128, 128}, RulePolicy(), t.set);
  EXPECT_TRUE(r.ok) << r.message;
  EXPECT_EQ(r.session.report, s.report);
  EXPECT_EQ(io::sha256_hex(r.session.report), rec["report_sha256"]);

  auto bad = rec;
  bad["steps"][1]["digest"] = std::string(64, '0');
  const auto rb = replay(bad, img, {128, 128}, RulePolicy(), t.set);
  EXPECT_FALSE(rb.ok);
  EXPECT_NE(rb.message.find("step 1"), std::string::npos);

  // a different image changes nothing here (constant tools) but a different size does
  const auto rs = replay(rec, img, {64, 64}, RulePolicy(), t.set);
  EXPECT_FALSE(rs.ok);
}

TEST(Replay, RepeatedRunsIdentical) {
  auto t = constant_tools();
  const auto a = run_workflow(blank(), {128, 128}, "labor progress", RulePolicy(), t.set);
  const auto b = run_workflow(blank(), {128, 128}, "labor progress", RulePolicy(), t.set);
  EXPECT_EQ(a.report, b.report);
  EXPECT_EQ(a.state, b.state);
}

TEST(Report, EmptyStateSections) {
  const auto r = render_report(AgentState{}, "x", Termination::Null, {});
  for (const char* part : {"Request: x", "Findings:", "Measurements:", "Impression: none", "Trace:", "  1. NULL", "Flags:"})
    EXPECT_NE(r.find(part), std::string::npos) << part;
}

TEST(Actions, JsonRoundTrip) {
  const auto a = ToolAction::call({TaskKind::Seg, "lesion_seg"}, {NormBox{0.1, 0.2, 0.3, 0.4}});
  EXPECT_EQ(action_from_json(to_json(a)), a);
  EXPECT_EQ(action_from_json(to_json(ToolAction::null("complete"))), ToolAction::null("complete"));
}

TEST(ToolSetTest, KindMismatchRejected) {
  Tools t;
  EXPECT_THROW(t.set.add(t.reg.get("lesion_seg"),
                         std::make_shared<testutil::FnPredictor>(TaskKind::Det, [](const ImageGray&) { return Prediction{}; }),
                         kRes),
               Error);
}
