#include "doctest.h"

#include "duotrack/synth_bench.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

using namespace duotrack;

namespace {

struct RectStats {
  double mean = 0.0;
  double stddev = 0.0;
};

// pixel statistics inside the box, shrunk by one pixel to dodge edge rounding
RectStats rect_stats(const Tensor& plane, const BBox& box) {
  const int H = plane.extent(1), W = plane.extent(2);
  const int x0 = static_cast<int>(std::lround(box.x1() * W)) + 1;
  const int x1 = static_cast<int>(std::lround(box.x2() * W)) - 1;
  const int y0 = static_cast<int>(std::lround(box.y1() * H)) + 1;
  const int y1 = static_cast<int>(std::lround(box.y2() * H)) - 1;
  REQUIRE(x1 > x0);
  REQUIRE(y1 > y0);
  double sum = 0.0, sq = 0.0;
  int n = 0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const double v = plane.at({0, y, x});
      sum += v;
      sq += v * v;
      ++n;
    }
  RectStats s;
  s.mean = sum / n;
  s.stddev = std::sqrt(std::max(0.0, sq / n - s.mean * s.mean));
  return s;
}

const SynthEvent* find_event(const SyntheticSequence& seq,
                             const std::string& kind) {
  for (const auto& e : seq.events)
    if (e.kind == kind) return &e;
  return nullptr;
}

BBox shifted(const BBox& b, double dx, double dy) {
  return BBox{b.cx + dx, b.cy + dy, b.w, b.h};
}

}  // namespace

TEST_CASE("sequence generation is deterministic per seed") {
  SynthConfig cfg;
  cfg.frame_h = cfg.frame_w = 64;
  SyntheticSequence a = generate_sequence(42, 12, cfg);
  SyntheticSequence b = generate_sequence(42, 12, cfg);
  REQUIRE(a.frames.size() == 12);
  REQUIRE(a.events.size() == b.events.size());
  for (std::size_t f = 0; f < a.frames.size(); ++f) {
    CHECK(a.frames[f].rgb.data() == b.frames[f].rgb.data());
    CHECK(a.frames[f].x.data() == b.frames[f].x.data());
    CHECK(a.frames[f].gt.cx == b.frames[f].gt.cx);
    CHECK(a.frames[f].gt.w == b.frames[f].gt.w);
  }
  SyntheticSequence c = generate_sequence(43, 12, cfg);
  CHECK(a.frames[0].rgb.data() != c.frames[0].rgb.data());
}

TEST_CASE("targets stay inside the frame and move within the speed bound") {
  SynthConfig cfg;
  SyntheticSequence seq = generate_sequence(7, 32, cfg);
  for (std::size_t f = 0; f < seq.frames.size(); ++f) {
    const BBox& gt = seq.frames[f].gt;
    CHECK(gt.x1() >= -1e-9);
    CHECK(gt.y1() >= -1e-9);
    CHECK(gt.x2() <= 1.0 + 1e-9);
    CHECK(gt.y2() <= 1.0 + 1e-9);
    CHECK(gt.w >= cfg.min_extent * 0.6);  // deformation shrinks at most 30%
    if (f > 0) {
      const BBox& prev = seq.frames[f - 1].gt;
      CHECK(std::hypot(gt.cx - prev.cx, gt.cy - prev.cy) <=
            cfg.max_speed + 1e-9);
    }
  }
}

TEST_CASE("scheduled events land inside the sequence") {
  SynthConfig cfg;
  SyntheticSequence seq = generate_sequence(19, 32, cfg);
  REQUIRE(find_event(seq, "darkness") != nullptr);
  REQUIRE(find_event(seq, "occlusion") != nullptr);
  REQUIRE(find_event(seq, "deformation") != nullptr);
  CHECK(find_event(seq, "distractor") == nullptr);  // disabled by default
  for (const auto& e : seq.events) {
    CHECK(e.start >= 0);
    CHECK(e.start < e.end);
    CHECK(e.end <= 32);
  }

  cfg.with_darkness = false;
  cfg.with_distractor = true;
  SyntheticSequence seq2 = generate_sequence(19, 32, cfg);
  CHECK(find_event(seq2, "darkness") == nullptr);
  CHECK(find_event(seq2, "distractor") != nullptr);
}

TEST_CASE("darkness flattens the RGB target while the X channel keeps it") {
  SynthConfig cfg;
  SyntheticSequence seq = generate_sequence(23, 32, cfg);
  const SynthEvent* dark = find_event(seq, "darkness");
  REQUIRE(dark != nullptr);
  const int d = (dark->start + dark->end) / 2;
  const int clean = 0;  // events never start before frame 1

  const RectStats rgb_dark = rect_stats(seq.frames[d].rgb, seq.frames[d].gt);
  const RectStats rgb_clean =
      rect_stats(seq.frames[clean].rgb, seq.frames[clean].gt);
  const RectStats x_dark = rect_stats(seq.frames[d].x, seq.frames[d].gt);
  const RectStats x_clean =
      rect_stats(seq.frames[clean].x, seq.frames[clean].gt);

  // RGB target collapses to flat noise around mid-gray
  CHECK(rgb_dark.stddev < 0.5 * rgb_clean.stddev);
  CHECK(std::fabs(rgb_dark.mean - 0.5) < 0.05);
  // the auxiliary channel still shows the bright textured target
  CHECK(x_dark.mean > 0.5);
  CHECK(x_dark.stddev > 0.3 * x_clean.stddev);
}

TEST_CASE("occlusion blanks the central band in both channels") {
  SynthConfig cfg;
  SyntheticSequence seq = generate_sequence(29, 32, cfg);
  const SynthEvent* occ = find_event(seq, "occlusion");
  REQUIRE(occ != nullptr);
  const int f = occ->start;
  const BBox& gt = seq.frames[f].gt;

  // pixel rows of the central ~40% band, one row of slack at each edge
  const int H = cfg.frame_h, W = cfg.frame_w;
  const int ty0 = static_cast<int>(std::lround(gt.y1() * H));
  const int ty1 = static_cast<int>(std::lround(gt.y2() * H));
  const int span = ty1 - ty0;
  const int by0 = ty0 + span * 3 / 10 + 1;
  const int by1 = ty0 + span * 7 / 10 - 1;
  const int bx0 = static_cast<int>(std::lround(gt.x1() * W)) + 1;
  const int bx1 = static_cast<int>(std::lround(gt.x2() * W)) - 1;
  REQUIRE(by1 > by0);
  auto band_mean = [&](const Tensor& plane) {
    double sum = 0.0;
    int n = 0;
    for (int y = by0; y < by1; ++y)
      for (int x = bx0; x < bx1; ++x) {
        sum += plane.at({0, y, x});
        ++n;
      }
    return sum / n;
  };

  const RectStats x_full = rect_stats(seq.frames[0].x, seq.frames[0].gt);
  CHECK(band_mean(seq.frames[f].x) < 0.3);  // dark background level
  CHECK(x_full.mean > 0.5);                 // unoccluded target stays bright
  CHECK(std::fabs(band_mean(seq.frames[f].rgb) - 0.5) < 0.05);
}

TEST_CASE("deformation changes the aspect ratio mid-event") {
  SynthConfig cfg;
  SyntheticSequence seq = generate_sequence(31, 32, cfg);
  const SynthEvent* def = find_event(seq, "deformation");
  REQUIRE(def != nullptr);
  const int mid = def->start + (def->end - def->start) / 2;
  const double w0 = seq.frames[0].gt.w, h0 = seq.frames[0].gt.h;
  CHECK(std::fabs(seq.frames[mid].gt.w - w0) > 0.01);
  // squeeze is complementary: one axis grows while the other shrinks
  CHECK((seq.frames[mid].gt.w - w0) * (seq.frames[mid].gt.h - h0) < 0.0);
  // outside the event the extents return to their base values
  const int after = def->end;
  if (after < 32) {
    CHECK(seq.frames[after].gt.w == doctest::Approx(w0).epsilon(1e-12));
  }
}

TEST_CASE("evaluating a perfect track gives unit scores") {
  std::vector<BBox> gt;
  for (int i = 0; i < 6; ++i) gt.push_back(BBox{0.3 + 0.05 * i, 0.5, 0.2, 0.3});
  std::vector<SynthEvent> events{{1, 3, "darkness"}};
  EvalReport rep = evaluate(gt, gt, events, 128, 128);
  CHECK(rep.frames == 6);
  CHECK(rep.mean_iou == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rep.success_auc == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rep.precision_at_r == 1.0);
  CHECK(rep.precision_radius_px == doctest::Approx(8.0).epsilon(1e-15));
  CHECK(rep.event_iou.at("darkness") == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rep.event_frames.at("darkness") == 2);
}

TEST_CASE("evaluating disjoint tracks gives the floor scores") {
  std::vector<BBox> gt(4, BBox{0.8, 0.8, 0.2, 0.2});
  std::vector<BBox> pred(4, BBox{0.15, 0.15, 0.2, 0.2});
  EvalReport rep = evaluate(pred, gt, {}, 128, 128);
  CHECK(rep.mean_iou == 0.0);
  CHECK(rep.precision_at_r == 0.0);
  // success(0) is 1 by definition, so AUC keeps the first half-interval
  CHECK(rep.success_auc == doctest::Approx(0.025).epsilon(1e-12));
}

TEST_CASE("success AUC follows the trapezoid rule") {
  // all frames at IoU exactly 0.5: area = 0.5 + half interval at the edge
  std::vector<BBox> gt(5, BBox{0.5, 0.5, 1.0, 1.0});
  std::vector<BBox> pred(5, BBox{0.25, 0.5, 0.5, 1.0});
  EvalReport rep = evaluate(pred, gt, {}, 128, 128);
  CHECK(rep.mean_iou == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(rep.success_auc == doctest::Approx(0.525).epsilon(1e-12));

  // half the frames perfect, half disjoint; extents picked so the box
  // corners are exact dyadics and identical boxes score IoU == 1.0
  std::vector<BBox> gt2(4, BBox{0.5, 0.5, 0.25, 0.25});
  std::vector<BBox> pred2 = gt2;
  pred2[2] = BBox{0.1, 0.1, 0.05, 0.05};
  pred2[3] = BBox{0.9, 0.9, 0.05, 0.05};
  EvalReport rep2 = evaluate(pred2, gt2, {}, 128, 128);
  CHECK(rep2.success_auc == doctest::Approx(0.5125).epsilon(1e-12));
}

TEST_CASE("event averages pool the covered frames") {
  std::vector<BBox> gt(6, BBox{0.5, 0.5, 0.3, 0.3});
  std::vector<BBox> pred = gt;
  pred[2] = BBox{0.05, 0.05, 0.05, 0.05};
  pred[3] = BBox{0.95, 0.95, 0.05, 0.05};
  std::vector<SynthEvent> events{
      {1, 3, "darkness"}, {2, 5, "occlusion"}, {4, 99, "distractor"}};
  EvalReport rep = evaluate(pred, gt, events, 128, 128);
  CHECK(rep.event_frames.at("darkness") == 2);
  CHECK(rep.event_frames.at("occlusion") == 3);
  CHECK(rep.event_frames.at("distractor") == 2);  // clipped at the end
  CHECK(rep.event_iou.at("darkness") == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(rep.event_iou.at("occlusion") ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(rep.event_iou.at("distractor") == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("degenerate boxes evaluate without blowing up") {
  std::vector<BBox> gt(3, BBox{0.5, 0.5, 0.3, 0.3});
  std::vector<BBox> pred(3, BBox{0.0, 0.0, 0.0, 0.0});
  EvalReport rep = evaluate(pred, gt, {}, 128, 128);
  CHECK(std::isfinite(rep.mean_iou));
  CHECK(rep.mean_iou == 0.0);
  CHECK(std::isfinite(rep.success_auc));
  CHECK(std::isfinite(rep.precision_at_r));

  CHECK_THROWS_AS(evaluate({}, {}, {}, 128, 128), std::runtime_error);
  CHECK_THROWS_AS(evaluate(pred, std::vector<BBox>(2), {}, 128, 128),
                  std::runtime_error);
}

TEST_CASE("experiment config round trips through JSON") {
  ExperimentConfig cfg;
  cfg.model.fusion = FusionMode::RgbOnly;
  cfg.model.seed = 77;
  cfg.model.backbone.depth = 3;
  cfg.train_steps = 123;
  cfg.batch_size = 2;
  cfg.strategy = SamplingStrategy::KHighestConfidence;
  cfg.tenth_lr_window = false;
  cfg.opt.lr = 1.5e-3;
  cfg.synth.decoy_count = 5;
  const std::string text = experiment_config_to_json(cfg);
  ExperimentConfig back = experiment_config_from_json(text);
  CHECK(back.model.fusion == FusionMode::RgbOnly);
  CHECK(back.model.seed == 77);
  CHECK(back.model.backbone.depth == 3);
  CHECK(back.train_steps == 123);
  CHECK(back.batch_size == 2);
  CHECK(back.strategy == SamplingStrategy::KHighestConfidence);
  CHECK(back.tenth_lr_window == false);
  CHECK(back.opt.lr == 1.5e-3);
  CHECK(back.synth.decoy_count == 5);
  CHECK(experiment_config_to_json(back) == text);

  // unknown fields are tolerated, defaults fill the gaps
  ExperimentConfig sparse = experiment_config_from_json("{\"train_steps\": 9}");
  CHECK(sparse.train_steps == 9);
  CHECK(sparse.batch_size == 4);
}

TEST_CASE("evaluation reports round trip through JSON") {
  std::vector<BBox> gt(5, BBox{0.5, 0.5, 0.3, 0.3});
  std::vector<BBox> pred = gt;
  pred[1] = shifted(gt[1], 0.02, -0.01);
  pred[4] = BBox{0.1, 0.1, 0.1, 0.1};
  EvalReport rep = evaluate(pred, gt, {{0, 2, "darkness"}}, 128, 128);
  EvalReport back = report_from_json(report_to_json(rep));
  CHECK(back.frames == rep.frames);
  CHECK(back.mean_iou == rep.mean_iou);
  CHECK(back.success_auc == rep.success_auc);
  CHECK(back.precision_at_r == rep.precision_at_r);
  CHECK(back.precision_radius_px == rep.precision_radius_px);
  CHECK(back.event_iou == rep.event_iou);
  CHECK(back.event_frames == rep.event_frames);
}

TEST_CASE("training metrics serialize as one JSON object per line") {
  std::vector<TrainLogEntry> log{{0, 3.25, 4e-4}, {1, 2.5, 4e-4}, {2, 2.0, 4e-5}};
  const std::string text = metrics_to_jsonl(log);
  std::istringstream in(text);
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j["step"] == rows);
    CHECK(j["loss"].get<double>() == log[rows].loss);
    CHECK(j["lr"].get<double>() == log[rows].lr);
    ++rows;
  }
  CHECK(rows == 3);
}

TEST_CASE("summary rows report darkness or a sentinel") {
  std::vector<BBox> gt(4, BBox{0.5, 0.5, 0.3, 0.3});
  ExperimentResult with_event;
  with_event.full = evaluate(gt, gt, {{0, 2, "darkness"}}, 128, 128);
  with_event.baseline = with_event.full;
  with_event.no_deep = with_event.full;
  const std::string csv = summary_csv(with_event);
  CHECK(csv.find("arm,frames,mean_iou,success_auc,precision_at_r,darkness_iou") !=
        std::string::npos);
  CHECK(csv.find("full,4,1.000000,1.000000,1.000000,1.000000") !=
        std::string::npos);

  ExperimentResult without;
  without.full = evaluate(gt, gt, {}, 128, 128);
  without.baseline = without.full;
  without.no_deep = without.full;
  CHECK(summary_csv(without).find("full,4,1.000000,1.000000,1.000000,-1.000000") !=
        std::string::npos);
}

TEST_CASE("sequences round trip through the on-disk format") {
  namespace fs = std::filesystem;
  SynthConfig cfg;
  cfg.frame_h = 32;
  cfg.frame_w = 48;
  cfg.decoy_count = 1;
  SyntheticSequence seq = generate_sequence(55, 10, cfg);
  const std::string dir = "/tmp/duotrack_seq_roundtrip";
  fs::remove_all(dir);
  save_sequence(seq, dir);
  SyntheticSequence back = load_sequence(dir);
  CHECK(back.seed == seq.seed);
  CHECK(back.config.frame_h == 32);
  CHECK(back.config.frame_w == 48);
  REQUIRE(back.frames.size() == seq.frames.size());
  REQUIRE(back.events.size() == seq.events.size());
  for (std::size_t i = 0; i < seq.events.size(); ++i) {
    CHECK(back.events[i].start == seq.events[i].start);
    CHECK(back.events[i].end == seq.events[i].end);
    CHECK(back.events[i].kind == seq.events[i].kind);
  }
  for (std::size_t f = 0; f < seq.frames.size(); ++f) {
    CHECK(back.frames[f].rgb.data() == seq.frames[f].rgb.data());
    CHECK(back.frames[f].x.data() == seq.frames[f].x.data());
    CHECK(back.frames[f].gt.cx == seq.frames[f].gt.cx);
    CHECK(back.frames[f].gt.cy == seq.frames[f].gt.cy);
    CHECK(back.frames[f].gt.w == seq.frames[f].gt.w);
    CHECK(back.frames[f].gt.h == seq.frames[f].gt.h);
  }
  fs::remove_all(dir);
}

TEST_CASE("a short synthetic training run logs finite, scheduled steps") {
  ExperimentConfig cfg;
  cfg.model.backbone.depth = 2;
  cfg.model.backbone.C = 16;
  cfg.model.backbone.heads = 2;
  cfg.model.backbone.H_z = cfg.model.backbone.W_z = 16;
  cfg.model.backbone.H_x = cfg.model.backbone.W_x = 32;
  cfg.model.backbone.mlp_ratio = 2;
  cfg.model.T = 2;
  cfg.model.stma_d = 4;
  cfg.model.shallow_h = 4;
  cfg.model.deep_dprime = 3;
  cfg.synth.frame_h = cfg.synth.frame_w = 64;
  cfg.train_sequences = 2;
  cfg.train_length = 6;
  cfg.train_steps = 5;
  cfg.batch_size = 2;
  cfg.eval_sequences = 1;
  cfg.eval_length = 6;

  Model model = assemble_model(cfg.model);
  auto log = train_on_synthetic(model, cfg);
  REQUIRE(log.size() == 5);
  for (int s = 0; s < 5; ++s) {
    CHECK(log[s].step == s);
    CHECK(std::isfinite(log[s].loss));
    CHECK(log[s].lr ==
          doctest::Approx(lr_at(s, 5, cfg.opt.lr)).epsilon(1e-15));
  }

  EvalReport rep = evaluate_model(model, cfg);
  CHECK(rep.frames == 6);
  CHECK(rep.mean_iou >= 0.0);
  CHECK(rep.mean_iou <= 1.0);
  CHECK(std::isfinite(rep.success_auc));
}
