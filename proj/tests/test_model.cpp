#include "doctest.h"

#include "duotrack/model.hpp"

#include <cmath>
#include <vector>

using namespace duotrack;

namespace {

// small enough to forward in milliseconds, still exercises every stage
ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig cfg;
  cfg.backbone.depth = 2;
  cfg.backbone.C = 16;
  cfg.backbone.heads = 2;
  cfg.backbone.p = 8;
  cfg.backbone.H_z = cfg.backbone.W_z = 16;
  cfg.backbone.H_x = cfg.backbone.W_x = 32;
  cfg.backbone.mlp_ratio = 2;
  cfg.T = 2;
  cfg.stma_d = 4;
  cfg.shallow_h = 4;
  cfg.deep_dprime = 3;
  cfg.seed = seed;
  return cfg;
}

Tensor random_plane(Shape shape, std::uint64_t seed) {
  DeterministicRng rng(seed);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(0.1, 0.9);
  return Tensor::from_data(std::move(shape), std::move(data));
}

TrainBatch tiny_batch(const ModelConfig& cfg, std::uint64_t seed) {
  const BackboneConfig& bc = cfg.backbone;
  TrainBatch batch;
  for (int t = 0; t < cfg.T; ++t) {
    batch.rgb_memory.push_back(
        random_plane({1, bc.ch, bc.H_z, bc.W_z}, seed + 10 * t));
    batch.x_memory.push_back(
        random_plane({1, bc.ch, bc.H_z, bc.W_z}, seed + 10 * t + 5));
  }
  batch.rgb_search = random_plane({1, bc.ch, bc.H_x, bc.W_x}, seed + 100);
  batch.x_search = random_plane({1, bc.ch, bc.H_x, bc.W_x}, seed + 101);
  batch.gt = {BBox{0.52, 0.47, 0.3, 0.26}};
  return batch;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("token layouts count template and search slots") {
  ModelConfig full = full_scale_config(16);
  TokenLayout lay = full.layout();
  CHECK(lay.N_z == 64);
  CHECK(lay.N_x == 256);
  CHECK(lay.total() == 448);
  CHECK(lay.search_offset() == 192);
  full.T = 1;
  CHECK(full.layout().total() == 320);
  CHECK(full.layout().search_offset() == 64);

  ModelConfig desk;  // defaults
  CHECK(desk.layout().N_z == 16);
  CHECK(desk.layout().N_x == 64);
  CHECK(desk.layout().total() == 112);
  CHECK(desk.layout().search_offset() == 48);
}

TEST_CASE("analytic audit matches the assembled store") {
  ModelConfig cfg;  // desk defaults
  ParamAudit analytic = param_audit(cfg);
  Model model = assemble_model(cfg);
  ParamAudit assembled = audit_store(model.store);
  CHECK(analytic.stma == assembled.stma);
  CHECK(analytic.shallow == assembled.shallow);
  CHECK(analytic.deep == assembled.deep);
  CHECK(analytic.noise == assembled.noise);
  CHECK(analytic.head == assembled.head);
  CHECK(analytic.frozen == assembled.frozen);

  // desk-scale counts, derived by hand from the declared tensor shapes
  CHECK(analytic.stma == 23296);
  CHECK(analytic.shallow == 4352);
  CHECK(analytic.deep == 4480);
  CHECK(analytic.noise == 64);
  CHECK(analytic.head == 56837);
  CHECK(analytic.frozen == 209344);
  CHECK(model.store.trainable_scalars() == analytic.trainable_total());
  CHECK(model.store.total_scalars() == analytic.grand_total());
}

TEST_CASE("full-scale audit hits the published budget") {
  const ParamAudit d16 = param_audit(full_scale_config(16));
  const ParamAudit d12 = param_audit(full_scale_config(12));
  CHECK(d16.adapter_total() == 924480);
  CHECK(d12.adapter_total() == 768768);
  CHECK(d16.adapter_total() - d12.adapter_total() == 155712);
  CHECK(d16.adapter_fraction() < 0.015);
  CHECK(d12.adapter_fraction() < 0.015);
  // within 15% of the coarse published figures
  CHECK(std::fabs(d16.adapter_total() / 0.93e6 - 1.0) < 0.15);
  CHECK(std::fabs(d12.adapter_total() / 0.78e6 - 1.0) < 0.15);
  CHECK(std::fabs((d16.adapter_total() - d12.adapter_total()) / 0.15e6 - 1.0) <
        0.15);
}

TEST_CASE("shared temporal adapters halve their parameter count") {
  ModelConfig cfg;
  cfg.stma_shared = true;
  CHECK(param_audit(cfg).stma == 23296 / 2);

  Model model = assemble_model(cfg);
  // both modality branches must reference the same tensors
  model.params.stma_rgb[0].W_up.mutable_data()[0] = 7.5;
  CHECK(model.params.stma_x[0].W_up.data()[0] == 7.5);
}

TEST_CASE("stage ordering selects adapter kinds per slot") {
  ModelConfig cfg;  // sa+da default: 4 shallow slots, 4 deep slots
  cfg.ordering = PmcaOrdering::SaSa;
  ParamAudit sasa = param_audit(cfg);
  CHECK(sasa.deep == 0);
  CHECK(sasa.noise == 0);
  CHECK(sasa.shallow == 2 * 4352);

  cfg.ordering = PmcaOrdering::DaDa;
  ParamAudit dada = param_audit(cfg);
  CHECK(dada.shallow == 0);
  CHECK(dada.deep == 2 * 4480);
  CHECK(dada.noise == 2 * 64);

  cfg.ordering = PmcaOrdering::DaSa;
  ParamAudit dasa = param_audit(cfg);
  CHECK(dasa.shallow == 4352);
  CHECK(dasa.deep == 4480);
}

TEST_CASE("adapter toggles remove their parameter groups") {
  ModelConfig cfg;
  cfg.enable_stma = false;
  CHECK(param_audit(cfg).stma == 0);
  cfg = ModelConfig{};
  cfg.enable_shallow = false;
  CHECK(param_audit(cfg).shallow == 0);
  cfg = ModelConfig{};
  cfg.enable_deep = false;
  ParamAudit no_deep = param_audit(cfg);
  CHECK(no_deep.deep == 0);
  CHECK(no_deep.noise == 0);
  CHECK(no_deep.head == 56837);  // head unaffected
}

TEST_CASE("mode names round trip") {
  for (auto o : {PmcaOrdering::SaDa, PmcaOrdering::SaSa, PmcaOrdering::DaDa,
                 PmcaOrdering::DaSa})
    CHECK(ordering_from_name(ordering_name(o)) == o);
  for (auto m : {FusionMode::Add, FusionMode::RgbOnly, FusionMode::XOnly})
    CHECK(fusion_from_name(fusion_name(m)) == m);
  CHECK_THROWS_AS(ordering_from_name("sa-da"), std::invalid_argument);
  CHECK_THROWS_AS(fusion_from_name("both"), std::invalid_argument);
}

TEST_CASE("config validation rejects broken geometry") {
  ModelConfig cfg = tiny_config();
  cfg.T = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.backbone.H_x = 33;  // not divisible by the patch size
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.deep_dprime = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("fresh adapters leave the forward pass unchanged") {
  Model model = assemble_model(tiny_config(5));
  TrainBatch batch = tiny_batch(model.config, 300);
  BranchImages rgb{batch.rgb_memory, batch.rgb_search};
  BranchImages x{batch.x_memory, batch.x_search};
  ForwardResult with = model_forward(model, rgb, x, true);
  ForwardResult without = model_forward(model, rgb, x, false);
  CHECK(max_abs_diff(with.fused_search, without.fused_search) <= 1e-10);
  CHECK(max_abs_diff(with.maps.cls, without.maps.cls) <= 1e-10);
  CHECK(max_abs_diff(with.maps.offset, without.maps.offset) <= 1e-10);
  CHECK(max_abs_diff(with.maps.size, without.maps.size) <= 1e-10);
}

TEST_CASE("forward output shapes follow the layout") {
  Model model = assemble_model(tiny_config(6));
  TrainBatch batch = tiny_batch(model.config, 310);
  BranchImages rgb{batch.rgb_memory, batch.rgb_search};
  BranchImages x{batch.x_memory, batch.x_search};
  ForwardResult fwd = model_forward(model, rgb, x);
  const TokenLayout lay = model.layout();
  CHECK(fwd.fused_search.shape() == Shape{1, lay.N_x, lay.C});
  CHECK(fwd.maps.S == 4);  // sqrt(16 search tokens)

  rgb.memory.pop_back();  // wrong memory length
  CHECK_THROWS_AS(model_forward(model, rgb, x), std::invalid_argument);
}

TEST_CASE("training never touches frozen parameters") {
  Model model = assemble_model(tiny_config(7));
  const std::uint64_t before = model.store.frozen_checksum();
  TrainBatch batch = tiny_batch(model.config, 320);
  AdamW opt;
  std::vector<double> head_before =
      model.params.head.cls_w1.data();
  for (int s = 0; s < 3; ++s) train_step(model, batch, opt, 4e-4);
  CHECK(model.store.frozen_checksum() == before);
  // while trainable parameters did move
  double moved = 0.0;
  const auto& after = model.params.head.cls_w1.data();
  for (std::size_t i = 0; i < after.size(); ++i)
    moved = std::max(moved, std::fabs(after[i] - head_before[i]));
  CHECK(moved > 0.0);
}

TEST_CASE("finalized stores reject trainability edits") {
  Model model = assemble_model(tiny_config(8));
  const std::string name = model.store.trainable_names().front();
  CHECK_THROWS_AS(model.store.set_trainable(name, false), std::runtime_error);
}

TEST_CASE("training trajectories are bitwise deterministic") {
  auto run = [&](std::vector<double>& losses) {
    Model model = assemble_model(tiny_config(9));
    AdamW opt;
    for (int s = 0; s < 3; ++s) {
      TrainBatch batch = tiny_batch(model.config, 400 + 7 * s);
      losses.push_back(train_step(model, batch, opt, lr_at(s, 3, 4e-4)));
    }
    return model.params.head.cls_w1.data();
  };
  std::vector<double> l1, l2;
  std::vector<double> w1 = run(l1);
  std::vector<double> w2 = run(l2);
  CHECK(l1 == l2);
  CHECK(w1 == w2);
}

TEST_CASE("loss decreases over a short overfit run") {
  Model model = assemble_model(tiny_config(10));
  TrainBatch batch = tiny_batch(model.config, 500);
  AdamW opt;
  const double first = train_step(model, batch, opt, 1e-3);
  double last = first;
  for (int s = 0; s < 30; ++s) last = train_step(model, batch, opt, 1e-3);
  CHECK(last < first);
}

TEST_CASE("fusion modes combine the two branches") {
  Tensor a = random_plane({1, 3, 4}, 600);
  Tensor b = random_plane({1, 3, 4}, 601);
  CHECK(max_abs_diff(fuse_branches(a, b, FusionMode::Add), add(a, b)) == 0.0);
  CHECK(max_abs_diff(fuse_branches(a, b, FusionMode::RgbOnly), a) == 0.0);
  CHECK(max_abs_diff(fuse_branches(a, b, FusionMode::XOnly), b) == 0.0);
  CHECK_THROWS_AS(fuse_branches(a, Tensor::zeros({1, 3, 5}), FusionMode::Add),
                  std::invalid_argument);
}

TEST_CASE("learning-rate schedule drops in the final fifth") {
  CHECK(lr_at(0, 100, 1.0) == 1.0);
  CHECK(lr_at(79, 100, 1.0) == 1.0);
  CHECK(lr_at(80, 100, 1.0) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(lr_at(99, 100, 1.0) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(lr_at(80, 100, 1.0, false) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(lr_at(3, 5, 1.0) == 1.0);
  CHECK(lr_at(4, 5, 1.0) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK_THROWS_AS(lr_at(0, 0, 1.0), std::invalid_argument);
}

TEST_CASE("optimizer follows the adaptive-moment update with decoupled decay") {
  auto one_step = [](double wd) {
    ParamStore store(1);
    Tensor w = store.create("w", {1}, ParamGroup::Head,
                            ParamInit::constant(1.0));
    store.finalize();
    Tensor loss = sum_all(mul(w, Tensor::from_data({1}, {1.0})));
    store.zero_grads();
    loss.backward();
    AdamWConfig cfg;
    cfg.weight_decay = wd;
    AdamW opt(cfg);
    opt.step(store, 0.1);
    return w.data()[0];
  };
  // bias-corrected m_hat = v_hat = 1 after one unit-gradient step
  const double expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
  CHECK(one_step(0.0) == doctest::Approx(expect).epsilon(1e-15));
  // decay acts on the raw value, independent of the gradient
  CHECK(one_step(0.0) - one_step(0.1) ==
        doctest::Approx(0.1 * 0.1 * 1.0).epsilon(1e-12));
}

TEST_CASE("crop windows are clamped inside the frame") {
  CropWindow w = resolve_crop_window(0.5, 0.5, 0.4);
  CHECK(w.x0 == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(w.y0 == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(w.side == 0.4);
  CHECK(resolve_crop_window(0.05, 0.5, 0.4).x0 == 0.0);
  CHECK(resolve_crop_window(0.95, 0.5, 0.4).x0 == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(resolve_crop_window(0.5, 0.5, 1.7).side == 1.0);
  CHECK(resolve_crop_window(0.5, 0.5, 1.7).x0 == 0.0);
  CHECK(resolve_crop_window(0.5, 0.5, -2.0).side == 1e-3);
}

TEST_CASE("full-window crop at native resolution is the identity") {
  Tensor frame = random_plane({2, 8, 8}, 700);
  Tensor out = crop_resize(frame, 0.5, 0.5, 1.0, 8, 8);
  REQUIRE(out.shape() == Shape{1, 2, 8, 8});
  for (std::size_t i = 0; i < frame.data().size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(frame.data()[i]).epsilon(1e-14));
}

TEST_CASE("bilinear sampling reproduces a linear ramp exactly") {
  const int W = 8, H = 4;
  std::vector<double> vals(H * W);
  for (int r = 0; r < H; ++r)
    for (int q = 0; q < W; ++q) vals[r * W + q] = q;
  Tensor frame = Tensor::from_data({1, H, W}, vals);
  // window x in [0.25, 0.75] sampled at 4 columns lands on integer pixels
  Tensor out = crop_resize(frame, 0.5, 0.5, 0.5, 2, 4);
  for (int r = 0; r < 2; ++r)
    for (int q = 0; q < 4; ++q)
      CHECK(out.at({0, 0, r, q}) == doctest::Approx(q + 2.0).epsilon(1e-13));
}

TEST_CASE("tracking a short clip yields a valid box per frame") {
  Model model = assemble_model(tiny_config(11));
  std::vector<DualFrame> frames;
  for (int f = 0; f < 4; ++f) {
    DualFrame df;
    df.rgb = random_plane({1, 32, 32}, 800 + f);
    df.x = random_plane({1, 32, 32}, 900 + f);
    df.gt = BBox{0.4 + 0.02 * f, 0.5, 0.3, 0.3};
    frames.push_back(df);
  }
  auto results = track_sequence(model, frames, SamplingStrategy::UniformInterval,
                                model.config.T);
  REQUIRE(results.size() == frames.size());
  // the first frame seeds the tracker with the ground truth
  CHECK(results[0].box.cx == frames[0].gt.cx);
  CHECK(results[0].box.w == frames[0].gt.w);
  for (const auto& r : results) {
    CHECK(r.box.w > 0.0);
    CHECK(r.box.h > 0.0);
    CHECK(r.box.x1() >= -1e-9);
    CHECK(r.box.y1() >= -1e-9);
    CHECK(r.box.x2() <= 1.0 + 1e-9);
    CHECK(r.box.y2() <= 1.0 + 1e-9);
    CHECK(r.confidence >= 0.0);
    CHECK(r.confidence <= 1.0);
  }
  CHECK_THROWS_AS(
      track_sequence(model, frames, SamplingStrategy::UniformInterval, 5),
      std::invalid_argument);
}
