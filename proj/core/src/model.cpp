#include "duotrack/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace duotrack {

namespace {
[[noreturn]] void fail(const std::string& what) {
  throw std::invalid_argument("duotrack::model: " + what);
}
}  // namespace

PmcaOrdering ordering_from_name(const std::string& name) {
  if (name == "sa+da") return PmcaOrdering::SaDa;
  if (name == "sa+sa") return PmcaOrdering::SaSa;
  if (name == "da+da") return PmcaOrdering::DaDa;
  if (name == "da+sa") return PmcaOrdering::DaSa;
  fail("unknown ordering '" + name + "' (expected sa+da|sa+sa|da+da|da+sa)");
}

std::string ordering_name(PmcaOrdering o) {
  switch (o) {
    case PmcaOrdering::SaDa: return "sa+da";
    case PmcaOrdering::SaSa: return "sa+sa";
    case PmcaOrdering::DaDa: return "da+da";
    case PmcaOrdering::DaSa: return "da+sa";
  }
  fail("bad ordering value");
}

FusionMode fusion_from_name(const std::string& name) {
  if (name == "add") return FusionMode::Add;
  if (name == "rgb_only") return FusionMode::RgbOnly;
  if (name == "x_only") return FusionMode::XOnly;
  fail("unknown fusion '" + name + "' (expected add|rgb_only|x_only)");
}

std::string fusion_name(FusionMode m) {
  switch (m) {
    case FusionMode::Add: return "add";
    case FusionMode::RgbOnly: return "rgb_only";
    case FusionMode::XOnly: return "x_only";
  }
  fail("bad fusion value");
}

TokenLayout ModelConfig::layout() const {
  TokenLayout lay;
  lay.T = T;
  lay.N_z = backbone.N_z();
  lay.N_x = backbone.N_x();
  lay.C = backbone.C;
  return lay;
}

void ModelConfig::validate() const {
  backbone.validate();
  if (T <= 0) fail("memory size T must be positive");
  if (stma_d <= 0 || shallow_h <= 0 || deep_dprime <= 0)
    fail("adapter widths must be positive");
}

namespace {

PmcaSlot declare_slot(ParamSink& sink, const ModelConfig& config,
                      const std::string& prefix, bool shallow_type) {
  PmcaSlot slot;
  if (shallow_type) {
    if (!config.enable_shallow) return slot;
    slot.type = PmcaSlot::Type::Shallow;
    slot.shallow =
        make_shallow_params(sink, prefix, config.backbone.C, config.shallow_h);
  } else {
    if (!config.enable_deep) return slot;
    slot.type = PmcaSlot::Type::Deep;
    slot.deep_rgb = make_deep_params(sink, prefix + ".rgb", config.backbone.C,
                                     config.deep_dprime);
    slot.deep_x = make_deep_params(sink, prefix + ".x", config.backbone.C,
                                   config.deep_dprime);
  }
  return slot;
}

}  // namespace

ModelParams declare_model_params(ParamSink& sink, const ModelConfig& config) {
  config.validate();
  ModelParams mp;
  mp.backbone = make_backbone_params(sink, config.backbone);
  const int depth = config.backbone.depth;
  const bool attn_shallow = config.ordering == PmcaOrdering::SaDa ||
                            config.ordering == PmcaOrdering::SaSa;
  const bool mlp_shallow = config.ordering == PmcaOrdering::SaSa ||
                           config.ordering == PmcaOrdering::DaSa;
  for (int b = 0; b < depth; ++b) {
    const std::string blk = ".block" + std::to_string(b);
    if (config.enable_stma) {
      if (config.stma_shared) {
        StmaParams shared = make_stma_params(sink, "adapter.stma.shared" + blk,
                                             config.backbone.C, config.stma_d);
        mp.stma_rgb.push_back(shared);
        mp.stma_x.push_back(shared);
      } else {
        mp.stma_rgb.push_back(make_stma_params(sink, "adapter.stma.rgb" + blk,
                                               config.backbone.C,
                                               config.stma_d));
        mp.stma_x.push_back(make_stma_params(sink, "adapter.stma.x" + blk,
                                             config.backbone.C,
                                             config.stma_d));
      }
    }
    mp.slot_attn.push_back(
        declare_slot(sink, config, "adapter.pmca.attn" + blk, attn_shallow));
    mp.slot_mlp.push_back(
        declare_slot(sink, config, "adapter.pmca.mlp" + blk, mlp_shallow));
  }
  mp.head = make_head_params(sink, "head", config.backbone.C);
  return mp;
}

Model assemble_model(const ModelConfig& config) {
  Model model{config, ParamStore(config.seed), {}};
  model.params = declare_model_params(model.store, config);
  model.store.freeze_group(ParamGroup::Backbone);
  model.store.finalize();
  return model;
}

ParamAudit audit_store(const ParamStore& store) {
  ParamAudit audit;
  audit.stma = store.scalar_count(ParamGroup::Stma, true);
  audit.shallow = store.scalar_count(ParamGroup::Shallow, true);
  audit.deep = store.scalar_count(ParamGroup::Deep, true);
  audit.noise = store.scalar_count(ParamGroup::Noise, true);
  audit.head = store.scalar_count(ParamGroup::Head, true);
  audit.frozen = store.frozen_scalars();
  return audit;
}

ParamAudit param_audit(const ModelConfig& config) {
  ParamCounter counter;
  declare_model_params(counter, config);
  ParamAudit audit;
  audit.stma = counter.count(ParamGroup::Stma);
  audit.shallow = counter.count(ParamGroup::Shallow);
  audit.deep = counter.count(ParamGroup::Deep);
  audit.noise = counter.count(ParamGroup::Noise);
  audit.head = counter.count(ParamGroup::Head);
  audit.frozen = counter.count(ParamGroup::Backbone);
  return audit;
}

ModelConfig full_scale_config(int stma_d) {
  ModelConfig cfg;
  cfg.backbone.depth = 12;
  cfg.backbone.C = 768;
  cfg.backbone.heads = 12;
  cfg.backbone.p = 16;
  cfg.backbone.H_z = cfg.backbone.W_z = 128;
  cfg.backbone.H_x = cfg.backbone.W_x = 256;
  cfg.backbone.mlp_ratio = 4;
  cfg.backbone.ch = 3;
  cfg.T = 3;
  cfg.stma_d = stma_d;
  cfg.shallow_h = 8;
  cfg.deep_dprime = 4;
  return cfg;
}

namespace {

Tensor encode_branch(const Model& model, const BranchImages& images,
                     TokenLayout& lay) {
  const ModelConfig& cfg = model.config;
  if (static_cast<int>(images.memory.size()) != cfg.T)
    fail("expected " + std::to_string(cfg.T) + " memory frames, got " +
         std::to_string(images.memory.size()));
  std::vector<Tensor> mem_tokens;
  mem_tokens.reserve(images.memory.size());
  for (const Tensor& frame : images.memory)
    mem_tokens.push_back(patch_embed(frame, model.params.backbone));
  Tensor search_tokens = patch_embed(images.search, model.params.backbone);
  Tensor tokens = build_token_sequence(mem_tokens, search_tokens, lay);
  if (lay.N_z != cfg.backbone.N_z() || lay.N_x != cfg.backbone.N_x())
    fail("image geometry does not match the configured layout");
  return add_position(tokens, lay, model.params.backbone);
}

void slot_prompts(const PmcaSlot& slot, const Tensor& entry_rgb,
                  const Tensor& entry_x, Tensor& into_rgb, Tensor& into_x) {
  switch (slot.type) {
    case PmcaSlot::Type::None:
      return;
    case PmcaSlot::Type::Shallow:
      // bridge prompt: computed from one stream, added to the other
      into_rgb = shallow_adapter_forward(entry_x, slot.shallow);
      into_x = shallow_adapter_forward(entry_rgb, slot.shallow);
      return;
    case PmcaSlot::Type::Deep: {
      auto [p_rgb, p_x] =
          deep_adapter_forward(entry_rgb, entry_x, slot.deep_rgb, slot.deep_x);
      into_rgb = p_rgb;
      into_x = p_x;
      return;
    }
  }
}

}  // namespace

ForwardResult model_forward(const Model& model, const BranchImages& rgb,
                            const BranchImages& x, bool use_adapters) {
  TokenLayout lay_rgb, lay_x;
  Tensor t_rgb = encode_branch(model, rgb, lay_rgb);
  Tensor t_x = encode_branch(model, x, lay_x);
  const TokenLayout lay = lay_rgb;

  const ModelParams& mp = model.params;
  const int depth = model.config.backbone.depth;
  const bool stma_on = use_adapters && !mp.stma_rgb.empty();
  for (int b = 0; b < depth; ++b) {
    const BlockParams& blk = mp.backbone.blocks[b];
    Tensor entry_rgb = t_rgb;
    Tensor entry_x = t_x;
    if (stma_on) {
      t_rgb = add(t_rgb, stma_forward(entry_rgb, mp.stma_rgb[b], lay));
      t_x = add(t_x, stma_forward(entry_x, mp.stma_x[b], lay));
    }
    Tensor attn_into_rgb, attn_into_x, mlp_into_rgb, mlp_into_x;
    if (use_adapters) {
      slot_prompts(mp.slot_attn[b], entry_rgb, entry_x, attn_into_rgb,
                   attn_into_x);
      slot_prompts(mp.slot_mlp[b], entry_rgb, entry_x, mlp_into_rgb,
                   mlp_into_x);
    }
    t_rgb = add(t_rgb, attn_stage(t_rgb, blk));
    t_x = add(t_x, attn_stage(t_x, blk));
    if (attn_into_rgb.defined()) t_rgb = add(t_rgb, attn_into_rgb);
    if (attn_into_x.defined()) t_x = add(t_x, attn_into_x);
    t_rgb = add(t_rgb, mlp_stage(t_rgb, blk));
    t_x = add(t_x, mlp_stage(t_x, blk));
    if (mlp_into_rgb.defined()) t_rgb = add(t_rgb, mlp_into_rgb);
    if (mlp_into_x.defined()) t_x = add(t_x, mlp_into_x);
  }
  t_rgb = final_norm(t_rgb, mp.backbone);
  t_x = final_norm(t_x, mp.backbone);

  ForwardResult out;
  out.rgb_search_tokens = slice(t_rgb, 1, lay.search_offset(), lay.N_x);
  out.x_search_tokens = slice(t_x, 1, lay.search_offset(), lay.N_x);
  out.fused_search = fuse_branches(out.rgb_search_tokens, out.x_search_tokens,
                                   model.config.fusion);
  out.maps = head_forward(out.fused_search, mp.head);
  return out;
}

Tensor fuse_branches(const Tensor& y_rgb, const Tensor& y_x, FusionMode mode) {
  if (y_rgb.shape() != y_x.shape())
    fail("fusion inputs differ: " + shape_str(y_rgb.shape()) + " vs " +
         shape_str(y_x.shape()));
  switch (mode) {
    case FusionMode::Add: return add(y_rgb, y_x);
    case FusionMode::RgbOnly: return y_rgb;
    case FusionMode::XOnly: return y_x;
  }
  fail("bad fusion value");
}

AdamW::AdamW(AdamWConfig cfg) : cfg_(cfg) {}

void AdamW::step(ParamStore& store, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (const auto& [name, entry] : store.entries()) {
    if (!entry.trainable) continue;
    Tensor p = entry.tensor;
    if (!p.has_grad()) continue;
    const auto& g = p.grad();
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) m.assign(g.size(), 0.0);
    if (v.empty()) v.assign(g.size(), 0.0);
    auto& values = p.mutable_data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      values[i] -= lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) +
                         cfg_.weight_decay * values[i]);
    }
  }
}

double lr_at(int step, int total_steps, double base_lr, bool tenth_window) {
  if (total_steps <= 0) fail("total_steps must be positive");
  const bool final_window = step >= (total_steps * 4) / 5;
  if (!final_window) return base_lr;
  return base_lr * (tenth_window ? 0.1 : 0.9);
}

namespace {

struct BatchLossParts {
  Tensor loss;
  double value = 0.0;
};

BatchLossParts compute_batch_loss(const Model& model, const TrainBatch& batch,
                                  bool use_adapters) {
  const int B = batch.rgb_search.extent(0);
  if (static_cast<int>(batch.gt.size()) != B)
    fail("need one ground-truth box per batch element");
  BranchImages rgb{batch.rgb_memory, batch.rgb_search};
  BranchImages x{batch.x_memory, batch.x_search};
  ForwardResult fwd = model_forward(model, rgb, x, use_adapters);
  const int S = fwd.maps.S;

  std::vector<Tensor> targets;
  targets.reserve(B);
  for (const BBox& gt : batch.gt) targets.push_back(make_cls_target(gt, S));
  Tensor target = targets.size() == 1 ? targets[0] : concat(targets, 0);
  Tensor loss = focal_loss(fwd.maps.cls, target);

  Tensor box_terms;
  for (int b = 0; b < B; ++b) {
    const BBox& gt = batch.gt[b];
    const auto [i, j] = target_cell(gt, S);
    Tensor pred = box_at_cell(fwd.maps, b, i, j);
    Tensor gt_t = Tensor::from_data({4}, {gt.cx, gt.cy, gt.w, gt.h});
    Tensor term = scale(affine(giou_t(pred, gt_t), -1.0, 1.0), 2.0);
    term = add(term, scale(mean_all(abs(sub(pred, gt_t))), 5.0));
    box_terms = box_terms.defined() ? add(box_terms, term) : term;
  }
  loss = add(loss, scale(box_terms, 1.0 / B));

  BatchLossParts out;
  out.loss = loss;
  out.value = loss.value();
  if (!std::isfinite(out.value))
    throw std::runtime_error(
        "duotrack::model: non-finite training loss (value " +
        std::to_string(out.value) + ", batch size " + std::to_string(B) + ")");
  return out;
}

}  // namespace

double train_step(Model& model, const TrainBatch& batch, AdamW& opt,
                  double lr) {
  model.store.zero_grads();
  BatchLossParts parts = compute_batch_loss(model, batch, true);
  parts.loss.backward();
  opt.step(model.store, lr);
  return parts.value;
}

double batch_loss(Model& model, const TrainBatch& batch, bool use_adapters) {
  return compute_batch_loss(model, batch, use_adapters).value;
}

Tensor batch_loss_tensor(const Model& model, const TrainBatch& batch,
                         bool use_adapters) {
  return compute_batch_loss(model, batch, use_adapters).loss;
}

CropWindow resolve_crop_window(double cx, double cy, double side) {
  CropWindow w;
  w.side = std::clamp(side, 1e-3, 1.0);
  w.x0 = std::clamp(cx - w.side * 0.5, 0.0, 1.0 - w.side);
  w.y0 = std::clamp(cy - w.side * 0.5, 0.0, 1.0 - w.side);
  return w;
}

Tensor crop_resize(const Tensor& frame, double cx, double cy, double side,
                   int out_h, int out_w) {
  if (frame.rank() != 3) fail("expected frame ch×H×W");
  const int ch = frame.extent(0), H = frame.extent(1), W = frame.extent(2);
  const CropWindow win = resolve_crop_window(cx, cy, side);
  std::vector<double> out(static_cast<std::size_t>(ch) * out_h * out_w);
  const auto& src = frame.data();
  auto sample = [&](int c, double py, double px) {
    const int x_lo = std::clamp(static_cast<int>(std::floor(px)), 0, W - 1);
    const int y_lo = std::clamp(static_cast<int>(std::floor(py)), 0, H - 1);
    const int x_hi = std::min(x_lo + 1, W - 1);
    const int y_hi = std::min(y_lo + 1, H - 1);
    const double fx = std::clamp(px - x_lo, 0.0, 1.0);
    const double fy = std::clamp(py - y_lo, 0.0, 1.0);
    auto at = [&](int y, int x) {
      return src[(static_cast<std::size_t>(c) * H + y) * W + x];
    };
    return (1 - fy) * ((1 - fx) * at(y_lo, x_lo) + fx * at(y_lo, x_hi)) +
           fy * ((1 - fx) * at(y_hi, x_lo) + fx * at(y_hi, x_hi));
  };
  for (int c = 0; c < ch; ++c) {
    for (int r = 0; r < out_h; ++r) {
      const double v = win.y0 + (r + 0.5) * win.side / out_h;
      const double py = v * H - 0.5;
      for (int q = 0; q < out_w; ++q) {
        const double u = win.x0 + (q + 0.5) * win.side / out_w;
        const double px = u * W - 0.5;
        out[(static_cast<std::size_t>(c) * out_h + r) * out_w + q] =
            sample(c, py, px);
      }
    }
  }
  return Tensor::from_data({1, ch, out_h, out_w}, std::move(out));
}

std::vector<TrackResult> track_sequence(const Model& model,
                                        const std::vector<DualFrame>& frames,
                                        SamplingStrategy strategy, int T,
                                        bool use_adapters) {
  if (frames.empty()) fail("empty sequence");
  const BackboneConfig& bc = model.config.backbone;
  if (T != model.config.T)
    fail("memory size does not match the assembled model");

  std::vector<TrackResult> results;
  std::vector<Tensor> rgb_templates, x_templates;
  std::vector<double> confidences;

  auto store_template = [&](const DualFrame& frame, const BBox& box) {
    const double side = 2.0 * std::sqrt(box.w * box.h);
    rgb_templates.push_back(
        crop_resize(frame.rgb, box.cx, box.cy, side, bc.H_z, bc.W_z));
    x_templates.push_back(
        crop_resize(frame.x, box.cx, box.cy, side, bc.H_z, bc.W_z));
  };

  const BBox init = frames[0].gt.clamped();
  results.push_back({init, 1.0});
  store_template(frames[0], init);
  confidences.push_back(1.0);

  for (std::size_t f = 1; f < frames.size(); ++f) {
    const BBox prev = results.back().box;
    const double side = 4.0 * std::sqrt(prev.w * prev.h);
    const CropWindow win = resolve_crop_window(prev.cx, prev.cy, side);

    const std::vector<int> picks = assemble_memory_indices(
        strategy, T, static_cast<int>(rgb_templates.size()), confidences);
    BranchImages rgb, x;
    for (int idx : picks) {
      rgb.memory.push_back(rgb_templates[idx]);
      x.memory.push_back(x_templates[idx]);
    }
    rgb.search = crop_resize(frames[f].rgb, prev.cx, prev.cy, side, bc.H_x,
                             bc.W_x);
    x.search = crop_resize(frames[f].x, prev.cx, prev.cy, side, bc.H_x,
                           bc.W_x);

    ForwardResult fwd = model_forward(model, rgb, x, use_adapters);
    auto [crop_box, confidence] = decode_bbox(fwd.maps, 0);
    BBox box;
    box.cx = win.x0 + crop_box.cx * win.side;
    box.cy = win.y0 + crop_box.cy * win.side;
    box.w = crop_box.w * win.side;
    box.h = crop_box.h * win.side;
    box = box.clamped();

    results.push_back({box, confidence});
    store_template(frames[f], box);
    confidences.push_back(confidence);
  }
  return results;
}

}  // namespace duotrack
