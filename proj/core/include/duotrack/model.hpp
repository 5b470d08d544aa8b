#pragma once

#include "duotrack/backbone.hpp"
#include "duotrack/head.hpp"
#include "duotrack/memory_bank.hpp"
#include "duotrack/param_store.hpp"
#include "duotrack/pmca.hpp"
#include "duotrack/stma.hpp"
#include "duotrack/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace duotrack {

// Adapter types at the two block stages: first letter = attention stage,
// second = MLP stage. S = shallow bridge, D = deep gated pixel-wise.
enum class PmcaOrdering { SaDa, SaSa, DaDa, DaSa };
enum class FusionMode { Add, RgbOnly, XOnly };

PmcaOrdering ordering_from_name(const std::string& name);
std::string ordering_name(PmcaOrdering o);
FusionMode fusion_from_name(const std::string& name);
std::string fusion_name(FusionMode m);

struct ModelConfig {
  BackboneConfig backbone;
  int T = 3;
  int stma_d = 16;
  int shallow_h = 8;
  int deep_dprime = 4;
  PmcaOrdering ordering = PmcaOrdering::SaDa;
  bool stma_shared = false;
  bool enable_stma = true;
  bool enable_shallow = true;
  bool enable_deep = true;
  FusionMode fusion = FusionMode::Add;
  std::uint64_t seed = 1;

  TokenLayout layout() const;
  void validate() const;
};

struct PmcaSlot {
  enum class Type { None, Shallow, Deep };
  Type type = Type::None;
  ShallowAdapterParams shallow;
  DeepAdapterParams deep_rgb, deep_x;
};

struct ModelParams {
  BackboneParams backbone;
  std::vector<StmaParams> stma_rgb, stma_x;  // per block; equal when shared
  std::vector<PmcaSlot> slot_attn, slot_mlp;
  HeadParams head;
};

// Declares every parameter of the configured model through the sink, in a
// fixed order. Assembly and the analytic audit both go through here.
ModelParams declare_model_params(ParamSink& sink, const ModelConfig& config);

struct Model {
  ModelConfig config;
  ParamStore store;
  ModelParams params;

  TokenLayout layout() const { return config.layout(); }
};

// Builds the store, freezes the backbone, locks trainable flags.
Model assemble_model(const ModelConfig& config);

struct ParamAudit {
  std::int64_t stma = 0, shallow = 0, deep = 0, noise = 0, head = 0;
  std::int64_t frozen = 0;

  std::int64_t adapter_total() const { return stma + shallow + deep + noise; }
  std::int64_t trainable_total() const { return adapter_total() + head; }
  std::int64_t grand_total() const { return trainable_total() + frozen; }
  // headline fraction: adapters over adapters + frozen core (head is
  // reported separately)
  double adapter_fraction() const {
    return static_cast<double>(adapter_total()) /
           static_cast<double>(adapter_total() + frozen);
  }
};

ParamAudit audit_store(const ParamStore& store);
ParamAudit param_audit(const ModelConfig& config);
// depth 12, C 768, heads 12, p 16, 256/128 inputs, 3 channels
ModelConfig full_scale_config(int stma_d);

struct BranchImages {
  std::vector<Tensor> memory;  // T frames, each B×ch×H_z×W_z
  Tensor search;               // B×ch×H_x×W_x
};

struct ForwardResult {
  HeadMaps maps;
  Tensor fused_search;       // head input, B×N_x×C
  Tensor rgb_search_tokens;  // per-branch encoder outputs
  Tensor x_search_tokens;
};

ForwardResult model_forward(const Model& model, const BranchImages& rgb,
                            const BranchImages& x, bool use_adapters = true);

Tensor fuse_branches(const Tensor& y_rgb, const Tensor& y_x, FusionMode mode);

struct TrainBatch {
  std::vector<Tensor> rgb_memory, x_memory;  // T frames, each B×ch×H_z×W_z
  Tensor rgb_search, x_search;               // B×ch×H_x×W_x
  std::vector<BBox> gt;                      // per batch element
};

struct AdamWConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Decoupled-weight-decay adaptive-moment optimizer over the store's
// trainable entries. Moment buffers are keyed by parameter name.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {});
  void step(ParamStore& store, double lr);
  int steps_taken() const { return t_; }

 private:
  AdamWConfig cfg_;
  int t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// Base rate, dropped in the final 20% of the run: to 0.1x under the default
// reading, to 0.9x under the alternative.
double lr_at(int step, int total_steps, double base_lr,
             bool tenth_window = true);

// One optimization step; returns the scalar loss. Frozen parameters are
// untouched by construction (no gradients reach them).
double train_step(Model& model, const TrainBatch& batch, AdamW& opt,
                  double lr);

// Loss of a batch without any parameter update.
double batch_loss(Model& model, const TrainBatch& batch,
                  bool use_adapters = true);

// Same loss kept on the tape, for gradient checking.
Tensor batch_loss_tensor(const Model& model, const TrainBatch& batch,
                         bool use_adapters = true);

struct DualFrame {
  Tensor rgb, x;  // ch×H×W planes
  BBox gt;        // normalized frame coordinates
};

// Square sampling window in normalized frame coordinates, clamped so it
// never leaves the frame.
struct CropWindow {
  double x0 = 0.0, y0 = 0.0, side = 1.0;
};

CropWindow resolve_crop_window(double cx, double cy, double side);

// Bilinear crop of the resolved window resized to out_h×out_w. Returns
// 1×ch×out_h×out_w.
Tensor crop_resize(const Tensor& frame, double cx, double cy, double side,
                   int out_h, int out_w);

struct TrackResult {
  BBox box;
  double confidence = 0.0;
};

std::vector<TrackResult> track_sequence(const Model& model,
                                        const std::vector<DualFrame>& frames,
                                        SamplingStrategy strategy, int T,
                                        bool use_adapters = true);

}  // namespace duotrack
