#include "CLI11.hpp"

#include "duotrack/model.hpp"
#include "duotrack/synth_bench.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace {

using namespace duotrack;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << content;
}

void print_audit(const ModelConfig& cfg) {
  const ParamAudit a = param_audit(cfg);
  const BackboneConfig& b = cfg.backbone;
  std::printf("geometry: depth %d  C %d  heads %d  patch %d  template %dx%d  search %dx%d\n",
              b.depth, b.C, b.heads, b.p, b.H_z, b.W_z, b.H_x, b.W_x);
  std::printf("adapter widths: stma_d %d  shallow_h %d  deep_dprime %d  T %d\n",
              cfg.stma_d, cfg.shallow_h, cfg.deep_dprime, cfg.T);
  std::printf("%-18s %12s\n", "group", "scalars");
  std::printf("%-18s %12lld\n", "stma", static_cast<long long>(a.stma));
  std::printf("%-18s %12lld\n", "shallow", static_cast<long long>(a.shallow));
  std::printf("%-18s %12lld\n", "deep", static_cast<long long>(a.deep));
  std::printf("%-18s %12lld\n", "noise", static_cast<long long>(a.noise));
  std::printf("%-18s %12lld\n", "adapter total",
              static_cast<long long>(a.adapter_total()));
  std::printf("%-18s %12lld\n", "head (separate)",
              static_cast<long long>(a.head));
  std::printf("%-18s %12lld\n", "frozen backbone",
              static_cast<long long>(a.frozen));
  std::printf("%-18s %12lld\n", "grand total",
              static_cast<long long>(a.grand_total()));
  std::printf("adapter fraction: %.4f%% of adapters+frozen\n",
              100.0 * a.adapter_fraction());
}

TrainBatch random_batch(const ModelConfig& cfg, std::uint64_t seed) {
  DeterministicRng rng(fnv1a_mix("cli-gradcheck", seed));
  const BackboneConfig& b = cfg.backbone;
  auto plane = [&](int h, int w) {
    std::vector<double> v(static_cast<std::size_t>(b.ch) * h * w);
    for (double& x : v) x = rng.uniform(0.1, 0.9);
    return Tensor::from_data({1, b.ch, h, w}, std::move(v));
  };
  TrainBatch batch;
  for (int t = 0; t < cfg.T; ++t) {
    batch.rgb_memory.push_back(plane(b.H_z, b.W_z));
    batch.x_memory.push_back(plane(b.H_z, b.W_z));
  }
  batch.rgb_search = plane(b.H_x, b.W_x);
  batch.x_search = plane(b.H_x, b.W_x);
  batch.gt.push_back(BBox{0.53, 0.41, 0.3, 0.26});
  return batch;
}

int run_gradcheck(int per_param) {
  ModelConfig cfg;
  cfg.backbone.depth = 1;
  cfg.seed = 7;
  Model model = assemble_model(cfg);
  // zero-init up-projections hide the upstream gradient paths, so nudge
  // every trainable tensor off the identity point first
  for (const std::string& name : model.store.trainable_names()) {
    DeterministicRng jitter(fnv1a_mix("gradcheck-jitter", fnv1a_mix(name, 5)));
    for (double& v : model.store.get(name).mutable_data())
      v += jitter.normal(0.05);
  }
  TrainBatch batch = random_batch(cfg, 11);
  // keep the check loss O(0.1): finite-difference noise scales with |loss|
  // and would swamp the 1e-8 relative-error floor at the raw scale
  auto loss_fn = [&]() {
    return scale(batch_loss_tensor(model, batch, true), 1e-3);
  };

  const ParamGroup groups[] = {ParamGroup::Stma, ParamGroup::Shallow,
                               ParamGroup::Deep, ParamGroup::Noise,
                               ParamGroup::Head};
  double worst = 0.0;
  for (ParamGroup g : groups) {
    std::vector<Tensor> params;
    for (const std::string& name : model.store.names()) {
      const ParamEntry& e = model.store.entry(name);
      if (e.group == g && e.trainable) params.push_back(e.tensor);
    }
    const std::string gname(group_name(g));
    if (params.empty()) {
      std::printf("%-8s (no parameters)\n", gname.c_str());
      continue;
    }
    const double err = grad_check(loss_fn, params, 1e-4, per_param);
    worst = std::max(worst, err);
    std::printf("%-8s max rel err %.3e over %zu tensors\n", gname.c_str(),
                err, params.size());
  }
  std::printf("overall max rel err %.3e (%s)\n", worst,
              worst < 1e-4 ? "ok" : "FAIL");
  return worst < 1e-4 ? 0 : 1;
}

int run_sample_plan(const std::string& strategy_str, int T, int C,
                    const std::vector<double>& scores) {
  const SamplingStrategy strategy = strategy_from_name(strategy_str);
  const std::vector<int> picks =
      assemble_memory_indices(strategy, T, C, scores);
  std::printf("frame,slot\n");
  for (std::size_t slot = 0; slot < picks.size(); ++slot)
    std::printf("%d,%zu\n", picks[slot], slot);
  return 0;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  ExperimentConfig cfg = experiment_config_from_json(read_file(path));
  cfg.model.validate();
  return cfg;
}

int run_train(const std::string& config_path, const std::string& out_dir) {
  namespace fs = std::filesystem;
  const ExperimentConfig cfg = load_experiment_config(config_path);
  Model model = assemble_model(cfg.model);
  const std::vector<TrainLogEntry> log = train_on_synthetic(model, cfg);
  fs::create_directories(out_dir);
  write_file((fs::path(out_dir) / "config.json").string(),
             experiment_config_to_json(cfg));
  write_file((fs::path(out_dir) / "metrics.jsonl").string(),
             metrics_to_jsonl(log));
  model.store.save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string());
  const EvalReport report = evaluate_model(model, cfg);
  write_file((fs::path(out_dir) / "report.json").string(),
             report_to_json(report));
  std::printf("steps %zu  final loss %.6f\n", log.size(),
              log.empty() ? 0.0 : log.back().loss);
  std::printf("mean_iou %.4f  success_auc %.4f  precision %.4f\n",
              report.mean_iou, report.success_auc, report.precision_at_r);
  for (const auto& [kind, v] : report.event_iou)
    std::printf("%s_iou %.4f (%d frames)\n", kind.c_str(), v,
                report.event_frames.at(kind));
  std::printf("outputs in %s\n", out_dir.c_str());
  return 0;
}

int run_eval(const std::string& checkpoint_path, std::string config_path,
             bool use_adapters) {
  namespace fs = std::filesystem;
  if (config_path.empty()) {
    const fs::path sibling = fs::path(checkpoint_path).parent_path() / "config.json";
    if (fs::exists(sibling)) config_path = sibling.string();
  }
  ExperimentConfig cfg;
  if (!config_path.empty()) cfg = load_experiment_config(config_path);
  Model model = assemble_model(cfg.model);
  model.store.load_checkpoint(checkpoint_path);
  const EvalReport report = evaluate_model(model, cfg, use_adapters);
  std::printf("%s", report_to_json(report).c_str());
  return 0;
}

int run_experiment_cmd(const std::string& config_path,
                       const std::string& out_dir) {
  const ExperimentConfig cfg = load_experiment_config(config_path);
  const ExperimentResult result = run_experiment(cfg, out_dir);
  std::printf("%s", summary_csv(result).c_str());
  return 0;
}

int run_gen_seq(std::uint64_t seed, int length, const std::string& out_dir,
                const std::string& config_path) {
  SynthConfig synth;
  if (!config_path.empty()) {
    synth = load_experiment_config(config_path).synth;
  }
  const SyntheticSequence seq = generate_sequence(seed, length, synth);
  save_sequence(seq, out_dir);
  std::printf("wrote %zu frames, %zu events to %s\n", seq.frames.size(),
              seq.events.size(), out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-adapter multimodal tracker"};
  app.require_subcommand(1);

  auto* audit = app.add_subcommand("audit", "parameter audit by group");
  bool full_scale = false;
  int stma_d = 16;
  audit->add_flag("--full-scale", full_scale,
                  "depth-12 / C-768 counting geometry");
  audit->add_option("--stma-d", stma_d, "temporal adapter bottleneck width");

  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient audit");
  int per_param = 24;
  gradcheck->add_option("--per-param", per_param,
                        "scalars checked per tensor (0 = all)");

  auto* plan = app.add_subcommand("sample-plan", "memory schedule as CSV");
  std::string strategy = "uniform";
  int plan_T = 3, plan_C = 0;
  std::vector<double> scores;
  plan->add_option("--strategy", strategy, "uniform | nearest | highest");
  plan->add_option("--T", plan_T, "memory slots");
  plan->add_option("--C", plan_C, "frames seen so far")->required();
  plan->add_option("--scores", scores,
                   "per-frame confidences (highest strategy)");

  auto* train = app.add_subcommand("train-synth", "train on synthetic data");
  std::string train_config, train_out = "run";
  train->add_option("--config", train_config, "experiment config JSON")
      ->required();
  train->add_option("--out", train_out, "output directory");

  auto* eval = app.add_subcommand("eval-synth", "evaluate a checkpoint");
  std::string eval_checkpoint, eval_config;
  bool no_adapters = false;
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint file")
      ->required();
  eval->add_option("--config", eval_config,
                   "experiment config JSON (default: sibling config.json)");
  eval->add_flag("--no-adapters", no_adapters, "bypass adapters at inference");

  auto* experiment =
      app.add_subcommand("experiment", "three-arm adapter ablation study");
  std::string exp_config, exp_out = "experiment";
  experiment->add_option("--config", exp_config, "experiment config JSON")
      ->required();
  experiment->add_option("--out", exp_out, "output directory");

  auto* gen = app.add_subcommand("gen-seq", "export a synthetic sequence");
  std::uint64_t gen_seed = 1;
  int gen_length = 32;
  std::string gen_out = "sequence", gen_config;
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--length", gen_length, "frame count");
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--config", gen_config,
                  "experiment config JSON supplying the synth section");

  CLI11_PARSE(app, argc, argv);

  try {
    if (audit->parsed()) {
      ModelConfig cfg = full_scale ? full_scale_config(stma_d) : ModelConfig{};
      if (!full_scale) cfg.stma_d = stma_d;
      print_audit(cfg);
      return 0;
    }
    if (gradcheck->parsed()) return run_gradcheck(per_param);
    if (plan->parsed())
      return run_sample_plan(strategy, plan_T, plan_C, scores);
    if (train->parsed()) return run_train(train_config, train_out);
    if (eval->parsed())
      return run_eval(eval_checkpoint, eval_config, !no_adapters);
    if (experiment->parsed()) return run_experiment_cmd(exp_config, exp_out);
    if (gen->parsed())
      return run_gen_seq(gen_seed, gen_length, gen_out, gen_config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
