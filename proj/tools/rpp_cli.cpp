// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: pretrain / prune / finetune / analyze pipelines
// driven by a key-value config file. Flags override config keys; relative
// output directories resolve against $RPP_OUT_ROOT.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "rpp/rpp.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitInvariant = 4;

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
  std::string out_override;
};

rpp::ExperimentConfig load_with_overrides(const CommonArgs& args) {
  rpp::ExperimentConfig cfg =
      args.config_path.empty() ? rpp::ExperimentConfig{} : rpp::load_config(args.config_path);
  for (const std::string& kv : args.overrides) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos) {
      throw rpp::ConfigError("--set expects key=value, got '" + kv + "'");
    }
    rpp::config_set_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!args.out_override.empty()) cfg.out_dir = args.out_override;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
  auto* opt = cmd->add_option("-c,--config", args.config_path, "experiment config file");
  if (config_required) opt->required();
  cmd->add_option("--set", args.overrides, "override a config key (key=value), repeatable");
  cmd->add_option("-o,--out", args.out_override, "override out_dir");
}

rpp::OptimHyper hyper_of(const rpp::ExperimentConfig& cfg) {
  return {cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.warmup_steps};
}

rpp::ParamSet initial_params(const rpp::ExperimentConfig& cfg, const std::string& init_ckpt) {
  if (init_ckpt.empty()) return rpp::build_model(cfg.model);
  rpp::Checkpoint ckpt = rpp::load_checkpoint(init_ckpt);
  if (!(ckpt.config == cfg.model)) {
    throw rpp::ConfigError("checkpoint '" + init_ckpt + "' was written for a different model config");
  }
  return std::move(ckpt.params);
}

int cmd_pretrain(const CommonArgs& args) {
  rpp::ExperimentConfig cfg = load_with_overrides(args);
  fs::path out = rpp::resolve_out_dir(cfg.out_dir);
  rpp::DirectoryLock lock(out);
  rpp::CorpusStore corpus = rpp::gen_pretrain_corpus(cfg.data_seed, cfg.corpus_size, cfg.model);
  rpp::ParamSet params = rpp::build_model(cfg.model);
  rpp::RunReport report;
  if (cfg.pretrain_steps > 0) {
    rpp::OptimizerState opt = rpp::make_optimizer(params, hyper_of(cfg), cfg.pretrain_steps);
    rpp::TrainLoopConfig loop;
    loop.steps = cfg.pretrain_steps;
    loop.batch_size = cfg.batch_size;
    loop.mask_prob = cfg.mask_prob;
    loop.stream_seed = cfg.data_seed;
    loop.phase = "pretrain";
    rpp::run_pretrain_steps(cfg.model, params, corpus, opt, rpp::UpdateRule::adamw, nullptr, 0.0, nullptr,
                            report, loop);
  }
  rpp::save_checkpoint(out / "pretrained.ckpt", rpp::Checkpoint{cfg.model, params, {}, {}, {}});
  rpp::write_metrics_csv(out / "metrics.csv", report);
  std::cout << "pretrained " << cfg.pretrain_steps << " steps -> " << (out / "pretrained.ckpt").string()
            << "\n";
  return kExitOk;
}

int cmd_prune(const CommonArgs& args, const std::string& init_ckpt, rpp::Protocol protocol) {
  rpp::ExperimentConfig cfg = load_with_overrides(args);
  fs::path out = rpp::resolve_out_dir(cfg.out_dir);
  rpp::DirectoryLock lock(out);
  rpp::CorpusStore corpus = rpp::gen_pretrain_corpus(cfg.data_seed, cfg.corpus_size, cfg.model);
  rpp::ParamSet params = initial_params(cfg, init_ckpt);
  rpp::RunReport report;
  rpp::SparsePattern pattern;

  if (protocol == rpp::Protocol::rpp) {
    rpp::RppConfig rc;
    rc.gamma = cfg.rpp_gamma;
    rc.outer_iters = cfg.rpp_outer_iters;
    rc.inner_steps = cfg.rpp_inner_steps;
    rc.epsilon = cfg.rpp_epsilon;
    rc.exponent_mode = cfg.rpp_exponent_mode;
    rc.trim_target = cfg.rpp_trim_target;
    rc.optim = hyper_of(cfg);
    rc.batch_size = cfg.batch_size;
    rc.mask_prob = cfg.mask_prob;
    rpp::RppResult res = rpp::rpp_run(cfg.model, params, rc, corpus, cfg.data_seed);
    params = std::move(res.params);
    pattern = std::move(res.pattern);
    report.merge(res.report);
    rpp::save_checkpoint(out / "pruned.ckpt",
                         rpp::Checkpoint{cfg.model, params, {}, std::move(res.reweight), pattern});
  } else if (protocol == rpp::Protocol::nip) {
    rpp::PruneSchedule sched;
    sched.delta_p = cfg.nip_delta_p;
    sched.iterations = cfg.nip_iterations;
    sched.retrain_steps = cfg.nip_retrain_steps;
    sched.retrain = hyper_of(cfg);
    sched.retrain.lr = cfg.nip_lr;
    sched.batch_size = cfg.batch_size;
    sched.mask_prob = cfg.mask_prob;
    auto iterations = rpp::nip_run(cfg.model, params, sched, corpus, cfg.data_seed);
    for (auto& it : iterations) report.merge(it.report);
    params = iterations.back().params;
    pattern = iterations.back().pattern;
    rpp::save_checkpoint(out / "pruned.ckpt", rpp::Checkpoint{cfg.model, params, {}, {}, pattern});
  } else {
    rpp::PenaltyResult res =
        rpp::penalty_baseline_run(cfg.model, params, cfg.penalty_gamma, cfg.penalty_steps, corpus,
                                  hyper_of(cfg), cfg.batch_size, cfg.mask_prob, cfg.data_seed);
    params = std::move(res.params);
    report.merge(res.report);
    pattern = rpp::extract_sparse_pattern(params);
    rpp::save_checkpoint(out / "pruned.ckpt", rpp::Checkpoint{cfg.model, params, {}, {}, pattern});
  }

  rpp::write_metrics_csv(out / "metrics.csv", report);
  std::cout << "pruned model at sparsity " << pattern.ratio_prunable().value() << " -> "
            << (out / "pruned.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_finetune(const CommonArgs& args, const std::string& init_ckpt, const std::string& task_name) {
  rpp::ExperimentConfig cfg = load_with_overrides(args);
  if (!rpp::task::known(task_name)) throw rpp::ConfigError("unknown task '" + task_name + "'");
  fs::path out = rpp::resolve_out_dir(cfg.out_dir);
  rpp::DirectoryLock lock(out);
  rpp::Checkpoint ckpt = rpp::load_checkpoint(init_ckpt);
  if (!(ckpt.config == cfg.model)) {
    throw rpp::ConfigError("checkpoint '" + init_ckpt + "' was written for a different model config");
  }
  rpp::SparsePattern pattern =
      ckpt.pattern ? *ckpt.pattern : rpp::extract_sparse_pattern(ckpt.params);

  uint64_t tag = rpp::detail::name_tag(task_name);
  rpp::LabeledBatch store =
      rpp::gen_downstream_task(task_name, rpp::mix_seed(cfg.data_seed, tag),
                               cfg.finetune_train_pool + cfg.finetune_eval_size, cfg.model);
  rpp::ParamSet head =
      rpp::build_task_head(task_name, store.classes, cfg.model.hidden, rpp::mix_seed(cfg.model.seed, tag));
  rpp::OptimHyper ft = hyper_of(cfg);
  ft.lr = cfg.finetune_lr;
  rpp::FinetuneResult res =
      rpp::finetune_with_mask(cfg.model, ckpt.params, pattern, head, store, cfg.finetune_train_pool,
                              cfg.finetune_steps, cfg.batch_size, ft, rpp::mix_seed(cfg.data_seed, tag, 0xF7ull));
  rpp::save_checkpoint(out / ("task_" + rpp::sanitize_filename(task_name) + ".ckpt"),
                       rpp::Checkpoint{cfg.model, rpp::merge_params(res.model, res.head), {}, {}, pattern});
  rpp::write_metrics_csv(out / ("metrics_" + rpp::sanitize_filename(task_name) + ".csv"), res.report);
  std::cout << task_name << " eval accuracy " << res.eval_accuracy << "\n";
  return kExitOk;
}

int cmd_analyze(const std::string& model_ckpt, const std::string& reference_ckpt,
                const std::string& out_dir, int64_t k) {
  rpp::Checkpoint ckpt = rpp::load_checkpoint(model_ckpt);
  fs::path out = rpp::resolve_out_dir(out_dir);
  fs::create_directories(out);
  rpp::ParamSet reference;
  const rpp::ParamSet* ref = nullptr;
  if (!reference_ckpt.empty()) {
    rpp::Checkpoint rc = rpp::load_checkpoint(reference_ckpt);
    reference = std::move(rc.params);
    ref = &reference;
  }
  rpp::AnalysisOutputs analysis = rpp::analyze_model(ckpt.config, ckpt.params, ref, k);
  rpp::write_analysis_csv(out / "analysis.csv", analysis);
  rpp::export_all_patterns(ckpt.params, out);
  std::cout << "analysis written to " << (out / "analysis.csv").string() << "\n";
  return kExitOk;
}

int cmd_export_pattern(const std::string& model_ckpt, const std::string& out_dir) {
  rpp::Checkpoint ckpt = rpp::load_checkpoint(model_ckpt);
  fs::path out = rpp::resolve_out_dir(out_dir);
  fs::create_directories(out);
  rpp::export_all_patterns(ckpt.params, out);
  std::cout << "pattern images written to " << out.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reweighted proximal pruning toolkit for a desk-scale transformer encoder"};
  app.require_subcommand(1);

  CommonArgs run_args;
  auto* run_cmd = app.add_subcommand("run", "full pipeline for one config");
  add_common(run_cmd, run_args);

  CommonArgs pre_args;
  auto* pre_cmd = app.add_subcommand("pretrain", "pre-train from scratch");
  add_common(pre_cmd, pre_args);

  CommonArgs rpp_args;
  std::string rpp_init;
  auto* rpp_cmd = app.add_subcommand("prune-rpp", "reweighted proximal pruning");
  add_common(rpp_cmd, rpp_args);
  rpp_cmd->add_option("--init", rpp_init, "starting checkpoint (default: fresh init)");

  CommonArgs nip_args;
  std::string nip_init;
  auto* nip_cmd = app.add_subcommand("prune-nip", "iterative hard-threshold pruning with retraining");
  add_common(nip_cmd, nip_args);
  nip_cmd->add_option("--init", nip_init, "starting checkpoint (default: fresh init)");

  CommonArgs pen_args;
  std::string pen_init;
  auto* pen_cmd = app.add_subcommand("prune-penalty", "direct l1 subgradient baseline");
  add_common(pen_cmd, pen_args);
  pen_cmd->add_option("--init", pen_init, "starting checkpoint (default: fresh init)");

  CommonArgs ft_args;
  std::string ft_init, ft_task;
  auto* ft_cmd = app.add_subcommand("finetune", "fixed-mask fine-tuning on one task");
  add_common(ft_cmd, ft_args);
  ft_cmd->add_option("--init", ft_init, "pruned checkpoint")->required();
  ft_cmd->add_option("--task", ft_task, "task id")->required();

  std::string an_model, an_ref, an_out = "out";
  int64_t an_k = 5;
  auto* an_cmd = app.add_subcommand("analyze", "structure profiles, sparsity, neighbor overlap");
  an_cmd->add_option("--model", an_model, "checkpoint to analyze")->required();
  an_cmd->add_option("--reference", an_ref, "reference checkpoint for embedding overlap");
  an_cmd->add_option("-o,--out", an_out, "output directory");
  an_cmd->add_option("-k", an_k, "neighbor count");

  std::string ex_model, ex_out = "out";
  auto* ex_cmd = app.add_subcommand("export-pattern", "write sparse-pattern PGM images");
  ex_cmd->add_option("--model", ex_model, "checkpoint")->required();
  ex_cmd->add_option("-o,--out", ex_out, "output directory");

  std::string cmp_out;
  std::vector<std::string> cmp_inputs;
  auto* cmp_cmd = app.add_subcommand("compare", "align metrics CSVs by prune-ratio bucket");
  cmp_cmd->add_option("-o,--out", cmp_out, "comparison CSV path")->required();
  cmp_cmd->add_option("reports", cmp_inputs, "metrics CSV files")->expected(2, -1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run_cmd) {
      rpp::ExperimentArtifacts art = rpp::run_experiment(load_with_overrides(run_args));
      std::cout << "artifacts in " << art.out_dir.string() << "\n";
      return kExitOk;
    }
    if (*pre_cmd) return cmd_pretrain(pre_args);
    if (*rpp_cmd) return cmd_prune(rpp_args, rpp_init, rpp::Protocol::rpp);
    if (*nip_cmd) return cmd_prune(nip_args, nip_init, rpp::Protocol::nip);
    if (*pen_cmd) return cmd_prune(pen_args, pen_init, rpp::Protocol::penalty);
    if (*ft_cmd) return cmd_finetune(ft_args, ft_init, ft_task);
    if (*an_cmd) return cmd_analyze(an_model, an_ref, an_out, an_k);
    if (*ex_cmd) return cmd_export_pattern(ex_model, ex_out);
    if (*cmp_cmd) {
      std::vector<fs::path> inputs(cmp_inputs.begin(), cmp_inputs.end());
      rpp::compare_runs(inputs, cmp_out);
      std::cout << "comparison written to " << cmp_out << "\n";
      return kExitOk;
    }
  } catch (const rpp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const rpp::InvariantBreach& e) {
    std::cerr << "invariant breach: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
