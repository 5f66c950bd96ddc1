// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rpp/analysis.hpp"
#include "rpp/checkpoint.hpp"
#include "rpp/config.hpp"
#include "rpp/csv.hpp"
#include "rpp/data.hpp"
#include "rpp/errors.hpp"
#include "rpp/model.hpp"
#include "rpp/pruning.hpp"
#include "rpp/report.hpp"

namespace rpp {

inline const char* kOutputRootEnv = "RPP_OUT_ROOT";

// Relative output directories resolve against $RPP_OUT_ROOT when set.
inline std::filesystem::path resolve_out_dir(const std::string& out_dir) {
  std::filesystem::path p(out_dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv(kOutputRootEnv)) {
      return std::filesystem::path(root) / p;
    }
  }
  return p;
}

// One experiment per directory: the lock file blocks concurrent writers.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    std::filesystem::create_directories(dir);
    if (std::filesystem::exists(path_)) {
      throw RuntimeFailure("output directory '" + dir.string() +
                           "' is locked by another experiment (stale? remove " + path_.string() + ")");
    }
    std::ofstream f(path_);
    if (!f) throw RuntimeFailure("cannot create lock file '" + path_.string() + "'");
    f << "locked\n";
  }
  ~DirectoryLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

inline const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {"step",     "phase",    "loss",
                                                "mlm_acc",  "nsp_acc",  "task",
                                                "task_acc", "sparsity_prunable", "sparsity_all"};
  return cols;
}

inline void write_metrics_csv(const std::filesystem::path& path, const RunReport& report) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeFailure("cannot write metrics to '" + path.string() + "'");
  f << csv_row(metrics_columns());
  for (const MetricRow& r : report.rows) {
    f << csv_row({std::to_string(r.step), r.phase, format_optional(r.loss), format_optional(r.mlm_acc),
                  format_optional(r.nsp_acc), r.task, format_optional(r.task_acc),
                  format_double(r.sparsity_prunable), format_double(r.sparsity_all)});
  }
  if (!f) throw RuntimeFailure("write failed for '" + path.string() + "'");
}

struct AnalysisOutputs {
  std::vector<StructureProfile> profiles;
  NeighborOverlap overlap;
  bool has_overlap = false;
  ExactRatio sparsity_prunable;
  ExactRatio sparsity_all;
};

inline void write_analysis_csv(const std::filesystem::path& path, const AnalysisOutputs& a) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeFailure("cannot write analysis to '" + path.string() + "'");
  f << csv_row({"kind", "name", "rows", "cols", "density", "row_score", "col_score", "value", "num", "den"});
  for (const auto& p : a.profiles) {
    f << csv_row({"structure", p.name, std::to_string(p.rows), std::to_string(p.cols),
                  format_double(p.density), format_double(p.row_score), format_double(p.col_score), "", "",
                  ""});
  }
  f << csv_row({"sparsity", "prunable", "", "", "", "", "", format_double(a.sparsity_prunable.value()),
                std::to_string(a.sparsity_prunable.num), std::to_string(a.sparsity_prunable.den)});
  f << csv_row({"sparsity", "all", "", "", "", "", "", format_double(a.sparsity_all.value()),
                std::to_string(a.sparsity_all.num), std::to_string(a.sparsity_all.den)});
  if (a.has_overlap) {
    f << csv_row({"neighbor_overlap", "k=5", "", "", "", "", "", format_double(a.overlap.mean),
                  std::to_string(a.overlap.excluded), ""});
  }
  if (!f) throw RuntimeFailure("write failed for '" + path.string() + "'");
}

inline std::string sanitize_filename(const std::string& name) {
  std::string out = name;
  for (char& c : out) {
    if (c == '.' || c == '/' || c == ' ') c = '_';
  }
  return out;
}

// Structure profiles of all query and key projection matrices plus overall
// sparsity; overlap against a reference model when one is supplied.
inline AnalysisOutputs analyze_model(const ModelConfig& cfg, const ParamSet& params,
                                     const ParamSet* reference, int64_t k_neighbors = 5) {
  AnalysisOutputs out;
  SparsePattern pattern = extract_sparse_pattern(params);
  for (const auto& tp : pattern.tensors) {
    bool is_qk = tp.name.find("attn.wq") != std::string::npos ||
                 tp.name.find("attn.wk") != std::string::npos;
    if (!is_qk) continue;
    out.profiles.push_back(structure_profile(tp, cfg.hidden, cfg.hidden));
  }
  out.sparsity_prunable = pattern.ratio_prunable();
  out.sparsity_all = pattern.ratio_all();
  if (reference) {
    out.overlap = neighbor_overlap(*reference, params, k_neighbors);
    out.has_overlap = true;
  }
  return out;
}

inline void export_all_patterns(const ParamSet& params, const std::filesystem::path& dir) {
  SparsePattern pattern = extract_sparse_pattern(params);
  for (const auto& tp : pattern.tensors) {
    const Tensor& t = params.value(tp.name);
    if (t.rank() != 2) continue;
    export_pattern_pgm(tp.indices, t.dim(0), t.dim(1), dir / ("pattern_" + sanitize_filename(tp.name) + ".pgm"));
  }
}

struct ExperimentArtifacts {
  std::filesystem::path out_dir;
  std::filesystem::path metrics_csv;
  std::filesystem::path analysis_csv;
  RunReport report;
};

namespace detail {

inline uint64_t name_tag(const std::string& s) {
  uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (char c : s) {
    h ^= static_cast<uint8_t>(c);
    h *= 1099511628211ull;
  }
  return h;
}

inline void sidecar_log(const std::filesystem::path& dir, const std::string& line) {
  std::ofstream f(dir / "run.log", std::ios::app);
  auto now = std::chrono::system_clock::now().time_since_epoch();
  f << std::chrono::duration_cast<std::chrono::milliseconds>(now).count() << " " << line << "\n";
}

}  // namespace detail

// Full pipeline for one config: pre-train, prune per protocol, fine-tune
// every task against the universal pattern, analyze, persist. Everything
// except run.log is a pure function of the config.
inline ExperimentArtifacts run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentArtifacts art;
  art.out_dir = resolve_out_dir(cfg.out_dir);
  DirectoryLock lock(art.out_dir);
  detail::sidecar_log(art.out_dir, "experiment start, protocol=" + std::string(protocol_name(cfg.protocol)));

  OptimHyper hyper{cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.warmup_steps};
  CorpusStore corpus = gen_pretrain_corpus(cfg.data_seed, cfg.corpus_size, cfg.model);
  ParamSet params = build_model(cfg.model);
  RunReport report;

  if (cfg.pretrain_steps > 0) {
    OptimizerState opt = make_optimizer(params, hyper, cfg.pretrain_steps);
    TrainLoopConfig loop;
    loop.steps = cfg.pretrain_steps;
    loop.batch_size = cfg.batch_size;
    loop.mask_prob = cfg.mask_prob;
    loop.stream_seed = cfg.data_seed;
    loop.phase = "pretrain";
    run_pretrain_steps(cfg.model, params, corpus, opt, UpdateRule::adamw, nullptr, 0.0, nullptr, report,
                       loop);
  }
  ParamSet pretrained = params;
  save_checkpoint(art.out_dir / "pretrained.ckpt", Checkpoint{cfg.model, params, {}, {}, {}});

  SparsePattern pattern;
  bool run_finetune = true;
  switch (cfg.protocol) {
    case Protocol::plain: {
      pattern = extract_sparse_pattern(params);
      break;
    }
    case Protocol::rpp: {
      RppConfig rc;
      rc.gamma = cfg.rpp_gamma;
      rc.outer_iters = cfg.rpp_outer_iters;
      rc.inner_steps = cfg.rpp_inner_steps;
      rc.epsilon = cfg.rpp_epsilon;
      rc.exponent_mode = cfg.rpp_exponent_mode;
      rc.trim_target = cfg.rpp_trim_target;
      rc.optim = hyper;
      rc.batch_size = cfg.batch_size;
      rc.mask_prob = cfg.mask_prob;
      RppResult res = rpp_run(cfg.model, params, rc, corpus, cfg.data_seed);
      params = std::move(res.params);
      pattern = std::move(res.pattern);
      report.merge(res.report);
      save_checkpoint(art.out_dir / "pruned.ckpt",
                      Checkpoint{cfg.model, params, {}, std::move(res.reweight), pattern});
      break;
    }
    case Protocol::nip: {
      PruneSchedule sched;
      sched.delta_p = cfg.nip_delta_p;
      sched.iterations = cfg.nip_iterations;
      sched.retrain_steps = cfg.nip_retrain_steps;
      sched.retrain = hyper;
      sched.retrain.lr = cfg.nip_lr;
      sched.batch_size = cfg.batch_size;
      sched.mask_prob = cfg.mask_prob;
      auto iterations = nip_run(cfg.model, params, sched, corpus, cfg.data_seed);
      for (auto& it : iterations) report.merge(it.report);
      params = iterations.back().params;
      pattern = iterations.back().pattern;
      save_checkpoint(art.out_dir / "pruned.ckpt", Checkpoint{cfg.model, params, {}, {}, pattern});
      break;
    }
    case Protocol::penalty: {
      PenaltyResult res = penalty_baseline_run(cfg.model, params, cfg.penalty_gamma, cfg.penalty_steps,
                                               corpus, hyper, cfg.batch_size, cfg.mask_prob,
                                               cfg.data_seed);
      params = std::move(res.params);
      report.merge(res.report);
      pattern = extract_sparse_pattern(params);
      save_checkpoint(art.out_dir / "pruned.ckpt", Checkpoint{cfg.model, params, {}, {}, pattern});
      run_finetune = false;  // the penalty protocol exists for its loss curves
      break;
    }
  }

  if (run_finetune) {
    OptimHyper ft_hyper = hyper;
    ft_hyper.lr = cfg.finetune_lr;
    for (const std::string& task_name : cfg.tasks) {
      uint64_t tag = detail::name_tag(task_name);
      LabeledBatch store = gen_downstream_task(task_name, mix_seed(cfg.data_seed, tag),
                                               cfg.finetune_train_pool + cfg.finetune_eval_size, cfg.model);
      ParamSet head = build_task_head(task_name, store.classes, cfg.model.hidden, mix_seed(cfg.model.seed, tag));
      FinetuneResult ft = finetune_with_mask(cfg.model, params, pattern, head, store,
                                             cfg.finetune_train_pool, cfg.finetune_steps, cfg.batch_size,
                                             ft_hyper, mix_seed(cfg.data_seed, tag, 0xF7ull));
      report.merge(ft.report);
      save_checkpoint(art.out_dir / ("task_" + sanitize_filename(task_name) + ".ckpt"),
                      Checkpoint{cfg.model, merge_params(ft.model, ft.head), {}, {}, pattern});
    }
  }

  AnalysisOutputs analysis = analyze_model(cfg.model, params, cfg.pretrain_steps > 0 ? &pretrained : nullptr);
  art.analysis_csv = art.out_dir / "analysis.csv";
  write_analysis_csv(art.analysis_csv, analysis);
  export_all_patterns(params, art.out_dir);

  art.metrics_csv = art.out_dir / "metrics.csv";
  write_metrics_csv(art.metrics_csv, report);
  if (!report.warnings.empty()) {
    std::ofstream wf(art.out_dir / "warnings.txt", std::ios::binary | std::ios::trunc);
    for (const auto& w : report.warnings) wf << w << "\n";
  }
  art.report = std::move(report);
  detail::sidecar_log(art.out_dir, "experiment done");
  return art;
}

inline ExperimentArtifacts run_experiment(const std::filesystem::path& config_path) {
  return run_experiment(load_config(config_path));
}

// --- cross-run comparison ---

struct LoadedReport {
  std::string name;
  std::map<std::string, size_t> columns;
  std::vector<std::vector<std::string>> rows;
};

inline LoadedReport load_metrics_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot open report '" + path.string() + "'");
  LoadedReport rep;
  rep.name = path.stem().string();
  std::string line;
  if (!std::getline(f, line)) throw RuntimeFailure("empty report '" + path.string() + "'");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = csv_split(line);
  for (size_t i = 0; i < header.size(); ++i) rep.columns[header[i]] = i;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    rep.rows.push_back(csv_split(line));
  }
  return rep;
}

// Aligns reports on (prune-ratio bucket, metric); buckets are nearest 10%.
// Emits one value column per input and first-minus-second deltas.
inline void compare_runs(const std::vector<std::filesystem::path>& report_paths,
                         const std::filesystem::path& out_path) {
  if (report_paths.size() < 2) throw ConfigError("compare: need at least two reports");
  std::vector<LoadedReport> reports;
  for (const auto& p : report_paths) reports.push_back(load_metrics_csv(p));

  std::vector<std::string> missing;
  for (const auto& rep : reports) {
    for (const auto& col : metrics_columns()) {
      if (!rep.columns.count(col)) missing.push_back(rep.name + ":" + col);
    }
  }
  if (!missing.empty()) {
    std::string msg = "compare: reports missing columns:";
    for (const auto& m : missing) msg += " " + m;
    throw RuntimeFailure(msg);
  }

  using Key = std::pair<int, std::string>;  // (bucket in tenths, metric)
  std::vector<std::map<Key, double>> values(reports.size());
  std::set<Key> keys;
  for (size_t ri = 0; ri < reports.size(); ++ri) {
    const auto& rep = reports[ri];
    size_t c_sp = rep.columns.at("sparsity_prunable");
    size_t c_task = rep.columns.at("task");
    for (const auto& row : rep.rows) {
      int bucket = static_cast<int>(std::lround(parse_double(row[c_sp]) * 10.0));
      auto put = [&](const std::string& metric, const std::string& cell) {
        if (cell.empty()) return;
        Key k{bucket, metric};
        values[ri][k] = parse_double(cell);  // last occurrence wins
        keys.insert(k);
      };
      put("loss", row[rep.columns.at("loss")]);
      put("mlm_acc", row[rep.columns.at("mlm_acc")]);
      put("nsp_acc", row[rep.columns.at("nsp_acc")]);
      const std::string& task_name = row[c_task];
      if (!task_name.empty()) put("task_acc:" + task_name, row[rep.columns.at("task_acc")]);
    }
  }

  std::ofstream f(out_path, std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeFailure("cannot write comparison to '" + out_path.string() + "'");
  std::vector<std::string> header = {"ratio_bucket", "metric"};
  for (const auto& rep : reports) header.push_back(rep.name);
  header.push_back("delta_first_minus_second");
  f << csv_row(header);
  for (const auto& key : keys) {
    std::vector<std::string> row = {format_double(static_cast<double>(key.first) / 10.0), key.second};
    for (auto& vals : values) {
      auto it = vals.find(key);
      row.push_back(it == vals.end() ? "" : format_double(it->second));
    }
    auto a = values[0].find(key);
    auto b = values[1].find(key);
    row.push_back(a != values[0].end() && b != values[1].end() ? format_double(a->second - b->second)
                                                               : "");
    f << csv_row(row);
  }
  if (!f) throw RuntimeFailure("write failed for '" + out_path.string() + "'");
}

}  // namespace rpp
