// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rpp/csv.hpp"
#include "rpp/data.hpp"
#include "rpp/errors.hpp"
#include "rpp/model_config.hpp"
#include "rpp/optim.hpp"

namespace rpp {

enum class Protocol { plain, rpp, nip, penalty };

inline const char* protocol_name(Protocol p) {
  switch (p) {
    case Protocol::plain: return "plain";
    case Protocol::rpp: return "rpp";
    case Protocol::nip: return "nip";
    case Protocol::penalty: return "penalty";
  }
  return "?";
}

inline Protocol parse_protocol(const std::string& s) {
  if (s == "plain") return Protocol::plain;
  if (s == "rpp") return Protocol::rpp;
  if (s == "nip") return Protocol::nip;
  if (s == "penalty") return Protocol::penalty;
  throw ConfigError("unknown protocol '" + s + "' (plain|rpp|nip|penalty)");
}

// Experiment description. File format: one `key = value` per line, '#'
// comments, unknown keys rejected. Serialization emits every key in a fixed
// order with round-trippable numbers, so parse(serialize(c)) == c.
struct ExperimentConfig {
  ModelConfig model;

  uint64_t data_seed = 7;
  int64_t corpus_size = 2048;
  double mask_prob = 0.15;
  int64_t batch_size = 16;

  Protocol protocol = Protocol::plain;

  double lr = 1e-3;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-6;
  int64_t warmup_steps = 50;

  int64_t pretrain_steps = 500;

  double rpp_gamma = 1e-2;
  int64_t rpp_outer_iters = 3;
  int64_t rpp_inner_steps = 200;
  double rpp_epsilon = 1e-9;
  ExponentMode rpp_exponent_mode = ExponentMode::paper;
  double rpp_trim_target = -1.0;

  double nip_delta_p = 0.1;
  int64_t nip_iterations = 8;
  int64_t nip_retrain_steps = 150;
  double nip_lr = 1e-3;

  double penalty_gamma = 0.1;
  int64_t penalty_steps = 500;

  std::vector<std::string> tasks = task::all();
  int64_t finetune_steps = 200;
  double finetune_lr = 1e-3;
  int64_t finetune_train_pool = 512;
  int64_t finetune_eval_size = 256;

  std::string out_dir = "out";

  bool operator==(const ExperimentConfig&) const = default;

  void validate() const {
    model.validate();
    if (corpus_size < 3) throw ConfigError("data.corpus_size must be >= 3");
    if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("data.mask_prob must lie in (0,1)");
    if (batch_size < 1) throw ConfigError("data.batch must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("opt.lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("opt.weight_decay must be nonnegative");
    if (warmup_steps < 0) throw ConfigError("opt.warmup must be nonnegative");
    if (pretrain_steps < 0) throw ConfigError("pretrain.steps must be nonnegative");
    if (rpp_gamma < 0.0) throw ConfigError("rpp.gamma must be nonnegative");
    if (rpp_outer_iters < 1) throw ConfigError("rpp.outer_iters must be >= 1");
    if (rpp_inner_steps < 1) throw ConfigError("rpp.inner_steps must be >= 1");
    if (!(rpp_epsilon > 0.0)) throw ConfigError("rpp.epsilon must be positive");
    if (rpp_trim_target > 1.0) throw ConfigError("rpp.trim_target must be <= 1");
    if (!(nip_delta_p > 0.0 && nip_delta_p <= 1.0)) throw ConfigError("nip.delta_p must lie in (0,1]");
    if (nip_iterations < 1) throw ConfigError("nip.iterations must be >= 1");
    if (static_cast<double>(nip_iterations) * nip_delta_p > 1.0 + 1e-12) {
      throw ConfigError("nip.iterations * nip.delta_p must not exceed 1");
    }
    if (nip_retrain_steps < 1) throw ConfigError("nip.retrain_steps must be >= 1");
    if (!(nip_lr > 0.0)) throw ConfigError("nip.lr must be positive");
    if (penalty_gamma < 0.0) throw ConfigError("penalty.gamma must be nonnegative");
    if (penalty_steps < 1) throw ConfigError("penalty.steps must be >= 1");
    for (const auto& t : tasks) {
      if (!task::known(t)) throw ConfigError("finetune.tasks: unknown task '" + t + "'");
    }
    if (finetune_steps < 1) throw ConfigError("finetune.steps must be >= 1");
    if (!(finetune_lr > 0.0)) throw ConfigError("finetune.lr must be positive");
    if (finetune_train_pool < 1) throw ConfigError("finetune.train_pool must be >= 1");
    if (finetune_eval_size < 1) throw ConfigError("finetune.eval_size must be >= 1");
    if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  }
};

namespace detail {

inline int64_t parse_i64(const std::string& s) {
  int64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("not an integer: '" + s + "'");
  }
  return v;
}

inline uint64_t parse_u64(const std::string& s) {
  uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("not an unsigned integer: '" + s + "'");
  }
  return v;
}

inline double parse_f64(const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("not a number: '" + s + "'");
  }
  return v;
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
  return out;
}

inline std::string join_list(const std::vector<std::string>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += v[i];
  }
  return out;
}

}  // namespace detail

inline void config_set_key(ExperimentConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_f64;
  using detail::parse_i64;
  using detail::parse_u64;
  if (key == "model.layers") c.model.layers = parse_i64(value);
  else if (key == "model.hidden") c.model.hidden = parse_i64(value);
  else if (key == "model.heads") c.model.heads = parse_i64(value);
  else if (key == "model.vocab") c.model.vocab = parse_i64(value);
  else if (key == "model.seq_len") c.model.seq_len = parse_i64(value);
  else if (key == "model.ffn") c.model.ffn = parse_i64(value);
  else if (key == "model.seed") c.model.seed = parse_u64(value);
  else if (key == "data.seed") c.data_seed = parse_u64(value);
  else if (key == "data.corpus_size") c.corpus_size = parse_i64(value);
  else if (key == "data.mask_prob") c.mask_prob = parse_f64(value);
  else if (key == "data.batch") c.batch_size = parse_i64(value);
  else if (key == "protocol") c.protocol = parse_protocol(value);
  else if (key == "opt.lr") c.lr = parse_f64(value);
  else if (key == "opt.weight_decay") c.weight_decay = parse_f64(value);
  else if (key == "opt.beta1") c.beta1 = parse_f64(value);
  else if (key == "opt.beta2") c.beta2 = parse_f64(value);
  else if (key == "opt.eps") c.adam_eps = parse_f64(value);
  else if (key == "opt.warmup") c.warmup_steps = parse_i64(value);
  else if (key == "pretrain.steps") c.pretrain_steps = parse_i64(value);
  else if (key == "rpp.gamma") c.rpp_gamma = parse_f64(value);
  else if (key == "rpp.outer_iters") c.rpp_outer_iters = parse_i64(value);
  else if (key == "rpp.inner_steps") c.rpp_inner_steps = parse_i64(value);
  else if (key == "rpp.epsilon") c.rpp_epsilon = parse_f64(value);
  else if (key == "rpp.exponent_mode") {
    if (value == "paper") c.rpp_exponent_mode = ExponentMode::paper;
    else if (value == "candes") c.rpp_exponent_mode = ExponentMode::candes;
    else throw ConfigError("rpp.exponent_mode must be 'paper' or 'candes', got '" + value + "'");
  } else if (key == "rpp.trim_target") c.rpp_trim_target = parse_f64(value);
  else if (key == "nip.delta_p") c.nip_delta_p = parse_f64(value);
  else if (key == "nip.iterations") c.nip_iterations = parse_i64(value);
  else if (key == "nip.retrain_steps") c.nip_retrain_steps = parse_i64(value);
  else if (key == "nip.lr") c.nip_lr = parse_f64(value);
  else if (key == "penalty.gamma") c.penalty_gamma = parse_f64(value);
  else if (key == "penalty.steps") c.penalty_steps = parse_i64(value);
  else if (key == "finetune.tasks") c.tasks = detail::split_list(value);
  else if (key == "finetune.steps") c.finetune_steps = parse_i64(value);
  else if (key == "finetune.lr") c.finetune_lr = parse_f64(value);
  else if (key == "finetune.train_pool") c.finetune_train_pool = parse_i64(value);
  else if (key == "finetune.eval_size") c.finetune_eval_size = parse_i64(value);
  else if (key == "out_dir") c.out_dir = value;
  else throw ConfigError("unknown key '" + key + "'");
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::map<std::string, int> seen;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    size_t eq = s.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + s + "'");
    }
    std::string key = detail::trim(s.substr(0, eq));
    std::string value = detail::trim(s.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (seen.count(key)) {
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "' (first at line " +
                        std::to_string(seen[key]) + ")");
    }
    seen[key] = lineno;
    try {
      config_set_key(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

inline std::string serialize_config(const ExperimentConfig& c) {
  std::ostringstream out;
  auto kv = [&](const std::string& k, const std::string& v) { out << k << " = " << v << "\n"; };
  kv("model.layers", std::to_string(c.model.layers));
  kv("model.hidden", std::to_string(c.model.hidden));
  kv("model.heads", std::to_string(c.model.heads));
  kv("model.vocab", std::to_string(c.model.vocab));
  kv("model.seq_len", std::to_string(c.model.seq_len));
  kv("model.ffn", std::to_string(c.model.ffn));
  kv("model.seed", std::to_string(c.model.seed));
  kv("data.seed", std::to_string(c.data_seed));
  kv("data.corpus_size", std::to_string(c.corpus_size));
  kv("data.mask_prob", format_double(c.mask_prob));
  kv("data.batch", std::to_string(c.batch_size));
  kv("protocol", protocol_name(c.protocol));
  kv("opt.lr", format_double(c.lr));
  kv("opt.weight_decay", format_double(c.weight_decay));
  kv("opt.beta1", format_double(c.beta1));
  kv("opt.beta2", format_double(c.beta2));
  kv("opt.eps", format_double(c.adam_eps));
  kv("opt.warmup", std::to_string(c.warmup_steps));
  kv("pretrain.steps", std::to_string(c.pretrain_steps));
  kv("rpp.gamma", format_double(c.rpp_gamma));
  kv("rpp.outer_iters", std::to_string(c.rpp_outer_iters));
  kv("rpp.inner_steps", std::to_string(c.rpp_inner_steps));
  kv("rpp.epsilon", format_double(c.rpp_epsilon));
  kv("rpp.exponent_mode", exponent_mode_name(c.rpp_exponent_mode));
  kv("rpp.trim_target", format_double(c.rpp_trim_target));
  kv("nip.delta_p", format_double(c.nip_delta_p));
  kv("nip.iterations", std::to_string(c.nip_iterations));
  kv("nip.retrain_steps", std::to_string(c.nip_retrain_steps));
  kv("nip.lr", format_double(c.nip_lr));
  kv("penalty.gamma", format_double(c.penalty_gamma));
  kv("penalty.steps", std::to_string(c.penalty_steps));
  kv("finetune.tasks", detail::join_list(c.tasks));
  kv("finetune.steps", std::to_string(c.finetune_steps));
  kv("finetune.lr", format_double(c.finetune_lr));
  kv("finetune.train_pool", std::to_string(c.finetune_train_pool));
  kv("finetune.eval_size", std::to_string(c.finetune_eval_size));
  kv("out_dir", c.out_dir);
  return out.str();
}

}  // namespace rpp
