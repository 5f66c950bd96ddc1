// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rpp/data.hpp"
#include "rpp/graph.hpp"
#include "rpp/model_config.hpp"
#include "rpp/params.hpp"
#include "rpp/rng.hpp"

namespace rpp {

// Parameter names double as the persistence schema, so they stay short and
// stable. Prunable entries are exactly the per-layer attention and FFN
// projection matrices; embeddings, biases, layer norms and heads are not.
inline ParamSet build_model(const ModelConfig& cfg) {
  cfg.validate();
  ParamSet p;
  Rng rng(mix_seed(cfg.seed, 0x414Dull));
  auto tn_matrix = [&](Shape shape) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.truncated_normal(0.02);
    return t;
  };

  p.add("embed.tok", tn_matrix({cfg.vocab, cfg.hidden}), false);
  p.add("embed.pos", tn_matrix({cfg.seq_len, cfg.hidden}), false);
  for (int64_t l = 0; l < cfg.layers; ++l) {
    std::string pre = "l" + std::to_string(l) + ".";
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      p.add(pre + "attn." + w, tn_matrix({cfg.hidden, cfg.hidden}), true);
    }
    for (const char* b : {"bq", "bk", "bv", "bo"}) {
      p.add(pre + "attn." + b, Tensor({cfg.hidden}), false);
    }
    p.add(pre + "ffn.w1", tn_matrix({cfg.hidden, cfg.ffn}), true);
    p.add(pre + "ffn.b1", Tensor({cfg.ffn}), false);
    p.add(pre + "ffn.w2", tn_matrix({cfg.ffn, cfg.hidden}), true);
    p.add(pre + "ffn.b2", Tensor({cfg.hidden}), false);
    p.add(pre + "ln1.g", Tensor::full({cfg.hidden}, 1.0), false);
    p.add(pre + "ln1.b", Tensor({cfg.hidden}), false);
    p.add(pre + "ln2.g", Tensor::full({cfg.hidden}, 1.0), false);
    p.add(pre + "ln2.b", Tensor({cfg.hidden}), false);
  }
  p.add("pool.w", tn_matrix({cfg.hidden, cfg.hidden}), false);
  p.add("pool.b", Tensor({cfg.hidden}), false);
  p.add("mlm.w", tn_matrix({cfg.hidden, cfg.vocab}), false);
  p.add("mlm.b", Tensor({cfg.vocab}), false);
  p.add("nsp.w", tn_matrix({cfg.hidden, 2}), false);
  p.add("nsp.b", Tensor({2}), false);
  return p;
}

// Fresh classification head for one downstream task.
inline ParamSet build_task_head(const std::string& task_name, int64_t classes, int64_t hidden,
                                uint64_t seed) {
  ParamSet p;
  Rng rng(mix_seed(seed, 0x4EADull));
  Tensor w({hidden, classes});
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.truncated_normal(0.02);
  p.add("task." + task_name + ".w", std::move(w), false);
  p.add("task." + task_name + ".b", Tensor({classes}), false);
  return p;
}

// Scaled dot-product attention, eager form: softmax(Q K^T / sqrt(d_k)) V.
// Accepts [seq,d] or batched [b,seq,d] operands.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t d_k) {
  if (d_k <= 0) throw RuntimeFailure("attention: d_k must be positive");
  if (q.rank() != k.rank() || k.rank() != v.rank()) {
    throw RuntimeFailure("attention: operands must share rank");
  }
  int s_axis = q.rank() - 2;
  if (q.rank() < 2 || k.dim(s_axis) != v.dim(s_axis) || q.dim(q.rank() - 1) != k.dim(k.rank() - 1)) {
    throw RuntimeFailure("attention: inconsistent shapes " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  Tensor scores = matmul(q, transpose_last2(k));
  double inv = 1.0 / std::sqrt(static_cast<double>(d_k));
  for (int64_t i = 0; i < scores.numel(); ++i) scores[i] *= inv;
  return matmul(softmax_last_axis(scores), v);
}

namespace detail {

// Builds the encoder stack over a fixed token grid; returns the node id of
// the final hidden states [batch, seq, hidden].
inline int encoder_hidden(ComputeGraph& g, const ModelConfig& cfg, const std::vector<int64_t>& ids,
                          int64_t batch) {
  int tok = g.param("embed.tok");
  int pos = g.param("embed.pos");
  int x = g.embed(tok, ids, {batch, cfg.seq_len});
  x = g.add(x, pos);
  int64_t d = cfg.head_dim();
  for (int64_t l = 0; l < cfg.layers; ++l) {
    std::string pre = "l" + std::to_string(l) + ".";
    int q = g.add(g.matmul(x, g.param(pre + "attn.wq")), g.param(pre + "attn.bq"));
    int k = g.add(g.matmul(x, g.param(pre + "attn.wk")), g.param(pre + "attn.bk"));
    int v = g.add(g.matmul(x, g.param(pre + "attn.wv")), g.param(pre + "attn.bv"));
    std::vector<int> heads;
    for (int64_t h = 0; h < cfg.heads; ++h) {
      int qh = g.slice_last(q, h * d, d);
      int kh = g.slice_last(k, h * d, d);
      int vh = g.slice_last(v, h * d, d);
      int scores = g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(d)));
      heads.push_back(g.matmul(g.softmax(scores), vh));
    }
    int o = g.add(g.matmul(g.concat_last(heads), g.param(pre + "attn.wo")), g.param(pre + "attn.bo"));
    x = g.layer_norm(g.add(x, o), g.param(pre + "ln1.g"), g.param(pre + "ln1.b"));
    int f = g.gelu(g.add(g.matmul(x, g.param(pre + "ffn.w1")), g.param(pre + "ffn.b1")));
    f = g.add(g.matmul(f, g.param(pre + "ffn.w2")), g.param(pre + "ffn.b2"));
    x = g.layer_norm(g.add(x, f), g.param(pre + "ln2.g"), g.param(pre + "ln2.b"));
  }
  return x;
}

// First-token hidden state through the tanh projection.
inline int pooled_first_token(ComputeGraph& g, const ModelConfig& cfg, int hidden, int64_t batch) {
  std::vector<int64_t> first_rows(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) first_rows[static_cast<size_t>(b)] = b * cfg.seq_len;
  int cls = g.gather_rows(hidden, first_rows);
  return g.tanh_act(g.add(g.matmul(cls, g.param("pool.w")), g.param("pool.b")));
}

inline int64_t argmax_row(const Tensor& t, int64_t row) {
  int64_t cols = t.last_dim();
  const double* p = t.data() + row * cols;
  int64_t best = 0;
  for (int64_t c = 1; c < cols; ++c) {
    if (p[c] > p[best]) best = c;
  }
  return best;
}

}  // namespace detail

struct PretrainGraph {
  ComputeGraph graph;
  int loss = -1;
  int mlm_logits = -1;
  int nsp_logits = -1;
};

inline PretrainGraph build_pretrain_graph(const ModelConfig& cfg, const MaskedBatch& batch) {
  if (batch.mask_positions.empty()) {
    throw RuntimeFailure("pretrain: batch has no masked positions (degenerate MLM loss)");
  }
  if (batch.seq_len != cfg.seq_len) throw RuntimeFailure("pretrain: batch/config seq_len mismatch");
  if (static_cast<int64_t>(batch.next_sentence_labels.size()) != batch.batch) {
    throw RuntimeFailure("pretrain: one pair label per sequence required");
  }
  PretrainGraph pg;
  ComputeGraph& g = pg.graph;
  int hidden = detail::encoder_hidden(g, cfg, batch.ids, batch.batch);

  std::vector<int64_t> mask_rows;
  mask_rows.reserve(batch.mask_positions.size());
  for (const auto& [b, s] : batch.mask_positions) mask_rows.push_back(b * cfg.seq_len + s);
  int hm = g.gather_rows(hidden, mask_rows);
  pg.mlm_logits = g.add(g.matmul(hm, g.param("mlm.w")), g.param("mlm.b"));
  int mlm_loss = g.cross_entropy(pg.mlm_logits, batch.original_tokens);

  int pooled = detail::pooled_first_token(g, cfg, hidden, batch.batch);
  pg.nsp_logits = g.add(g.matmul(pooled, g.param("nsp.w")), g.param("nsp.b"));
  int nsp_loss = g.cross_entropy(pg.nsp_logits, batch.next_sentence_labels);

  pg.loss = g.add(mlm_loss, nsp_loss);
  g.mark_output("loss", pg.loss);
  g.mark_output("mlm_logits", pg.mlm_logits);
  g.mark_output("nsp_logits", pg.nsp_logits);
  return pg;
}

struct PretrainMetrics {
  double loss = 0.0;
  double mlm_accuracy = 0.0;
  double nsp_accuracy = 0.0;
};

inline PretrainMetrics pretrain_metrics(const PretrainGraph& pg, const Evaluation& eval,
                                        const MaskedBatch& batch) {
  PretrainMetrics m;
  m.loss = eval.at(pg.loss)[0];
  const Tensor& ml = eval.at(pg.mlm_logits);
  int64_t hits = 0;
  for (size_t i = 0; i < batch.original_tokens.size(); ++i) {
    if (detail::argmax_row(ml, static_cast<int64_t>(i)) == batch.original_tokens[i]) ++hits;
  }
  m.mlm_accuracy = static_cast<double>(hits) / static_cast<double>(batch.original_tokens.size());
  const Tensor& nl = eval.at(pg.nsp_logits);
  int64_t nsp_hits = 0;
  for (int64_t b = 0; b < batch.batch; ++b) {
    if (detail::argmax_row(nl, b) == batch.next_sentence_labels[static_cast<size_t>(b)]) ++nsp_hits;
  }
  m.nsp_accuracy = static_cast<double>(nsp_hits) / static_cast<double>(batch.batch);
  return m;
}

inline PretrainMetrics forward_pretrain(const ModelConfig& cfg, const ParamSet& params,
                                        const MaskedBatch& batch) {
  PretrainGraph pg = build_pretrain_graph(cfg, batch);
  Evaluation eval = evaluate_graph(pg.graph, params);
  return pretrain_metrics(pg, eval, batch);
}

struct DownstreamGraph {
  ComputeGraph graph;
  int loss = -1;
  int logits = -1;
  std::string head_name;
};

// Classification over the pooled first-token representation. `params` must
// contain both the encoder weights and the task head entries.
inline DownstreamGraph build_downstream_graph(const ModelConfig& cfg, const LabeledBatch& batch) {
  if (batch.seq_len != cfg.seq_len) throw RuntimeFailure("downstream: batch/config seq_len mismatch");
  for (int64_t l : batch.labels) {
    if (l < 0 || l >= batch.classes) {
      throw RuntimeFailure("downstream: label " + std::to_string(l) + " outside " +
                           std::to_string(batch.classes) + " classes");
    }
  }
  DownstreamGraph dg;
  dg.head_name = "task." + batch.task;
  ComputeGraph& g = dg.graph;
  int hidden = detail::encoder_hidden(g, cfg, batch.ids, batch.batch);
  int pooled = detail::pooled_first_token(g, cfg, hidden, batch.batch);
  dg.logits = g.add(g.matmul(pooled, g.param(dg.head_name + ".w")), g.param(dg.head_name + ".b"));
  dg.loss = g.cross_entropy(dg.logits, batch.labels);
  g.mark_output("loss", dg.loss);
  g.mark_output("logits", dg.logits);
  return dg;
}

struct DownstreamMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline DownstreamMetrics downstream_metrics(const DownstreamGraph& dg, const Evaluation& eval,
                                            const LabeledBatch& batch) {
  DownstreamMetrics m;
  m.loss = eval.at(dg.loss)[0];
  const Tensor& lg = eval.at(dg.logits);
  int64_t hits = 0;
  for (int64_t b = 0; b < batch.batch; ++b) {
    if (detail::argmax_row(lg, b) == batch.labels[static_cast<size_t>(b)]) ++hits;
  }
  m.accuracy = static_cast<double>(hits) / static_cast<double>(batch.batch);
  return m;
}

inline DownstreamMetrics forward_downstream(const ModelConfig& cfg, const ParamSet& model,
                                            const ParamSet& head, const LabeledBatch& batch) {
  DownstreamGraph dg = build_downstream_graph(cfg, batch);
  ParamSet merged = merge_params(model, head);
  Evaluation eval = evaluate_graph(dg.graph, merged);
  return downstream_metrics(dg, eval, batch);
}

}  // namespace rpp
