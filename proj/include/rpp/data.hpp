// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "rpp/errors.hpp"
#include "rpp/model_config.hpp"
#include "rpp/rng.hpp"

namespace rpp {

// One pre-training batch: token grid plus masking bookkeeping and
// pair-consecutiveness labels.
struct MaskedBatch {
  int64_t batch = 0;
  int64_t seq_len = 0;
  std::vector<int64_t> ids;                              // batch * seq_len, row-major
  std::vector<std::pair<int64_t, int64_t>> mask_positions;  // (row, col), sorted
  std::vector<int64_t> original_tokens;                  // parallel to mask_positions
  std::vector<int64_t> next_sentence_labels;             // per row, 1 = consecutive
  // Corpus segment indices each row was assembled from; lets tests check
  // that "consecutive" labels really mean adjacent corpus positions.
  std::vector<std::pair<int64_t, int64_t>> pair_provenance;

  int64_t id_at(int64_t b, int64_t s) const { return ids[static_cast<size_t>(b * seq_len + s)]; }
};

struct LabeledBatch {
  std::string task;
  int64_t classes = 0;
  int64_t batch = 0;
  int64_t seq_len = 0;
  std::vector<int64_t> ids;
  std::vector<int64_t> labels;
  // pair-order only: the (first, second) corpus segment each row pairs.
  std::vector<std::pair<int64_t, int64_t>> pair_provenance;
};

// Synthetic corpus: one continuous token stream from an order-2 Markov
// chain, cut into half-sequence segments. Segment i+1 continues segment i,
// which is what makes consecutive pairs detectable.
struct CorpusStore {
  uint64_t seed = 0;
  int64_t segment_len = 0;
  std::vector<std::vector<int64_t>> segments;

  int64_t size() const { return static_cast<int64_t>(segments.size()); }
};

namespace detail {

// Order-2 transition structure sized for desk-scale learning: the three
// candidate next-tokens are fixed permutations of the previous token, and
// the slot probabilities flip with the parity of the token before that. The
// support is cheap to memorize (3 * vocab associations) while the
// conditional law still depends on both context positions. Permutations
// keep the chain doubly stochastic, so the stationary law stays uniform and
// every token keeps appearing.
struct MarkovTable {
  int64_t vocab;
  std::vector<int64_t> perm;  // 3 * vocab

  MarkovTable(uint64_t seed, int64_t vocab_size) : vocab(vocab_size) {
    perm.resize(static_cast<size_t>(3 * vocab));
    for (int slot = 0; slot < 3; ++slot) {
      std::vector<int64_t> pool(static_cast<size_t>(vocab));
      for (int64_t i = 0; i < vocab; ++i) pool[static_cast<size_t>(i)] = i;
      Rng rng(mix_seed(seed, 0xC0DEull, static_cast<uint64_t>(slot)));
      for (int64_t i = vocab - 1; i > 0; --i) {
        int64_t j = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(i + 1)));
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
      }
      for (int64_t c = 0; c < vocab; ++c) {
        perm[static_cast<size_t>(slot * vocab + c)] = pool[static_cast<size_t>(c)];
      }
    }
  }

  int64_t sample(int64_t prev2, int64_t prev1, Rng& rng) const {
    double u = rng.next_double();
    int slot;
    if (prev2 % 2 == 0) {
      slot = u < 0.70 ? 0 : (u < 0.90 ? 1 : 2);
    } else {
      slot = u < 0.70 ? 2 : (u < 0.90 ? 1 : 0);
    }
    return perm[static_cast<size_t>(slot * vocab + prev1)];
  }
};

}  // namespace detail

inline CorpusStore gen_pretrain_corpus(uint64_t seed, int64_t size, const ModelConfig& config) {
  config.validate();
  if (size <= 0) throw ConfigError("corpus: size must be positive");
  CorpusStore store;
  store.seed = seed;
  store.segment_len = config.seq_len / 2;

  detail::MarkovTable table(seed, config.vocab);
  Rng rng(mix_seed(seed, 0x5EEDull));
  int64_t prev2 = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(config.vocab)));
  int64_t prev1 = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(config.vocab)));

  store.segments.reserve(static_cast<size_t>(size));
  for (int64_t s = 0; s < size; ++s) {
    std::vector<int64_t> seg(static_cast<size_t>(store.segment_len));
    for (int64_t i = 0; i < store.segment_len; ++i) {
      int64_t tok;
      if (s == 0 && i < 2) {
        tok = i == 0 ? prev2 : prev1;
      } else {
        tok = table.sample(prev2, prev1, rng);
      }
      seg[static_cast<size_t>(i)] = tok;
      prev2 = prev1;
      prev1 = tok;
    }
    store.segments.push_back(std::move(seg));
  }
  return store;
}

// Independent masking with probability mask_prob, redrawing any sequence
// that came out unmasked so the per-sequence minimum of one mask holds.
inline MaskedBatch mask_tokens(const std::vector<std::vector<int64_t>>& sequences, double mask_prob,
                               uint64_t seed, int64_t mask_token_id,
                               std::vector<int64_t> next_sentence_labels = {}) {
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) {
    throw ConfigError("mask_tokens: mask probability must lie in (0,1)");
  }
  if (sequences.empty()) throw ConfigError("mask_tokens: no sequences");
  MaskedBatch out;
  out.batch = static_cast<int64_t>(sequences.size());
  out.seq_len = static_cast<int64_t>(sequences.front().size());
  out.ids.reserve(static_cast<size_t>(out.batch * out.seq_len));
  Rng rng(mix_seed(seed, 0x3A5Cull));

  for (int64_t b = 0; b < out.batch; ++b) {
    const auto& seq = sequences[static_cast<size_t>(b)];
    if (static_cast<int64_t>(seq.size()) != out.seq_len) {
      throw ConfigError("mask_tokens: ragged sequence lengths");
    }
    std::vector<int64_t> cols;
    do {
      cols.clear();
      for (int64_t s = 0; s < out.seq_len; ++s) {
        if (rng.next_double() < mask_prob) cols.push_back(s);
      }
    } while (cols.empty());
    for (int64_t s = 0; s < out.seq_len; ++s) out.ids.push_back(seq[static_cast<size_t>(s)]);
    for (int64_t c : cols) {
      out.mask_positions.emplace_back(b, c);
      out.original_tokens.push_back(seq[static_cast<size_t>(c)]);
      out.ids[static_cast<size_t>(b * out.seq_len + c)] = mask_token_id;
    }
  }
  out.next_sentence_labels = std::move(next_sentence_labels);
  return out;
}

// Assembles a pre-training batch: half the rows pair consecutive segments
// (label 1), half pair a segment with a random non-successor (label 0).
inline MaskedBatch make_pretrain_batch(const CorpusStore& corpus, const ModelConfig& config,
                                       int64_t batch_size, double mask_prob, uint64_t seed) {
  if (corpus.size() < 3) throw ConfigError("pretrain batch: corpus too small");
  if (batch_size <= 0) throw ConfigError("pretrain batch: batch size must be positive");
  Rng rng(mix_seed(seed, 0xBA7C4ull));
  std::vector<std::vector<int64_t>> rows;
  std::vector<int64_t> labels;
  std::vector<std::pair<int64_t, int64_t>> provenance;
  rows.reserve(static_cast<size_t>(batch_size));
  for (int64_t b = 0; b < batch_size; ++b) {
    int64_t first = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(corpus.size() - 1)));
    int64_t label = (b % 2 == 0) ? 1 : 0;
    int64_t second;
    if (label == 1) {
      second = first + 1;
    } else {
      do {
        second = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(corpus.size())));
      } while (second == first + 1);
    }
    std::vector<int64_t> row = corpus.segments[static_cast<size_t>(first)];
    const auto& tail = corpus.segments[static_cast<size_t>(second)];
    row.insert(row.end(), tail.begin(), tail.end());
    rows.push_back(std::move(row));
    labels.push_back(label);
    provenance.emplace_back(first, second);
  }
  MaskedBatch out =
      mask_tokens(rows, mask_prob, mix_seed(seed, 0x9A5Cull), config.mask_token(), std::move(labels));
  out.pair_provenance = std::move(provenance);
  return out;
}

namespace task {
constexpr int64_t kMajorityTokenA = 3;
constexpr int64_t kMajorityTokenB = 5;
constexpr int64_t kMarkerToken = 7;
inline const char* kMajority = "majority-token";
inline const char* kPairOrder = "pair-order";
inline const char* kParity = "parity-of-marker";

inline bool known(const std::string& id) {
  return id == kMajority || id == kPairOrder || id == kParity;
}

inline std::vector<std::string> all() { return {kMajority, kPairOrder, kParity}; }
}  // namespace task

// Downstream task generators. Labels alternate 0/1 so balance holds within
// one instance. Every label is recomputable from the token sequence alone.
inline LabeledBatch gen_downstream_task(const std::string& task_id, uint64_t seed, int64_t size,
                                        const ModelConfig& config) {
  config.validate();
  if (size <= 0) throw ConfigError("task: size must be positive");
  if (!task::known(task_id)) throw ConfigError("task: unknown task id '" + task_id + "'");

  LabeledBatch out;
  out.task = task_id;
  out.classes = 2;
  out.batch = size;
  out.seq_len = config.seq_len;
  out.ids.reserve(static_cast<size_t>(size * config.seq_len));
  out.labels.reserve(static_cast<size_t>(size));
  Rng rng(mix_seed(seed, 0x7A53ull));
  const int64_t S = config.seq_len;

  if (task_id == task::kMajority) {
    // Whole sequence is tokens A and B; label 0 when A holds the majority.
    for (int64_t i = 0; i < size; ++i) {
      int64_t label = i % 2;
      int64_t majority_count = S / 2 + 2 + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(S / 4)));
      majority_count = std::min(majority_count, S);
      int64_t maj_tok = label == 0 ? task::kMajorityTokenA : task::kMajorityTokenB;
      int64_t min_tok = label == 0 ? task::kMajorityTokenB : task::kMajorityTokenA;
      std::vector<int64_t> seq(static_cast<size_t>(S), min_tok);
      std::vector<int64_t> pos(static_cast<size_t>(S));
      std::iota(pos.begin(), pos.end(), 0);
      for (int64_t p = S - 1; p > 0; --p) {
        int64_t q = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(p + 1)));
        std::swap(pos[static_cast<size_t>(p)], pos[static_cast<size_t>(q)]);
      }
      for (int64_t p = 0; p < majority_count; ++p) seq[static_cast<size_t>(pos[static_cast<size_t>(p)])] = maj_tok;
      out.ids.insert(out.ids.end(), seq.begin(), seq.end());
      out.labels.push_back(label);
    }
  } else if (task_id == task::kPairOrder) {
    // Adjacent Markov segments presented in order (label 0) or swapped (1).
    ModelConfig local = config;
    CorpusStore corpus = gen_pretrain_corpus(mix_seed(seed, 0xFACEull), std::max<int64_t>(size + 1, 64), local);
    for (int64_t i = 0; i < size; ++i) {
      int64_t label = i % 2;
      int64_t first = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(corpus.size() - 1)));
      const auto& a = corpus.segments[static_cast<size_t>(first)];
      const auto& b = corpus.segments[static_cast<size_t>(first + 1)];
      std::vector<int64_t> seq;
      if (label == 0) {
        seq = a;
        seq.insert(seq.end(), b.begin(), b.end());
      } else {
        seq = b;
        seq.insert(seq.end(), a.begin(), a.end());
      }
      out.ids.insert(out.ids.end(), seq.begin(), seq.end());
      out.labels.push_back(label);
      out.pair_provenance.emplace_back(first, first + 1);
    }
  } else {
    // parity-of-marker: label = (# marker tokens) mod 2; counts kept small.
    for (int64_t i = 0; i < size; ++i) {
      int64_t label = i % 2;
      int64_t count = label == 1 ? 1 : 2;
      std::vector<int64_t> seq(static_cast<size_t>(S));
      for (int64_t s = 0; s < S; ++s) {
        int64_t tok;
        do {
          tok = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(config.vocab)));
        } while (tok == task::kMarkerToken);
        seq[static_cast<size_t>(s)] = tok;
      }
      std::vector<int64_t> pos(static_cast<size_t>(S));
      std::iota(pos.begin(), pos.end(), 0);
      for (int64_t p = S - 1; p > 0; --p) {
        int64_t q = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(p + 1)));
        std::swap(pos[static_cast<size_t>(p)], pos[static_cast<size_t>(q)]);
      }
      for (int64_t c = 0; c < count; ++c) seq[static_cast<size_t>(pos[static_cast<size_t>(c)])] = task::kMarkerToken;
      out.ids.insert(out.ids.end(), seq.begin(), seq.end());
      out.labels.push_back(label);
    }
  }
  return out;
}

// Deterministic batch view: rows [start, start+count) of a task store.
inline LabeledBatch slice_batch(const LabeledBatch& store, int64_t start, int64_t count) {
  if (start < 0 || count <= 0 || start + count > store.batch) {
    throw RuntimeFailure("slice_batch: range outside store");
  }
  LabeledBatch out;
  out.task = store.task;
  out.classes = store.classes;
  out.batch = count;
  out.seq_len = store.seq_len;
  out.ids.assign(store.ids.begin() + static_cast<int64_t>(start * store.seq_len),
                 store.ids.begin() + static_cast<int64_t>((start + count) * store.seq_len));
  out.labels.assign(store.labels.begin() + start, store.labels.begin() + start + count);
  return out;
}

// Random-with-replacement batch drawn from the first `pool` rows.
inline LabeledBatch sample_batch(const LabeledBatch& store, int64_t pool, int64_t count, uint64_t seed) {
  if (pool <= 0 || pool > store.batch || count <= 0) throw RuntimeFailure("sample_batch: bad range");
  LabeledBatch out;
  out.task = store.task;
  out.classes = store.classes;
  out.batch = count;
  out.seq_len = store.seq_len;
  Rng rng(mix_seed(seed, 0x5A17ull));
  for (int64_t i = 0; i < count; ++i) {
    int64_t r = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(pool)));
    out.ids.insert(out.ids.end(), store.ids.begin() + r * store.seq_len,
                   store.ids.begin() + (r + 1) * store.seq_len);
    out.labels.push_back(store.labels[static_cast<size_t>(r)]);
  }
  return out;
}

}  // namespace rpp
