// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "rpp/errors.hpp"

namespace rpp {

// Encoder geometry. Defaults are the desk-scale setup used throughout the
// test and experiment configs.
struct ModelConfig {
  int64_t layers = 2;     // L
  int64_t hidden = 64;    // H
  int64_t heads = 4;      // A
  int64_t vocab = 64;
  int64_t seq_len = 16;
  int64_t ffn = 256;
  uint64_t seed = 1;

  int64_t head_dim() const { return hidden / heads; }
  int64_t mask_token() const { return vocab - 1; }

  void validate() const {
    if (layers <= 0 || hidden <= 0 || heads <= 0 || vocab <= 0 || seq_len <= 0 || ffn <= 0) {
      throw ConfigError("model config: all dimensions must be positive");
    }
    if (hidden % heads != 0) {
      throw ConfigError("model config: hidden size " + std::to_string(hidden) +
                        " not divisible by head count " + std::to_string(heads));
    }
    if (seq_len % 2 != 0) {
      throw ConfigError("model config: sequence length must be even (two segments per input)");
    }
    if (vocab < 8) {
      throw ConfigError("model config: vocabulary too small (needs room for task tokens)");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace rpp
