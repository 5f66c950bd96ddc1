// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "rpp/errors.hpp"
#include "rpp/model_config.hpp"
#include "rpp/optim.hpp"
#include "rpp/params.hpp"
#include "rpp/pruning.hpp"

namespace rpp {

enum class CheckpointErrorKind { bad_magic, bad_checksum, bad_version, malformed };

class CheckpointError : public RuntimeFailure {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& msg)
      : RuntimeFailure(msg), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

struct Checkpoint {
  ModelConfig config;
  ParamSet params;
  std::optional<OptimizerState> optimizer;
  std::optional<ReweightState> reweight;
  std::optional<SparsePattern> pattern;
};

namespace detail {

constexpr char kCheckpointMagic[9] = "RPPCKPT1";
constexpr uint32_t kCheckpointVersion = 1;

inline uint32_t crc32(const uint8_t* data, size_t len) {
  static const std::array<uint32_t, 256> table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int b = 0; b < 8; ++b) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : (c >> 1);
      t[i] = c;
    }
    return t;
  }();
  uint32_t crc = 0xFFFFFFFFu;
  for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

// Little-endian byte stream writer.
class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    for (char c : s) buf_.push_back(static_cast<uint8_t>(c));
  }
  void tensor_values(const Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i) f64(t[i]);
  }
  const std::vector<uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const uint8_t* data, size_t len) : data_(data), len_(len) {}

  uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data_[pos_ + static_cast<size_t>(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data_[pos_ + static_cast<size_t>(i)]) << (8 * i);
    pos_ += 8;
    return v;
  }
  int64_t i64() { return static_cast<int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == len_; }

 private:
  void need(size_t n) {
    if (pos_ + n > len_) {
      throw CheckpointError(CheckpointErrorKind::malformed, "checkpoint: truncated record");
    }
  }
  const uint8_t* data_;
  size_t len_;
  size_t pos_ = 0;
};

inline void write_params(ByteWriter& w, const ParamSet& params) {
  w.u32(static_cast<uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    w.str(e.name);
    w.u8(e.prunable ? 1 : 0);
    w.u32(static_cast<uint32_t>(e.value.shape().size()));
    for (int64_t d : e.value.shape()) w.i64(d);
    w.tensor_values(e.value);
  }
}

inline ParamSet read_params(ByteReader& r) {
  ParamSet out;
  uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    bool prunable = r.u8() != 0;
    uint32_t ndim = r.u32();
    if (ndim == 0 || ndim > 8) {
      throw CheckpointError(CheckpointErrorKind::malformed, "checkpoint: bad tensor rank");
    }
    Shape shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) {
      shape[d] = r.i64();
      if (shape[d] <= 0) {
        throw CheckpointError(CheckpointErrorKind::malformed, "checkpoint: bad tensor dim");
      }
    }
    std::vector<double> values(static_cast<size_t>(shape_numel(shape)));
    for (double& v : values) v = r.f64();
    out.add(std::move(name), Tensor(std::move(shape), std::move(values)), prunable);
  }
  return out;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.u32(detail::kCheckpointVersion);
  uint32_t flags = 0;
  if (ckpt.optimizer) flags |= 1u;
  if (ckpt.reweight) flags |= 2u;
  if (ckpt.pattern) flags |= 4u;
  w.u32(flags);

  w.i64(ckpt.config.layers);
  w.i64(ckpt.config.hidden);
  w.i64(ckpt.config.heads);
  w.i64(ckpt.config.vocab);
  w.i64(ckpt.config.seq_len);
  w.i64(ckpt.config.ffn);
  w.u64(ckpt.config.seed);

  detail::write_params(w, ckpt.params);

  if (ckpt.optimizer) {
    const OptimizerState& o = *ckpt.optimizer;
    w.i64(o.step);
    w.f64(o.beta1);
    w.f64(o.beta2);
    w.f64(o.eps);
    w.f64(o.lr);
    w.f64(o.weight_decay);
    w.i64(o.schedule.warmup_steps);
    w.i64(o.schedule.total_steps);
    for (const Tensor& t : o.m) w.tensor_values(t);
    for (const Tensor& t : o.v) w.tensor_values(t);
  }
  if (ckpt.reweight) {
    const ReweightState& rw = *ckpt.reweight;
    w.i64(rw.outer_iter);
    w.f64(rw.gamma);
    w.f64(rw.epsilon);
    w.u8(rw.mode == ExponentMode::candes ? 0 : 1);
    for (size_t e = 0; e < ckpt.params.size(); ++e) {
      if (ckpt.params.entry(e).prunable) w.tensor_values(rw.alpha[e]);
    }
  }
  if (ckpt.pattern) {
    const SparsePattern& p = *ckpt.pattern;
    w.i64(p.prunable_total);
    w.i64(p.all_total);
    w.u32(static_cast<uint32_t>(p.tensors.size()));
    for (const auto& tp : p.tensors) {
      w.str(tp.name);
      w.i64(tp.numel);
      w.u64(tp.indices.size());
      for (int64_t idx : tp.indices) w.i64(idx);
    }
  }

  const auto& payload = w.bytes();
  uint32_t crc = detail::crc32(payload.data(), payload.size());

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeFailure("checkpoint: cannot open '" + path.string() + "' for writing");
  f.write(detail::kCheckpointMagic, 8);
  f.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  char trailer[4];
  for (int i = 0; i < 4; ++i) trailer[i] = static_cast<char>(crc >> (8 * i));
  f.write(trailer, 4);
  if (!f) throw RuntimeFailure("checkpoint: write failed for '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("checkpoint: cannot open '" + path.string() + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (bytes.size() < 12 || std::memcmp(bytes.data(), detail::kCheckpointMagic, 8) != 0) {
    throw CheckpointError(CheckpointErrorKind::bad_magic,
                          "checkpoint: '" + path.string() + "' has no RPPCKPT1 magic");
  }
  size_t payload_len = bytes.size() - 12;
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) {
    stored |= static_cast<uint32_t>(bytes[bytes.size() - 4 + static_cast<size_t>(i)]) << (8 * i);
  }
  uint32_t actual = detail::crc32(bytes.data() + 8, payload_len);
  if (stored != actual) {
    throw CheckpointError(CheckpointErrorKind::bad_checksum,
                          "checkpoint: checksum mismatch in '" + path.string() + "'");
  }

  detail::ByteReader r(bytes.data() + 8, payload_len);
  uint32_t version = r.u32();
  if (version != detail::kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorKind::bad_version,
                          "checkpoint: unsupported format version " + std::to_string(version));
  }
  uint32_t flags = r.u32();

  Checkpoint ckpt;
  ckpt.config.layers = r.i64();
  ckpt.config.hidden = r.i64();
  ckpt.config.heads = r.i64();
  ckpt.config.vocab = r.i64();
  ckpt.config.seq_len = r.i64();
  ckpt.config.ffn = r.i64();
  ckpt.config.seed = r.u64();

  ckpt.params = detail::read_params(r);

  if (flags & 1u) {
    OptimizerState o;
    o.step = r.i64();
    o.beta1 = r.f64();
    o.beta2 = r.f64();
    o.eps = r.f64();
    o.lr = r.f64();
    o.weight_decay = r.f64();
    o.schedule.warmup_steps = r.i64();
    o.schedule.total_steps = r.i64();
    for (const auto& e : ckpt.params.entries()) {
      Tensor t(e.value.shape());
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = r.f64();
      o.m.push_back(std::move(t));
    }
    for (const auto& e : ckpt.params.entries()) {
      Tensor t(e.value.shape());
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = r.f64();
      o.v.push_back(std::move(t));
    }
    ckpt.optimizer = std::move(o);
  }
  if (flags & 2u) {
    ReweightState rw;
    rw.outer_iter = r.i64();
    rw.gamma = r.f64();
    rw.epsilon = r.f64();
    rw.mode = r.u8() == 0 ? ExponentMode::candes : ExponentMode::paper;
    rw.alpha.resize(ckpt.params.size());
    for (size_t e = 0; e < ckpt.params.size(); ++e) {
      const auto& entry = ckpt.params.entry(e);
      if (!entry.prunable) continue;
      Tensor t(entry.value.shape());
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = r.f64();
      rw.alpha[e] = std::move(t);
    }
    ckpt.reweight = std::move(rw);
  }
  if (flags & 4u) {
    SparsePattern p;
    p.prunable_total = r.i64();
    p.all_total = r.i64();
    uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
      TensorPattern tp;
      tp.name = r.str();
      tp.numel = r.i64();
      uint64_t n = r.u64();
      tp.indices.resize(n);
      for (uint64_t j = 0; j < n; ++j) tp.indices[j] = r.i64();
      p.tensors.push_back(std::move(tp));
    }
    ckpt.pattern = std::move(p);
  }
  if (!r.done()) {
    throw CheckpointError(CheckpointErrorKind::malformed, "checkpoint: trailing bytes after records");
  }
  return ckpt;
}

}  // namespace rpp
