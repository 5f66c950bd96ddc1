// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rpp/errors.hpp"
#include "rpp/tensor.hpp"

namespace rpp {

// Named collection of dense weight tensors with prunability flags.
// Iteration order is creation order and is part of the determinism contract.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    bool prunable = false;
  };

  int add(std::string name, Tensor value, bool prunable) {
    if (index_.count(name)) throw RuntimeFailure("param '" + name + "' already defined");
    int id = static_cast<int>(entries_.size());
    index_.emplace(name, id);
    entries_.push_back(Entry{std::move(name), std::move(value), prunable});
    return id;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  int id_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw RuntimeFailure("unknown param '" + name + "'");
    return it->second;
  }

  Tensor& value(const std::string& name) { return entries_[static_cast<size_t>(id_of(name))].value; }
  const Tensor& value(const std::string& name) const {
    return entries_[static_cast<size_t>(id_of(name))].value;
  }

  Entry& entry(size_t i) { return entries_[i]; }
  const Entry& entry(size_t i) const { return entries_[i]; }
  size_t size() const { return entries_.size(); }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  int64_t total_count() const {
    int64_t n = 0;
    for (const Entry& e : entries_) n += e.value.numel();
    return n;
  }

  int64_t prunable_count() const {
    int64_t n = 0;
    for (const Entry& e : entries_) {
      if (e.prunable) n += e.value.numel();
    }
    return n;
  }

  bool all_finite() const {
    for (const Entry& e : entries_) {
      if (!e.value.all_finite()) return false;
    }
    return true;
  }

  // Mirror with every tensor zeroed; used for gradients and moments.
  ParamSet zeros_like() const {
    ParamSet out;
    for (const Entry& e : entries_) out.add(e.name, Tensor(e.value.shape()), e.prunable);
    return out;
  }

  bool bit_identical(const ParamSet& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (size_t i = 0; i < entries_.size(); ++i) {
      const Entry& a = entries_[i];
      const Entry& b = o.entries_[i];
      if (a.name != b.name || a.prunable != b.prunable) return false;
      if (a.value.shape() != b.value.shape()) return false;
      for (int64_t j = 0; j < a.value.numel(); ++j) {
        // Bitwise: distinguishes -0.0 from 0.0.
        if (std::bit_cast<uint64_t>(a.value[j]) != std::bit_cast<uint64_t>(b.value[j])) return false;
      }
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, int> index_;
};

// Concatenates two sets (names must not collide). Used to train a model
// together with a task head in one optimizer.
inline ParamSet merge_params(const ParamSet& a, const ParamSet& b) {
  ParamSet out;
  for (const auto& e : a.entries()) out.add(e.name, e.value, e.prunable);
  for (const auto& e : b.entries()) out.add(e.name, e.value, e.prunable);
  return out;
}

// Splits a merged set back into (rest, selected-by-prefix).
inline std::pair<ParamSet, ParamSet> split_params(const ParamSet& merged, const std::string& prefix) {
  ParamSet rest, picked;
  for (const auto& e : merged.entries()) {
    if (e.name.rfind(prefix, 0) == 0) {
      picked.add(e.name, e.value, e.prunable);
    } else {
      rest.add(e.name, e.value, e.prunable);
    }
  }
  return {std::move(rest), std::move(picked)};
}

}  // namespace rpp
