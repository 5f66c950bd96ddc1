// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace rpp {

// One metrics time-series row. Optional fields render as empty CSV cells.
struct MetricRow {
  int64_t step = 0;
  std::string phase;
  std::optional<double> loss;
  std::optional<double> mlm_acc;
  std::optional<double> nsp_acc;
  std::string task;
  std::optional<double> task_acc;
  double sparsity_prunable = 0.0;
  double sparsity_all = 0.0;
};

struct RunReport {
  std::vector<MetricRow> rows;
  std::vector<std::string> warnings;
  // Emergent prune ratio at the end of each phase, keyed by phase label.
  std::map<std::string, double> phase_final_ratio;
  bool trimmed = false;  // set when a trim-to-ratio top-up ran

  void merge(const RunReport& other) {
    rows.insert(rows.end(), other.rows.begin(), other.rows.end());
    warnings.insert(warnings.end(), other.warnings.begin(), other.warnings.end());
    for (const auto& [k, v] : other.phase_final_ratio) phase_final_ratio[k] = v;
    trimmed = trimmed || other.trimmed;
  }
};

}  // namespace rpp
