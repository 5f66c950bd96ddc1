// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "rpp/errors.hpp"
#include "rpp/params.hpp"
#include "rpp/pruning.hpp"

namespace rpp {

// Row/column structure of one pruned matrix. The structure scores measure
// how much of the surviving mass sits in near-dense (>= 0.9) columns or
// rows; a matrix whose nonzeros form whole columns scores 1.0.
struct StructureProfile {
  std::string name;
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> row_density;  // nonzero fraction per row
  std::vector<double> col_density;  // nonzero fraction per column
  double density = 0.0;             // overall nonzero fraction
  double row_score = 0.0;
  double col_score = 0.0;
};

constexpr double kStructureDensityThreshold = 0.9;

inline StructureProfile structure_profile(const std::string& name,
                                          const std::vector<int64_t>& zero_indices, int64_t rows,
                                          int64_t cols) {
  if (rows <= 0 || cols <= 0) throw RuntimeFailure("structure_profile: empty shape");
  StructureProfile out;
  out.name = name;
  out.rows = rows;
  out.cols = cols;

  std::vector<uint8_t> zero(static_cast<size_t>(rows * cols), 0);
  for (int64_t idx : zero_indices) {
    if (idx < 0 || idx >= rows * cols) {
      throw RuntimeFailure("structure_profile: index " + std::to_string(idx) + " outside matrix");
    }
    zero[static_cast<size_t>(idx)] = 1;
  }

  std::vector<int64_t> row_nnz(static_cast<size_t>(rows), 0);
  std::vector<int64_t> col_nnz(static_cast<size_t>(cols), 0);
  int64_t nnz = 0;
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) {
      if (!zero[static_cast<size_t>(r * cols + c)]) {
        ++row_nnz[static_cast<size_t>(r)];
        ++col_nnz[static_cast<size_t>(c)];
        ++nnz;
      }
    }
  }
  out.row_density.resize(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    out.row_density[static_cast<size_t>(r)] =
        static_cast<double>(row_nnz[static_cast<size_t>(r)]) / static_cast<double>(cols);
  }
  out.col_density.resize(static_cast<size_t>(cols));
  for (int64_t c = 0; c < cols; ++c) {
    out.col_density[static_cast<size_t>(c)] =
        static_cast<double>(col_nnz[static_cast<size_t>(c)]) / static_cast<double>(rows);
  }
  out.density = static_cast<double>(nnz) / static_cast<double>(rows * cols);

  // Fraction of nonzeros living in near-dense columns (resp. rows). A fully
  // zero matrix is vacuously structured.
  if (nnz == 0) {
    out.row_score = 1.0;
    out.col_score = 1.0;
    return out;
  }
  int64_t in_dense_cols = 0, in_dense_rows = 0;
  for (int64_t c = 0; c < cols; ++c) {
    if (out.col_density[static_cast<size_t>(c)] >= kStructureDensityThreshold) {
      in_dense_cols += col_nnz[static_cast<size_t>(c)];
    }
  }
  for (int64_t r = 0; r < rows; ++r) {
    if (out.row_density[static_cast<size_t>(r)] >= kStructureDensityThreshold) {
      in_dense_rows += row_nnz[static_cast<size_t>(r)];
    }
  }
  out.col_score = static_cast<double>(in_dense_cols) / static_cast<double>(nnz);
  out.row_score = static_cast<double>(in_dense_rows) / static_cast<double>(nnz);
  return out;
}

inline StructureProfile structure_profile(const TensorPattern& pattern, int64_t rows, int64_t cols) {
  if (rows * cols != pattern.numel) throw RuntimeFailure("structure_profile: shape/numel mismatch");
  return structure_profile(pattern.name, pattern.indices, rows, cols);
}

// Binary PGM (P5), maxval 255, one pixel per weight: 0 = pruned, 255 = kept.
inline void export_pattern_pgm(const std::vector<int64_t>& zero_indices, int64_t rows, int64_t cols,
                               const std::filesystem::path& path) {
  if (rows <= 0 || cols <= 0) throw RuntimeFailure("pgm export: empty shape");
  std::vector<uint8_t> pixels(static_cast<size_t>(rows * cols), 255);
  for (int64_t idx : zero_indices) {
    if (idx < 0 || idx >= rows * cols) {
      throw RuntimeFailure("pgm export: index " + std::to_string(idx) + " outside matrix");
    }
    pixels[static_cast<size_t>(idx)] = 0;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeFailure("pgm export: cannot open '" + path.string() + "'");
  f << "P5\n" << cols << " " << rows << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!f) throw RuntimeFailure("pgm export: write failed for '" + path.string() + "'");
}

struct PgmImage {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<int64_t> zero_indices;  // pixels with value 0
};

inline PgmImage parse_pattern_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("pgm parse: cannot open '" + path.string() + "'");
  std::string magic;
  f >> magic;
  if (magic != "P5") throw RuntimeFailure("pgm parse: '" + path.string() + "' is not binary PGM");
  int64_t cols = 0, rows = 0, maxval = 0;
  f >> cols >> rows >> maxval;
  if (!f || cols <= 0 || rows <= 0 || maxval != 255) {
    throw RuntimeFailure("pgm parse: bad header in '" + path.string() + "'");
  }
  f.get();  // single whitespace after maxval
  std::vector<uint8_t> pixels(static_cast<size_t>(rows * cols));
  f.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (f.gcount() != static_cast<std::streamsize>(pixels.size())) {
    throw RuntimeFailure("pgm parse: truncated pixel data in '" + path.string() + "'");
  }
  PgmImage img;
  img.rows = rows;
  img.cols = cols;
  for (int64_t i = 0; i < rows * cols; ++i) {
    if (pixels[static_cast<size_t>(i)] == 0) img.zero_indices.push_back(i);
  }
  return img;
}

struct NeighborOverlap {
  double mean = 0.0;
  int64_t excluded = 0;  // tokens with a zero-norm embedding row in either model
};

namespace detail {

// k nearest rows by cosine distance, self excluded, ties broken by token id.
inline std::vector<std::vector<int64_t>> cosine_neighbors(const Tensor& table,
                                                          const std::vector<int64_t>& valid, int64_t k) {
  int64_t width = table.dim(1);
  std::vector<double> norms(static_cast<size_t>(table.dim(0)), 0.0);
  for (int64_t t : valid) {
    const double* row = table.data() + t * width;
    double s = 0.0;
    for (int64_t j = 0; j < width; ++j) s += row[j] * row[j];
    norms[static_cast<size_t>(t)] = std::sqrt(s);
  }
  std::vector<std::vector<int64_t>> out(static_cast<size_t>(table.dim(0)));
  for (int64_t t : valid) {
    std::vector<std::pair<double, int64_t>> dist;
    dist.reserve(valid.size() - 1);
    const double* a = table.data() + t * width;
    for (int64_t u : valid) {
      if (u == t) continue;
      const double* b = table.data() + u * width;
      double dot = 0.0;
      for (int64_t j = 0; j < width; ++j) dot += a[j] * b[j];
      double cos = dot / (norms[static_cast<size_t>(t)] * norms[static_cast<size_t>(u)]);
      dist.emplace_back(1.0 - cos, u);
    }
    std::sort(dist.begin(), dist.end());
    int64_t take = std::min<int64_t>(k, static_cast<int64_t>(dist.size()));
    std::vector<int64_t> nb(static_cast<size_t>(take));
    for (int64_t i = 0; i < take; ++i) nb[static_cast<size_t>(i)] = dist[static_cast<size_t>(i)].second;
    std::sort(nb.begin(), nb.end());
    out[static_cast<size_t>(t)] = std::move(nb);
  }
  return out;
}

}  // namespace detail

// Mean per-token overlap of k-nearest embedding neighborhoods between two
// models sharing a vocabulary. Symmetric in its arguments.
inline NeighborOverlap neighbor_overlap(const ParamSet& model_a, const ParamSet& model_b, int64_t k) {
  const Tensor& ea = model_a.value("embed.tok");
  const Tensor& eb = model_b.value("embed.tok");
  if (ea.shape() != eb.shape()) throw RuntimeFailure("neighbor_overlap: embedding shapes differ");
  int64_t vocab = ea.dim(0), width = ea.dim(1);
  if (k < 1 || k >= vocab) throw RuntimeFailure("neighbor_overlap: need 1 <= k < vocab");

  NeighborOverlap out;
  std::vector<int64_t> valid;
  for (int64_t t = 0; t < vocab; ++t) {
    double na = 0.0, nb = 0.0;
    for (int64_t j = 0; j < width; ++j) {
      na += ea[t * width + j] * ea[t * width + j];
      nb += eb[t * width + j] * eb[t * width + j];
    }
    if (na > 0.0 && nb > 0.0) {
      valid.push_back(t);
    } else {
      ++out.excluded;
    }
  }
  if (static_cast<int64_t>(valid.size()) <= k) {
    throw RuntimeFailure("neighbor_overlap: fewer than k+1 usable embedding rows");
  }

  auto na = detail::cosine_neighbors(ea, valid, k);
  auto nb = detail::cosine_neighbors(eb, valid, k);
  double total = 0.0;
  for (int64_t t : valid) {
    std::vector<int64_t> both;
    std::set_intersection(na[static_cast<size_t>(t)].begin(), na[static_cast<size_t>(t)].end(),
                          nb[static_cast<size_t>(t)].begin(), nb[static_cast<size_t>(t)].end(),
                          std::back_inserter(both));
    total += static_cast<double>(both.size()) / static_cast<double>(k);
  }
  out.mean = total / static_cast<double>(valid.size());
  return out;
}

}  // namespace rpp
