#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "adeid/common.hpp"
#include "adeid/xalign.hpp"

namespace adeid::testing {

inline xalign::Matrix random_unit_rows(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  xalign::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
    m.row(i).normalize();
  }
  return m;
}

// A tiny batch for gradient checks: D <= 8, k_len <= 5, dropout off.
inline std::vector<xalign::TrainingInstance> tiny_batch(Rng& rng, const xalign::XAlignConfig& config,
                                                        std::size_t n) {
  std::vector<xalign::TrainingInstance> batch;
  for (std::size_t i = 0; i < n; ++i) {
    xalign::TrainingInstance inst;
    inst.document = random_unit_rows(rng, 2 + static_cast<Eigen::Index>(rng.index(4)), config.dim);
    inst.expert = random_unit_rows(rng, 1 + static_cast<Eigen::Index>(rng.index(3)), config.dim);
    inst.label = static_cast<int>(rng.index(kNumGradeClasses));
    for (auto r : rng.sample_without_replacement(static_cast<std::size_t>(config.t),
                                                 static_cast<std::size_t>(config.m))) {
      inst.aspect_rows.push_back(static_cast<int>(r));
    }
    batch.push_back(std::move(inst));
  }
  return batch;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace adeid::testing
