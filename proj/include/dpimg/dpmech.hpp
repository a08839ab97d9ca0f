#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dpimg/error.hpp"
#include "dpimg/pca.hpp"
#include "dpimg/random.hpp"

namespace dpimg {

struct PrivacyParams {
  double epsilon = 1.0;
  std::size_t d = 20;
  double lambda_inv = 1e-6;
  std::uint64_t seed = 0;
  std::size_t batch_size = 100;

  void Validate() const {
    Require(epsilon > 0.0 && std::isfinite(epsilon),
            "epsilon must be positive, got " + std::to_string(epsilon));
    Require(d >= 1, "d must be at least 1");
    Require(lambda_inv > 0.0 && std::isfinite(lambda_inv),
            "lambda_inv must be positive, got " + std::to_string(lambda_inv));
    Require(batch_size >= 2, "batch_size must be at least 2, got " + std::to_string(batch_size));
  }
};

// Per-attribute sensitivity and the Laplace scale derived from it.
struct NoiseProfile {
  std::vector<double> sensitivities;
  std::vector<double> scales;

  bool operator==(const NoiseProfile&) const = default;
};

// Range of each reduced attribute over the batch: max_i p_il - min_j p_jl.
inline std::vector<double> AttributeSensitivity(const ReducedBatch& reduced) {
  Require(reduced.size() >= 2, "attribute_sensitivity: need at least 2 rows, got " +
                                   std::to_string(reduced.size()));
  std::vector<double> lo(reduced.coords.row(0).begin(), reduced.coords.row(0).end());
  std::vector<double> hi = lo;
  for (std::size_t i = 1; i < reduced.size(); ++i) {
    auto row = reduced.coords.row(i);
    for (std::size_t l = 0; l < reduced.d(); ++l) {
      lo[l] = std::min(lo[l], row[l]);
      hi[l] = std::max(hi[l], row[l]);
    }
  }
  std::vector<double> out(reduced.d());
  for (std::size_t l = 0; l < out.size(); ++l) out[l] = hi[l] - lo[l];
  return out;
}

inline std::vector<double> LaplaceScales(const std::vector<double>& sensitivities,
                                         double epsilon) {
  Require(epsilon > 0.0, "laplace_scales: epsilon must be positive, got " +
                             std::to_string(epsilon));
  std::vector<double> out(sensitivities.size());
  for (std::size_t l = 0; l < out.size(); ++l) out[l] = sensitivities[l] / epsilon;
  return out;
}

// Zero-mean Laplace(b) by inverse CDF. Consumes exactly one uniform; b == 0
// still consumes it so draw positions do not depend on the data.
inline double SampleLaplace(double scale, RandomStream& rng) {
  const double u = rng.NextOpenUnit() - 0.5;  // (-0.5, 0.5)
  if (scale == 0.0) return 0.0;
  const double magnitude = -scale * std::log1p(-2.0 * std::abs(u));
  return u < 0.0 ? -magnitude : magnitude;
}

struct PrivatizeResult {
  ReducedBatch noised;
  NoiseProfile profile;
  std::uint64_t draws = 0;
};

// Adds Laplace(sensitivity_l / epsilon) noise to every attribute of every row.
// Draws are consumed image-major, attribute-minor from `rng`.
inline PrivatizeResult Privatize(const ReducedBatch& reduced, const PrivacyParams& params,
                                 RandomStream& rng) {
  params.Validate();
  Require(reduced.d() == params.d, "privatize: batch has d=" + std::to_string(reduced.d()) +
                                       ", params request d=" + std::to_string(params.d));
  PrivatizeResult result;
  result.profile.sensitivities = AttributeSensitivity(reduced);
  result.profile.scales = LaplaceScales(result.profile.sensitivities, params.epsilon);
  result.noised = reduced;
  const std::uint64_t start = rng.draws();
  for (std::size_t i = 0; i < reduced.size(); ++i) {
    auto row = result.noised.coords.row(i);
    for (std::size_t l = 0; l < reduced.d(); ++l)
      row[l] += SampleLaplace(result.profile.scales[l], rng);
  }
  result.draws = rng.draws() - start;
  return result;
}

}  // namespace dpimg
