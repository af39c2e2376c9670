#pragma once

// Shared builders for synthetic test inputs.

#include <cmath>
#include <vector>

#include "mdlab/model.hpp"
#include "mdlab/prior.hpp"
#include "mdlab/rng.hpp"

namespace fixture {

// Random orthonormal d x k basis (Gram-Schmidt in double, stored as float).
inline mdlab::num::Matrix random_basis(std::size_t d, std::size_t k, std::uint64_t seed) {
  mdlab::Rng rng(seed);
  std::vector<std::vector<double>> cols;
  while (cols.size() < k) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    for (const auto& u : cols) {
      double p = 0;
      for (std::size_t i = 0; i < d; ++i) p += v[i] * u[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= p * u[i];
    }
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (auto& x : v) x /= n;
    cols.push_back(v);
  }
  mdlab::num::Matrix b(d, k);
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < d; ++i) b(i, c) = static_cast<float>(cols[c][i]);
  return b;
}

// Columns with entries in {0, +-1/2}: orthonormal exactly in float.
inline mdlab::num::Matrix exact_basis(std::size_t d, std::size_t k) {
  mdlab::num::Matrix b(d, k);
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < 4; ++i) b(4 * (c / 2) + i, c) = ((c % 2) && (i % 2)) ? -0.5f : 0.5f;
  return b;
}

inline mdlab::prior::PriorSubspace synthetic_subspace(mdlab::num::Matrix basis, std::uint64_t seed) {
  mdlab::Rng rng(seed);
  mdlab::prior::PriorSubspace s;
  const std::size_t d = basis.rows(), k = basis.cols();
  s.basis = std::move(basis);
  s.mu.resize(d);
  for (auto& x : s.mu) x = static_cast<float>(rng.normal());
  s.prior_dir.resize(k);
  double n = 0;
  for (auto& x : s.prior_dir) n += (x = rng.normal()) * x;
  for (auto& x : s.prior_dir) x /= std::sqrt(n);
  return s;
}

inline std::vector<double> random_vector(std::size_t d, mdlab::Rng& rng, double scale = 1.0) {
  std::vector<double> v(d);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

}  // namespace fixture
