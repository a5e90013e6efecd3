#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <string>

#include "unimod/errors.hpp"
#include "unimod/tensor.hpp"

namespace unimod {

// Rank as the number of singular values above rel_tol * sigma_max. The zero
// matrix has rank 0 regardless of tolerance.
template <class S>
int numerical_rank(const Eigen::Ref<const MatX<S>>& a,
                   double rel_tol = 1e-6) {
  if (!(rel_tol > 0.0))
    throw ContractError("numerical_rank: rel_tol must be positive, got " +
                        std::to_string(rel_tol));
  if (a.rows() == 0 || a.cols() == 0) return 0;
  Eigen::JacobiSVD<MatX<S>> svd(a);
  const auto& sv = svd.singularValues();
  const S smax = sv.size() ? sv[0] : S(0);
  if (smax <= S(0)) return 0;
  const S cut = static_cast<S>(rel_tol) * smax;
  int r = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv[i] > cut) ++r;
  return r;
}

}  // namespace unimod
