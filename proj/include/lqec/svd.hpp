#pragma once

#include <utility>
#include <vector>

#include "lqec/tensor.hpp"

namespace lqec {

// Thin singular value decomposition A = U * diag(sigma) * V^T with
// sigma sorted descending. For an m x n input, U is m x p and V is n x p
// with p = min(m, n). Columns of U belonging to zero singular values are
// zero vectors (no orthogonal completion).
struct SvdResult {
    Tensor u;
    std::vector<double> sigma;
    Tensor v;
};

// One-sided (Hestenes) Jacobi SVD with cyclic pair ordering; deterministic
// for a given input. Intended for the desk-scale matrices used here
// (hundreds of rows/columns).
SvdResult svd(const Tensor& a);

// Rank-r truncation U_r diag(sigma_r) V_r^T as an explicit matrix.
Tensor svd_truncate(const SvdResult& s, int r);

// Balanced factor split of the rank-r truncation: L1 = U_r sqrt(S_r),
// L2 = V_r sqrt(S_r), so L1 * L2^T equals svd_truncate(s, r).
std::pair<Tensor, Tensor> svd_low_rank_factors(const SvdResult& s, int r);

// Frobenius norm of A - SVD_r(A) from the tail of the spectrum:
// sqrt(sum_{i >= r} sigma_i^2).
double svd_tail_norm(const std::vector<double>& sigma, int r);

// Thin Householder QR of an m x n matrix with m >= n: A = Q * R with
// Q m x n (orthonormal columns) and R n x n upper triangular.
struct QrResult {
    Tensor q;
    Tensor r;
};
QrResult qr_thin(const Tensor& a);

}  // namespace lqec
