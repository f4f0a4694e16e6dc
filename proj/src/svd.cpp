#include "lqec/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lqec/errors.hpp"

namespace lqec {

namespace {

// Column-major work matrix for the Hestenes sweeps: rotations touch column
// pairs, so contiguous columns keep them cache-friendly.
struct ColMat {
    int rows = 0, cols = 0;
    std::vector<double> d;  // column-major
    double* col(int j) { return d.data() + static_cast<size_t>(j) * rows; }
    const double* col(int j) const { return d.data() + static_cast<size_t>(j) * rows; }
};

ColMat to_colmajor(const Tensor& a) {
    ColMat m;
    m.rows = a.dim(0);
    m.cols = a.dim(1);
    m.d.resize(static_cast<size_t>(m.rows) * m.cols);
    const auto v = a.data();
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j)
            m.d[static_cast<size_t>(j) * m.rows + i] = v[static_cast<size_t>(i) * m.cols + j];
    return m;
}

Tensor from_colmajor(const ColMat& m) {
    std::vector<double> v(static_cast<size_t>(m.rows) * m.cols);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j)
            v[static_cast<size_t>(i) * m.cols + j] = m.d[static_cast<size_t>(j) * m.rows + i];
    return Tensor::from_data({m.rows, m.cols}, std::move(v));
}

// Orthogonalizes the columns of g in place, accumulating rotations into v
// (initialized to identity). Columns of g end up mutually orthogonal; their
// norms are the singular values.
void hestenes_sweeps(ColMat& g, ColMat& v) {
    const int n = g.cols;
    const int m = g.rows;
    constexpr double kTol = 1e-28;  // on cos^2 of the pair angle
    constexpr int kMaxSweeps = 64;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                double* gp = g.col(p);
                double* gq = g.col(q);
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (int i = 0; i < m; ++i) {
                    app += gp[i] * gp[i];
                    aqq += gq[i] * gq[i];
                    apq += gp[i] * gq[i];
                }
                if (apq * apq <= kTol * app * aqq) continue;
                rotated = true;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (int i = 0; i < m; ++i) {
                    const double a = gp[i], b = gq[i];
                    gp[i] = c * a - s * b;
                    gq[i] = s * a + c * b;
                }
                double* vp = v.col(p);
                double* vq = v.col(q);
                for (int i = 0; i < n; ++i) {
                    const double a = vp[i], b = vq[i];
                    vp[i] = c * a - s * b;
                    vq[i] = s * a + c * b;
                }
            }
        }
        if (!rotated) break;
    }
}

SvdResult svd_tall(const Tensor& a) {
    // a: m x n with m >= n.
    const int m = a.dim(0), n = a.dim(1);
    ColMat g = to_colmajor(a);
    ColMat v;
    v.rows = v.cols = n;
    v.d.assign(static_cast<size_t>(n) * n, 0.0);
    for (int j = 0; j < n; ++j) v.d[static_cast<size_t>(j) * n + j] = 1.0;

    hestenes_sweeps(g, v);

    std::vector<double> sigma(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
        double ss = 0.0;
        const double* gj = g.col(j);
        for (int i = 0; i < m; ++i) ss += gj[i] * gj[i];
        sigma[static_cast<size_t>(j)] = std::sqrt(ss);
    }

    // Sort descending; stable on ties so the result is deterministic.
    std::vector<int> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::stable_sort(perm.begin(), perm.end(), [&](int x, int y) {
        return sigma[static_cast<size_t>(x)] > sigma[static_cast<size_t>(y)];
    });

    ColMat u;
    u.rows = m;
    u.cols = n;
    u.d.assign(static_cast<size_t>(m) * n, 0.0);
    ColMat vs;
    vs.rows = n;
    vs.cols = n;
    vs.d.assign(static_cast<size_t>(n) * n, 0.0);
    std::vector<double> sorted_sigma(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
        const int src = perm[static_cast<size_t>(j)];
        const double s = sigma[static_cast<size_t>(src)];
        sorted_sigma[static_cast<size_t>(j)] = s;
        if (s > 0.0) {
            const double inv = 1.0 / s;
            const double* gc = g.col(src);
            double* uc = u.col(j);
            for (int i = 0; i < m; ++i) uc[i] = gc[i] * inv;
        }
        std::copy_n(v.col(src), n, vs.col(j));
    }
    return SvdResult{from_colmajor(u), std::move(sorted_sigma), from_colmajor(vs)};
}

}  // namespace

SvdResult svd(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("svd: operand must be 2-D");
    if (a.dim(0) >= a.dim(1)) return svd_tall(a);
    // Wide matrix: factor the transpose and swap the bases.
    SvdResult t = svd_tall(transpose(a).detach());
    return SvdResult{std::move(t.v), std::move(t.sigma), std::move(t.u)};
}

Tensor svd_truncate(const SvdResult& s, int r) {
    const int m = s.u.dim(0), n = s.v.dim(0), p = s.u.dim(1);
    if (r < 0 || r > p) throw ContractError("svd_truncate: rank out of range");
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    const auto uv = s.u.data();
    const auto vv = s.v.data();
    for (int k = 0; k < r; ++k) {
        const double sk = s.sigma[static_cast<size_t>(k)];
        if (sk == 0.0) continue;
        for (int i = 0; i < m; ++i) {
            const double us = uv[static_cast<size_t>(i) * p + k] * sk;
            if (us == 0.0) continue;
            double* row = out.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) row[j] += us * vv[static_cast<size_t>(j) * p + k];
        }
    }
    return Tensor::from_data({m, n}, std::move(out));
}

std::pair<Tensor, Tensor> svd_low_rank_factors(const SvdResult& s, int r) {
    const int m = s.u.dim(0), n = s.v.dim(0), p = s.u.dim(1);
    if (r < 1 || r > p) throw ContractError("svd_low_rank_factors: rank out of range");
    std::vector<double> l1(static_cast<size_t>(m) * r), l2(static_cast<size_t>(n) * r);
    const auto uv = s.u.data();
    const auto vv = s.v.data();
    for (int k = 0; k < r; ++k) {
        const double root = std::sqrt(s.sigma[static_cast<size_t>(k)]);
        for (int i = 0; i < m; ++i)
            l1[static_cast<size_t>(i) * r + k] = uv[static_cast<size_t>(i) * p + k] * root;
        for (int j = 0; j < n; ++j)
            l2[static_cast<size_t>(j) * r + k] = vv[static_cast<size_t>(j) * p + k] * root;
    }
    return {Tensor::from_data({m, r}, std::move(l1)), Tensor::from_data({n, r}, std::move(l2))};
}

double svd_tail_norm(const std::vector<double>& sigma, int r) {
    double acc = 0.0;
    for (size_t i = sigma.size(); i-- > static_cast<size_t>(std::max(r, 0));)
        acc += sigma[i] * sigma[i];
    return std::sqrt(acc);
}

QrResult qr_thin(const Tensor& a) {
    if (a.rank() != 2 || a.dim(0) < a.dim(1))
        throw ShapeError("qr_thin: operand must be m x n with m >= n");
    const int m = a.dim(0), n = a.dim(1);
    ColMat w = to_colmajor(a);
    std::vector<std::vector<double>> reflectors;
    reflectors.reserve(static_cast<size_t>(n));

    for (int k = 0; k < n; ++k) {
        double* ck = w.col(k);
        double norm = 0.0;
        for (int i = k; i < m; ++i) norm += ck[i] * ck[i];
        norm = std::sqrt(norm);
        std::vector<double> h(static_cast<size_t>(m), 0.0);
        if (norm > 0.0) {
            const double alpha = ck[k] >= 0.0 ? -norm : norm;
            h[static_cast<size_t>(k)] = ck[k] - alpha;
            for (int i = k + 1; i < m; ++i) h[static_cast<size_t>(i)] = ck[i];
            double hn = 0.0;
            for (int i = k; i < m; ++i) hn += h[static_cast<size_t>(i)] * h[static_cast<size_t>(i)];
            if (hn > 0.0) {
                const double inv = std::sqrt(2.0 / hn);
                for (int i = k; i < m; ++i) h[static_cast<size_t>(i)] *= inv;
                for (int j = k; j < n; ++j) {
                    double* cj = w.col(j);
                    double dot = 0.0;
                    for (int i = k; i < m; ++i) dot += h[static_cast<size_t>(i)] * cj[i];
                    for (int i = k; i < m; ++i) cj[i] -= dot * h[static_cast<size_t>(i)];
                }
            }
        }
        reflectors.push_back(std::move(h));
    }

    std::vector<double> r(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j)
            r[static_cast<size_t>(i) * n + j] = w.col(j)[i];

    // Q = H_0 H_1 ... H_{n-1} applied to the first n identity columns.
    ColMat q;
    q.rows = m;
    q.cols = n;
    q.d.assign(static_cast<size_t>(m) * n, 0.0);
    for (int j = 0; j < n; ++j) q.col(j)[j] = 1.0;
    for (int j = 0; j < n; ++j) {
        double* cj = q.col(j);
        for (int k = n - 1; k >= 0; --k) {
            const auto& h = reflectors[static_cast<size_t>(k)];
            double dot = 0.0;
            for (int i = k; i < m; ++i) dot += h[static_cast<size_t>(i)] * cj[i];
            if (dot != 0.0)
                for (int i = k; i < m; ++i) cj[i] -= dot * h[static_cast<size_t>(i)];
        }
    }
    return QrResult{from_colmajor(q), Tensor::from_data({n, n}, std::move(r))};
}

}  // namespace lqec
