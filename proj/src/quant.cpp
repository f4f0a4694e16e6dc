#include "lqec/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "lqec/errors.hpp"

namespace lqec {

namespace {

constexpr double kDegenerateScale = 1e-12;

double round_half_even(double x) { return std::nearbyint(x); }

struct GroupParams {
    double scale = 0.0;
    int64_t zero = 0;
    bool degenerate = false;
    double constant = 0.0;
};

// Affine parameters for one group under clip fractions (gamma, beta).
// Returns false when the clipped range collapses for a non-constant group
// (an unusable clip candidate).
bool group_params(const double* w, int n, int bits, double gamma, double beta, GroupParams* out) {
    double lo = w[0], hi = w[0];
    for (int i = 1; i < n; ++i) {
        lo = std::min(lo, w[i]);
        hi = std::max(hi, w[i]);
    }
    if (hi == lo) {
        out->degenerate = true;
        out->constant = lo;
        if (lo == 0.0) {
            out->scale = kDegenerateScale;
            out->zero = 0;
        } else {
            out->scale = std::abs(lo);
            out->zero = lo < 0.0 ? 1 : 0;
        }
        return true;
    }
    const double chi = gamma * hi;
    const double clo = beta * lo;
    if (chi <= clo) return false;
    const double levels = static_cast<double>((1 << bits) - 1);
    out->scale = (chi - clo) / levels;
    out->zero = static_cast<int64_t>(round_half_even(-clo / out->scale));
    out->degenerate = false;
    return true;
}

uint8_t encode_affine(double w, const GroupParams& p, int bits) {
    if (p.degenerate) {
        if (p.constant == 0.0) return static_cast<uint8_t>(p.zero);
        return static_cast<uint8_t>(p.zero + (p.constant > 0.0 ? 1 : -1));
    }
    const double q = round_half_even(w / p.scale) + static_cast<double>(p.zero);
    const double qmax = static_cast<double>((1 << bits) - 1);
    return static_cast<uint8_t>(std::clamp(q, 0.0, qmax));
}

double group_sq_error(const double* w, int n, const GroupParams& p, int bits) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const uint8_t q = encode_affine(w[i], p, bits);
        const double rec = p.scale * static_cast<double>(static_cast<int64_t>(q) - p.zero);
        const double e = w[i] - rec;
        acc += e * e;
    }
    return acc;
}

void check_input(const Tensor& w, const QuantConfig& cfg) {
    cfg.validate();
    if (w.rank() != 2) throw ShapeError("quantize: weight must be 2-D");
    if (w.dim(1) % cfg.group_size != 0)
        throw ShapeError("quantize: group_size " + std::to_string(cfg.group_size) +
                         " does not divide axis length " + std::to_string(w.dim(1)));
    for (double v : w.data())
        if (!std::isfinite(v)) throw InputError("quantize: weight contains a non-finite value");
}

}  // namespace

const char* quant_method_name(QuantMethod m) {
    switch (m) {
        case QuantMethod::rtn: return "rtn";
        case QuantMethod::clip: return "clip";
        case QuantMethod::nf: return "nf";
    }
    return "?";
}

QuantMethod quant_method_from_name(const std::string& name) {
    if (name == "rtn") return QuantMethod::rtn;
    if (name == "clip") return QuantMethod::clip;
    if (name == "nf") return QuantMethod::nf;
    throw ConfigError("unknown quantization method: " + name);
}

void QuantConfig::validate() const {
    if (bits < 2 || bits > 4)
        throw ConfigError("quantization bits must be in {2, 3, 4}, got " + std::to_string(bits));
    if (group_size < 1) throw ConfigError("group_size must be positive");
    for (const auto& [gamma, beta] : clip_grid) {
        if (!(gamma > 0.0 && gamma <= 1.0 && beta > 0.0 && beta <= 1.0))
            throw ConfigError("clip_grid entries must satisfy 0 < gamma, beta <= 1");
    }
}

std::vector<std::pair<double, double>> QuantConfig::effective_clip_grid() const {
    if (!clip_grid.empty()) return clip_grid;
    static const double kFractions[] = {1.0, 0.95, 0.9, 0.85, 0.8, 0.7};
    std::vector<std::pair<double, double>> grid;
    for (double g : kFractions)
        for (double b : kFractions) grid.emplace_back(g, b);
    return grid;
}

QuantizedTensor quantize_uniform(const Tensor& w, const QuantConfig& cfg) {
    if (cfg.method != QuantMethod::rtn && cfg.method != QuantMethod::clip)
        throw ContractError("quantize_uniform requires method rtn or clip");
    check_input(w, cfg);
    const int d1 = w.dim(0), d2 = w.dim(1), gs = cfg.group_size;
    const int groups_per_row = d2 / gs;
    const auto wv = w.data();

    QuantizedTensor out;
    out.original_shape = {d1, d2};
    out.bits = cfg.bits;
    out.group_size = gs;
    out.method = cfg.method;
    out.codes.resize(wv.size());
    out.scales.resize(static_cast<size_t>(d1) * groups_per_row);
    out.zeros.resize(out.scales.size());

    const auto grid = cfg.method == QuantMethod::clip
                          ? cfg.effective_clip_grid()
                          : std::vector<std::pair<double, double>>{{1.0, 1.0}};

    for (int i = 0; i < d1; ++i) {
        for (int gj = 0; gj < groups_per_row; ++gj) {
            const double* gw = wv.data() + static_cast<size_t>(i) * d2 + static_cast<size_t>(gj) * gs;
            GroupParams best{};
            double best_err = std::numeric_limits<double>::infinity();
            bool found = false;
            for (const auto& [gamma, beta] : grid) {
                GroupParams p{};
                if (!group_params(gw, gs, cfg.bits, gamma, beta, &p)) continue;
                if (p.degenerate) {  // exact; no candidate can beat it
                    best = p;
                    found = true;
                    break;
                }
                const double err = group_sq_error(gw, gs, p, cfg.bits);
                if (!found || err < best_err) {
                    best = p;
                    best_err = err;
                    found = true;
                }
            }
            if (!found) {  // every clip candidate collapsed; (1, 1) cannot
                group_params(gw, gs, cfg.bits, 1.0, 1.0, &best);
            }
            const size_t g = static_cast<size_t>(i) * groups_per_row + gj;
            out.scales[g] = best.scale;
            out.zeros[g] = best.zero;
            uint8_t* codes = out.codes.data() + static_cast<size_t>(i) * d2 + static_cast<size_t>(gj) * gs;
            for (int k = 0; k < gs; ++k) codes[k] = encode_affine(gw[k], best, cfg.bits);
        }
    }
    return out;
}

QuantizedTensor quantize_nf(const Tensor& w, const QuantConfig& cfg) {
    if (cfg.method != QuantMethod::nf) throw ContractError("quantize_nf requires method nf");
    check_input(w, cfg);
    const int d1 = w.dim(0), d2 = w.dim(1), gs = cfg.group_size;
    const int groups_per_row = d2 / gs;
    const auto wv = w.data();
    const std::vector<double> levels = nf_levels(cfg.bits);
    const int n_levels = static_cast<int>(levels.size());

    QuantizedTensor out;
    out.original_shape = {d1, d2};
    out.bits = cfg.bits;
    out.group_size = gs;
    out.method = cfg.method;
    out.levels = levels;
    out.codes.resize(wv.size());
    out.scales.resize(static_cast<size_t>(d1) * groups_per_row);
    out.zeros.assign(out.scales.size(), 0);

    int zero_level = 0;
    for (int l = 0; l < n_levels; ++l)
        if (levels[static_cast<size_t>(l)] == 0.0) zero_level = l;

    for (int i = 0; i < d1; ++i) {
        for (int gj = 0; gj < groups_per_row; ++gj) {
            const double* gw = wv.data() + static_cast<size_t>(i) * d2 + static_cast<size_t>(gj) * gs;
            double s = 0.0;
            for (int k = 0; k < gs; ++k) s = std::max(s, std::abs(gw[k]));
            const size_t g = static_cast<size_t>(i) * groups_per_row + gj;
            out.scales[g] = s;
            uint8_t* codes = out.codes.data() + static_cast<size_t>(i) * d2 + static_cast<size_t>(gj) * gs;
            if (s == 0.0) {  // all-zero group reconstructs as exact +0
                for (int k = 0; k < gs; ++k) codes[k] = static_cast<uint8_t>(zero_level);
                continue;
            }
            for (int k = 0; k < gs; ++k) {
                int best = 0;
                double best_dist = std::abs(gw[k] - s * levels[0]);
                for (int l = 1; l < n_levels; ++l) {
                    const double dist = std::abs(gw[k] - s * levels[static_cast<size_t>(l)]);
                    if (dist < best_dist) {
                        best = l;
                        best_dist = dist;
                    }
                }
                codes[k] = static_cast<uint8_t>(best);
            }
        }
    }
    return out;
}

QuantizedTensor quantize(const Tensor& w, const QuantConfig& cfg) {
    return cfg.method == QuantMethod::nf ? quantize_nf(w, cfg) : quantize_uniform(w, cfg);
}

Tensor dequantize(const QuantizedTensor& q) {
    const int d1 = q.original_shape.at(0), d2 = q.original_shape.at(1);
    const int gs = q.group_size;
    const int groups_per_row = d2 / gs;
    std::vector<double> out(q.codes.size());
    for (int i = 0; i < d1; ++i) {
        for (int gj = 0; gj < groups_per_row; ++gj) {
            const size_t g = static_cast<size_t>(i) * groups_per_row + gj;
            const size_t base = static_cast<size_t>(i) * d2 + static_cast<size_t>(gj) * gs;
            if (q.method == QuantMethod::nf) {
                const double s = q.scales[g];
                for (int k = 0; k < gs; ++k)
                    out[base + k] = s * q.levels.at(q.codes[base + k]);
            } else {
                const double s = q.scales[g];
                const int64_t z = q.zeros[g];
                for (int k = 0; k < gs; ++k)
                    out[base + k] = s * static_cast<double>(static_cast<int64_t>(q.codes[base + k]) - z);
            }
        }
    }
    return Tensor::from_data({d1, d2}, std::move(out));
}

std::vector<double> nf_levels(int bits) {
    if (bits < 2 || bits > 4) throw ConfigError("nf_levels: bits must be in {2, 3, 4}");
    const int half = 1 << (bits - 1);
    const double margin = 1.0 / static_cast<double>(1 << (bits + 1));
    std::vector<double> levels;
    levels.reserve(static_cast<size_t>(2) * half);
    // Negative side: quantiles at probabilities margin .. just below 1/2,
    // normalized by the most negative one.
    const double neg_extreme = inverse_normal_cdf(margin);
    for (int i = 0; i < half; ++i) {
        const double p = margin + (0.5 - margin) * static_cast<double>(i) / half;
        levels.push_back(inverse_normal_cdf(p) / -neg_extreme);
    }
    // Non-negative side: quantiles at probabilities 1/2 .. 1 - margin,
    // normalized by the largest one.
    const double pos_extreme = inverse_normal_cdf(1.0 - margin);
    for (int j = 0; j < half; ++j) {
        const double p = 0.5 + (0.5 - margin) * static_cast<double>(j) / (half - 1);
        levels.push_back(inverse_normal_cdf(p) / pos_extreme);
    }
    return levels;
}

double inverse_normal_cdf(double p) {
    if (!(p > 0.0 && p < 1.0)) throw DomainError("inverse_normal_cdf: p must be in (0, 1)");
    // Acklam (2003).
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double p_low = 0.02425;
    double q, r;
    if (p < p_low) {
        q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    if (p <= 1.0 - p_low) {
        q = p - 0.5;
        r = q * q;
        return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
               (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    }
    q = std::sqrt(-2.0 * std::log(1.0 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
}

}  // namespace lqec
