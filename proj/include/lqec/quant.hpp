#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "lqec/tensor.hpp"

namespace lqec {

enum class QuantMethod { rtn, clip, nf };

const char* quant_method_name(QuantMethod m);
QuantMethod quant_method_from_name(const std::string& name);

// Group weight quantizer settings. Groups are consecutive runs of
// group_size entries along the second (d2) axis of the weight matrix,
// which is contiguous in row-major storage.
struct QuantConfig {
    int bits = 4;              // in {2, 3, 4}
    int group_size = 64;
    QuantMethod method = QuantMethod::rtn;
    // Candidate (gamma, beta) clip fractions searched per group by the
    // clip method, in order; ties keep the earliest candidate. Empty means
    // the default grid, the cartesian square of {1.0, 0.95, 0.9, 0.85,
    // 0.8, 0.7}, which starts with (1, 1) so clip never loses to rtn.
    std::vector<std::pair<double, double>> clip_grid;

    void validate() const;
    std::vector<std::pair<double, double>> effective_clip_grid() const;
};

// Quantized weight: per-group affine codes (rtn/clip) or codebook indices
// (nf). Immutable after construction.
//
// For rtn/clip, dequant(q) = s * (q - z) per group with
//   s = (gamma*max - beta*min) / (2^b - 1),  z = round(-beta*min / s),
//   q = clamp(round(w / s) + z, 0, 2^b - 1),
// rounding half-to-even. A constant group (max == min == c) is stored
// exactly: s = |c| with one code step from the zero point (s = 1e-12 and
// codes == z when c == 0).
struct QuantizedTensor {
    std::vector<uint8_t> codes;   // one per weight, each in [0, 2^b - 1]
    std::vector<double> scales;   // one per group
    std::vector<int64_t> zeros;   // one per group
    std::vector<double> levels;   // nf only: 2^b codebook values in [-1, 1]
    std::vector<int> original_shape;
    int bits = 0;
    int group_size = 0;
    QuantMethod method = QuantMethod::rtn;

    int64_t group_count() const { return static_cast<int64_t>(scales.size()); }
};

QuantizedTensor quantize_uniform(const Tensor& w, const QuantConfig& cfg);
QuantizedTensor quantize_nf(const Tensor& w, const QuantConfig& cfg);
QuantizedTensor quantize(const Tensor& w, const QuantConfig& cfg);  // dispatch on method

Tensor dequantize(const QuantizedTensor& q);

// NormalFloat-style codebook: 2^(b-1) negative and 2^(b-1) non-negative
// standard-normal quantiles at evenly spaced probabilities (probability
// margin 2^-(b+1)), each side rescaled so the extremes are -1 and +1 and
// 0 is a level. Returned ascending.
std::vector<double> nf_levels(int bits);

// Percent-point function of the standard normal (Acklam's rational
// approximation, relative error below 1.2e-9).
double inverse_normal_cdf(double p);

}  // namespace lqec
