#pragma once

#include <vector>

#include "lqec/tensor.hpp"

namespace lqec {

// Adam (Kingma & Ba) over a fixed parameter list. step() consumes the
// gradients accumulated in each parameter's grad buffer; parameters
// without a gradient are skipped that step. Updates are applied in list
// order, sequentially, so runs are bit-reproducible.
class Adam {
public:
    Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);

    void step();
    void zero_grad();
    double lr() const { return lr_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

}  // namespace lqec
