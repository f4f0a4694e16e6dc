#include "batch_exec.hpp"

#include <vector>

#include "lqec/parallel.hpp"

namespace lqec::detail {

double batched_loss_backward(int n, const std::function<Tensor(int)>& loss_fn) {
    const int workers = std::min(worker_count(), n);
    std::vector<GradSink> sinks(static_cast<size_t>(std::max(workers, 1)));
    std::vector<double> values(static_cast<size_t>(n), 0.0);

    parallel_chunks(static_cast<size_t>(workers), [&](size_t w) {
        for (int i = static_cast<int>(w); i < n; i += workers) {
            Tensor loss = loss_fn(i);
            values[static_cast<size_t>(i)] = loss.item();
            backward(loss, &sinks[w]);
        }
    });

    for (const auto& sink : sinks) sink.merge_into_grads();
    double total = 0.0;
    for (double v : values) total += v;
    return total;
}

}  // namespace lqec::detail
