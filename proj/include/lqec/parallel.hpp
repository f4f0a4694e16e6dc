#pragma once

#include <cstddef>
#include <functional>

namespace lqec {

// Number of worker threads used by parallel_chunks. Defaults to the
// hardware concurrency, capped at 8; override with the LQEC_THREADS
// environment variable. A value of 1 disables threading.
int worker_count();

// Runs fn(chunk_index) for chunk_index in [0, n_chunks) across the worker
// pool. Chunks must write only to disjoint state; the call returns after
// every chunk finished. Exceptions from chunks are rethrown (first chunk
// index wins). Determinism is the caller's job: chunks may run in any
// order, so reductions must be merged in a fixed order afterwards.
void parallel_chunks(size_t n_chunks, const std::function<void(size_t)>& fn);

}  // namespace lqec
