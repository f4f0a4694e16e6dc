#pragma once

#include <string>
#include <vector>

#include "lqec/data_io.hpp"
#include "lqec/model.hpp"

namespace lqec {

struct TrainingLog {
    std::vector<double> loss_trace;  // one entry per step, pre-update
    int steps_run = 0;
    double final_heldout_ppl = 0.0;

    std::string to_json() const;
};

// Pretrains all parameters with Adam on causal cross-entropy over windows
// of the corpus train split (window starts drawn from Rng(model seed)).
// seq_len defaults to the model's max_seq_len. Deterministic per seed.
TrainingLog train_base(DecoderModel& model, const Corpus& corpus, int steps, double lr,
                       int batch_size = 8, int seq_len = 0);

}  // namespace lqec
