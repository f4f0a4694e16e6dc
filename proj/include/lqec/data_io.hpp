#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace lqec {

// Byte-level token stream with a contiguous train / held-out split (the
// held-out range is the final fraction of the file).
struct Corpus {
    std::vector<uint8_t> bytes;
    size_t train_end = 0;  // bytes[0, train_end) train, rest held out
    std::string source_path;
    uint64_t content_hash = 0;  // FNV-1a 64 over the raw bytes

    std::span<const uint8_t> train() const { return {bytes.data(), train_end}; }
    std::span<const uint8_t> heldout() const {
        return {bytes.data() + train_end, bytes.size() - train_end};
    }
};

Corpus load_corpus(const std::string& path, double heldout_fraction);
Corpus corpus_from_bytes(std::vector<uint8_t> bytes, double heldout_fraction,
                         std::string source = "<memory>");

uint64_t fnv1a64(std::span<const uint8_t> bytes);

// Deterministic sample of n token windows of seq_len bytes each, drawn at
// uniform start offsets inside the train split (duplicates permitted).
// Regeneration is bitwise identical for the same (corpus hash, n, seq_len,
// seed); the offset stream comes from Rng(seed) via below().
struct CalibrationSet {
    uint64_t corpus_hash = 0;
    int n_samples = 0;
    int seq_len = 0;
    uint64_t seed = 0;
    std::vector<size_t> offsets;
    std::vector<std::vector<int>> sequences;  // tokens as ints in [0, 256)

    std::string to_json() const;  // {hash, n, seq_len, seed, offsets}
};

CalibrationSet sample_calibration(const Corpus& corpus, int n, int seq_len, uint64_t seed);

}  // namespace lqec
