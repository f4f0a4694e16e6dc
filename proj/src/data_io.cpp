#include "lqec/data_io.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "lqec/errors.hpp"
#include "lqec/rng.hpp"

namespace lqec {

uint64_t fnv1a64(std::span<const uint8_t> bytes) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Corpus corpus_from_bytes(std::vector<uint8_t> bytes, double heldout_fraction,
                         std::string source) {
    if (bytes.empty()) throw InputError("corpus is empty: " + source);
    if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0))
        throw InputError("heldout_fraction must be in (0, 1)");
    Corpus c;
    c.content_hash = fnv1a64(bytes);
    const size_t heldout = static_cast<size_t>(
        std::llround(heldout_fraction * static_cast<double>(bytes.size())));
    if (heldout == 0 || heldout >= bytes.size())
        throw InputError("heldout_fraction leaves an empty split for a corpus of " +
                         std::to_string(bytes.size()) + " bytes");
    c.train_end = bytes.size() - heldout;
    c.bytes = std::move(bytes);
    c.source_path = std::move(source);
    return c;
}

Corpus load_corpus(const std::string& path, double heldout_fraction) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open corpus file: " + path);
    std::vector<uint8_t> bytes{std::istreambuf_iterator<char>(in),
                               std::istreambuf_iterator<char>()};
    return corpus_from_bytes(std::move(bytes), heldout_fraction, path);
}

CalibrationSet sample_calibration(const Corpus& corpus, int n, int seq_len, uint64_t seed) {
    if (n < 1) throw InputError("sample_calibration: need at least one sample");
    if (seq_len < 1) throw InputError("sample_calibration: seq_len must be positive");
    const auto train = corpus.train();
    if (train.size() < static_cast<size_t>(seq_len))
        throw InputError("sample_calibration: seq_len " + std::to_string(seq_len) +
                         " exceeds the train split of " + std::to_string(train.size()) +
                         " bytes");
    CalibrationSet set;
    set.corpus_hash = corpus.content_hash;
    set.n_samples = n;
    set.seq_len = seq_len;
    set.seed = seed;
    set.offsets.reserve(static_cast<size_t>(n));
    set.sequences.reserve(static_cast<size_t>(n));
    Rng rng(seed);
    const uint64_t span = train.size() - static_cast<size_t>(seq_len) + 1;
    for (int i = 0; i < n; ++i) {
        const size_t off = static_cast<size_t>(rng.below(span));
        set.offsets.push_back(off);
        std::vector<int> seq(static_cast<size_t>(seq_len));
        for (int t = 0; t < seq_len; ++t) seq[static_cast<size_t>(t)] = train[off + t];
        set.sequences.push_back(std::move(seq));
    }
    return set;
}

std::string CalibrationSet::to_json() const {
    nlohmann::ordered_json j;
    j["hash"] = corpus_hash;
    j["n"] = n_samples;
    j["seq_len"] = seq_len;
    j["seed"] = seed;
    j["offsets"] = offsets;
    return j.dump(2);
}

}  // namespace lqec
