#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lqec/quant.hpp"
#include "lqec/tensor.hpp"

namespace lqec {

struct ModelConfig {
    int n_layers = 4;
    int d_model = 128;
    int n_heads = 4;
    int d_ffn = 512;
    int vocab_size = 256;
    int max_seq_len = 128;
    uint64_t seed = 0;

    void validate() const;
    int d_head() const { return d_model / n_heads; }
};

struct LoraAdapter {
    Tensor l1;  // d1 x r
    Tensor l2;  // d2 x r
    int rank = 0;
};

enum class LoraInit { zero_pair, svd_residual, gaussian_zero };
LoraInit lora_init_from_name(const std::string& name);
const char* lora_init_name(LoraInit init);

// One linear weight of a decoder layer: full precision or quantized, with
// an optional adapter. forward computes x (W + L1 L2^T) with W the
// dequantized or full-precision weight; the dequantized matrix is cached
// at assignment time and treated as a frozen constant.
class LinearModule {
public:
    std::string name;  // qkv | out | ffn1 | ffn2
    int layer_index = 0;

    void set_full_precision(Tensor w);
    void set_quantized(QuantizedTensor q);

    bool quantized() const { return qweight_.has_value(); }
    const QuantizedTensor& qweight() const;
    bool has_weight_fp() const { return weight_fp_.defined(); }
    const Tensor& weight_fp() const;           // full-precision weight (if any)
    const Tensor& effective_weight() const { return weight_eff_; }
    int d1() const { return weight_eff_.dim(0); }
    int d2() const { return weight_eff_.dim(1); }

    std::optional<LoraAdapter>& adapter() { return adapter_; }
    const std::optional<LoraAdapter>& adapter() const { return adapter_; }

    Tensor forward(const Tensor& x) const;

private:
    Tensor weight_fp_;
    std::optional<QuantizedTensor> qweight_;
    Tensor weight_eff_;
    std::optional<LoraAdapter> adapter_;
};

struct DecoderLayer {
    Tensor norm1_gain;
    LinearModule qkv;
    LinearModule out;
    Tensor norm2_gain;
    LinearModule ffn1;
    LinearModule ffn2;

    LinearModule& module(int i);
    const LinearModule& module(int i) const;
    static constexpr std::array<const char*, 4> kModuleNames{"qkv", "out", "ffn1", "ffn2"};
};

struct ForwardOptions {
    bool capture_hidden = false;     // keep Y_0..Y_N and the final-norm output
    bool capture_module_io = false;  // keep every linear module's input/output
    bool with_logits = true;
};

struct ModuleIO {
    Tensor input;
    Tensor output;
};

struct ForwardResult {
    Tensor logits;        // T x V when requested
    Tensor final_hidden;  // output of the last decoder layer (pre final norm)
    Tensor embedding_out;                           // capture_hidden: Y_0
    std::vector<Tensor> layer_outputs;              // capture_hidden: Y_1..Y_N
    Tensor final_norm_out;                          // capture_hidden
    std::vector<std::array<ModuleIO, 4>> module_io;  // capture_module_io
};

// Pre-norm byte-level GPT decoder: token + learned positional embeddings,
// n_layers blocks of (RMS-norm, fused-QKV causal attention, out projection)
// and (RMS-norm, FFN1, GELU, FFN2) with residual connections, final
// RMS-norm and an untied LM head. Embeddings, norms and head are always
// full precision; quantization and adapters cover the four decoder-layer
// linears only.
class DecoderModel {
public:
    ModelConfig config;
    Tensor tok_emb;  // V x d
    Tensor pos_emb;  // max_seq_len x d
    std::vector<DecoderLayer> layers;
    Tensor final_norm_gain;
    Tensor lm_head;  // d x V

    ForwardResult forward(std::span<const int> tokens, const ForwardOptions& opts = {}) const;

    // Runs decoder layer n alone on a given input activation (teacher
    // forcing); gradients flow to the layer's adapters.
    Tensor run_layer(int layer_index, const Tensor& input) const;

    // Trainable leaves in a fixed order (embeddings, per-layer gains and
    // full-precision weights, final gain, head). Quantized weights never
    // appear. Adapters are listed by adapter_parameters() only.
    std::vector<Tensor> base_parameters() const;
    std::vector<Tensor> adapter_parameters() const;
    void set_base_trainable(bool trainable);
    void set_adapters_trainable(bool trainable);

    bool any_quantized() const;
    bool any_adapters() const;

    // Copies consist of aliasing tensor handles; clone_deep() produces an
    // independent model whose parameters can be mutated without touching
    // the original (used for per-run students in sweeps).
    DecoderModel clone_deep() const;

    // Head-split / head-merge selector constants, built once per model.
    void rebuild_derived() const;

private:
    friend DecoderModel build_model(const ModelConfig&);
    Tensor layer_body(const DecoderLayer& layer, const Tensor& x, const Tensor& mask,
                      std::array<ModuleIO, 4>* io) const;
    mutable std::vector<Tensor> sel_q_, sel_k_, sel_v_, sel_merge_;
};

DecoderModel build_model(const ModelConfig& cfg);

// Replaces each decoder linear's weight with its quantized form. The
// full-precision weight is kept alongside as the frozen reference for
// svd_residual initialization and analysis.
void quantize_decoder_weights(DecoderModel& m, const QuantConfig& qcfg);

// Attaches a rank-r adapter to every decoder linear. gaussian_zero draws
// L1 from a seeded Gaussian and zeroes L2; zero_pair zeroes both;
// svd_residual uses the rank-r SVD of (W_fp - W_eff) and needs the
// full-precision reference (either retained in the module or supplied).
void attach_lora(DecoderModel& m, int rank, LoraInit init,
                 const DecoderModel* fp_reference = nullptr, uint64_t seed = 0);

// Full-precision model with W' = W_eff + L1 L2^T per module, no adapters.
DecoderModel merge_adapters(const DecoderModel& m);

void save_checkpoint(const DecoderModel& m, const std::string& path);
DecoderModel load_checkpoint(const std::string& path);

}  // namespace lqec
