#include "lqec/model.hpp"

#include <cmath>

#include "lqec/errors.hpp"
#include "lqec/rng.hpp"
#include "lqec/svd.hpp"

namespace lqec {

namespace {
constexpr double kMaskValue = -1e9;  // underflows to exact zero after softmax
}

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ffn < 1 || max_seq_len < 1)
        throw ConfigError("model config dimensions must be positive");
    if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2");
    if (d_model % n_heads != 0)
        throw ConfigError("n_heads " + std::to_string(n_heads) + " must divide d_model " +
                          std::to_string(d_model));
}

LoraInit lora_init_from_name(const std::string& name) {
    if (name == "zero_pair") return LoraInit::zero_pair;
    if (name == "svd_residual") return LoraInit::svd_residual;
    if (name == "gaussian_zero") return LoraInit::gaussian_zero;
    throw ConfigError("unknown adapter init: " + name);
}

const char* lora_init_name(LoraInit init) {
    switch (init) {
        case LoraInit::zero_pair: return "zero_pair";
        case LoraInit::svd_residual: return "svd_residual";
        case LoraInit::gaussian_zero: return "gaussian_zero";
    }
    return "?";
}

// ---- LinearModule -------------------------------------------------------

void LinearModule::set_full_precision(Tensor w) {
    if (w.rank() != 2) throw ShapeError("linear weight must be 2-D");
    weight_fp_ = std::move(w);
    qweight_.reset();
    weight_eff_ = weight_fp_;
}

void LinearModule::set_quantized(QuantizedTensor q) {
    qweight_ = std::move(q);
    weight_eff_ = dequantize(*qweight_);  // frozen constant
}

const QuantizedTensor& LinearModule::qweight() const {
    if (!qweight_) throw ContractError("module " + name + " is not quantized");
    return *qweight_;
}

const Tensor& LinearModule::weight_fp() const {
    if (!weight_fp_.defined())
        throw ContractError("module " + name + " has no full-precision weight");
    return weight_fp_;
}

Tensor LinearModule::forward(const Tensor& x) const {
    Tensor y = matmul(x, weight_eff_);
    if (adapter_) y = add(y, matmul(matmul(x, adapter_->l1), transpose(adapter_->l2)));
    return y;
}

LinearModule& DecoderLayer::module(int i) {
    switch (i) {
        case 0: return qkv;
        case 1: return out;
        case 2: return ffn1;
        case 3: return ffn2;
    }
    throw ContractError("module index out of range");
}

const LinearModule& DecoderLayer::module(int i) const {
    return const_cast<DecoderLayer*>(this)->module(i);
}

// ---- construction -------------------------------------------------------

namespace {

Tensor gaussian_tensor(Rng& rng, std::vector<int> shape, double scale, bool requires_grad) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.gaussian() * scale;
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

DecoderModel build_model(const ModelConfig& cfg) {
    cfg.validate();
    DecoderModel m;
    m.config = cfg;
    Rng rng(cfg.seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    m.tok_emb = gaussian_tensor(rng, {cfg.vocab_size, cfg.d_model}, scale, true);
    m.pos_emb = gaussian_tensor(rng, {cfg.max_seq_len, cfg.d_model}, scale, true);
    m.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (int n = 0; n < cfg.n_layers; ++n) {
        DecoderLayer& layer = m.layers[static_cast<size_t>(n)];
        layer.norm1_gain = Tensor::full({cfg.d_model}, 1.0, true);
        layer.norm2_gain = Tensor::full({cfg.d_model}, 1.0, true);
        const std::array<std::pair<int, int>, 4> dims{{{cfg.d_model, 3 * cfg.d_model},
                                                       {cfg.d_model, cfg.d_model},
                                                       {cfg.d_model, cfg.d_ffn},
                                                       {cfg.d_ffn, cfg.d_model}}};
        for (int i = 0; i < 4; ++i) {
            LinearModule& mod = layer.module(i);
            mod.name = DecoderLayer::kModuleNames[static_cast<size_t>(i)];
            mod.layer_index = n;
            mod.set_full_precision(
                gaussian_tensor(rng, {dims[static_cast<size_t>(i)].first,
                                      dims[static_cast<size_t>(i)].second},
                                scale, true));
        }
    }
    m.final_norm_gain = Tensor::full({cfg.d_model}, 1.0, true);
    m.lm_head = gaussian_tensor(rng, {cfg.d_model, cfg.vocab_size}, scale, true);
    m.rebuild_derived();
    return m;
}

void DecoderModel::rebuild_derived() const {
    const int d = config.d_model;
    const int h = config.n_heads;
    const int dh = config.d_head();
    sel_q_.clear();
    sel_k_.clear();
    sel_v_.clear();
    sel_merge_.clear();
    for (int head = 0; head < h; ++head) {
        for (int part = 0; part < 3; ++part) {
            std::vector<double> sel(static_cast<size_t>(3 * d) * dh, 0.0);
            for (int c = 0; c < dh; ++c) {
                const int row = part * d + head * dh + c;
                sel[static_cast<size_t>(row) * dh + c] = 1.0;
            }
            Tensor t = Tensor::from_data({3 * d, dh}, std::move(sel));
            if (part == 0) sel_q_.push_back(t);
            else if (part == 1) sel_k_.push_back(t);
            else sel_v_.push_back(t);
        }
        std::vector<double> mrg(static_cast<size_t>(dh) * d, 0.0);
        for (int c = 0; c < dh; ++c) mrg[static_cast<size_t>(c) * d + head * dh + c] = 1.0;
        sel_merge_.push_back(Tensor::from_data({dh, d}, std::move(mrg)));
    }
}

DecoderModel DecoderModel::clone_deep() const {
    DecoderModel m;
    m.config = config;
    auto copy = [](const Tensor& t) { return t.clone_as_leaf(t.requires_grad()); };
    m.tok_emb = copy(tok_emb);
    m.pos_emb = copy(pos_emb);
    m.layers.resize(layers.size());
    for (size_t n = 0; n < layers.size(); ++n) {
        const DecoderLayer& src = layers[n];
        DecoderLayer& dst = m.layers[n];
        dst.norm1_gain = copy(src.norm1_gain);
        dst.norm2_gain = copy(src.norm2_gain);
        for (int i = 0; i < 4; ++i) {
            const LinearModule& sm = src.module(i);
            LinearModule& dm = dst.module(i);
            dm.name = sm.name;
            dm.layer_index = sm.layer_index;
            if (sm.quantized()) {
                if (sm.has_weight_fp()) dm.set_full_precision(copy(sm.weight_fp()));
                dm.set_quantized(sm.qweight());
            } else {
                dm.set_full_precision(copy(sm.weight_fp()));
            }
            if (sm.adapter()) {
                dm.adapter() = LoraAdapter{copy(sm.adapter()->l1), copy(sm.adapter()->l2),
                                           sm.adapter()->rank};
            }
        }
    }
    m.final_norm_gain = copy(final_norm_gain);
    m.lm_head = copy(lm_head);
    m.rebuild_derived();
    return m;
}

// ---- forward ------------------------------------------------------------

namespace {

Tensor causal_mask(int t) {
    std::vector<double> mv(static_cast<size_t>(t) * t, 0.0);
    for (int i = 0; i < t; ++i)
        for (int j = i + 1; j < t; ++j) mv[static_cast<size_t>(i) * t + j] = kMaskValue;
    return Tensor::from_data({t, t}, std::move(mv));
}

Tensor iota_tensor(int n) {
    std::vector<double> v(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i)] = static_cast<double>(i);
    return Tensor::from_data({n}, std::move(v));
}

}  // namespace

Tensor DecoderModel::layer_body(const DecoderLayer& layer, const Tensor& x, const Tensor& mask,
                                std::array<ModuleIO, 4>* io) const {
    const int heads = config.n_heads;
    const Tensor scale = Tensor::scalar(1.0 / std::sqrt(static_cast<double>(config.d_head())));

    Tensor normed = rmsnorm(x, layer.norm1_gain);
    Tensor qkv = layer.qkv.forward(normed);
    if (io) (*io)[0] = {normed, qkv};

    Tensor attn;
    for (int h = 0; h < heads; ++h) {
        Tensor q = matmul(qkv, sel_q_[static_cast<size_t>(h)]);
        Tensor k = matmul(qkv, sel_k_[static_cast<size_t>(h)]);
        Tensor v = matmul(qkv, sel_v_[static_cast<size_t>(h)]);
        Tensor scores = add(mul(matmul(q, transpose(k)), scale), mask);
        Tensor probs = softmax_rows(scores);
        Tensor merged = matmul(matmul(probs, v), sel_merge_[static_cast<size_t>(h)]);
        attn = h == 0 ? merged : add(attn, merged);
    }
    Tensor attn_proj = layer.out.forward(attn);
    if (io) (*io)[1] = {attn, attn_proj};
    Tensor x1 = add(x, attn_proj);

    Tensor normed2 = rmsnorm(x1, layer.norm2_gain);
    Tensor up = layer.ffn1.forward(normed2);
    if (io) (*io)[2] = {normed2, up};
    Tensor act = gelu(up);
    Tensor down = layer.ffn2.forward(act);
    if (io) (*io)[3] = {act, down};
    return add(x1, down);
}

ForwardResult DecoderModel::forward(std::span<const int> tokens, const ForwardOptions& opts) const {
    const int t = static_cast<int>(tokens.size());
    if (t < 1) throw InputError("forward: empty token sequence");
    if (t > config.max_seq_len)
        throw InputError("forward: sequence length " + std::to_string(t) +
                         " exceeds max_seq_len " + std::to_string(config.max_seq_len));
    for (int tok : tokens)
        if (tok < 0 || tok >= config.vocab_size)
            throw InputError("forward: token " + std::to_string(tok) + " outside vocabulary");
    if (sel_q_.empty()) rebuild_derived();

    std::vector<double> idv(static_cast<size_t>(t));
    for (int i = 0; i < t; ++i) idv[static_cast<size_t>(i)] = static_cast<double>(tokens[i]);
    Tensor ids = Tensor::from_data({t}, std::move(idv));

    ForwardResult res;
    Tensor x = add(embedding_lookup(tok_emb, ids), embedding_lookup(pos_emb, iota_tensor(t)));
    if (opts.capture_hidden) res.embedding_out = x;

    const Tensor mask = causal_mask(t);
    if (opts.capture_module_io) res.module_io.resize(layers.size());
    if (opts.capture_hidden) res.layer_outputs.reserve(layers.size());
    for (size_t n = 0; n < layers.size(); ++n) {
        x = layer_body(layers[n], x, mask,
                       opts.capture_module_io ? &res.module_io[n] : nullptr);
        if (opts.capture_hidden) res.layer_outputs.push_back(x);
    }
    res.final_hidden = x;
    if (opts.with_logits || opts.capture_hidden) {
        Tensor fn = rmsnorm(x, final_norm_gain);
        if (opts.capture_hidden) res.final_norm_out = fn;
        if (opts.with_logits) res.logits = matmul(fn, lm_head);
    }
    return res;
}

Tensor DecoderModel::run_layer(int layer_index, const Tensor& input) const {
    if (layer_index < 0 || layer_index >= static_cast<int>(layers.size()))
        throw ContractError("run_layer: layer index " + std::to_string(layer_index) +
                            " out of range");
    if (input.rank() != 2 || input.dim(1) != config.d_model)
        throw ShapeError("run_layer: input must be T x d_model");
    if (sel_q_.empty()) rebuild_derived();
    const Tensor mask = causal_mask(input.dim(0));
    return layer_body(layers[static_cast<size_t>(layer_index)], input, mask, nullptr);
}

// ---- parameter access -----------------------------------------------------

std::vector<Tensor> DecoderModel::base_parameters() const {
    std::vector<Tensor> params{tok_emb, pos_emb};
    for (const auto& layer : layers) {
        params.push_back(layer.norm1_gain);
        params.push_back(layer.norm2_gain);
        for (int i = 0; i < 4; ++i) {
            const LinearModule& mod = layer.module(i);
            if (!mod.quantized()) params.push_back(mod.effective_weight());
        }
    }
    params.push_back(final_norm_gain);
    params.push_back(lm_head);
    return params;
}

std::vector<Tensor> DecoderModel::adapter_parameters() const {
    std::vector<Tensor> params;
    for (const auto& layer : layers)
        for (int i = 0; i < 4; ++i)
            if (const auto& ad = layer.module(i).adapter()) {
                params.push_back(ad->l1);
                params.push_back(ad->l2);
            }
    return params;
}

void DecoderModel::set_base_trainable(bool trainable) {
    for (auto& p : base_parameters()) p.set_requires_grad(trainable);
}

void DecoderModel::set_adapters_trainable(bool trainable) {
    for (auto& p : adapter_parameters()) p.set_requires_grad(trainable);
}

bool DecoderModel::any_quantized() const {
    for (const auto& layer : layers)
        for (int i = 0; i < 4; ++i)
            if (layer.module(i).quantized()) return true;
    return false;
}

bool DecoderModel::any_adapters() const {
    for (const auto& layer : layers)
        for (int i = 0; i < 4; ++i)
            if (layer.module(i).adapter()) return true;
    return false;
}

// ---- quantization / adapters ----------------------------------------------

void quantize_decoder_weights(DecoderModel& m, const QuantConfig& qcfg) {
    for (auto& layer : m.layers) {
        for (int i = 0; i < 4; ++i) {
            LinearModule& mod = layer.module(i);
            Tensor fp = mod.weight_fp().detach();
            QuantizedTensor q = quantize(fp, qcfg);
            mod.set_full_precision(std::move(fp));  // frozen reference copy
            mod.set_quantized(std::move(q));
        }
    }
}

void attach_lora(DecoderModel& m, int rank, LoraInit init, const DecoderModel* fp_reference,
                 uint64_t seed) {
    if (rank < 1) throw ConfigError("adapter rank must be at least 1");
    for (const auto& layer : m.layers)
        for (int i = 0; i < 4; ++i) {
            const LinearModule& mod = layer.module(i);
            if (rank > std::min(mod.d1(), mod.d2()))
                throw ConfigError("adapter rank " + std::to_string(rank) +
                                  " exceeds min dimension of module " + mod.name);
        }
    Rng rng(seed);
    for (size_t n = 0; n < m.layers.size(); ++n) {
        for (int i = 0; i < 4; ++i) {
            LinearModule& mod = m.layers[n].module(i);
            const int d1 = mod.d1(), d2 = mod.d2();
            LoraAdapter ad;
            ad.rank = rank;
            switch (init) {
                case LoraInit::zero_pair:
                    ad.l1 = Tensor::zeros({d1, rank}, true);
                    ad.l2 = Tensor::zeros({d2, rank}, true);
                    break;
                case LoraInit::gaussian_zero:
                    ad.l1 = gaussian_tensor(rng, {d1, rank},
                                            1.0 / std::sqrt(static_cast<double>(d1)), true);
                    ad.l2 = Tensor::zeros({d2, rank}, true);
                    break;
                case LoraInit::svd_residual: {
                    const LinearModule* ref = nullptr;
                    if (fp_reference) ref = &fp_reference->layers[n].module(i);
                    Tensor fp;
                    if (ref && !ref->quantized()) {
                        fp = ref->effective_weight();
                    } else if (mod.has_weight_fp()) {
                        fp = mod.weight_fp();
                    } else {
                        throw ContractError(
                            "svd_residual init needs the full-precision reference for module " +
                            mod.name);
                    }
                    std::vector<double> resid(static_cast<size_t>(d1) * d2);
                    const auto fv = fp.data();
                    const auto ev = mod.effective_weight().data();
                    for (size_t k = 0; k < resid.size(); ++k) resid[k] = fv[k] - ev[k];
                    SvdResult s = svd(Tensor::from_data({d1, d2}, std::move(resid)));
                    auto [l1, l2] = svd_low_rank_factors(s, rank);
                    ad.l1 = l1;
                    ad.l2 = l2;
                    ad.l1.set_requires_grad(true);
                    ad.l2.set_requires_grad(true);
                    break;
                }
            }
            mod.adapter() = std::move(ad);
        }
    }
}

DecoderModel merge_adapters(const DecoderModel& m) {
    if (!m.any_adapters()) throw ContractError("merge_adapters: no adapters present");
    DecoderModel merged;
    merged.config = m.config;
    merged.tok_emb = m.tok_emb.detach();
    merged.pos_emb = m.pos_emb.detach();
    merged.layers.resize(m.layers.size());
    for (size_t n = 0; n < m.layers.size(); ++n) {
        const DecoderLayer& src = m.layers[n];
        DecoderLayer& dst = merged.layers[n];
        dst.norm1_gain = src.norm1_gain.detach();
        dst.norm2_gain = src.norm2_gain.detach();
        for (int i = 0; i < 4; ++i) {
            const LinearModule& sm = src.module(i);
            LinearModule& dm = dst.module(i);
            dm.name = sm.name;
            dm.layer_index = sm.layer_index;
            Tensor w = sm.effective_weight().detach();
            if (const auto& ad = sm.adapter()) {
                NoGradGuard guard;
                Tensor delta = matmul(ad->l1, transpose(ad->l2));
                auto wv = w.mutable_data();
                const auto dv = delta.data();
                for (size_t k = 0; k < wv.size(); ++k) wv[k] += dv[k];
            }
            dm.set_full_precision(std::move(w));
        }
    }
    merged.final_norm_gain = m.final_norm_gain.detach();
    merged.lm_head = m.lm_head.detach();
    merged.rebuild_derived();
    return merged;
}

}  // namespace lqec
