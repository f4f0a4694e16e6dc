#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "lqec/errors.hpp"
#include "lqec/model.hpp"

namespace lqec {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

constexpr char kMagic[8] = {'L', 'Q', 'E', 'C', 'C', 'K', 'P', '1'};

using Json = nlohmann::ordered_json;

struct Writer {
    Json manifest = Json::array();
    std::string payload;

    void add(const std::string& name, const char* dtype, const std::vector<int>& shape,
             const void* data, size_t bytes, Json attributes = Json::object()) {
        Json entry;
        entry["name"] = name;
        entry["dtype"] = dtype;
        entry["shape"] = shape;
        entry["byte_offset"] = payload.size();
        entry["byte_length"] = bytes;
        entry["attributes"] = std::move(attributes);
        manifest.push_back(std::move(entry));
        if (bytes > 0) payload.append(static_cast<const char*>(data), bytes);
    }

    void add_f64(const std::string& name, const Tensor& t, Json attributes = Json::object()) {
        add(name, "f64", t.shape(), t.data().data(), t.data().size() * sizeof(double),
            std::move(attributes));
    }
};

std::string module_prefix(int layer, const char* mod) {
    return "layers." + std::to_string(layer) + "." + mod;
}

void write_module(Writer& w, const LinearModule& mod) {
    const std::string prefix = module_prefix(mod.layer_index, mod.name.c_str());
    if (mod.quantized()) {
        const QuantizedTensor& q = mod.qweight();
        Json attrs;
        attrs["bits"] = q.bits;
        attrs["group_size"] = q.group_size;
        attrs["method"] = quant_method_name(q.method);
        w.add(prefix + ".codes", "u8", q.original_shape, q.codes.data(), q.codes.size(),
              std::move(attrs));
        w.add(prefix + ".scales", "f64", {static_cast<int>(q.scales.size())}, q.scales.data(),
              q.scales.size() * sizeof(double));
        w.add(prefix + ".zeros", "i64", {static_cast<int>(q.zeros.size())}, q.zeros.data(),
              q.zeros.size() * sizeof(int64_t));
        if (q.method == QuantMethod::nf)
            w.add(prefix + ".levels", "f64", {static_cast<int>(q.levels.size())},
                  q.levels.data(), q.levels.size() * sizeof(double));
    } else {
        w.add_f64(prefix + ".weight", mod.weight_fp());
    }
    if (const auto& ad = mod.adapter()) {
        Json attrs;
        attrs["rank"] = ad->rank;
        w.add_f64(prefix + ".lora.l1", ad->l1, std::move(attrs));
        w.add_f64(prefix + ".lora.l2", ad->l2);
    }
}

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw InputError("cannot open checkpoint: " + path);
        std::string raw{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
        if (raw.size() < 16 || std::memcmp(raw.data(), kMagic, 8) != 0)
            throw ParseError("checkpoint " + path + ": bad magic at offset 0");
        uint64_t manifest_len = 0;
        std::memcpy(&manifest_len, raw.data() + 8, 8);
        if (16 + manifest_len > raw.size())
            throw ParseError("checkpoint " + path + ": truncated manifest at offset 16");
        try {
            manifest_ = Json::parse(raw.substr(16, manifest_len));
        } catch (const Json::exception& e) {
            throw ParseError("checkpoint " + path + ": manifest is not valid JSON (" +
                             e.what() + ")");
        }
        if (!manifest_.is_array())
            throw ParseError("checkpoint " + path + ": manifest must be an array");
        payload_ = raw.substr(16 + manifest_len);
        for (size_t i = 0; i < manifest_.size(); ++i) {
            const auto& e = manifest_[i];
            if (!e.contains("name") || !e.contains("dtype") || !e.contains("shape") ||
                !e.contains("byte_offset") || !e.contains("byte_length"))
                throw ParseError("checkpoint " + path + ": manifest entry " +
                                 std::to_string(i) + " is missing required fields");
            const uint64_t off = e["byte_offset"].get<uint64_t>();
            const uint64_t len = e["byte_length"].get<uint64_t>();
            if (off + len > payload_.size())
                throw ParseError("checkpoint " + path + ": payload truncated at offset " +
                                 std::to_string(16 + manifest_len + off));
            index_[e["name"].get<std::string>()] = i;
        }
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const Json& entry(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end())
            throw IntegrityError("checkpoint " + path_ + ": missing entry " + name);
        return manifest_[it->second];
    }

    size_t entry_count() const { return manifest_.size(); }
    const Json& entry_at(size_t i) const { return manifest_[i]; }

    template <class T>
    std::vector<T> read_array(const std::string& name, const char* dtype) const {
        const Json& e = entry(name);
        if (e["dtype"].get<std::string>() != dtype)
            throw IntegrityError("checkpoint " + path_ + ": entry " + name + " has dtype " +
                                 e["dtype"].get<std::string>() + ", expected " + dtype);
        const uint64_t len = e["byte_length"].get<uint64_t>();
        if (len % sizeof(T) != 0)
            throw IntegrityError("checkpoint " + path_ + ": entry " + name +
                                 " byte length not a multiple of element size");
        int64_t expect = 1;
        for (const auto& d : e["shape"]) expect *= d.get<int64_t>();
        if (expect != static_cast<int64_t>(len / sizeof(T)))
            throw IntegrityError("checkpoint " + path_ + ": entry " + name +
                                 " shape does not match payload length");
        std::vector<T> out(len / sizeof(T));
        std::memcpy(out.data(), payload_.data() + e["byte_offset"].get<uint64_t>(), len);
        return out;
    }

    std::vector<int> shape_of(const std::string& name) const {
        std::vector<int> s;
        for (const auto& d : entry(name)["shape"]) s.push_back(d.get<int>());
        return s;
    }

    Tensor read_tensor(const std::string& name) const {
        return Tensor::from_data(shape_of(name), read_array<double>(name, "f64"));
    }

private:
    std::string path_;
    Json manifest_;
    std::string payload_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace

void save_checkpoint(const DecoderModel& m, const std::string& path) {
    Writer w;
    Json cfg;
    cfg["n_layers"] = m.config.n_layers;
    cfg["d_model"] = m.config.d_model;
    cfg["n_heads"] = m.config.n_heads;
    cfg["d_ffn"] = m.config.d_ffn;
    cfg["vocab_size"] = m.config.vocab_size;
    cfg["max_seq_len"] = m.config.max_seq_len;
    cfg["seed"] = m.config.seed;
    w.add("model.config", "u8", {}, nullptr, 0, std::move(cfg));
    w.add_f64("tok_emb", m.tok_emb);
    w.add_f64("pos_emb", m.pos_emb);
    for (size_t n = 0; n < m.layers.size(); ++n) {
        const DecoderLayer& layer = m.layers[n];
        w.add_f64("layers." + std::to_string(n) + ".norm1.gain", layer.norm1_gain);
        for (int i = 0; i < 4; ++i) write_module(w, layer.module(i));
        w.add_f64("layers." + std::to_string(n) + ".norm2.gain", layer.norm2_gain);
    }
    w.add_f64("final_norm.gain", m.final_norm_gain);
    w.add_f64("lm_head", m.lm_head);

    const std::string manifest = w.manifest.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write checkpoint: " + path);
    out.write(kMagic, 8);
    const uint64_t len = manifest.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    out.write(w.payload.data(), static_cast<std::streamsize>(w.payload.size()));
    if (!out) throw InputError("short write while saving checkpoint: " + path);
}

DecoderModel load_checkpoint(const std::string& path) {
    Reader r(path);
    const Json& cfg_attrs = r.entry("model.config")["attributes"];
    ModelConfig cfg;
    cfg.n_layers = cfg_attrs.at("n_layers").get<int>();
    cfg.d_model = cfg_attrs.at("d_model").get<int>();
    cfg.n_heads = cfg_attrs.at("n_heads").get<int>();
    cfg.d_ffn = cfg_attrs.at("d_ffn").get<int>();
    cfg.vocab_size = cfg_attrs.at("vocab_size").get<int>();
    cfg.max_seq_len = cfg_attrs.at("max_seq_len").get<int>();
    cfg.seed = cfg_attrs.at("seed").get<uint64_t>();
    cfg.validate();

    DecoderModel m;
    m.config = cfg;
    m.tok_emb = r.read_tensor("tok_emb");
    m.pos_emb = r.read_tensor("pos_emb");
    m.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (int n = 0; n < cfg.n_layers; ++n) {
        DecoderLayer& layer = m.layers[static_cast<size_t>(n)];
        layer.norm1_gain = r.read_tensor("layers." + std::to_string(n) + ".norm1.gain");
        layer.norm2_gain = r.read_tensor("layers." + std::to_string(n) + ".norm2.gain");
        for (int i = 0; i < 4; ++i) {
            LinearModule& mod = layer.module(i);
            mod.name = DecoderLayer::kModuleNames[static_cast<size_t>(i)];
            mod.layer_index = n;
            const std::string prefix = module_prefix(n, mod.name.c_str());
            if (r.has(prefix + ".codes")) {
                QuantizedTensor q;
                const Json& attrs = r.entry(prefix + ".codes")["attributes"];
                q.bits = attrs.at("bits").get<int>();
                q.group_size = attrs.at("group_size").get<int>();
                q.method = quant_method_from_name(attrs.at("method").get<std::string>());
                q.original_shape = r.shape_of(prefix + ".codes");
                q.codes = r.read_array<uint8_t>(prefix + ".codes", "u8");
                q.scales = r.read_array<double>(prefix + ".scales", "f64");
                q.zeros = r.read_array<int64_t>(prefix + ".zeros", "i64");
                if (q.method == QuantMethod::nf)
                    q.levels = r.read_array<double>(prefix + ".levels", "f64");
                if (q.scales.size() != q.zeros.size())
                    throw IntegrityError("checkpoint " + path + ": group count mismatch in " +
                                         prefix);
                mod.set_quantized(std::move(q));
            } else {
                mod.set_full_precision(r.read_tensor(prefix + ".weight"));
            }
            if (r.has(prefix + ".lora.l1")) {
                LoraAdapter ad;
                ad.l1 = r.read_tensor(prefix + ".lora.l1");
                ad.l2 = r.read_tensor(prefix + ".lora.l2");
                ad.rank = r.entry(prefix + ".lora.l1")["attributes"].at("rank").get<int>();
                if (ad.l1.dim(1) != ad.rank || ad.l2.dim(1) != ad.rank)
                    throw IntegrityError("checkpoint " + path + ": adapter rank mismatch in " +
                                         prefix);
                mod.adapter() = std::move(ad);
            }
        }
    }
    m.final_norm_gain = r.read_tensor("final_norm.gain");
    m.lm_head = r.read_tensor("lm_head");
    m.rebuild_derived();
    return m;
}

}  // namespace lqec
