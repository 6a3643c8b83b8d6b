#pragma once

// Dual-encoder model state: a small bidirectional transformer text encoder and
// an identity-backbone image encoder, both adapted through low-rank adapters
// with the backbone frozen. Holds named parameter tensors, seeded init, and a
// self-describing binary checkpoint format.

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "nast/common.hpp"
#include "json.hpp"

namespace nast {

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 32;
    int n_heads = 4;
    int n_layers = 6;
    int max_seq_len = 32;
    int image_feature_dim = 0;
    int embed_dim = 32;
    int lora_rank = 4;
    double lora_scale = 8.0;       // adapter output scale = lora_scale / lora_rank
    double temperature_init = 10.0;
    uint64_t seed = 1234;

    int head_dim() const { return d_model / n_heads; }
    int d_ff() const { return 2 * d_model; }
    double adapter_scale() const { return lora_scale / static_cast<double>(lora_rank); }

    void validate() const {
        require(d_model > 0 && n_heads > 0 && n_layers > 0 && embed_dim > 0, "dims must be positive");
        require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
        require(lora_rank >= 1 && lora_rank <= d_model, "lora_rank out of range");
        require(max_seq_len >= 4, "max_seq_len too small");
        require(vocab_size > 2, "vocab_size must cover BOS/EOS plus words");
        require(image_feature_dim > 0, "image_feature_dim must be positive");
        require(temperature_init > 0, "temperature_init must be positive");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"vocab_size", vocab_size},
                              {"d_model", d_model},
                              {"n_heads", n_heads},
                              {"n_layers", n_layers},
                              {"max_seq_len", max_seq_len},
                              {"image_feature_dim", image_feature_dim},
                              {"embed_dim", embed_dim},
                              {"lora_rank", lora_rank},
                              {"lora_scale", lora_scale},
                              {"temperature_init", temperature_init},
                              {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.vocab_size = j.at("vocab_size").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.n_layers = j.at("n_layers").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        c.image_feature_dim = j.at("image_feature_dim").get<int>();
        c.embed_dim = j.at("embed_dim").get<int>();
        c.lora_rank = j.at("lora_rank").get<int>();
        c.lora_scale = j.at("lora_scale").get<double>();
        c.temperature_init = j.at("temperature_init").get<double>();
        c.seed = j.at("seed").get<uint64_t>();
        return c;
    }
};

struct ParamTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized only for trainable tensors
    bool trainable = false;
    int text_layer = -1;  // 1..L for text-block LoRA tensors, -1 = "other" bucket

    size_t size() const { return data.size(); }
};

// Index handles into the parameter table for one transformer block.
struct BlockParams {
    int ln1_g, ln1_b;
    int q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
    int q_lora_down, q_lora_up, v_lora_down, v_lora_up;
    int ln2_g, ln2_b;
    int fc1_w, fc1_b, fc2_w, fc2_b;
};

class Model {
public:
    ModelConfig cfg;

    explicit Model(const ModelConfig& config) : cfg(config) {
        cfg.validate();
        build_tensors();
        init_weights();
    }

    // --- parameter table access ---
    std::vector<ParamTensor>& params() { return params_; }
    const std::vector<ParamTensor>& params() const { return params_; }

    ParamTensor& tensor(int idx) { return params_[static_cast<size_t>(idx)]; }
    const ParamTensor& tensor(int idx) const { return params_[static_cast<size_t>(idx)]; }

    const ParamTensor& tensor(const std::string& name) const {
        auto it = by_name_.find(name);
        require(it != by_name_.end(), "unknown tensor: " + name);
        return params_[static_cast<size_t>(it->second)];
    }
    ParamTensor& tensor(const std::string& name) {
        auto it = by_name_.find(name);
        require(it != by_name_.end(), "unknown tensor: " + name);
        return params_[static_cast<size_t>(it->second)];
    }

    int tok_embed, pos_embed, lnf_g, lnf_b, text_proj;
    int img_adapter_down, img_adapter_up, img_proj, img_proj_b;
    int logit_scale;
    std::vector<BlockParams> blocks;

    double temperature() const { return std::exp(tensor(logit_scale).data[0]); }

    void zero_grad() {
        for (auto& p : params_) {
            if (p.trainable) std::fill(p.grad.begin(), p.grad.end(), 0.0);
        }
    }

    // Gradient map over trainable tensors only; frozen tensors have no entry.
    std::map<std::string, std::vector<double>> gradient_map() const {
        std::map<std::string, std::vector<double>> g;
        for (const auto& p : params_) {
            if (p.trainable) g[p.name] = p.grad;
        }
        return g;
    }

    uint64_t backbone_hash() const {
        uint64_t h = 1469598103934665603ull;
        for (const auto& p : params_) {
            if (p.trainable) continue;
            for (double x : p.data) {
                uint64_t bits;
                std::memcpy(&bits, &x, sizeof(bits));
                h ^= bits;
                h *= 1099511628211ull;
            }
        }
        return h;
    }

    // --- checkpoint: magic, JSON header (config + tensor index), raw doubles ---
    void save_checkpoint(const std::filesystem::path& path) const {
        nlohmann::json header;
        header["config"] = cfg.to_json();
        nlohmann::json tensors = nlohmann::json::array();
        size_t offset = 0;
        for (const auto& p : params_) {
            tensors.push_back({{"name", p.name},
                               {"shape", p.shape},
                               {"offset", offset},
                               {"size", p.size()},
                               {"trainable", p.trainable},
                               {"text_layer", p.text_layer}});
            offset += p.size();
        }
        header["tensors"] = tensors;
        std::string hs = header.dump();

        std::string blob;
        blob.reserve(16 + hs.size() + offset * sizeof(double));
        blob += "NASTCKPT";
        uint64_t hlen = hs.size();
        blob.append(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
        blob += hs;
        for (const auto& p : params_) {
            blob.append(reinterpret_cast<const char*>(p.data.data()),
                        p.data.size() * sizeof(double));
        }
        write_file(path, blob);
    }

    static Model load_checkpoint(const std::filesystem::path& path) {
        std::string blob = read_file(path);
        if (blob.size() < 16 || blob.compare(0, 8, "NASTCKPT") != 0)
            throw DataError("not a model checkpoint: " + path.string());
        uint64_t hlen;
        std::memcpy(&hlen, blob.data() + 8, sizeof(hlen));
        if (16 + hlen > blob.size()) throw DataError("truncated checkpoint header");
        auto header = nlohmann::json::parse(blob.substr(16, hlen));
        Model m(ModelConfig::from_json(header.at("config")));
        const char* base = blob.data() + 16 + hlen;
        size_t payload = blob.size() - 16 - hlen;
        for (const auto& jt : header.at("tensors")) {
            auto& p = m.tensor(jt.at("name").get<std::string>());
            size_t offset = jt.at("offset").get<size_t>();
            size_t size = jt.at("size").get<size_t>();
            if (size != p.size()) throw DataError("tensor size mismatch: " + p.name);
            if ((offset + size) * sizeof(double) > payload)
                throw DataError("truncated checkpoint payload");
            std::memcpy(p.data.data(), base + offset * sizeof(double), size * sizeof(double));
        }
        return m;
    }

private:
    std::vector<ParamTensor> params_;
    std::map<std::string, int> by_name_;

    int add(const std::string& name, std::vector<int> shape, bool trainable, int text_layer = -1) {
        ParamTensor p;
        p.name = name;
        p.shape = std::move(shape);
        size_t n = 1;
        for (int s : p.shape) n *= static_cast<size_t>(s);
        p.data.assign(n, 0.0);
        p.trainable = trainable;
        p.text_layer = text_layer;
        if (trainable) p.grad.assign(n, 0.0);
        by_name_[name] = static_cast<int>(params_.size());
        params_.push_back(std::move(p));
        return static_cast<int>(params_.size()) - 1;
    }

    void build_tensors() {
        const int d = cfg.d_model, r = cfg.lora_rank, f = cfg.d_ff();
        const int e = cfg.embed_dim, din = cfg.image_feature_dim;
        tok_embed = add("text.tok_embed", {cfg.vocab_size, d}, false);
        pos_embed = add("text.pos_embed", {cfg.max_seq_len, d}, false);
        for (int l = 1; l <= cfg.n_layers; ++l) {
            std::string b = "text.block." + std::to_string(l) + ".";
            BlockParams bp;
            bp.ln1_g = add(b + "ln1.gamma", {d}, false);
            bp.ln1_b = add(b + "ln1.beta", {d}, false);
            bp.q_w = add(b + "attn.q.w", {d, d}, false);
            bp.q_b = add(b + "attn.q.b", {d}, false);
            bp.k_w = add(b + "attn.k.w", {d, d}, false);
            bp.k_b = add(b + "attn.k.b", {d}, false);
            bp.v_w = add(b + "attn.v.w", {d, d}, false);
            bp.v_b = add(b + "attn.v.b", {d}, false);
            bp.o_w = add(b + "attn.o.w", {d, d}, false);
            bp.o_b = add(b + "attn.o.b", {d}, false);
            bp.q_lora_down = add(b + "attn.q.lora.down", {r, d}, true, l);
            bp.q_lora_up = add(b + "attn.q.lora.up", {d, r}, true, l);
            bp.v_lora_down = add(b + "attn.v.lora.down", {r, d}, true, l);
            bp.v_lora_up = add(b + "attn.v.lora.up", {d, r}, true, l);
            bp.ln2_g = add(b + "ln2.gamma", {d}, false);
            bp.ln2_b = add(b + "ln2.beta", {d}, false);
            bp.fc1_w = add(b + "mlp.fc1.w", {f, d}, false);
            bp.fc1_b = add(b + "mlp.fc1.b", {f}, false);
            bp.fc2_w = add(b + "mlp.fc2.w", {d, f}, false);
            bp.fc2_b = add(b + "mlp.fc2.b", {d}, false);
            blocks.push_back(bp);
        }
        lnf_g = add("text.ln_f.gamma", {d}, false);
        lnf_b = add("text.ln_f.beta", {d}, false);
        text_proj = add("text.proj", {e, d}, true);
        img_adapter_down = add("image.adapter.down", {r, din}, true);
        img_adapter_up = add("image.adapter.up", {din, r}, true);
        img_proj = add("image.proj", {e, din}, true);
        img_proj_b = add("image.proj.b", {e}, true);
        logit_scale = add("logit_scale", {1}, true);
    }

    void fill_gaussian(int idx, Rng& rng, double sigma) {
        for (double& x : params_[static_cast<size_t>(idx)].data) x = rng.gaussian(0.0, sigma);
    }

    void init_weights() {
        Rng rng(derive_seed(cfg.seed, "model-init"));
        const double d_sigma = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
        const double f_sigma = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff()));
        const double i_sigma = 1.0 / std::sqrt(static_cast<double>(cfg.image_feature_dim));

        fill_gaussian(tok_embed, rng, 0.5);
        {
            // sinusoidal position code: smooth across positions, so attention
            // patterns learned on short captions carry to longer ones
            auto& pe = tensor(pos_embed).data;
            const int d = cfg.d_model;
            for (int p = 0; p < cfg.max_seq_len; ++p) {
                for (int i = 0; i < d / 2; ++i) {
                    double freq = std::pow(10000.0, -2.0 * i / static_cast<double>(d));
                    pe[static_cast<size_t>(p) * d + 2 * i] = 0.5 * std::sin(p * freq);
                    pe[static_cast<size_t>(p) * d + 2 * i + 1] = 0.5 * std::cos(p * freq);
                }
            }
        }
        // attention score scale starts small: near-uniform attention makes the
        // EOS state aggregate the whole caption instead of a single token, and
        // the adapters sharpen it only where training asks for it
        const double attn_sigma = 0.25 * d_sigma;
        for (auto& bp : blocks) {
            std::fill(tensor(bp.ln1_g).data.begin(), tensor(bp.ln1_g).data.end(), 1.0);
            std::fill(tensor(bp.ln2_g).data.begin(), tensor(bp.ln2_g).data.end(), 1.0);
            fill_gaussian(bp.q_w, rng, attn_sigma);
            fill_gaussian(bp.k_w, rng, attn_sigma);
            fill_gaussian(bp.v_w, rng, d_sigma);
            fill_gaussian(bp.o_w, rng, d_sigma);
            fill_gaussian(bp.fc1_w, rng, d_sigma);
            fill_gaussian(bp.fc2_w, rng, f_sigma);
            // LoRA: seeded down, zero up, so the adapter is exactly transparent
            // until the first optimizer step
            fill_gaussian(bp.q_lora_down, rng, d_sigma);
            fill_gaussian(bp.v_lora_down, rng, d_sigma);
        }
        std::fill(tensor(lnf_g).data.begin(), tensor(lnf_g).data.end(), 1.0);
        fill_gaussian(text_proj, rng, d_sigma);
        fill_gaussian(img_adapter_down, rng, i_sigma);
        fill_gaussian(img_proj, rng, i_sigma);
        fill_gaussian(img_proj_b, rng, 0.1);
        tensor(logit_scale).data[0] = std::log(cfg.temperature_init);
    }
};

}  // namespace nast
