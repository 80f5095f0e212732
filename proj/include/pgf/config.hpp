#pragma once

// Model / training / data configuration, with strict JSON (de)serialization:
// unknown keys are rejected with the offending key path.

#include <cstdint>
#include <string>

#include <json.hpp>

#include "pgf/tensor.hpp"

namespace pgf {

using json = nlohmann::json;

struct AblationFlags {
    bool use_cross_attention = true;
    bool use_gate = true;
    bool use_refiner = true;
};

struct ModelConfig {
    std::size_t hidden_dim = 32;       // D
    std::size_t num_layers = 2;        // L
    std::size_t fusion_start = 0;      // L0; layers below it are text-only
    std::size_t num_heads = 4;
    std::size_t ffn_dim = 64;
    std::size_t vocab_size = 50;
    std::size_t max_text_len = 12;
    std::size_t max_audio_len = 8;
    std::size_t max_visual_len = 8;
    std::size_t audio_dim = 5;         // d_a
    std::size_t visual_dim = 4;        // d_v
    std::size_t lora_rank = 4;         // 0 disables LoRA
    std::size_t adapter_bottleneck = 8;
    std::size_t head_hidden = 32;
    double dropout_p = 0.1;
    double ln_eps = 1e-12;
    AblationFlags ablation;
    std::size_t unfreeze_top_k = 2;    // honored only when use_refiner == false

    std::size_t head_dim() const { return hidden_dim / num_heads; }
    std::size_t bank_len() const { return max_audio_len + max_visual_len; }
    std::size_t fusion_layers() const {
        return fusion_start >= num_layers ? 0 : num_layers - fusion_start;
    }
    double lora_scale() const { return lora_rank == 0 ? 0.0 : 1.0 / double(lora_rank); }

    void validate() const {
        if (hidden_dim == 0 || num_layers == 0 || num_heads == 0 || ffn_dim == 0 ||
            vocab_size == 0 || head_hidden == 0)
            throw config_error("model: dims and depths must be positive");
        if (hidden_dim % num_heads != 0)
            throw config_error("model.num_heads: " + std::to_string(num_heads) +
                               " does not divide hidden_dim " + std::to_string(hidden_dim));
        if (fusion_start > num_layers)
            throw config_error("model.fusion_start: must be <= num_layers");
        if (lora_rank > hidden_dim)
            throw config_error("model.lora_rank: exceeds hidden_dim");
        if (dropout_p < 0.0 || dropout_p >= 1.0)
            throw config_error("model.dropout_p: must be in [0,1)");
        if (ln_eps <= 0.0) throw config_error("model.ln_eps: must be positive");
    }
};

struct TrainConfig {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t step_size = 9;   // StepLR period, in epochs
    double gamma = 0.1;
    std::size_t batch_size = 128;
    std::size_t max_epochs = 20;
    std::size_t patience = 10;
    double clip_norm = 1.0;      // global L2 gradient clip; 0 disables
    std::uint64_t seed = 0;

    void validate() const {
        if (lr <= 0.0) throw config_error("train.lr: must be positive");
        if (gamma <= 0.0 || gamma > 1.0) throw config_error("train.gamma: must be in (0,1]");
        if (patience < 1) throw config_error("train.patience: must be >= 1");
        if (batch_size == 0 || max_epochs == 0 || step_size == 0)
            throw config_error("train: batch_size, max_epochs, step_size must be positive");
    }
};

struct SynthSpec {
    std::size_t n_samples = 4000;
    std::size_t vocab_size = 50;
    std::size_t text_len = 12;
    std::size_t audio_len = 8;
    std::size_t audio_dim = 5;
    std::size_t visual_len = 8;
    std::size_t visual_dim = 4;
    double text_weight = 3.0;    // w_t; token scores are U(-1,1), averaged
    double audio_weight = 1.0;   // s_a, reads mean of audio channel 0
    double visual_weight = 1.0;  // s_v, reads mean of visual channel 1
    double noise_std = 0.1;
    std::uint64_t seed = 7;

    void validate() const {
        if (n_samples == 0 || vocab_size == 0 || text_len == 0 || audio_len == 0 ||
            visual_len == 0 || audio_dim == 0 || visual_dim < 2)
            throw config_error("data.synth: degenerate dimensions");
        if (noise_std < 0.0) throw config_error("data.synth.noise_std: must be >= 0");
    }
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    SynthSpec synth;
    std::string dataset_path;  // when set, load instead of generating
    std::string out_dir = "out";
    std::uint64_t seed = 0;

    void validate() const {
        model.validate();
        train.validate();
        synth.validate();
    }
};

// --------------------------------------------------------------------------
// JSON glue
// --------------------------------------------------------------------------

namespace detail {

class JsonReader {
  public:
    JsonReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw config_error(path_ + ": expected an object");
    }
    ~JsonReader() = default;

    template <typename T>
    void get(const char* key, T& out) {
        seen_.push_back(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;  // keep default
        try {
            out = it->get<T>();
        } catch (const json::exception&) {
            throw config_error(path_ + "." + key + ": wrong type");
        }
    }

    bool has(const char* key) const { return j_.contains(key); }

    const json* sub(const char* key) {
        seen_.push_back(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
                throw config_error(path_ + "." + it.key() + ": unknown key");
        }
    }

  private:
    const json& j_;
    std::string path_;
    std::vector<std::string> seen_;
};

}  // namespace detail

inline void from_json_strict(const json& j, AblationFlags& a, const std::string& path) {
    detail::JsonReader r(j, path);
    r.get("use_cross_attention", a.use_cross_attention);
    r.get("use_gate", a.use_gate);
    r.get("use_refiner", a.use_refiner);
    r.finish();
}

inline void from_json_strict(const json& j, ModelConfig& m, const std::string& path) {
    detail::JsonReader r(j, path);
    r.get("hidden_dim", m.hidden_dim);
    r.get("num_layers", m.num_layers);
    r.get("fusion_start", m.fusion_start);
    r.get("num_heads", m.num_heads);
    r.get("ffn_dim", m.ffn_dim);
    r.get("vocab_size", m.vocab_size);
    r.get("max_text_len", m.max_text_len);
    r.get("max_audio_len", m.max_audio_len);
    r.get("max_visual_len", m.max_visual_len);
    r.get("audio_dim", m.audio_dim);
    r.get("visual_dim", m.visual_dim);
    r.get("lora_rank", m.lora_rank);
    r.get("adapter_bottleneck", m.adapter_bottleneck);
    r.get("head_hidden", m.head_hidden);
    r.get("dropout_p", m.dropout_p);
    r.get("ln_eps", m.ln_eps);
    r.get("unfreeze_top_k", m.unfreeze_top_k);
    if (const json* a = r.sub("ablation")) from_json_strict(*a, m.ablation, path + ".ablation");
    r.finish();
}

inline void from_json_strict(const json& j, TrainConfig& t, const std::string& path) {
    detail::JsonReader r(j, path);
    r.get("lr", t.lr);
    r.get("weight_decay", t.weight_decay);
    r.get("beta1", t.beta1);
    r.get("beta2", t.beta2);
    r.get("adam_eps", t.adam_eps);
    r.get("step_size", t.step_size);
    r.get("gamma", t.gamma);
    r.get("batch_size", t.batch_size);
    r.get("max_epochs", t.max_epochs);
    r.get("patience", t.patience);
    r.get("clip_norm", t.clip_norm);
    r.get("seed", t.seed);
    r.finish();
}

inline void from_json_strict(const json& j, SynthSpec& s, const std::string& path) {
    detail::JsonReader r(j, path);
    r.get("n_samples", s.n_samples);
    r.get("vocab_size", s.vocab_size);
    r.get("text_len", s.text_len);
    r.get("audio_len", s.audio_len);
    r.get("audio_dim", s.audio_dim);
    r.get("visual_len", s.visual_len);
    r.get("visual_dim", s.visual_dim);
    r.get("text_weight", s.text_weight);
    r.get("audio_weight", s.audio_weight);
    r.get("visual_weight", s.visual_weight);
    r.get("noise_std", s.noise_std);
    r.get("seed", s.seed);
    r.finish();
}

inline void from_json_strict(const json& j, RunConfig& c, const std::string& path = "config") {
    detail::JsonReader r(j, path);
    if (const json* m = r.sub("model")) from_json_strict(*m, c.model, path + ".model");
    if (const json* t = r.sub("train")) from_json_strict(*t, c.train, path + ".train");
    if (const json* d = r.sub("data")) {
        detail::JsonReader rd(*d, path + ".data");
        if (const json* s = rd.sub("synth")) from_json_strict(*s, c.synth, path + ".data.synth");
        rd.get("path", c.dataset_path);
        rd.finish();
    }
    r.get("out_dir", c.out_dir);
    r.get("seed", c.seed);
    r.finish();
}

inline json to_json(const AblationFlags& a) {
    return json{{"use_cross_attention", a.use_cross_attention},
                {"use_gate", a.use_gate},
                {"use_refiner", a.use_refiner}};
}

inline json to_json(const ModelConfig& m) {
    return json{{"hidden_dim", m.hidden_dim},
                {"num_layers", m.num_layers},
                {"fusion_start", m.fusion_start},
                {"num_heads", m.num_heads},
                {"ffn_dim", m.ffn_dim},
                {"vocab_size", m.vocab_size},
                {"max_text_len", m.max_text_len},
                {"max_audio_len", m.max_audio_len},
                {"max_visual_len", m.max_visual_len},
                {"audio_dim", m.audio_dim},
                {"visual_dim", m.visual_dim},
                {"lora_rank", m.lora_rank},
                {"adapter_bottleneck", m.adapter_bottleneck},
                {"head_hidden", m.head_hidden},
                {"dropout_p", m.dropout_p},
                {"ln_eps", m.ln_eps},
                {"ablation", to_json(m.ablation)},
                {"unfreeze_top_k", m.unfreeze_top_k}};
}

inline json to_json(const TrainConfig& t) {
    return json{{"lr", t.lr},
                {"weight_decay", t.weight_decay},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"adam_eps", t.adam_eps},
                {"step_size", t.step_size},
                {"gamma", t.gamma},
                {"batch_size", t.batch_size},
                {"max_epochs", t.max_epochs},
                {"patience", t.patience},
                {"clip_norm", t.clip_norm},
                {"seed", t.seed}};
}

inline json to_json(const SynthSpec& s) {
    return json{{"n_samples", s.n_samples},
                {"vocab_size", s.vocab_size},
                {"text_len", s.text_len},
                {"audio_len", s.audio_len},
                {"audio_dim", s.audio_dim},
                {"visual_len", s.visual_len},
                {"visual_dim", s.visual_dim},
                {"text_weight", s.text_weight},
                {"audio_weight", s.audio_weight},
                {"visual_weight", s.visual_weight},
                {"noise_std", s.noise_std},
                {"seed", s.seed}};
}

inline json to_json(const RunConfig& c) {
    json d;
    if (!c.dataset_path.empty()) d["path"] = c.dataset_path;
    d["synth"] = to_json(c.synth);
    return json{{"model", to_json(c.model)},
                {"train", to_json(c.train)},
                {"data", d},
                {"out_dir", c.out_dir},
                {"seed", c.seed}};
}

// The small configuration used by `gradcheck` and by the finite-difference
// acceptance run: every module present, every dimension tiny.
inline ModelConfig toy_model_config() {
    ModelConfig m;
    m.hidden_dim = 8;
    m.num_layers = 2;
    m.fusion_start = 0;
    m.num_heads = 2;
    m.ffn_dim = 16;
    m.vocab_size = 20;
    m.max_text_len = 6;
    m.max_audio_len = 4;
    m.max_visual_len = 3;
    m.audio_dim = 3;
    m.visual_dim = 3;
    m.lora_rank = 2;
    m.adapter_bottleneck = 4;
    m.head_hidden = 4;
    m.dropout_p = 0.1;
    return m;
}

}  // namespace pgf
