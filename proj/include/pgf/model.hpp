#pragma once

// The progressive gated-fusion encoder: a frozen randomly-initialized
// transformer backbone adapted with LoRA, augmented from layer `fusion_start`
// upward with cross-attention over an audio-visual feature bank, a sigmoid
// arbitration gate, and a bottleneck adapter, followed by a small regression
// head reading the sequence-initial ([CLS]) state.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pgf/config.hpp"
#include "pgf/tensor.hpp"

namespace pgf {

struct MultimodalBatch {
    std::vector<int> token_ids;  // [B, T_t], row-major
    Mask text_mask;              // [B, T_t]
    Tensor audio;                // [B, T_a, d_a]
    Mask audio_mask;             // [B, T_a]
    Tensor visual;               // [B, T_v, d_v]
    Mask visual_mask;            // [B, T_v]
    std::vector<double> labels;  // [B], in [-3, 3]

    std::size_t batch_size() const { return text_mask.shape[0]; }
    std::size_t text_len() const { return text_mask.shape[1]; }

    void validate() const {
        auto check_mask = [](const Mask& m, const char* which) {
            std::size_t B = m.shape[0], T = m.shape[1];
            for (std::size_t b = 0; b < B; ++b) {
                bool any = false;
                for (std::size_t t = 0; t < T; ++t) any = any || m.at(b * T + t);
                if (!any)
                    throw value_error(std::string("batch: ") + which + " mask row " +
                                      std::to_string(b) + " has no true entry");
            }
        };
        check_mask(text_mask, "text");
        check_mask(audio_mask, "audio");
        check_mask(visual_mask, "visual");
        for (double y : labels)
            if (y < -3.0 || y > 3.0)
                throw value_error("batch: label " + std::to_string(y) + " outside [-3, 3]");
        if (token_ids.size() != batch_size() * text_len())
            throw shape_error("batch: token_ids do not match text mask shape");
    }
};

// Per-layer summary of the fusion coefficient g for one forward pass.
struct GateStats {
    std::size_t layer = 0;
    double mean = 0.0;
    double stddev = 0.0;
    double frac_gt_half = 0.0;
};

struct GateTrace {
    bool has_gate = false;  // false under the w/o-Gate ablation or when no layer fuses
    std::vector<GateStats> layers;
};

inline GateStats compute_gate_stats(const Tensor& g, std::size_t layer) {
    GateStats s;
    s.layer = layer;
    const double* p = g.data();
    std::size_t n = g.numel();
    double sum = 0.0, sum2 = 0.0, cnt = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sum += p[i];
        sum2 += p[i] * p[i];
        if (p[i] > 0.5) cnt += 1.0;
    }
    s.mean = sum / double(n);
    s.stddev = std::sqrt(std::max(0.0, sum2 / double(n) - s.mean * s.mean));
    s.frac_gt_half = cnt / double(n);
    return s;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct LinearParams {
    Tensor w;  // [out, in]
    Tensor b;  // [out]
};

struct LoraPair {
    Tensor a;  // [r, in]
    Tensor b;  // [out, r], zero at init so the update starts as the identity
};

struct AttentionParams {
    LinearParams q, k, v, o;
};

struct LayerParams {
    // frozen backbone
    AttentionParams attn;
    LinearParams ffn1, ffn2;
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    // trainable add-ons
    LoraPair lora_q, lora_v;  // undefined when lora_rank == 0
    bool fusion = false;
    AttentionParams cross;                    // defined when fusion && use_cross_attention
    LinearParams gate;                        // defined when fusion && use_gate; w is [D, 2D]
    LinearParams adapter_down, adapter_up;    // defined when fusion && use_refiner
    Tensor adapter_ln_gain, adapter_ln_bias;  // the post-fusion layer norm
};

struct HeadParams {
    LinearParams fc1, fc2;
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

// Trainable-parameter breakdown, closed-form from the configuration.
struct ParamCount {
    std::size_t lora = 0;
    std::size_t projections = 0;  // modality projections + bank position tables
    std::size_t cross_attention = 0;
    std::size_t gate = 0;
    std::size_t adapters = 0;
    std::size_t head = 0;
    std::size_t unfrozen_backbone = 0;
    std::size_t total = 0;
};

inline ParamCount count_trainable_params(const ModelConfig& cfg) {
    const std::size_t D = cfg.hidden_dim, L = cfg.num_layers, r = cfg.lora_rank,
                      m = cfg.adapter_bottleneck, ffn = cfg.ffn_dim;
    const std::size_t nf = cfg.fusion_layers();
    ParamCount c;
    if (r > 0) c.lora = L * 4 * r * D;  // A and B for each of Q and V, every layer
    if (nf > 0)
        c.projections = cfg.audio_dim * D + D + cfg.visual_dim * D + D +
                        (cfg.max_audio_len + cfg.max_visual_len) * D;
    if (nf > 0 && cfg.ablation.use_cross_attention) c.cross_attention = nf * 4 * (D * D + D);
    if (nf > 0 && cfg.ablation.use_gate) c.gate = nf * (2 * D * D + D);
    if (nf > 0 && cfg.ablation.use_refiner)
        c.adapters = nf * (D * m + m + m * D + D + 2 * D);
    c.head = D * cfg.head_hidden + cfg.head_hidden + cfg.head_hidden + 1;
    if (!cfg.ablation.use_refiner && cfg.unfreeze_top_k > 0) {
        std::size_t k = std::min<std::size_t>(cfg.unfreeze_top_k, L);
        std::size_t per_layer = 4 * (D * D + D) + (D * ffn + ffn + ffn * D + D) + 4 * D;
        c.unfrozen_backbone = k * per_layer;
    }
    c.total = c.lora + c.projections + c.cross_attention + c.gate + c.adapters + c.head +
              c.unfrozen_backbone;
    return c;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct PgfNet {
    ModelConfig cfg;
    Tensor tok_emb;   // [vocab, D], frozen
    Tensor pos_emb;   // [max_text_len, D], frozen
    LinearParams audio_proj, visual_proj;  // model-level, shared by all fusion layers
    Tensor audio_pos, visual_pos;          // learned bank position tables
    std::vector<LayerParams> layers;
    HeadParams head;

    PgfNet() = default;

    PgfNet(ModelConfig config, std::uint64_t seed) : cfg(std::move(config)) {
        cfg.validate();
        if (cfg.ablation.use_refiner && cfg.adapter_bottleneck == 0 && cfg.fusion_layers() > 0)
            throw config_error("model.adapter_bottleneck: must be >= 1 while the refiner is enabled");
        std::mt19937_64 rng(seed);
        const std::size_t D = cfg.hidden_dim;

        tok_emb = Tensor::randn({cfg.vocab_size, D}, rng, 0.5);
        pos_emb = Tensor::randn({cfg.max_text_len, D}, rng, 0.5);

        const bool any_fusion = cfg.fusion_layers() > 0;
        if (any_fusion) {
            audio_proj = make_linear(D, cfg.audio_dim, rng, true);
            visual_proj = make_linear(D, cfg.visual_dim, rng, true);
            audio_pos = Tensor::randn({cfg.max_audio_len, D}, rng, 0.02);
            audio_pos.set_requires_grad(true);
            visual_pos = Tensor::randn({cfg.max_visual_len, D}, rng, 0.02);
            visual_pos.set_requires_grad(true);
        }

        layers.resize(cfg.num_layers);
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
            LayerParams& lp = layers[l];
            lp.attn.q = make_linear(D, D, rng, false);
            lp.attn.k = make_linear(D, D, rng, false);
            lp.attn.v = make_linear(D, D, rng, false);
            lp.attn.o = make_linear(D, D, rng, false);
            lp.ffn1 = make_linear(cfg.ffn_dim, D, rng, false);
            lp.ffn2 = make_linear(D, cfg.ffn_dim, rng, false);
            lp.ln1_gain = Tensor::full({D}, 1.0);
            lp.ln1_bias = Tensor::zeros({D});
            lp.ln2_gain = Tensor::full({D}, 1.0);
            lp.ln2_bias = Tensor::zeros({D});
            if (cfg.lora_rank > 0) {
                lp.lora_q = make_lora(D, cfg.lora_rank, rng);
                lp.lora_v = make_lora(D, cfg.lora_rank, rng);
            }
            lp.fusion = l >= cfg.fusion_start;
            if (lp.fusion) {
                if (cfg.ablation.use_cross_attention) {
                    lp.cross.q = make_linear(D, D, rng, true);
                    lp.cross.k = make_linear(D, D, rng, true);
                    lp.cross.v = make_linear(D, D, rng, true);
                    lp.cross.o = make_linear(D, D, rng, true);
                }
                if (cfg.ablation.use_gate) {
                    lp.gate.w = Tensor::xavier_uniform(D, 2 * D, rng);
                    lp.gate.w.set_requires_grad(true);
                    lp.gate.b = Tensor::zeros({D}, true);  // gate opens at 0.5
                }
                if (cfg.ablation.use_refiner) {
                    lp.adapter_down = make_linear(cfg.adapter_bottleneck, D, rng, true);
                    lp.adapter_up.w = Tensor::zeros({D, cfg.adapter_bottleneck}, true);
                    lp.adapter_up.b = Tensor::zeros({D}, true);
                    lp.adapter_ln_gain = Tensor::full({D}, 1.0);
                    lp.adapter_ln_gain.set_requires_grad(true);
                    lp.adapter_ln_bias = Tensor::zeros({D}, true);
                }
            }
        }
        head.fc1 = make_linear(cfg.head_hidden, D, rng, true);
        head.fc2 = make_linear(1, cfg.head_hidden, rng, true);

        if (!cfg.ablation.use_refiner && cfg.unfreeze_top_k > 0) {
            std::size_t k = std::min<std::size_t>(cfg.unfreeze_top_k, cfg.num_layers);
            for (std::size_t l = cfg.num_layers - k; l < cfg.num_layers; ++l)
                set_backbone_trainable(layers[l], true);
        }
    }

    // Deterministic, name-stable listing of every parameter (frozen included).
    std::vector<NamedParam> named_parameters() const {
        std::vector<NamedParam> out;
        auto push = [&out](const std::string& name, const Tensor& t) {
            if (t.defined()) out.push_back({name, t});
        };
        push("embeddings.token", tok_emb);
        push("embeddings.position", pos_emb);
        push("bank.audio_proj.w", audio_proj.w);
        push("bank.audio_proj.b", audio_proj.b);
        push("bank.visual_proj.w", visual_proj.w);
        push("bank.visual_proj.b", visual_proj.b);
        push("bank.audio_pos", audio_pos);
        push("bank.visual_pos", visual_pos);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const LayerParams& lp = layers[l];
            std::string p = "layers." + std::to_string(l) + ".";
            push(p + "attn.q.w", lp.attn.q.w);
            push(p + "attn.q.b", lp.attn.q.b);
            push(p + "attn.k.w", lp.attn.k.w);
            push(p + "attn.k.b", lp.attn.k.b);
            push(p + "attn.v.w", lp.attn.v.w);
            push(p + "attn.v.b", lp.attn.v.b);
            push(p + "attn.o.w", lp.attn.o.w);
            push(p + "attn.o.b", lp.attn.o.b);
            push(p + "ln1.gain", lp.ln1_gain);
            push(p + "ln1.bias", lp.ln1_bias);
            push(p + "ffn1.w", lp.ffn1.w);
            push(p + "ffn1.b", lp.ffn1.b);
            push(p + "ffn2.w", lp.ffn2.w);
            push(p + "ffn2.b", lp.ffn2.b);
            push(p + "ln2.gain", lp.ln2_gain);
            push(p + "ln2.bias", lp.ln2_bias);
            push(p + "lora.q.a", lp.lora_q.a);
            push(p + "lora.q.b", lp.lora_q.b);
            push(p + "lora.v.a", lp.lora_v.a);
            push(p + "lora.v.b", lp.lora_v.b);
            push(p + "cross.q.w", lp.cross.q.w);
            push(p + "cross.q.b", lp.cross.q.b);
            push(p + "cross.k.w", lp.cross.k.w);
            push(p + "cross.k.b", lp.cross.k.b);
            push(p + "cross.v.w", lp.cross.v.w);
            push(p + "cross.v.b", lp.cross.v.b);
            push(p + "cross.o.w", lp.cross.o.w);
            push(p + "cross.o.b", lp.cross.o.b);
            push(p + "gate.w", lp.gate.w);
            push(p + "gate.b", lp.gate.b);
            push(p + "adapter.down.w", lp.adapter_down.w);
            push(p + "adapter.down.b", lp.adapter_down.b);
            push(p + "adapter.up.w", lp.adapter_up.w);
            push(p + "adapter.up.b", lp.adapter_up.b);
            push(p + "adapter.ln.gain", lp.adapter_ln_gain);
            push(p + "adapter.ln.bias", lp.adapter_ln_bias);
        }
        push("head.fc1.w", head.fc1.w);
        push("head.fc1.b", head.fc1.b);
        push("head.fc2.w", head.fc2.w);
        push("head.fc2.b", head.fc2.b);
        return out;
    }

    std::vector<Tensor> trainable_parameters() const {
        std::vector<Tensor> out;
        for (auto& np : named_parameters())
            if (np.tensor.requires_grad()) out.push_back(np.tensor);
        return out;
    }

  private:
    static LinearParams make_linear(std::size_t out_f, std::size_t in_f, std::mt19937_64& rng,
                                    bool trainable) {
        LinearParams p;
        p.w = Tensor::xavier_uniform(out_f, in_f, rng);
        p.w.set_requires_grad(trainable);
        p.b = Tensor::zeros({out_f}, trainable);
        return p;
    }

    static LoraPair make_lora(std::size_t dim, std::size_t rank, std::mt19937_64& rng) {
        LoraPair p;
        p.a = Tensor::randn({rank, dim}, rng, 0.02);
        p.a.set_requires_grad(true);
        p.b = Tensor::zeros({dim, rank}, true);
        return p;
    }

    static void set_backbone_trainable(LayerParams& lp, bool trainable) {
        for (Tensor* t : {&lp.attn.q.w, &lp.attn.q.b, &lp.attn.k.w, &lp.attn.k.b, &lp.attn.v.w,
                          &lp.attn.v.b, &lp.attn.o.w, &lp.attn.o.b, &lp.ffn1.w, &lp.ffn1.b,
                          &lp.ffn2.w, &lp.ffn2.b, &lp.ln1_gain, &lp.ln1_bias, &lp.ln2_gain,
                          &lp.ln2_bias})
            t->set_requires_grad(trainable);
    }
};

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

struct ForwardMode {
    bool training = false;
    std::mt19937_64* rng = nullptr;  // required when training and dropout_p > 0
};

namespace detail {

inline Tensor split_heads(const Tensor& x, std::size_t heads) {
    std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
    return swap_axes(reshape(x, {B, T, heads, D / heads}), 1, 2);  // [B,h,T,dh]
}

inline Tensor merge_heads(const Tensor& x) {
    std::size_t B = x.dim(0), h = x.dim(1), T = x.dim(2), dh = x.dim(3);
    return reshape(swap_axes(x, 1, 2), {B, T, h * dh});
}

}  // namespace detail

// Multi-head scaled dot-product attention. Queries come from q_in, keys and
// values from kv_in; key positions where key_mask is false receive exactly
// zero weight. LoRA factors, when given, adapt the query and value
// projections. Returns the projected attention output without residual.
inline Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in, const Mask& key_mask,
                                   const AttentionParams& p, const LoraPair* lora_q,
                                   const LoraPair* lora_v, const ModelConfig& cfg,
                                   const ForwardMode& mode) {
    const std::size_t heads = cfg.num_heads;
    const double scale_f = 1.0 / std::sqrt(double(cfg.head_dim()));
    const double ls = cfg.lora_scale();
    Tensor q = lora_q ? lora_linear(q_in, p.q.w, p.q.b, lora_q->a, lora_q->b, ls)
                      : linear(q_in, p.q.w, p.q.b);
    Tensor k = linear(kv_in, p.k.w, p.k.b);
    Tensor v = lora_v ? lora_linear(kv_in, p.v.w, p.v.b, lora_v->a, lora_v->b, ls)
                      : linear(kv_in, p.v.w, p.v.b);
    Tensor qh = detail::split_heads(q, heads);
    Tensor kh = detail::split_heads(k, heads);
    Tensor vh = detail::split_heads(v, heads);
    Tensor scores = scale(matmul(qh, transpose_last2(kh)), scale_f);  // [B,h,Tq,Tk]
    Tensor probs = softmax_lastdim(scores, &key_mask);
    if (mode.training && cfg.dropout_p > 0.0)
        probs = dropout(probs, cfg.dropout_p, *mode.rng, true);
    Tensor ctx = detail::merge_heads(matmul(probs, vh));
    return linear(ctx, p.o.w, p.o.b);
}

// Self-attention sublayer with post-norm residual: LN1(x + MHA(x)).
inline Tensor self_attention(const Tensor& h_prev, const Mask& text_mask, const LayerParams& lp,
                             const ModelConfig& cfg, const ForwardMode& mode) {
    const LoraPair* lq = lp.lora_q.a.defined() ? &lp.lora_q : nullptr;
    const LoraPair* lv = lp.lora_v.a.defined() ? &lp.lora_v : nullptr;
    Tensor attn = multi_head_attention(h_prev, h_prev, text_mask, lp.attn, lq, lv, cfg, mode);
    return layer_norm(add(h_prev, attn), lp.ln1_gain, lp.ln1_bias, cfg.ln_eps);
}

// Projects both modality streams to the hidden width and concatenates them
// along the sequence axis into the shared feature bank.
inline std::pair<Tensor, Mask> build_feature_bank(const Tensor& audio, const Mask& audio_mask,
                                                  const Tensor& visual, const Mask& visual_mask,
                                                  const LinearParams& audio_proj,
                                                  const LinearParams& visual_proj) {
    Tensor a = linear(audio, audio_proj.w, audio_proj.b);
    Tensor v = linear(visual, visual_proj.w, visual_proj.b);
    Tensor bank = concat_seq(a, v);
    std::size_t B = audio_mask.shape[0];
    std::size_t ta = audio_mask.shape[1], tv = visual_mask.shape[1];
    Mask bank_mask;
    bank_mask.shape = {B, ta + tv};
    bank_mask.on.resize(B * (ta + tv));
    for (std::size_t b = 0; b < B; ++b) {
        std::copy(audio_mask.on.begin() + b * ta, audio_mask.on.begin() + (b + 1) * ta,
                  bank_mask.on.begin() + b * (ta + tv));
        std::copy(visual_mask.on.begin() + b * tv, visual_mask.on.begin() + (b + 1) * tv,
                  bank_mask.on.begin() + b * (ta + tv) + ta);
    }
    return {bank, bank_mask};
}

// Cross-attention core: text queries the bank. Output has the text length
// for any bank length; the caller owns the residual wiring.
inline Tensor cross_attention(const Tensor& h_text, const Tensor& bank, const Mask& bank_mask,
                              const AttentionParams& p, const ModelConfig& cfg,
                              const ForwardMode& mode) {
    return multi_head_attention(h_text, bank, bank_mask, p, nullptr, nullptr, cfg, mode);
}

// g = sigmoid(W_g.[h_text; h_cross] + b_g); fused = g*h_text + (1-g)*h_cross.
inline std::pair<Tensor, Tensor> gated_fusion(const Tensor& h_text, const Tensor& h_cross,
                                              const LinearParams& gate) {
    detail::check_same_shape("gated_fusion", h_text, h_cross);
    Tensor cat = concat(h_text, h_cross, h_text.rank() - 1);
    Tensor g = sigmoid(linear(cat, gate.w, gate.b));
    Tensor fused = add(mul(g, h_text), mul(affine(g, -1.0, 1.0), h_cross));
    return {fused, g};
}

// Bottleneck refinement with residual and the post-fusion layer norm:
// LN(x + up(relu(down(x)))).
inline Tensor adapter(const Tensor& x, const LayerParams& lp, const ModelConfig& cfg) {
    Tensor mid = relu(linear(x, lp.adapter_down.w, lp.adapter_down.b));
    Tensor up = linear(mid, lp.adapter_up.w, lp.adapter_up.b);
    return layer_norm(add(x, up), lp.adapter_ln_gain, lp.adapter_ln_bias, cfg.ln_eps);
}

// One encoder layer. Below fusion_start (lp.fusion == false) this is a plain
// post-norm transformer layer; at and above it the fusion stages run between
// the self-attention and feed-forward sublayers:
//
//   h_text  = LN1(x + SelfAttn(x))
//   h_cross = h_text + CrossAttn(h_text, bank)      (w/o CA: pooled bank, no residual)
//   h_fused = g*h_text + (1-g)*h_cross              (w/o Gate: h_text + h_cross)
//   h       = PlainLN(h_text + h_fused)
//   h       = LN2(h + FFN(h))
//   out     = Adapter(h)                            (w/o Refiner: skipped)
//
// `pooled_bank` is the masked mean of the bank, precomputed by the encoder
// when the w/o-CA path needs it.
inline Tensor fusion_layer_forward(const Tensor& h_prev, const Mask& text_mask, const Tensor& bank,
                                   const Mask& bank_mask, const Tensor& pooled_bank,
                                   const LayerParams& lp, const ModelConfig& cfg,
                                   const ForwardMode& mode, GateStats* stats,
                                   std::size_t layer_index) {
    Tensor h_text = self_attention(h_prev, text_mask, lp, cfg, mode);
    Tensor h = h_text;
    if (lp.fusion) {
        Tensor h_cross;
        if (cfg.ablation.use_cross_attention) {
            h_cross = add(h_text, cross_attention(h_text, bank, bank_mask, lp.cross, cfg, mode));
        } else {
            h_cross = broadcast_time(pooled_bank, h_text.dim(1));
        }
        Tensor h_fused;
        if (cfg.ablation.use_gate) {
            auto [fused, g] = gated_fusion(h_text, h_cross, lp.gate);
            h_fused = fused;
            if (stats) *stats = compute_gate_stats(g, layer_index);
        } else {
            h_fused = add(h_text, h_cross);
        }
        h = plain_layer_norm(add(h_text, h_fused), cfg.ln_eps);
    }
    Tensor f = relu(linear(h, lp.ffn1.w, lp.ffn1.b));
    if (mode.training && cfg.dropout_p > 0.0) f = dropout(f, cfg.dropout_p, *mode.rng, true);
    f = linear(f, lp.ffn2.w, lp.ffn2.b);
    Tensor h2 = layer_norm(add(h, f), lp.ln2_gain, lp.ln2_bias, cfg.ln_eps);
    if (lp.fusion && cfg.ablation.use_refiner) h2 = adapter(h2, lp, cfg);
    return h2;
}

struct EncoderOutput {
    Tensor cls;  // [B, D]
    GateTrace trace;
};

inline EncoderOutput encoder_forward(const PgfNet& net, const MultimodalBatch& batch,
                                     const ForwardMode& mode) {
    const ModelConfig& cfg = net.cfg;
    batch.validate();
    const std::size_t B = batch.batch_size(), Tt = batch.text_len();
    if (Tt > cfg.max_text_len)
        throw value_error("encoder: text length " + std::to_string(Tt) + " exceeds max_text_len " +
                          std::to_string(cfg.max_text_len));

    Tensor h = embedding(net.tok_emb, batch.token_ids, {B, Tt});
    h = add_position(h, net.pos_emb);

    const bool any_fusion = cfg.fusion_layers() > 0;
    Tensor bank, pooled;
    Mask bank_mask;
    if (any_fusion) {
        if (batch.audio.dim(1) > cfg.max_audio_len || batch.visual.dim(1) > cfg.max_visual_len)
            throw value_error("encoder: audio/visual sequence exceeds configured maximum");
        if (batch.audio.dim(2) != cfg.audio_dim || batch.visual.dim(2) != cfg.visual_dim)
            throw config_error("encoder: modality feature width does not match config");
        auto [raw_bank, bm] = build_feature_bank(batch.audio, batch.audio_mask, batch.visual,
                                                 batch.visual_mask, net.audio_proj, net.visual_proj);
        bank_mask = bm;
        Tensor pos = concat_seq(slice_rows(net.audio_pos, batch.audio.dim(1)),
                                slice_rows(net.visual_pos, batch.visual.dim(1)));
        bank = add_position(raw_bank, pos);
        if (!cfg.ablation.use_cross_attention) pooled = masked_mean_time(bank, bank_mask);
    }

    GateTrace trace;
    trace.has_gate = any_fusion && cfg.ablation.use_gate;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        GateStats stats;
        bool want_stats = net.layers[l].fusion && cfg.ablation.use_gate;
        h = fusion_layer_forward(h, batch.text_mask, bank, bank_mask, pooled, net.layers[l], cfg,
                                 mode, want_stats ? &stats : nullptr, l);
        if (want_stats) trace.layers.push_back(stats);
    }
    return {select_time(h, 0), std::move(trace)};
}

// D -> head_hidden -> 1 with ReLU and dropout after the hidden activation.
inline Tensor head_forward(const Tensor& cls, const HeadParams& head, const ModelConfig& cfg,
                           const ForwardMode& mode) {
    Tensor h = relu(linear(cls, head.fc1.w, head.fc1.b));
    if (mode.training && cfg.dropout_p > 0.0) h = dropout(h, cfg.dropout_p, *mode.rng, true);
    Tensor y = linear(h, head.fc2.w, head.fc2.b);  // [B, 1]
    return reshape(y, {y.dim(0)});
}

struct ModelOutput {
    Tensor scores;  // [B], unclamped
    GateTrace trace;
};

inline ModelOutput model_forward(const PgfNet& net, const MultimodalBatch& batch,
                                 const ForwardMode& mode) {
    EncoderOutput enc = encoder_forward(net, batch, mode);
    Tensor scores = head_forward(enc.cls, net.head, net.cfg, mode);
    return {std::move(scores), std::move(enc.trace)};
}

}  // namespace pgf
