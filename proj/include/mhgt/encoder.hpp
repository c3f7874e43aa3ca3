#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mhgt/autograd.hpp"
#include "mhgt/errors.hpp"
#include "mhgt/kernels.hpp"
#include "mhgt/rng.hpp"
#include "mhgt/scene_graph.hpp"
#include "mhgt/tensor.hpp"

namespace mhgt {

struct EmbeddingConfig {
    std::size_t hidden_dim = 64;
    std::size_t text_vocab_size = 64;
    std::size_t entity_class_count = 12;
    std::size_t predicate_class_count = 8;
    std::size_t visual_feature_dim = 16;
    std::size_t position_feature_dim = 4;  // bbox coordinates
    std::size_t max_positions = 128;       // learned text position table

    void validate() const {
        if (hidden_dim == 0 || text_vocab_size == 0 || entity_class_count == 0 ||
            predicate_class_count == 0 || visual_feature_dim == 0 || max_positions == 0) {
            throw ConfigError("embedding config requires positive dimensions");
        }
        if (position_feature_dim != 4) {
            throw ConfigError("position features are 4 box coordinates");
        }
    }
};

struct EncoderConfig {
    std::size_t layers = 2;
    std::size_t heads = 4;
    int hop_limit = 3;
    KernelKind kernel_kind = KernelKind::RationalQuadratic;
    std::size_t ff_dim = 0;  // 0 -> 4 * hidden
    bool share_kernel_across_layers = false;

    std::size_t ff_dim_or_default(std::size_t hidden) const {
        return ff_dim == 0 ? 4 * hidden : ff_dim;
    }

    void validate(const EmbeddingConfig& emb) const {
        if (heads == 0 || emb.hidden_dim % heads != 0) {
            throw ConfigError("hidden_dim must be divisible by head count");
        }
        if (hop_limit < 1) throw ConfigError("hop limit h must be >= 1");
    }
};

// Parameter handles for one encoder; storage lives in the ParameterStore.
struct EncoderModel {
    EmbeddingConfig emb;
    EncoderConfig cfg;

    Parameter* text_vocab = nullptr;   // [V x h]
    Parameter* text_pos = nullptr;     // [max_positions x h]
    Parameter* special_table = nullptr;  // [3 x h]: CLS, SEP, MASK
    Parameter* modality_table = nullptr;  // [4 x h]: text, entity, predicate, special
    Parameter* entity_w = nullptr;     // [feat x h]
    Parameter* entity_b = nullptr;
    Parameter* predicate_w = nullptr;  // separate projection; relation features live in a
    Parameter* predicate_b = nullptr;  // different semantic space than ROI features
    Parameter* position_w = nullptr;   // [4 x h], shared by boxes and union boxes
    Parameter* position_b = nullptr;

    struct Head {
        Parameter* wq = nullptr;
        Parameter* wk = nullptr;
        Parameter* wv = nullptr;
        Parameter* kernel_raw = nullptr;  // 4 scalars -> (alpha_o, l_o, alpha_p, l_p)
    };
    struct Layer {
        std::vector<Head> heads;
        Parameter* wo = nullptr;
        Parameter* bo = nullptr;
        Parameter* ff1_w = nullptr;
        Parameter* ff1_b = nullptr;
        Parameter* ff2_w = nullptr;
        Parameter* ff2_b = nullptr;
        Parameter* ln1_g = nullptr;
        Parameter* ln1_b = nullptr;
        Parameter* ln2_g = nullptr;
        Parameter* ln2_b = nullptr;
    };
    std::vector<Layer> layers;

    std::size_t head_dim() const { return emb.hidden_dim / cfg.heads; }
};

constexpr double kInitStd = 0.02;

inline EncoderModel build_encoder(ParameterStore& store, const EmbeddingConfig& emb,
                                  const EncoderConfig& cfg, Rng& rng,
                                  const std::string& prefix = "enc") {
    emb.validate();
    cfg.validate(emb);
    EncoderModel m;
    m.emb = emb;
    m.cfg = cfg;
    const std::size_t h = emb.hidden_dim;

    auto weight = [&](const std::string& name, std::vector<std::size_t> shape) {
        return &store.create(prefix + "." + name, Tensor::randn(std::move(shape), rng, kInitStd));
    };
    auto zeros = [&](const std::string& name, std::vector<std::size_t> shape) {
        return &store.create(prefix + "." + name, Tensor::zeros(std::move(shape)));
    };
    auto ones = [&](const std::string& name, std::vector<std::size_t> shape) {
        return &store.create(prefix + "." + name, Tensor::full(std::move(shape), 1.0));
    };

    m.text_vocab = weight("text_vocab", {emb.text_vocab_size, h});
    m.text_pos = weight("text_pos", {emb.max_positions, h});
    m.special_table = weight("special", {3, h});
    m.modality_table = weight("modality", {4, h});
    m.entity_w = weight("entity_proj.w", {emb.visual_feature_dim, h});
    m.entity_b = zeros("entity_proj.b", {h});
    m.predicate_w = weight("predicate_proj.w", {emb.visual_feature_dim, h});
    m.predicate_b = zeros("predicate_proj.b", {h});
    m.position_w = weight("position_proj.w", {emb.position_feature_dim, h});
    m.position_b = zeros("position_proj.b", {h});

    const std::size_t dk = h / cfg.heads;
    const std::size_t ff = cfg.ff_dim_or_default(h);
    for (std::size_t li = 0; li < cfg.layers; ++li) {
        EncoderModel::Layer layer;
        const std::string lp = "layer" + std::to_string(li);
        for (std::size_t hi = 0; hi < cfg.heads; ++hi) {
            EncoderModel::Head head;
            const std::string hp = lp + ".head" + std::to_string(hi);
            head.wq = weight(hp + ".wq", {h, dk});
            head.wk = weight(hp + ".wk", {h, dk});
            head.wv = weight(hp + ".wv", {h, dk});
            if (cfg.share_kernel_across_layers && li > 0) {
                head.kernel_raw = m.layers[0].heads[hi].kernel_raw;
            } else {
                // raw 0 -> alpha = l = 1
                head.kernel_raw = zeros(hp + ".kernel_raw", {4});
            }
            layer.heads.push_back(head);
        }
        layer.wo = weight(lp + ".wo", {h, h});
        layer.bo = zeros(lp + ".bo", {h});
        layer.ff1_w = weight(lp + ".ff1.w", {h, ff});
        layer.ff1_b = zeros(lp + ".ff1.b", {ff});
        layer.ff2_w = weight(lp + ".ff2.w", {ff, h});
        layer.ff2_b = zeros(lp + ".ff2.b", {h});
        layer.ln1_g = ones(lp + ".ln1.g", {h});
        layer.ln1_b = zeros(lp + ".ln1.b", {h});
        layer.ln2_g = ones(lp + ".ln2.g", {h});
        layer.ln2_b = zeros(lp + ".ln2.b", {h});
        m.layers.push_back(layer);
    }
    return m;
}

// Embedding output split by source so masking can swap the content part
// while keeping position and modality contributions.
struct TokenEmbeddings {
    Var content;
    Var position;
    Var modality;
    Var total;
};

namespace detail {
inline std::size_t special_row(SpecialKind k) {
    switch (k) {
        case SpecialKind::Cls: return 0;
        case SpecialKind::Sep: return 1;
        case SpecialKind::Mask: return 2;
        default: throw ValidationError("special token without a kind");
    }
}
}  // namespace detail

inline TokenEmbeddings embed_tokens(Tape& tape, const TokenSequence& seq, const SceneGraph& g,
                                    const EncoderModel& m) {
    seq.validate();
    const std::size_t n = seq.size();
    const std::size_t h = m.emb.hidden_dim;
    if (n == 0) throw ValidationError("empty token sequence");

    std::vector<std::size_t> text_idx, ent_idx, pred_idx, spec_idx;
    std::vector<std::size_t> vocab_ids, pos_ids, spec_rows, modality_rows;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& tok = seq.tokens[i];
        modality_rows.push_back(static_cast<std::size_t>(tok.modality));
        switch (tok.modality) {
            case Modality::Text:
                if (*tok.vocab_id >= m.emb.text_vocab_size) {
                    throw ValidationError("text token vocab id out of range");
                }
                if (i >= m.emb.max_positions) {
                    throw ValidationError("text token position exceeds position table");
                }
                text_idx.push_back(i);
                vocab_ids.push_back(*tok.vocab_id);
                pos_ids.push_back(i);
                break;
            case Modality::Entity:
                if (*tok.node_id >= g.entity_count()) {
                    throw ValidationError("entity token references a missing node");
                }
                ent_idx.push_back(i);
                break;
            case Modality::Predicate:
                if (*tok.node_id >= g.predicate_count()) {
                    throw ValidationError("predicate token references a missing node");
                }
                pred_idx.push_back(i);
                break;
            case Modality::Special:
                spec_idx.push_back(i);
                spec_rows.push_back(detail::special_row(tok.special));
                break;
        }
    }

    auto features_of = [&](const std::vector<std::size_t>& idx, bool entity) {
        const std::size_t fd = m.emb.visual_feature_dim;
        Tensor feats({idx.size(), fd});
        Tensor boxes({idx.size(), 4});
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const std::size_t node = *seq.tokens[idx[r]].node_id;
            const auto& fvec = entity ? g.entities[node].feature : g.predicates[node].feature;
            const auto& box = entity ? g.entities[node].bbox : g.predicates[node].union_bbox;
            if (fvec.size() != fd) {
                throw ShapeError("visual feature dimension mismatch: expected " +
                                 std::to_string(fd) + ", got " + std::to_string(fvec.size()));
            }
            for (std::size_t c = 0; c < fd; ++c) feats.at(r, c) = fvec[c];
            for (std::size_t c = 0; c < 4; ++c) boxes.at(r, c) = box[c];
        }
        return std::pair{feats, boxes};
    };

    using namespace ops;
    Var content = tape.constant(Tensor({n, h}));
    Var position = tape.constant(Tensor({n, h}));

    if (!text_idx.empty()) {
        Var rows = gather_rows(tape.leaf(*m.text_vocab), vocab_ids);
        content = add(content, place_rows(rows, n, text_idx));
        Var prow = gather_rows(tape.leaf(*m.text_pos), pos_ids);
        position = add(position, place_rows(prow, n, text_idx));
    }
    if (!ent_idx.empty()) {
        auto [feats, boxes] = features_of(ent_idx, true);
        Var proj = linear(tape.constant(feats), tape.leaf(*m.entity_w), tape.leaf(*m.entity_b));
        content = add(content, place_rows(proj, n, ent_idx));
        Var pproj =
            linear(tape.constant(boxes), tape.leaf(*m.position_w), tape.leaf(*m.position_b));
        position = add(position, place_rows(pproj, n, ent_idx));
    }
    if (!pred_idx.empty()) {
        auto [feats, boxes] = features_of(pred_idx, false);
        Var proj =
            linear(tape.constant(feats), tape.leaf(*m.predicate_w), tape.leaf(*m.predicate_b));
        content = add(content, place_rows(proj, n, pred_idx));
        Var pproj =
            linear(tape.constant(boxes), tape.leaf(*m.position_w), tape.leaf(*m.position_b));
        position = add(position, place_rows(pproj, n, pred_idx));
    }
    if (!spec_idx.empty()) {
        Var rows = gather_rows(tape.leaf(*m.special_table), spec_rows);
        content = add(content, place_rows(rows, n, spec_idx));
    }

    Var modality = gather_rows(tape.leaf(*m.modality_table), modality_rows);
    TokenEmbeddings out;
    out.content = content;
    out.position = position;
    out.modality = modality;
    out.total = add(add(content, position), modality);
    return out;
}

// Per-head attention matrices captured for dumps and tests.
struct AttentionTrace {
    struct Head {
        Tensor attention;  // A, post-softmax
        Tensor rescaled;   // A-tilde, post kernel rescale + renormalization
    };
    std::vector<std::vector<Head>> layers;  // [layer][head]
};

// One multihop attention block: per head, A = softmax(QK^T / sqrt(dk) + M),
// A-tilde = renormalize(F(D) * A), output = concat_h(A-tilde V) Wo + bo.
inline Var multihop_attention(Tape& tape, Var h_in, const DistanceMatrix& dm,
                              const std::vector<TokenRole>& roles,
                              const EncoderModel::Layer& layer, const EncoderModel& m,
                              std::vector<AttentionTrace::Head>* trace = nullptr) {
    using namespace ops;
    const std::size_t n = tape.value(h_in).rows();
    if (dm.n != n || roles.size() != n) {
        throw ShapeError("multihop_attention: sequence/distance/role size mismatch");
    }
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(m.head_dim()));
    const Tensor mask = hop_mask(dm, m.cfg.hop_limit);

    std::vector<Var> head_outputs;
    for (const auto& head : layer.heads) {
        Var q = matmul(h_in, tape.leaf(*head.wq));
        Var k = matmul(h_in, tape.leaf(*head.wk));
        Var v = matmul(h_in, tape.leaf(*head.wv));
        Var logits = scale(matmul_nt(q, k), inv_sqrt_dk);
        Var attn = softmax_rows(logits, mask);
        Var f = kernel_rescale_matrix(tape.leaf(*head.kernel_raw), dm, roles, m.cfg.kernel_kind);
        Var rescaled = renormalize_rows(mul(f, attn));
        head_outputs.push_back(matmul(rescaled, v));
        if (trace) {
            trace->push_back({tape.value(attn), tape.value(rescaled)});
        }
    }
    Var concat = head_outputs.size() == 1 ? head_outputs[0] : concat_cols(head_outputs);
    return linear(concat, tape.leaf(*layer.wo), tape.leaf(*layer.bo));
}

// Post-norm transformer stack over precomputed input embeddings.
inline Var encoder_stack(Tape& tape, Var x, const DistanceMatrix& dm,
                         const std::vector<TokenRole>& roles, const EncoderModel& m,
                         AttentionTrace* trace = nullptr) {
    using namespace ops;
    for (const auto& layer : m.layers) {
        std::vector<AttentionTrace::Head>* head_trace = nullptr;
        if (trace) {
            trace->layers.emplace_back();
            head_trace = &trace->layers.back();
        }
        Var attn = multihop_attention(tape, x, dm, roles, layer, m, head_trace);
        x = layer_norm(add(x, attn), tape.leaf(*layer.ln1_g), tape.leaf(*layer.ln1_b));
        Var ff = linear(gelu(linear(x, tape.leaf(*layer.ff1_w), tape.leaf(*layer.ff1_b))),
                        tape.leaf(*layer.ff2_w), tape.leaf(*layer.ff2_b));
        x = layer_norm(add(x, ff), tape.leaf(*layer.ln2_g), tape.leaf(*layer.ln2_b));
    }
    return x;
}

inline Var encoder_forward(Tape& tape, const TokenSequence& seq, const SceneGraph& g,
                           const DistanceMatrix& dm, const EncoderModel& m,
                           AttentionTrace* trace = nullptr) {
    TokenEmbeddings emb = embed_tokens(tape, seq, g, m);
    return encoder_stack(tape, emb.total, dm, token_roles(seq), m, trace);
}

}  // namespace mhgt
