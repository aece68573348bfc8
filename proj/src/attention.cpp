#include "star/attention.hpp"

#include <cmath>
#include <limits>

namespace star {

const char* modality_name(Modality m) {
    switch (m) {
        case Modality::System: return "system";
        case Modality::Visual: return "visual";
        case Modality::Query: return "query";
        case Modality::Response: return "response";
    }
    return "?";
}

void HeadConfig::validate() const {
    if (num_heads == 0 || head_dim == 0) {
        throw ArgumentError("HeadConfig: num_heads and head_dim must be positive");
    }
}

SelfAttentionResult self_attention(const Tensor& h, const Tensor& wq, const Tensor& wk,
                                   const Tensor& wv, const HeadConfig& cfg, bool causal) {
    cfg.validate();
    const std::size_t d = cfg.model_dim();
    if (h.rank() != 2 || h.dim(1) != d) {
        throw ShapeError("self_attention: input shape " + shape_to_string(h.shape()) +
                         " does not match model dim " + std::to_string(d));
    }
    for (const Tensor* w : {&wq, &wk, &wv}) {
        if (w->rank() != 2 || w->dim(0) != d || w->dim(1) != d) {
            throw ShapeError("self_attention: weight shape " + shape_to_string(w->shape()) +
                             " is not " + std::to_string(d) + "x" + std::to_string(d));
        }
    }
    const std::size_t len = h.dim(0);
    if (len == 0) throw ShapeError("self_attention: empty sequence");

    const Tensor q = matmul(h, wq);
    const Tensor k = matmul(h, wk);
    const Tensor v = matmul(h, wv);

    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
    constexpr float kNegInf = -std::numeric_limits<float>::infinity();

    Tensor mask;
    if (causal) {
        mask = Tensor({len, len});
        for (std::size_t i = 0; i < len; ++i) {
            for (std::size_t j = i + 1; j < len; ++j) mask.data()[i * len + j] = kNegInf;
        }
    }

    SelfAttentionResult res;
    res.output = Tensor({len, d});
    res.map.weights = Tensor({cfg.num_heads, len, len});

    for (std::size_t head = 0; head < cfg.num_heads; ++head) {
        const std::size_t col0 = head * cfg.head_dim;

        Tensor scores({len, len});
        for (std::size_t i = 0; i < len; ++i) {
            for (std::size_t j = 0; j < len; ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < cfg.head_dim; ++c) {
                    dot += static_cast<double>(q.data()[i * d + col0 + c]) *
                           static_cast<double>(k.data()[j * d + col0 + c]);
                }
                scores.data()[i * len + j] = static_cast<float>(dot * inv_sqrt_hd);
            }
        }

        const Tensor weights = causal ? softmax_rows(scores, mask) : softmax_rows(scores);
        float* map_slice = res.map.weights.data() + head * len * len;
        for (std::size_t i = 0; i < len * len; ++i) map_slice[i] = weights.data()[i];

        // out[i, head block] = sum_j weights[i, j] * v[j, head block]
        for (std::size_t i = 0; i < len; ++i) {
            for (std::size_t c = 0; c < cfg.head_dim; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < len; ++j) {
                    acc += static_cast<double>(weights.data()[i * len + j]) *
                           static_cast<double>(v.data()[j * d + col0 + c]);
                }
                res.output.data()[i * d + col0 + c] = static_cast<float>(acc);
            }
        }
    }
    check_finite(res.output, "self_attention");
    return res;
}

Tensor head_average(const AttentionMap& map) {
    if (map.weights.rank() != 3) {
        throw ShapeError("head_average: expected [heads, L_q, L_k], got " +
                         shape_to_string(map.weights.shape()));
    }
    const std::size_t heads = map.num_heads(), lq = map.query_len(), lk = map.key_len();
    Tensor out({lq, lk});
    for (std::size_t i = 0; i < lq * lk; ++i) {
        double acc = 0.0;
        for (std::size_t head = 0; head < heads; ++head) {
            acc += static_cast<double>(map.weights.data()[head * lq * lk + i]);
        }
        out.data()[i] = static_cast<float>(acc / static_cast<double>(heads));
    }
    return out;
}

Tensor extract_cross_modal(const AttentionMap& decoder_map, IndexRange visual_idx,
                           IndexRange text_idx) {
    const std::size_t len = decoder_map.query_len();
    if (decoder_map.key_len() != len) {
        throw ShapeError("extract_cross_modal: expected a square self-attention map, got " +
                         shape_to_string(decoder_map.weights.shape()));
    }
    if (visual_idx.end > len || text_idx.end > len || visual_idx.begin > visual_idx.end ||
        text_idx.begin > text_idx.end) {
        throw ArgumentError("extract_cross_modal: index range outside sequence of length " +
                            std::to_string(len));
    }
    if (visual_idx.overlaps(text_idx)) {
        throw ArgumentError("extract_cross_modal: visual and text ranges overlap");
    }
    if (text_idx.begin < visual_idx.end) {
        throw ArgumentError("extract_cross_modal: text positions must follow the visual block");
    }
    if (visual_idx.size() == 0 || text_idx.size() == 0) {
        throw ArgumentError("extract_cross_modal: empty index range");
    }

    const Tensor avg = head_average(decoder_map);
    Tensor out({visual_idx.size(), text_idx.size()});
    for (std::size_t t = 0; t < text_idx.size(); ++t) {
        const std::size_t qpos = text_idx.begin + t;
        for (std::size_t v = 0; v < visual_idx.size(); ++v) {
            out.data()[v * text_idx.size() + t] = avg.data()[qpos * len + visual_idx.begin + v];
        }
    }
    return out;
}

}  // namespace star
