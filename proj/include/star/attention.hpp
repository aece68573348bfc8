#pragma once

#include <cstddef>
#include <vector>

#include "star/tensor.hpp"

namespace star {

enum class Modality { System, Visual, Query, Response };

const char* modality_name(Modality m);

// Half-open [begin, end) position range.
struct IndexRange {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool contains(std::size_t i) const { return i >= begin && i < end; }
    bool overlaps(const IndexRange& o) const { return begin < o.end && o.begin < end; }
};

struct RoleSpan {
    Modality modality;
    IndexRange range;
};

struct HeadConfig {
    std::size_t num_heads = 1;
    std::size_t head_dim = 1;

    std::size_t model_dim() const { return num_heads * head_dim; }
    void validate() const;
};

// Row-stochastic attention weights with optional modality annotations on the
// query and key axes. weights is [num_heads, L_q, L_k].
struct AttentionMap {
    Tensor weights;
    std::vector<RoleSpan> query_roles;
    std::vector<RoleSpan> key_roles;

    std::size_t num_heads() const { return weights.dim(0); }
    std::size_t query_len() const { return weights.dim(1); }
    std::size_t key_len() const { return weights.dim(2); }
};

struct SelfAttentionResult {
    Tensor output;  // [L, d], heads concatenated, no output projection
    AttentionMap map;
};

// Per-head scaled dot-product attention over a single sequence.
// softmax(Q Kt / sqrt(head_dim)), optionally with a lower-triangular causal
// mask so position i attends only to positions j <= i.
SelfAttentionResult self_attention(const Tensor& h, const Tensor& wq, const Tensor& wk,
                                   const Tensor& wv, const HeadConfig& cfg, bool causal);

// Arithmetic mean over the head axis: [H, L_q, L_k] -> [L_q, L_k].
Tensor head_average(const AttentionMap& map);

// Cross-modal block of a decoder self-attention map. Returns the attention
// paid BY text query positions TO visual key positions, transposed so that
// entry [i, j] is the weight text token j places on visual token i. Rows of
// the output are indexed by visual position, columns by text position; the
// block is taken raw (no re-normalization), so column sums are <= 1.
Tensor extract_cross_modal(const AttentionMap& decoder_map, IndexRange visual_idx,
                           IndexRange text_idx);

}  // namespace star
