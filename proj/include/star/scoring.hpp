#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "star/tensor.hpp"

namespace star {

// Per-visual-token nonnegative importance scores.
struct ImportanceVector {
    std::vector<float> scores;

    std::size_t size() const { return scores.size(); }
    Tensor to_tensor() const { return Tensor({scores.size()}, scores); }
};

// Sorted original indices of surviving tokens, plus the threshold that
// produced them when the selection was threshold-derived.
struct KeepSet {
    std::vector<std::size_t> indices;
    std::optional<float> tau;

    std::size_t size() const { return indices.size(); }
    bool contains(std::size_t idx) const;
    std::string to_json() const;  // "[i0,i1,...]"
};

// Stage-1 indicator: mean attention RECEIVED by each token, i.e. the column
// mean of a row-stochastic self-attention map. Scores sum to 1.
ImportanceVector visual_self_attn_scores(const Tensor& a);

// FasterVLM-style indicator: the [CLS] row of the encoder map, read off at
// the patch positions. `a` is the full (L_v+1) x (L_v+1) map including [CLS].
ImportanceVector cls_attention_scores(const Tensor& a, std::size_t cls_index = 0);

// Stage-2 indicator: mean attention received from the text positions,
// i.e. the row mean of an L_v x (L_t+L_o) cross-modal block.
ImportanceVector cross_modal_scores(const Tensor& c);

// Number of tokens kept when pruning a block of `token_count` at `ratio`:
// floor((1 - ratio) * token_count).
std::size_t keep_budget(std::size_t token_count, double ratio);

// Smallest score value tau such that |{i : r_i >= tau}| <= (1-R)*L_v, taken
// over the values present in r. Returns +inf when no finite candidate
// satisfies the bound (all-ties case); selection then falls back to
// count-based top-k.
float dynamic_threshold(const ImportanceVector& r, double ratio);

// The `count` highest-scored indices, ties broken toward the lower original
// index, returned sorted ascending.
KeepSet select_keep(const ImportanceVector& r, std::size_t count);

}  // namespace star
