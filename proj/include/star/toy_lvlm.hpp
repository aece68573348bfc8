#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "star/attention.hpp"
#include "star/pipeline.hpp"
#include "star/tensor.hpp"

namespace star {

// Deterministic miniature vision encoder + causal decoder. Small enough to
// fuzz exhaustively, deep enough that the pivot-layer sweep is meaningful.
struct ToyConfig {
    std::size_t d_enc = 64;
    std::size_t d_dec = 64;
    std::size_t heads = 4;
    std::size_t encoder_layers = 4;
    std::size_t decoder_layers = 8;
    std::size_t patches = 64;        // L_v0, default 8x8 grid
    std::size_t patch_dim = 16;      // raw patch input width
    std::size_t vocab = 256;
    std::size_t gen_steps = 8;
    std::size_t scoring_layer = 0;   // 0 = penultimate encoder layer
    std::uint64_t seed = 42;

    void validate() const;
    // 1-based encoder layer whose attention drives stage-1 scoring.
    std::size_t resolved_scoring_layer() const;
};

struct EncodeResult {
    Tensor patch_tokens;                  // [L_v0, d_enc], [CLS] excluded
    std::vector<AttentionMap> layer_maps; // per layer, [heads, 1+L_v0, 1+L_v0]
    Tensor patch_attention;               // [L_v0, L_v0] row-stochastic, scoring layer
    Tensor full_attention;                // [(1+L_v0), (1+L_v0)] head-averaged, [CLS] at 0
};

struct DecodeResult {
    Tensor logits;                        // [L_final, vocab]
    Tensor final_hidden;                  // [L_final, d_dec], post final norm
    std::vector<AttentionMap> layer_maps; // per layer; shorter after a mid-stack prune
    TokenSequence sequence;               // metadata (and embeddings) after any prune
};

// Mid-stack prune hook: given the attention map captured at the pivot layer
// and the sequence as it stands, returns the positions to keep.
using MidStackHook =
    std::function<std::vector<std::size_t>(const AttentionMap&, const TokenSequence&)>;

struct FidelityMetrics {
    double top1_agreement = 0.0;  // fraction of generated steps with matching ids
    double kl_divergence = 0.0;   // nats, full vs pruned next-token distribution
    double cosine = 0.0;          // final hidden states
};

struct GenerationResult {
    std::vector<std::uint32_t> ids;
    PruneTrace trace;
    TokenSequence prefill_sequence;  // post-prune, before any generated token
    Tensor first_step_logits;        // [vocab], last prefill position
    Tensor final_hidden;             // [d_dec], last position of the final pass
};

struct RunResult {
    std::vector<std::uint32_t> ids;
    PruneTrace trace;
    FidelityMetrics fidelity;
};

class ToyModel {
public:
    explicit ToyModel(const ToyConfig& cfg);

    const ToyConfig& config() const { return cfg_; }

    EncodeResult encode_image(const Tensor& patch_values) const;

    DecodeResult decode(const TokenSequence& seq) const;
    DecodeResult decode(const TokenSequence& seq, std::size_t pivot_layer,
                        const MidStackHook& hook) const;

    // Rows of the vocabulary table for the given ids, as a Query sequence.
    TokenSequence embed_query(const std::vector<std::uint32_t>& ids) const;

    // Greedy generation under the given schedule; the prefill pass prunes
    // mid-stack at the pivot layer, later passes run the pruned sequence.
    GenerationResult run_generate(const Tensor& patch_values,
                                  const std::vector<std::uint32_t>& query_ids,
                                  const PruneSchedule& schedule) const;

    // Pruned run plus its unpruned reference and the fidelity between them.
    RunResult run_with_schedule(const Tensor& patch_values,
                                const std::vector<std::uint32_t>& query_ids,
                                const PruneSchedule& schedule) const;

    const Tensor& projector() const { return projector_; }
    const Tensor& vocab_embedding() const { return vocab_embed_; }

private:
    struct LayerWeights {
        Tensor wq, wk, wv, wo, w1, w2;
    };

    Tensor block_forward(Tensor x, const LayerWeights& w, bool causal,
                         AttentionMap* map_out) const;

    ToyConfig cfg_;
    Tensor patch_embed_;  // [patch_dim, d_enc]
    Tensor cls_embed_;    // [1, d_enc]
    std::vector<LayerWeights> encoder_;
    Tensor projector_;    // [d_enc, d_dec]
    Tensor vocab_embed_;  // [vocab, d_dec]
    std::vector<LayerWeights> decoder_;
    Tensor unembed_;      // [d_dec, vocab]
};

// Seeded random patch grid matching the config's dimensions.
Tensor random_image(const ToyConfig& cfg, std::uint64_t image_seed);

// Seeded query token ids.
std::vector<std::uint32_t> random_query_ids(const ToyConfig& cfg, std::uint64_t query_seed,
                                            std::size_t count);

// KL(full || pruned) on softmaxed logit rows, plus step agreement and the
// cosine of the final hidden states. Bitwise-identical runs score (1, 0, 1).
FidelityMetrics fidelity(const GenerationResult& full, const GenerationResult& pruned);

double kl_divergence_nats(const Tensor& full_logits, const Tensor& pruned_logits);

std::uint32_t argmax_id(const Tensor& logits_row);

}  // namespace star
