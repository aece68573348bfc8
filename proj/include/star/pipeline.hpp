#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "star/attention.hpp"
#include "star/scoring.hpp"
#include "star/tensor.hpp"

namespace star {

// A run of tokens with per-token provenance. Visual tokens form one
// contiguous block that precedes all query/response tokens.
struct TokenSequence {
    Tensor embeddings;                 // [L, d]
    std::vector<std::size_t> origin;   // original index within the token's modality
    std::vector<Modality> modality;

    std::size_t length() const { return modality.size(); }
    std::size_t width() const { return embeddings.rank() == 2 ? embeddings.dim(1) : 0; }

    // Contiguous block of the given modality; empty range when absent.
    IndexRange modality_range(Modality m) const;
    std::vector<RoleSpan> role_spans() const;

    // New sequence holding the listed positions, in the given order.
    TokenSequence gather(const std::vector<std::size_t>& positions) const;

    void append(const TokenSequence& tail);
    void validate() const;
};

TokenSequence make_sequence(Tensor embeddings, Modality m);

enum class Strategy { Star, FastV, FasterVLM, Random, None };

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

struct PruneSchedule {
    Strategy strategy = Strategy::Star;
    double stage1_ratio = 0.0;                    // R
    double stage2_ratio = 0.0;                    // P
    std::size_t pivot_layer = 1;                  // K
    std::uint64_t seed = 0;                       // random strategy only
    std::optional<std::size_t> target_remaining;  // overrides P when set
};

// One stage of a trace: the survivors after the stage plus what the stage
// dropped, all in original visual-token indices.
struct StageTrace {
    std::optional<float> tau;
    std::vector<std::size_t> kept;
    std::vector<std::pair<std::size_t, float>> dropped;  // (original index, score)
};

struct PruneTrace {
    StageTrace stage1;
    StageTrace stage2;
    std::size_t final_count = 0;
    std::vector<std::string> warnings;

    std::string to_json() const;
    static PruneTrace from_json(const std::string& text);
};

// Schedule with ratios turned into concrete keep counts for a known
// original visual token count.
struct ResolvedSchedule {
    Strategy strategy = Strategy::Star;
    double stage1_ratio = 0.0;
    double stage2_ratio = 0.0;
    std::size_t pivot_layer = 0;  // 0 = pruning happens before the decoder
    std::size_t original_count = 0;
    std::size_t stage1_keep = 0;  // visual tokens entering the decoder
    std::size_t final_keep = 0;   // visual tokens after all pruning

    std::size_t pruned_until_pivot() const { return original_count - stage1_keep; }
    std::size_t pruned_after_pivot() const { return original_count - final_keep; }
};

// Validates the schedule against an original token count and fixes the
// per-stage keep counts. target_remaining, when set, overrides P via
// P = 1 - target / stage1_keep. Rejects star schedules with R >= P while
// both stages are active, and targets that exceed the stage-1 survivors.
ResolvedSchedule resolve_schedule(const PruneSchedule& schedule, std::size_t original_count);

// Stage 1: text-agnostic pruning of a visual-only sequence driven by the
// encoder self-attention map. Keeps floor((1-R)*L_v) tokens (at least one;
// a clamp is reported through `warnings` when provided).
std::pair<TokenSequence, StageTrace> stage1_prune(const TokenSequence& visual,
                                                  const Tensor& encoder_attention, double ratio);
std::pair<TokenSequence, StageTrace> stage1_prune(const TokenSequence& visual,
                                                  const Tensor& encoder_attention, double ratio,
                                                  std::vector<std::string>* warnings);

// Decoder input assembly: projected visual block followed by the query.
TokenSequence project_and_concat(const TokenSequence& visual, const Tensor& projector,
                                 const TokenSequence& query);

// Keep-set selection for stage 2 from a decoder-layer attention map; shared
// by the in-place pipeline and the mid-stack hook of the toy decoder.
// Returns positions to keep (within the whole sequence) plus the stage trace.
struct Stage2Selection {
    std::vector<std::size_t> keep_positions;  // sequence positions surviving
    StageTrace trace;
};
Stage2Selection stage2_select(const TokenSequence& seq, const AttentionMap& decoder_map,
                              std::size_t keep_count, std::vector<std::string>* warnings);

// Stage 2 with the drop count derived from the ratio:
// drops floor(P * L_v_current), clamped so at least one visual token stays.
std::pair<TokenSequence, StageTrace> stage2_prune(const TokenSequence& seq,
                                                  const AttentionMap& decoder_map, double ratio);
std::pair<TokenSequence, StageTrace> stage2_prune_to_count(const TokenSequence& seq,
                                                           const AttentionMap& decoder_map,
                                                           std::size_t keep_count,
                                                           std::vector<std::string>* warnings);

// Everything a pruning run needs from the model, with the decoder attention
// supplied lazily so the map reflects the sequence actually present.
struct PruneContext {
    TokenSequence visual;             // encoder-width visual tokens, origins 0..L_v0-1
    TokenSequence query;              // decoder-width query tokens
    Tensor projector;                 // [d_enc, d_dec]
    Tensor encoder_patch_attention;   // [L_v0, L_v0], row-stochastic
    Tensor encoder_full_attention;    // [(L_v0+1), (L_v0+1)], [CLS] at index 0
    std::function<AttentionMap(const TokenSequence&, std::size_t layer)> decoder_attention_at;
};

struct PruneRun {
    TokenSequence sequence;  // decoder-width, post-prune
    PruneTrace trace;
    ResolvedSchedule resolved;
};

PruneRun run_star(const PruneContext& ctx, const PruneSchedule& schedule);
PruneRun run_baseline(const PruneContext& ctx, const PruneSchedule& schedule);
PruneRun run_schedule(const PruneContext& ctx, const PruneSchedule& schedule);

// Records the keep-at-least-one clamp when a schedule asks for zero tokens.
void note_zero_target(const PruneSchedule& schedule, std::vector<std::string>& warnings);

// Seeded uniform keep-set, the control baseline.
KeepSet random_keep(std::size_t token_count, std::size_t keep_count, std::uint64_t seed);

}  // namespace star
