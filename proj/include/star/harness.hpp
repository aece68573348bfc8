#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "star/cost_model.hpp"
#include "star/pipeline.hpp"
#include "star/toy_lvlm.hpp"

namespace star::harness {

// Inputs of a toy-model run: the model configuration plus how many query
// tokens to draw. Image and query token seeds derive from the config seed.
struct ToyRunSpec {
    ToyConfig model;
    std::size_t query_tokens = 8;
};

struct ToyInputs {
    Tensor image;
    std::vector<std::uint32_t> query_ids;
};
ToyInputs derive_inputs(const ToyRunSpec& spec, std::uint64_t seed);

// Everything a fixture-driven (model-free) pruning run needs: attention and
// embedding dumps from one recorded toy run, STT files plus a JSON manifest.
struct FixtureSet {
    ToyConfig config;
    std::uint64_t seed = 0;
    std::size_t query_tokens = 0;
    std::size_t response_tokens = 0;
    Tensor encoder_patch_attention;        // [L_v0, L_v0]
    Tensor encoder_full_attention;         // [(L_v0+1), (L_v0+1)]
    Tensor visual_embeddings;              // [L_v0, d_enc]
    Tensor query_embeddings;               // [L_t, d_dec]
    Tensor response_embeddings;            // [L_o, d_dec]
    Tensor projector;                      // [d_enc, d_dec]
    std::vector<Tensor> decoder_attention; // per layer, [heads, L, L], full run
    Tensor logits;                         // [L, vocab] of the recorded full pass

    void write(const std::filesystem::path& dir) const;
    static FixtureSet read(const std::filesystem::path& dir);
};

// Runs the unpruned toy model once and records the dumps.
FixtureSet generate_fixtures(const ToyRunSpec& spec, std::uint64_t seed);

// Fixture-mode pruning: selection driven by the recorded attention, with the
// decoder map sub-sampled to the positions actually present. Response
// positions take part in stage-2 scoring here, unlike the live pipeline.
PruneRun run_offline(const FixtureSet& fixtures, const PruneSchedule& schedule);

// --- sweep ------------------------------------------------------------

struct SweepCell {
    PruneSchedule schedule;
    std::uint64_t seed = 0;
};

struct SweepRow {
    PruneSchedule schedule;
    std::uint64_t seed = 0;
    std::string status;  // ok | skipped
    std::size_t final_tokens = 0;
    flops_t delta_total = 0;
    double relative_reduction = 0.0;
    FidelityMetrics fidelity;
};

inline constexpr const char* kSweepCsvHeader =
    "strategy,R,P,K,target_remaining,seed,final_tokens,delta_total_flops,"
    "relative_reduction,top1_agreement,kl_nats,cosine,status";

// Runs every cell (pool size from STAR_PRUNE_THREADS, default hardware
// concurrency) and renders the CSV: per-seed rows in lexicographic schedule
// order, one median row per schedule. Output is identical for any pool size.
std::string run_sweep_csv(const ToyRunSpec& spec, const std::vector<SweepCell>& cells);

// Cost-model dims matching a toy run at prefill.
ModelDims toy_dims(const ToyRunSpec& spec);

std::size_t worker_count();

// --- small shared helpers ----------------------------------------------

std::string format_double(double v);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace star::harness
