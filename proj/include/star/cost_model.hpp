#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "star/errors.hpp"

namespace star {

// FLOPs totals are exact integers; 128-bit keeps even absurd widths away
// from wraparound.
using flops_t = unsigned __int128;

std::string flops_to_string(flops_t v);
double flops_to_double(flops_t v);

struct ModelDims {
    std::uint64_t hidden_dim = 0;    // D
    std::uint64_t num_layers = 0;    // Omega
    std::uint64_t visual_tokens = 0; // L_v0, original visual token count
    std::uint64_t text_tokens = 0;   // non-visual tokens in the sequence

    std::uint64_t sequence_len() const { return visual_tokens + text_tokens; }
    void validate() const;
};

// Baseline cost of one decoder layer over L tokens at hidden width D:
// 6*L*D^2 for the six linear projections plus 2*L^2*D for the attention
// matrix products, one FLOP per MAC.
flops_t f_base(std::uint64_t seq_len, std::uint64_t hidden_dim);

// FLOPs saved in one layer that is missing n_pruned tokens:
// 6*N*D^2 + 2*N^2*D (no token recycling, C_i = 0).
flops_t delta_layer(std::uint64_t n_pruned, std::uint64_t hidden_dim);

struct FlopsReport {
    std::vector<flops_t> per_layer_baseline;  // F_base at full sequence length
    std::vector<flops_t> per_layer_delta;     // Delta_i
    flops_t delta_stage1 = 0;
    flops_t delta_stage2 = 0;
    flops_t delta_total = 0;
    flops_t baseline_total = 0;
    double relative_reduction = 0.0;  // delta_total / baseline_total

    std::string to_json() const;
    std::string to_csv_row() const;  // delta_stage1,delta_stage2,delta_total,relative_reduction
};

// Two-stage savings with per-layer pruned counts derived from ratios,
// rounded to the nearest token: N_i = round(R*L_v0) for layers 1..K and
// round(P*L_v0) for layers K+1..Omega. Requires 0 <= R < P < 1.
FlopsReport delta_total(double stage1_ratio, double stage2_ratio, std::uint64_t pivot_layer,
                        const ModelDims& dims);

// Same accounting from integer pruned-token counts, used when reporting on a
// real run whose kept counts are already known. pivot_layer may be 0 to mean
// "all layers see the stage-2 count" (pre-decoder pruning).
FlopsReport delta_total_from_counts(std::uint64_t pruned_until_pivot,
                                    std::uint64_t pruned_after_pivot, std::uint64_t pivot_layer,
                                    const ModelDims& dims);

// Fully general per-layer profile; layer i misses pruned_per_layer[i] tokens.
FlopsReport report_from_layer_counts(const std::vector<std::uint64_t>& pruned_per_layer,
                                     const ModelDims& dims);

// (baseline - method) / baseline.
double paper_ratio_check(double baseline_total, double method_total);

struct BudgetTarget {
    enum class Kind { MinReduction, RemainingTokens };
    Kind kind = Kind::MinReduction;
    double min_reduction = 0.0;       // MinReduction: relative reduction >= this
    std::uint64_t remaining = 0;      // RemainingTokens: final visual tokens == this
};

struct SolverGrid {
    std::vector<double> stage1_ratios;  // R candidates
    std::vector<double> stage2_ratios;  // P candidates (ignored for RemainingTokens)
    std::vector<std::uint64_t> pivots;  // K candidates; empty means 1..Omega

    static SolverGrid default_grid(std::uint64_t num_layers);
};

struct BudgetSolution {
    double stage1_ratio = 0.0;
    double stage2_ratio = 0.0;
    std::uint64_t pivot_layer = 0;
    std::uint64_t final_tokens = 0;
    flops_t delta = 0;
    double relative_reduction = 0.0;
};

struct BudgetResult {
    std::vector<BudgetSolution> feasible;  // sorted by reduction descending
    bool infeasible() const { return feasible.empty(); }
};

// Enumerates the grid, filters by R < P and the target, and sorts by
// achieved reduction descending (ties by R, P, K ascending). For
// remaining-token targets P is not scanned: each (R, K) pair admits a single
// exact P implied by the kept counts, mirroring schedule resolution.
BudgetResult budget_solve(const ModelDims& dims, const BudgetTarget& target,
                          const SolverGrid& grid);
BudgetResult budget_solve(const ModelDims& dims, const BudgetTarget& target);

}  // namespace star
