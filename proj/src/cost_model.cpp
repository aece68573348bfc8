#include "star/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace star {

std::string flops_to_string(flops_t v) {
    if (v == 0) return "0";
    std::string out;
    while (v > 0) {
        out.push_back(static_cast<char>('0' + static_cast<unsigned>(v % 10)));
        v /= 10;
    }
    std::reverse(out.begin(), out.end());
    return out;
}

double flops_to_double(flops_t v) {
    return static_cast<double>(v);
}

void ModelDims::validate() const {
    if (hidden_dim == 0 || num_layers == 0 || visual_tokens == 0) {
        throw ArgumentError("ModelDims: hidden_dim, num_layers and visual_tokens must be positive");
    }
}

flops_t f_base(std::uint64_t seq_len, std::uint64_t hidden_dim) {
    if (seq_len == 0 || hidden_dim == 0) {
        throw ArgumentError("f_base: L and D must be >= 1");
    }
    const flops_t l = seq_len, d = hidden_dim;
    return 6 * l * d * d + 2 * l * l * d;
}

flops_t delta_layer(std::uint64_t n_pruned, std::uint64_t hidden_dim) {
    if (hidden_dim == 0) throw ArgumentError("delta_layer: D must be >= 1");
    const flops_t n = n_pruned, d = hidden_dim;
    return 6 * n * d * d + 2 * n * n * d;
}

namespace {

std::uint64_t round_tokens(double ratio, std::uint64_t total) {
    return static_cast<std::uint64_t>(std::llround(ratio * static_cast<double>(total)));
}

}  // namespace

FlopsReport report_from_layer_counts(const std::vector<std::uint64_t>& pruned_per_layer,
                                     const ModelDims& dims) {
    dims.validate();
    if (pruned_per_layer.size() != dims.num_layers) {
        throw ArgumentError("report_from_layer_counts: expected " +
                            std::to_string(dims.num_layers) + " layer counts, got " +
                            std::to_string(pruned_per_layer.size()));
    }
    FlopsReport rep;
    const flops_t base = f_base(dims.sequence_len(), dims.hidden_dim);
    rep.per_layer_baseline.assign(dims.num_layers, base);
    rep.per_layer_delta.reserve(dims.num_layers);
    for (std::uint64_t n : pruned_per_layer) {
        if (n > dims.visual_tokens) {
            throw ArgumentError("report_from_layer_counts: pruned count " + std::to_string(n) +
                                " exceeds visual token count " +
                                std::to_string(dims.visual_tokens));
        }
        rep.per_layer_delta.push_back(delta_layer(n, dims.hidden_dim));
    }
    rep.baseline_total = base * dims.num_layers;
    for (flops_t d : rep.per_layer_delta) rep.delta_total += d;
    rep.relative_reduction = flops_to_double(rep.delta_total) / flops_to_double(rep.baseline_total);
    return rep;
}

FlopsReport delta_total_from_counts(std::uint64_t pruned_until_pivot,
                                    std::uint64_t pruned_after_pivot, std::uint64_t pivot_layer,
                                    const ModelDims& dims) {
    dims.validate();
    if (pivot_layer > dims.num_layers) {
        throw ArgumentError("delta_total_from_counts: pivot layer " + std::to_string(pivot_layer) +
                            " exceeds layer count " + std::to_string(dims.num_layers));
    }
    std::vector<std::uint64_t> per_layer(dims.num_layers);
    for (std::uint64_t i = 0; i < dims.num_layers; ++i) {
        per_layer[i] = (i < pivot_layer) ? pruned_until_pivot : pruned_after_pivot;
    }
    FlopsReport rep = report_from_layer_counts(per_layer, dims);
    rep.delta_stage1 = static_cast<flops_t>(pivot_layer) *
                       delta_layer(pruned_until_pivot, dims.hidden_dim);
    rep.delta_stage2 = static_cast<flops_t>(dims.num_layers - pivot_layer) *
                       delta_layer(pruned_after_pivot, dims.hidden_dim);
    return rep;
}

FlopsReport delta_total(double stage1_ratio, double stage2_ratio, std::uint64_t pivot_layer,
                        const ModelDims& dims) {
    dims.validate();
    if (!(stage1_ratio >= 0.0 && stage1_ratio < stage2_ratio && stage2_ratio < 1.0)) {
        throw ConstraintError("delta_total: invalid ratios R=" + std::to_string(stage1_ratio) +
                              ", P=" + std::to_string(stage2_ratio) +
                              "; we enforce R < P with 0 <= R and P < 1");
    }
    if (pivot_layer < 1 || pivot_layer > dims.num_layers) {
        throw ArgumentError("delta_total: pivot layer " + std::to_string(pivot_layer) +
                            " outside 1.." + std::to_string(dims.num_layers));
    }
    return delta_total_from_counts(round_tokens(stage1_ratio, dims.visual_tokens),
                                   round_tokens(stage2_ratio, dims.visual_tokens), pivot_layer,
                                   dims);
}

double paper_ratio_check(double baseline_total, double method_total) {
    if (!(baseline_total > 0.0)) {
        throw ArgumentError("paper_ratio_check: baseline must be positive");
    }
    return (baseline_total - method_total) / baseline_total;
}

SolverGrid SolverGrid::default_grid(std::uint64_t num_layers) {
    SolverGrid grid;
    for (int i = 0; i < 20; ++i) {
        grid.stage1_ratios.push_back(0.05 * i);
        grid.stage2_ratios.push_back(0.05 * i);
    }
    for (std::uint64_t k = 1; k <= num_layers; ++k) grid.pivots.push_back(k);
    return grid;
}

BudgetResult budget_solve(const ModelDims& dims, const BudgetTarget& target) {
    return budget_solve(dims, target, SolverGrid::default_grid(dims.num_layers));
}

BudgetResult budget_solve(const ModelDims& dims, const BudgetTarget& target,
                          const SolverGrid& grid) {
    dims.validate();
    std::vector<std::uint64_t> pivots = grid.pivots;
    if (pivots.empty()) {
        for (std::uint64_t k = 1; k <= dims.num_layers; ++k) pivots.push_back(k);
    }

    BudgetResult result;
    auto push = [&](double r, double p, std::uint64_t k, const FlopsReport& rep,
                    std::uint64_t final_tokens) {
        result.feasible.push_back(
            {r, p, k, final_tokens, rep.delta_total, rep.relative_reduction});
    };

    if (target.kind == BudgetTarget::Kind::MinReduction) {
        for (double r : grid.stage1_ratios) {
            for (double p : grid.stage2_ratios) {
                if (!(r >= 0.0 && r < p && p < 1.0)) continue;
                for (std::uint64_t k : pivots) {
                    if (k < 1 || k > dims.num_layers) continue;
                    const FlopsReport rep = delta_total(r, p, k, dims);
                    if (rep.relative_reduction >= target.min_reduction) {
                        push(r, p, k, rep,
                             dims.visual_tokens - round_tokens(p, dims.visual_tokens));
                    }
                }
            }
        }
    } else {
        // Each (R, K) implies one exact P via the kept counts, as in
        // schedule resolution; the grid's P axis is not scanned.
        for (double r : grid.stage1_ratios) {
            if (!(r >= 0.0 && r < 1.0)) continue;
            const double kept1 = std::floor((1.0 - r) * static_cast<double>(dims.visual_tokens));
            const auto stage1_keep = static_cast<std::uint64_t>(kept1);
            if (stage1_keep == 0 || target.remaining > stage1_keep) continue;
            const double p =
                1.0 - static_cast<double>(target.remaining) / static_cast<double>(stage1_keep);
            if (p > 0.0 && !(r < p)) continue;
            for (std::uint64_t k : pivots) {
                if (k < 1 || k > dims.num_layers) continue;
                const FlopsReport rep = delta_total_from_counts(
                    dims.visual_tokens - stage1_keep, dims.visual_tokens - target.remaining, k,
                    dims);
                push(r, p, k, rep, target.remaining);
            }
        }
    }

    std::sort(result.feasible.begin(), result.feasible.end(),
              [](const BudgetSolution& a, const BudgetSolution& b) {
                  if (a.delta != b.delta) return a.delta > b.delta;
                  if (a.stage1_ratio != b.stage1_ratio) return a.stage1_ratio < b.stage1_ratio;
                  if (a.stage2_ratio != b.stage2_ratio) return a.stage2_ratio < b.stage2_ratio;
                  return a.pivot_layer < b.pivot_layer;
              });
    return result;
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

std::string FlopsReport::to_json() const {
    std::ostringstream os;
    os << "{\n";
    os << "  \"baseline_total\": " << flops_to_string(baseline_total) << ",\n";
    os << "  \"delta_stage1\": " << flops_to_string(delta_stage1) << ",\n";
    os << "  \"delta_stage2\": " << flops_to_string(delta_stage2) << ",\n";
    os << "  \"delta_total\": " << flops_to_string(delta_total) << ",\n";
    os << "  \"relative_reduction\": " << fmt_double(relative_reduction) << ",\n";
    os << "  \"per_layer_delta\": [";
    for (std::size_t i = 0; i < per_layer_delta.size(); ++i) {
        if (i) os << ", ";
        os << flops_to_string(per_layer_delta[i]);
    }
    os << "]\n}\n";
    return os.str();
}

std::string FlopsReport::to_csv_row() const {
    return flops_to_string(delta_stage1) + "," + flops_to_string(delta_stage2) + "," +
           flops_to_string(delta_total) + "," + fmt_double(relative_reduction);
}

}  // namespace star
