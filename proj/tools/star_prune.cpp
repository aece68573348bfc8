// star-prune: toy-scale two-stage visual token pruning harness.
// Subcommands: flops | prune | sweep | gen-fixtures | viz.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "star/cost_model.hpp"
#include "star/harness.hpp"
#include "star/pgm.hpp"
#include "star/pipeline.hpp"
#include "star/toy_lvlm.hpp"

namespace {

using namespace star;
namespace fs = std::filesystem;

struct Options {
    // global
    std::string config_path;
    std::string out = "star_out";
    std::uint64_t seed = 42;
    bool quiet = false;

    // toy model + run
    harness::ToyRunSpec spec;

    // single schedule
    std::string strategy = "star";
    double stage1_ratio = 0.0;
    double stage2_ratio = 0.0;
    std::size_t pivot = 4;
    std::uint64_t schedule_seed = 0;
    long long target = -1;  // -1 = unset

    // prune
    std::string fixtures;
    std::string grid;

    // flops
    std::uint64_t dim = 4096;
    std::uint64_t omega = 32;
    std::uint64_t lv = 576;
    std::uint64_t text = 0;
    double target_reduction = -1.0;
    long long flops_remaining = -1;
    std::vector<double> ratio_check;
    // Solver grids; empty means the built-in default grid.
    std::vector<double> solver_r;
    std::vector<double> solver_p;
    std::vector<std::uint64_t> solver_k;

    // sweep
    std::vector<std::string> strategies{"star"};
    std::vector<double> r_grid{0.1};
    std::vector<double> p_grid;
    std::vector<std::size_t> k_grid{4};
    std::vector<long long> targets;
    std::size_t num_seeds = 3;

    // viz
    std::string trace_path;
};

void apply_config_file(Options& opt) {
    if (opt.config_path.empty()) return;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(harness::read_text_file(opt.config_path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + opt.config_path + ": invalid JSON: " + e.what());
    }
    try {
        if (j.contains("out")) opt.out = j["out"].get<std::string>();
        if (j.contains("seed")) opt.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("quiet")) opt.quiet = j["quiet"].get<bool>();
        if (j.contains("fixtures")) opt.fixtures = j["fixtures"].get<std::string>();
        if (j.contains("grid")) opt.grid = j["grid"].get<std::string>();
        if (j.contains("toy")) {
            const auto& t = j["toy"];
            ToyConfig& m = opt.spec.model;
            if (t.contains("d_enc")) m.d_enc = t["d_enc"].get<std::size_t>();
            if (t.contains("d_dec")) m.d_dec = t["d_dec"].get<std::size_t>();
            if (t.contains("heads")) m.heads = t["heads"].get<std::size_t>();
            if (t.contains("encoder_layers")) m.encoder_layers = t["encoder_layers"].get<std::size_t>();
            if (t.contains("decoder_layers")) m.decoder_layers = t["decoder_layers"].get<std::size_t>();
            if (t.contains("patches")) m.patches = t["patches"].get<std::size_t>();
            if (t.contains("patch_dim")) m.patch_dim = t["patch_dim"].get<std::size_t>();
            if (t.contains("vocab")) m.vocab = t["vocab"].get<std::size_t>();
            if (t.contains("gen_steps")) m.gen_steps = t["gen_steps"].get<std::size_t>();
            if (t.contains("scoring_layer")) m.scoring_layer = t["scoring_layer"].get<std::size_t>();
            if (t.contains("query_tokens")) opt.spec.query_tokens = t["query_tokens"].get<std::size_t>();
        }
        if (j.contains("schedule")) {
            const auto& s = j["schedule"];
            if (s.contains("strategy")) opt.strategy = s["strategy"].get<std::string>();
            if (s.contains("R")) opt.stage1_ratio = s["R"].get<double>();
            if (s.contains("P")) opt.stage2_ratio = s["P"].get<double>();
            if (s.contains("K")) opt.pivot = s["K"].get<std::size_t>();
            if (s.contains("seed")) opt.schedule_seed = s["seed"].get<std::uint64_t>();
            if (s.contains("target_remaining") && !s["target_remaining"].is_null()) {
                opt.target = s["target_remaining"].get<long long>();
            }
        }
        if (j.contains("flops")) {
            const auto& f = j["flops"];
            if (f.contains("D")) opt.dim = f["D"].get<std::uint64_t>();
            if (f.contains("omega")) opt.omega = f["omega"].get<std::uint64_t>();
            if (f.contains("lv")) opt.lv = f["lv"].get<std::uint64_t>();
            if (f.contains("text")) opt.text = f["text"].get<std::uint64_t>();
        }
        if (j.contains("sweep")) {
            const auto& s = j["sweep"];
            if (s.contains("strategies")) opt.strategies = s["strategies"].get<std::vector<std::string>>();
            if (s.contains("R")) opt.r_grid = s["R"].get<std::vector<double>>();
            if (s.contains("P")) opt.p_grid = s["P"].get<std::vector<double>>();
            if (s.contains("K")) opt.k_grid = s["K"].get<std::vector<std::size_t>>();
            if (s.contains("targets")) opt.targets = s["targets"].get<std::vector<long long>>();
            if (s.contains("num_seeds")) opt.num_seeds = s["num_seeds"].get<std::size_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + opt.config_path + ": mistyped field: " + e.what());
    }
}

PruneSchedule build_schedule(const Options& opt) {
    PruneSchedule s;
    try {
        s.strategy = strategy_from_name(opt.strategy);
    } catch (const ArgumentError& e) {
        throw ConfigError(e.what());
    }
    s.stage1_ratio = opt.stage1_ratio;
    s.stage2_ratio = opt.stage2_ratio;
    s.pivot_layer = opt.pivot;
    s.seed = opt.schedule_seed;
    if (opt.target >= 0) s.target_remaining = static_cast<std::size_t>(opt.target);
    return s;
}

std::pair<std::size_t, std::size_t> parse_grid(const std::string& text, std::size_t cells) {
    if (text.empty()) {
        const auto side = static_cast<std::size_t>(std::lround(std::sqrt(double(cells))));
        if (side * side == cells) return {side, side};
        return {1, cells};
    }
    const auto x = text.find('x');
    if (x == std::string::npos) throw ConfigError("grid must look like HxW, got '" + text + "'");
    std::size_t h = 0, w = 0;
    try {
        h = std::stoull(text.substr(0, x));
        w = std::stoull(text.substr(x + 1));
    } catch (const std::exception&) {
        throw ConfigError("grid must look like HxW, got '" + text + "'");
    }
    if (h == 0 || w == 0) throw ConfigError("grid dimensions must be positive");
    if (h * w != cells) {
        throw ConfigError("grid " + std::to_string(h) + "x" + std::to_string(w) + " has " +
                          std::to_string(h * w) + " cells, trace covers " + std::to_string(cells));
    }
    return {h, w};
}

void write_masks(const fs::path& out, const PruneTrace& trace, std::size_t h, std::size_t w) {
    const std::size_t cells = h * w;
    pgm_write(out / "mask_stage1.pgm", w, h, stage_mask(trace.stage1.kept, cells));
    pgm_write(out / "mask_stage2.pgm", w, h, stage_mask(trace.stage2.kept, cells));
    pgm_write(out / "mask_combined.pgm", w, h, combined_mask(trace, cells));

    nlohmann::json mask;
    mask["height"] = h;
    mask["width"] = w;
    std::vector<bool> s1(cells, false), s2(cells, false);
    for (std::size_t idx : trace.stage1.kept) s1[idx] = true;
    for (std::size_t idx : trace.stage2.kept) s2[idx] = true;
    mask["stage1"] = s1;
    mask["stage2"] = s2;
    harness::write_text_file(out / "mask.json", mask.dump(2) + "\n");
}

int cmd_flops(const Options& opt) {
    const fs::path out(opt.out);

    if (!opt.ratio_check.empty()) {
        if (opt.ratio_check.size() != 2) {
            throw ConfigError("--ratio-check needs exactly two totals");
        }
        const double ratio = paper_ratio_check(opt.ratio_check[0], opt.ratio_check[1]);
        std::printf("%.2f%%\n", ratio * 100.0);
        return 0;
    }

    fs::create_directories(out);
    const ModelDims dims{opt.dim, opt.omega, opt.lv, opt.text};

    if (opt.target_reduction >= 0.0 || opt.flops_remaining >= 0) {
        BudgetTarget target;
        if (opt.flops_remaining >= 0) {
            target.kind = BudgetTarget::Kind::RemainingTokens;
            target.remaining = static_cast<std::uint64_t>(opt.flops_remaining);
        } else {
            target.min_reduction = opt.target_reduction;
        }
        SolverGrid grid = SolverGrid::default_grid(dims.num_layers);
        if (!opt.solver_r.empty()) grid.stage1_ratios = opt.solver_r;
        if (!opt.solver_p.empty()) grid.stage2_ratios = opt.solver_p;
        if (!opt.solver_k.empty()) grid.pivots = opt.solver_k;
        const BudgetResult res = budget_solve(dims, target, grid);

        nlohmann::json j;
        j["infeasible"] = res.infeasible();
        auto solutions = nlohmann::json::array();
        std::string csv = "R,P,K,final_tokens,delta_total,relative_reduction\n";
        for (const BudgetSolution& sol : res.feasible) {
            solutions.push_back({{"R", sol.stage1_ratio},
                                 {"P", sol.stage2_ratio},
                                 {"K", sol.pivot_layer},
                                 {"final_tokens", sol.final_tokens},
                                 {"delta_total", flops_to_string(sol.delta)},
                                 {"relative_reduction", sol.relative_reduction}});
            csv += harness::format_double(sol.stage1_ratio) + "," +
                   harness::format_double(sol.stage2_ratio) + "," +
                   std::to_string(sol.pivot_layer) + "," + std::to_string(sol.final_tokens) +
                   "," + flops_to_string(sol.delta) + "," +
                   harness::format_double(sol.relative_reduction) + "\n";
        }
        j["solutions"] = std::move(solutions);
        harness::write_text_file(out / "flops.json", j.dump(2) + "\n");
        harness::write_text_file(out / "flops.csv", csv);
        if (!opt.quiet) {
            if (res.infeasible()) {
                std::printf("no feasible schedule for the requested target\n");
            } else {
                std::printf("%zu feasible schedules; best reduction %.2f%%\n",
                            res.feasible.size(), res.feasible.front().relative_reduction * 100);
            }
        }
        return 0;
    }

    const FlopsReport rep = delta_total(opt.stage1_ratio, opt.stage2_ratio, opt.pivot, dims);
    harness::write_text_file(out / "flops.json", rep.to_json());
    harness::write_text_file(
        out / "flops.csv",
        "R,P,K,delta_stage1,delta_stage2,delta_total,relative_reduction\n" +
            harness::format_double(opt.stage1_ratio) + "," +
            harness::format_double(opt.stage2_ratio) + "," + std::to_string(opt.pivot) + "," +
            rep.to_csv_row() + "\n");
    if (!opt.quiet) {
        std::printf("delta_total = %s FLOPs (%.2f%% of the %s-FLOP baseline)\n",
                    flops_to_string(rep.delta_total).c_str(), rep.relative_reduction * 100.0,
                    flops_to_string(rep.baseline_total).c_str());
    }
    return 0;
}

int cmd_prune(const Options& opt) {
    const fs::path out(opt.out);
    fs::create_directories(out);
    const PruneSchedule schedule = build_schedule(opt);

    PruneTrace trace;
    std::optional<FidelityMetrics> metrics;
    std::size_t cells = 0;

    if (!opt.fixtures.empty()) {
        const harness::FixtureSet fx = harness::FixtureSet::read(opt.fixtures);
        const PruneRun run = run_offline(fx, schedule);
        trace = run.trace;
        cells = fx.config.patches;
    } else {
        harness::ToyRunSpec spec = opt.spec;
        spec.model.seed = opt.seed;
        const ToyModel model(spec.model);
        const harness::ToyInputs inputs = harness::derive_inputs(spec, opt.seed);
        const RunResult run = model.run_with_schedule(inputs.image, inputs.query_ids, schedule);
        trace = run.trace;
        metrics = run.fidelity;
        cells = spec.model.patches;
    }

    harness::write_text_file(out / "trace.json", trace.to_json());
    const auto [h, w] = parse_grid(opt.grid, cells);
    write_masks(out, trace, h, w);
    if (metrics) {
        nlohmann::json j;
        j["top1_agreement"] = metrics->top1_agreement;
        j["kl_nats"] = metrics->kl_divergence;
        j["cosine"] = metrics->cosine;
        harness::write_text_file(out / "fidelity.json", j.dump(2) + "\n");
    }
    if (!opt.quiet) {
        std::printf("final visual tokens: %zu (trace: %s)\n", trace.final_count,
                    (out / "trace.json").c_str());
        if (metrics) {
            std::printf("fidelity: top1 %.3f, kl %.4f nats, cosine %.4f\n",
                        metrics->top1_agreement, metrics->kl_divergence, metrics->cosine);
        }
    }
    return 0;
}

int cmd_sweep(const Options& opt) {
    const fs::path out(opt.out);
    fs::create_directories(out);

    harness::ToyRunSpec spec = opt.spec;
    std::vector<harness::SweepCell> cells;
    for (const std::string& name : opt.strategies) {
        Strategy strategy;
        try {
            strategy = strategy_from_name(name);
        } catch (const ArgumentError& e) {
            throw ConfigError(e.what());
        }
        // Parameter axes that the strategy actually consumes.
        std::vector<double> rs = strategy == Strategy::Star ? opt.r_grid
                                                            : std::vector<double>{0.0};
        std::vector<std::size_t> ks = strategy == Strategy::Star
                                          ? opt.k_grid
                                          : std::vector<std::size_t>{strategy == Strategy::FastV
                                                                         ? std::size_t(2)
                                                                         : std::size_t(1)};
        std::vector<PruneSchedule> schedules;
        for (double r : rs) {
            for (std::size_t k : ks) {
                if (strategy == Strategy::None) {
                    PruneSchedule s;
                    s.strategy = strategy;
                    schedules.push_back(s);
                    break;
                }
                if (!opt.targets.empty()) {
                    for (long long target : opt.targets) {
                        PruneSchedule s;
                        s.strategy = strategy;
                        s.stage1_ratio = r;
                        s.pivot_layer = k;
                        s.target_remaining = static_cast<std::size_t>(target);
                        schedules.push_back(s);
                    }
                } else {
                    for (double p : opt.p_grid.empty() ? std::vector<double>{0.5} : opt.p_grid) {
                        PruneSchedule s;
                        s.strategy = strategy;
                        s.stage1_ratio = r;
                        s.stage2_ratio = p;
                        s.pivot_layer = k;
                        schedules.push_back(s);
                    }
                }
            }
            if (strategy != Strategy::Star) break;
        }
        for (const PruneSchedule& s : schedules) {
            for (std::uint64_t seed = 1; seed <= opt.num_seeds; ++seed) {
                harness::SweepCell cell;
                cell.schedule = s;
                cell.schedule.seed = seed;  // drives the random strategy
                cell.seed = seed;
                cells.push_back(cell);
            }
        }
    }

    const std::string csv = harness::run_sweep_csv(spec, cells);
    harness::write_text_file(out / "sweep.csv", csv);
    if (!opt.quiet) {
        const std::size_t rows = static_cast<std::size_t>(
            std::count(csv.begin(), csv.end(), '\n'));
        std::printf("wrote %s (%zu rows)\n", (out / "sweep.csv").c_str(), rows - 1);
    }
    return 0;
}

int cmd_gen_fixtures(const Options& opt) {
    const fs::path out(opt.out);
    harness::ToyRunSpec spec = opt.spec;
    const harness::FixtureSet fx = harness::generate_fixtures(spec, opt.seed);
    fx.write(out);
    if (!opt.quiet) {
        std::printf("wrote fixtures for %zu visual tokens to %s\n", fx.config.patches,
                    out.c_str());
        std::printf("manifest: %s\n", (out / "manifest.json").c_str());
    }
    return 0;
}

int cmd_viz(const Options& opt) {
    if (opt.trace_path.empty()) throw ConfigError("viz needs --trace");
    const PruneTrace trace = PruneTrace::from_json(harness::read_text_file(opt.trace_path));
    const std::size_t cells = trace.stage1.kept.size() + trace.stage1.dropped.size();
    const auto [h, w] = parse_grid(opt.grid, cells);
    const fs::path out(opt.out);
    fs::create_directories(out);
    write_masks(out, trace, h, w);
    if (!opt.quiet) {
        std::printf("wrote %zux%zu masks (stage1, stage2, combined) to %s\n", h, w, out.c_str());
    }
    return 0;
}

void add_toy_options(CLI::App* cmd, Options& opt) {
    cmd->add_option("--d-enc", opt.spec.model.d_enc, "encoder width");
    cmd->add_option("--d-dec", opt.spec.model.d_dec, "decoder width");
    cmd->add_option("--heads", opt.spec.model.heads, "attention heads");
    cmd->add_option("--enc-layers", opt.spec.model.encoder_layers, "encoder layers");
    cmd->add_option("--dec-layers", opt.spec.model.decoder_layers, "decoder layers");
    cmd->add_option("--patches", opt.spec.model.patches, "visual tokens");
    cmd->add_option("--patch-dim", opt.spec.model.patch_dim, "raw patch width");
    cmd->add_option("--vocab", opt.spec.model.vocab, "vocabulary size");
    cmd->add_option("--gen-steps", opt.spec.model.gen_steps, "greedy decode steps");
    cmd->add_option("--scoring-layer", opt.spec.model.scoring_layer,
                    "encoder layer for stage-1 scores (0 = penultimate)");
    cmd->add_option("--query-tokens", opt.spec.query_tokens, "query length");
}

void add_schedule_options(CLI::App* cmd, Options& opt) {
    cmd->add_option("--strategy", opt.strategy, "star|fastv|fastervlm|random|none");
    cmd->add_option("--R", opt.stage1_ratio, "stage-1 prune ratio");
    cmd->add_option("--P", opt.stage2_ratio, "stage-2 prune ratio");
    cmd->add_option("--K", opt.pivot, "pivot decoder layer");
    cmd->add_option("--target", opt.target, "remaining visual tokens (overrides --P)");
    cmd->add_option("--schedule-seed", opt.schedule_seed, "seed for the random strategy");
}

}  // namespace

int main(int argc, char** argv) {
    Options opt;

    // The config file seeds the defaults; explicit flags override it.
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--config" && i + 1 < argc) opt.config_path = argv[i + 1];
        else if (arg.rfind("--config=", 0) == 0) opt.config_path = arg.substr(9);
    }
    try {
        apply_config_file(opt);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }

    CLI::App app{"two-stage attention-guided visual token pruning harness"};
    app.require_subcommand(1);
    app.add_option("--config", opt.config_path, "JSON config file (flags override it)");
    app.add_option("--out", opt.out, "output directory");
    app.add_option("--seed", opt.seed, "master seed");
    app.add_flag("--quiet", opt.quiet, "suppress the summary lines");

    CLI::App* flops = app.add_subcommand("flops", "cost model reports and budget solving");
    flops->fallthrough();
    flops->add_option("--D", opt.dim, "hidden width");
    flops->add_option("--omega", opt.omega, "decoder layer count");
    flops->add_option("--lv", opt.lv, "original visual tokens");
    flops->add_option("--text", opt.text, "non-visual tokens");
    flops->add_option("--R", opt.stage1_ratio, "stage-1 prune ratio");
    flops->add_option("--P", opt.stage2_ratio, "stage-2 prune ratio");
    flops->add_option("--K", opt.pivot, "pivot decoder layer");
    flops->add_option("--target-reduction", opt.target_reduction,
                      "solve for relative reduction >= this");
    flops->add_option("--target-remaining", opt.flops_remaining,
                      "solve for this many remaining tokens");
    flops->add_option("--R-grid", opt.solver_r, "solver grid for R")->delimiter(',');
    flops->add_option("--P-grid", opt.solver_p, "solver grid for P")->delimiter(',');
    flops->add_option("--K-grid", opt.solver_k, "solver grid for K")->delimiter(',');
    flops->add_option("--ratio-check", opt.ratio_check,
                      "baseline and method totals; prints the reduction")
        ->expected(2);

    CLI::App* prune = app.add_subcommand("prune", "run one schedule and dump trace + masks");
    prune->fallthrough();
    add_toy_options(prune, opt);
    add_schedule_options(prune, opt);
    prune->add_option("--fixtures", opt.fixtures, "fixture directory (model-free mode)");
    prune->add_option("--grid", opt.grid, "mask grid as HxW");

    CLI::App* sweep = app.add_subcommand("sweep", "grid of schedules x seeds to CSV");
    sweep->fallthrough();
    add_toy_options(sweep, opt);
    sweep->add_option("--strategies", opt.strategies, "strategies to sweep")->delimiter(',');
    sweep->add_option("--R-grid", opt.r_grid, "stage-1 ratios")->delimiter(',');
    sweep->add_option("--P-grid", opt.p_grid, "stage-2 ratios")->delimiter(',');
    sweep->add_option("--K-grid", opt.k_grid, "pivot layers")->delimiter(',');
    sweep->add_option("--targets", opt.targets, "remaining-token budgets")->delimiter(',');
    sweep->add_option("--num-seeds", opt.num_seeds, "seeds 1..N per cell");

    CLI::App* gen = app.add_subcommand("gen-fixtures", "record attention/embedding dumps");
    gen->fallthrough();
    add_toy_options(gen, opt);

    CLI::App* viz = app.add_subcommand("viz", "render keep masks from a trace");
    viz->fallthrough();
    viz->add_option("--trace", opt.trace_path, "trace JSON path");
    viz->add_option("--grid", opt.grid, "mask grid as HxW");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    }

    try {
        if (flops->parsed()) return cmd_flops(opt);
        if (prune->parsed()) return cmd_prune(opt);
        if (sweep->parsed()) return cmd_sweep(opt);
        if (gen->parsed()) return cmd_gen_fixtures(opt);
        if (viz->parsed()) return cmd_viz(opt);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ConstraintError& e) {
        std::fprintf(stderr, "schedule error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
