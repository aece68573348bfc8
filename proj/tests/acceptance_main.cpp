// Acceptance suite: one line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "star/cost_model.hpp"
#include "star/harness.hpp"
#include "star/pipeline.hpp"
#include "star/scoring.hpp"
#include "star/toy_lvlm.hpp"

using namespace star;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

struct Criterion {
    const char* name;
    std::function<bool(std::string&)> body;
};

void run_criterion(int number, const Criterion& crit) {
    const auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = false;
    try {
        ok = crit.body(detail);
    } catch (const std::exception& e) {
        detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] criterion %d: %s (%.2fs)%s%s\n", ok ? "PASS" : "FAIL", number, crit.name,
                secs, detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string run_cli_capture(const std::string& args, int& exit_code) {
    static int counter = 0;
    const fs::path capture =
        fs::temp_directory_path() / ("star_accept_" + std::to_string(counter++) + ".txt");
    const std::string cmd =
        std::string(STAR_CLI_PATH) + " " + args + " > " + capture.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    const std::string out = harness::read_text_file(capture);
    fs::remove(capture);
    return out;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// --- criterion bodies ---------------------------------------------------

bool flops_exactness(std::string& detail) {
    const ModelDims spec_dims{4096, 32, 576, 64};
    auto oracle = [](double r, double p, std::uint64_t pivot, const ModelDims& dims) {
        flops_t total = 0;
        for (std::uint64_t layer = 1; layer <= dims.num_layers; ++layer) {
            const double ratio = layer <= pivot ? r : p;
            const auto pruned = static_cast<std::uint64_t>(
                std::llround(ratio * static_cast<double>(dims.visual_tokens)));
            total += 6 * static_cast<flops_t>(pruned) * dims.hidden_dim * dims.hidden_dim +
                     2 * static_cast<flops_t>(pruned) * pruned * dims.hidden_dim;
        }
        return total;
    };

    if (delta_total(0.1, 0.5, 14, spec_dims).delta_total != oracle(0.1, 0.5, 14, spec_dims)) {
        detail = "pinned schedule disagrees with the brute-force sum";
        return false;
    }
    Prng prng(1);
    for (int round = 0; round < 500; ++round) {
        ModelDims dims;
        dims.hidden_dim = 32 + prng.next_below(8192);
        dims.num_layers = 1 + prng.next_below(48);
        dims.visual_tokens = 8 + prng.next_below(4096);
        dims.text_tokens = prng.next_below(256);
        const double r = prng.next_unit() * 0.8;
        const double p = r + (1.0 - r) * (0.05 + 0.9 * prng.next_unit());
        const std::uint64_t pivot = 1 + prng.next_below(dims.num_layers);
        const FlopsReport rep = delta_total(r, p, pivot, dims);
        if (rep.delta_total != oracle(r, p, pivot, dims) ||
            rep.delta_total != rep.delta_stage1 + rep.delta_stage2) {
            detail = "random schedule " + std::to_string(round) + " disagrees";
            return false;
        }
    }
    return true;
}

bool paper_ratios(std::string& detail) {
    const struct {
        double baseline, method, expect_pct;
    } rows[] = {{21353.56, 15223.38, 28.71}, {21353.56, 11434.42, 46.45},
                {21353.56, 10965.06, 48.65}};
    for (const auto& row : rows) {
        const double got = paper_ratio_check(row.baseline, row.method) * 100.0;
        if (std::abs(got - row.expect_pct) > 0.01) {
            detail = "got " + std::to_string(got) + "%, expected " +
                     std::to_string(row.expect_pct) + "%";
            return false;
        }
    }
    return true;
}

bool threshold_correctness(std::string& detail) {
    Prng prng(7);
    for (int round = 0; round < 1000; ++round) {
        const std::size_t n = 1 + prng.next_below(1024);
        const bool ties = round % 2 == 1;
        ImportanceVector r;
        r.scores.resize(n);
        for (float& s : r.scores) {
            s = ties ? static_cast<float>(prng.next_below(6)) * 0.2f : prng.next_unit();
        }
        const double ratio = prng.next_unit() * 0.98;
        const double bound = (1.0 - ratio) * static_cast<double>(n);
        const float tau = dynamic_threshold(r, ratio);

        // Cardinality condition of the dynamic threshold.
        std::size_t survivors = 0;
        for (float s : r.scores) {
            if (s >= tau) ++survivors;
        }
        if (!std::isinf(tau) && static_cast<double>(survivors) > bound) {
            detail = "cardinality bound violated in round " + std::to_string(round);
            return false;
        }
        // Minimality against the exhaustive candidate scan.
        float oracle = std::numeric_limits<float>::infinity();
        for (float candidate : r.scores) {
            std::size_t count = 0;
            for (float s : r.scores) {
                if (s >= candidate) ++count;
            }
            if (static_cast<double>(count) <= bound && candidate < oracle) oracle = candidate;
        }
        if (tau != oracle && !(std::isinf(tau) && std::isinf(oracle))) {
            detail = "threshold differs from the exhaustive scan in round " +
                     std::to_string(round);
            return false;
        }

        // Count-based selection against the full-sort oracle.
        const std::size_t count = prng.next_below(n + 1);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return r.scores[a] > r.scores[b];
        });
        order.resize(count);
        std::sort(order.begin(), order.end());
        if (select_keep(r, count).indices != order) {
            detail = "select_keep differs from the sort oracle in round " +
                     std::to_string(round);
            return false;
        }
    }
    return true;
}

bool budget_resolution(std::string& detail) {
    for (const std::size_t target : {std::size_t(288), std::size_t(115), std::size_t(58),
                                     std::size_t(29)}) {
        PruneSchedule s;
        s.stage1_ratio = 0.1;
        s.pivot_layer = 14;
        s.target_remaining = target;
        const ResolvedSchedule res = resolve_schedule(s, 576);
        if (res.stage1_keep != 518 || res.final_keep != target) {
            detail = "target " + std::to_string(target) + " resolved to " +
                     std::to_string(res.final_keep) + " after stage-1 keep " +
                     std::to_string(res.stage1_keep);
            return false;
        }
    }
    PruneSchedule bad;
    bad.stage1_ratio = 0.5;
    bad.stage2_ratio = 0.3;
    bad.pivot_layer = 14;
    try {
        resolve_schedule(bad, 576);
        detail = "R >= P schedule was accepted";
        return false;
    } catch (const ConstraintError& e) {
        if (std::string(e.what()).find("we enforce R < P") == std::string::npos) {
            detail = "rejection does not cite the constraint";
            return false;
        }
    }
    return true;
}

bool pipeline_invariants(std::string& detail) {
    Prng prng(99);
    for (int round = 0; round < 100; ++round) {
        ToyConfig cfg;
        cfg.d_enc = cfg.d_dec = 32;
        cfg.heads = 4;
        cfg.encoder_layers = 2;
        cfg.decoder_layers = 4;
        cfg.patches = 8 + prng.next_below(25);
        cfg.patch_dim = 8;
        cfg.vocab = 64;
        cfg.gen_steps = 2;
        cfg.seed = prng.next_u64();
        const ToyModel model(cfg);
        const Tensor image = random_image(cfg, prng.next_u64());
        const auto query = random_query_ids(cfg, prng.next_u64(), 1 + prng.next_below(4));

        PruneSchedule s;
        s.strategy = static_cast<Strategy>(prng.next_below(5));
        s.seed = prng.next_u64();
        std::size_t target = cfg.patches;
        if (s.strategy == Strategy::Star) {
            s.stage1_ratio = 0.05 + 0.2 * prng.next_unit();
            s.pivot_layer = 1 + prng.next_below(cfg.decoder_layers);
            const std::size_t stage1 = keep_budget(cfg.patches, s.stage1_ratio);
            const auto cap = static_cast<std::size_t>(
                std::ceil(static_cast<double>(stage1) * (1.0 - s.stage1_ratio)));
            target = cap > 1 ? 1 + prng.next_below(cap - 1) : stage1;
            s.target_remaining = target;
        } else if (s.strategy != Strategy::None) {
            target = 1 + prng.next_below(cfg.patches);
            s.target_remaining = target;
        }

        const GenerationResult run = model.run_generate(image, query, s);
        const PruneTrace& trace = run.trace;

        const bool subset =
            std::includes(trace.stage1.kept.begin(), trace.stage1.kept.end(),
                          trace.stage2.kept.begin(), trace.stage2.kept.end());
        const bool sorted1 =
            std::is_sorted(trace.stage1.kept.begin(), trace.stage1.kept.end());
        const bool sorted2 =
            std::is_sorted(trace.stage2.kept.begin(), trace.stage2.kept.end());
        const bool in_range = std::all_of(trace.stage1.kept.begin(), trace.stage1.kept.end(),
                                          [&](std::size_t i) { return i < cfg.patches; });
        if (!subset || !sorted1 || !sorted2 || !in_range) {
            detail = "subset chain or ordering broken in round " + std::to_string(round);
            return false;
        }
        if (trace.final_count != target) {
            detail = "round " + std::to_string(round) + " kept " +
                     std::to_string(trace.final_count) + ", wanted " + std::to_string(target);
            return false;
        }

        // Non-visual immunity plus order preservation in the live sequence.
        const TokenSequence& seq = run.prefill_sequence;
        if (seq.modality_range(Modality::Query).size() != query.size()) {
            detail = "query tokens were pruned in round " + std::to_string(round);
            return false;
        }
        const IndexRange v = seq.modality_range(Modality::Visual);
        if (v.size() != target) {
            detail = "sequence visual count mismatch in round " + std::to_string(round);
            return false;
        }
        for (std::size_t i = v.begin + 1; i < v.end; ++i) {
            if (seq.origin[i - 1] >= seq.origin[i]) {
                detail = "visual order broken in round " + std::to_string(round);
                return false;
            }
        }
    }
    return true;
}

bool causality_and_stochasticity(std::string& detail) {
    Prng prng(1234);
    for (int round = 0; round < 50; ++round) {
        ToyConfig cfg;
        cfg.d_enc = cfg.d_dec = 32;
        cfg.heads = 2 + 2 * prng.next_below(2);
        cfg.encoder_layers = 1 + prng.next_below(3);
        cfg.decoder_layers = 2 + prng.next_below(4);
        cfg.patches = 4 + prng.next_below(16);
        cfg.patch_dim = 8;
        cfg.vocab = 32;
        cfg.gen_steps = 1;
        cfg.seed = prng.next_u64();
        const ToyModel model(cfg);
        const EncodeResult enc = model.encode_image(random_image(cfg, prng.next_u64()));
        TokenSequence seq = project_and_concat(make_sequence(enc.patch_tokens, Modality::Visual),
                                               model.projector(),
                                               model.embed_query(random_query_ids(
                                                   cfg, prng.next_u64(), 1 + prng.next_below(4))));

        // Alternate plain passes with mid-stack pruned ones.
        DecodeResult dec;
        if (round % 2 == 0) {
            dec = model.decode(seq);
        } else {
            const std::size_t keep = 1 + prng.next_below(cfg.patches);
            std::vector<std::string> warnings;
            MidStackHook hook = [&](const AttentionMap& map, const TokenSequence& current) {
                return stage2_select(current, map, keep, &warnings).keep_positions;
            };
            dec = model.decode(seq, 1 + prng.next_below(cfg.decoder_layers), hook);
        }

        for (const AttentionMap& map : dec.layer_maps) {
            for (std::size_t h = 0; h < map.num_heads(); ++h) {
                for (std::size_t i = 0; i < map.query_len(); ++i) {
                    double sum = 0.0;
                    for (std::size_t j = 0; j < map.key_len(); ++j) {
                        const float w = map.weights.at(h, i, j);
                        sum += w;
                        if (j > i && w != 0.0f) {
                            detail = "nonzero above the diagonal in round " +
                                     std::to_string(round);
                            return false;
                        }
                    }
                    if (std::abs(sum - 1.0) > 1e-6) {
                        detail = "row sum off by " + std::to_string(sum - 1.0) + " in round " +
                                 std::to_string(round);
                        return false;
                    }
                }
            }
        }
    }
    return true;
}

bool trend_reproduction(std::string& detail) {
    const ToyConfig base;  // the default toy configuration
    harness::ToyRunSpec spec;
    spec.model = base;

    const std::size_t budgets[] = {
        keep_budget(base.patches, 0.10),  // 90% of L_v0 (= stage-1 keep at R=0.1)
        base.patches * 50 / 100, base.patches * 20 / 100, base.patches * 10 / 100,
        base.patches * 5 / 100};
    const std::size_t five_pct = budgets[4];
    const std::size_t mid_pivot = base.decoder_layers / 2;

    std::map<std::size_t, std::vector<double>> kl_by_budget;
    std::vector<double> top1_mid, top1_early;

    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        harness::ToyRunSpec local = spec;
        local.model.seed = seed;
        const ToyModel model(local.model);
        const harness::ToyInputs inputs = harness::derive_inputs(local, seed);

        PruneSchedule none;
        none.strategy = Strategy::None;
        const GenerationResult ref = model.run_generate(inputs.image, inputs.query_ids, none);

        for (std::size_t b : budgets) {
            PruneSchedule s;
            s.stage1_ratio = 0.1;
            s.pivot_layer = mid_pivot;
            s.target_remaining = b;
            const GenerationResult run = model.run_generate(inputs.image, inputs.query_ids, s);
            const FidelityMetrics m = fidelity(ref, run);
            kl_by_budget[b].push_back(m.kl_divergence);
            if (b == five_pct) top1_mid.push_back(m.top1_agreement);
        }
        PruneSchedule early;
        early.stage1_ratio = 0.1;
        early.pivot_layer = 2;
        early.target_remaining = five_pct;
        const GenerationResult run = model.run_generate(inputs.image, inputs.query_ids, early);
        top1_early.push_back(fidelity(ref, run).top1_agreement);
    }

    std::vector<double> medians;
    std::string curve;
    for (std::size_t b : budgets) {
        medians.push_back(median_of(kl_by_budget[b]));
        curve += (curve.empty() ? "" : " ") + std::to_string(medians.back());
    }
    int inversions = 0;
    for (std::size_t i = 1; i < medians.size(); ++i) {
        if (medians[i] < medians[i - 1]) ++inversions;
    }
    const double mid = median_of(top1_mid), early = median_of(top1_early);
    detail = "median KL over budgets {90,50,20,10,5}%: " + curve +
             "; top1 K=" + std::to_string(mid_pivot) + ": " + std::to_string(mid) +
             ", K=2: " + std::to_string(early);
    if (inversions > 1) {
        detail += " -- too many KL inversions (" + std::to_string(inversions) + ")";
        return false;
    }
    if (!(mid >= early)) {
        detail += " -- deeper pivot lost";
        return false;
    }
    return true;
}

bool determinism_and_golden(std::string& detail) {
    // Fixture-mode prune against the committed golden trace.
    const fs::path out = fresh_dir("star_accept_golden");
    int code = 0;
    run_cli_capture("prune --fixtures " STAR_FIXTURES_DIR "/golden --strategy star --R 0.1 "
                    "--K 2 --target 5 --quiet --out " +
                        out.string(),
                    code);
    if (code != 0) {
        detail = "fixture prune exited with " + std::to_string(code);
        return false;
    }
    if (harness::read_text_file(out / "trace.json") !=
        harness::read_text_file(STAR_FIXTURES_DIR "/golden_trace.json")) {
        detail = "trace differs from the committed golden file";
        return false;
    }

    // STT round trips.
    Prng prng(5150);
    const fs::path stt = out / "roundtrip.stt";
    for (int round = 0; round < 100; ++round) {
        std::vector<std::size_t> shape;
        const std::size_t rank = 1 + prng.next_below(4);
        for (std::size_t i = 0; i < rank; ++i) shape.push_back(1 + prng.next_below(6));
        const Tensor t = random_tensor(shape, prng, 100.0f);
        stt_write(t, stt);
        const Tensor back = stt_read(stt);
        if (back.shape() != t.shape() || back.values() != t.values()) {
            detail = "stt round trip changed bits in round " + std::to_string(round);
            return false;
        }
    }

    // Sweep reruns, different worker counts.
    const fs::path s1 = fresh_dir("star_accept_sweep1");
    const fs::path s2 = fresh_dir("star_accept_sweep2");
    const std::string sweep_args =
        "sweep --patches 16 --patch-dim 8 --d-enc 32 --d-dec 32 --heads 4 --enc-layers 2 "
        "--dec-layers 4 --vocab 64 --gen-steps 3 --query-tokens 3 --strategies star,fastervlm "
        "--R-grid 0,0.1 --K-grid 2 --targets 5,9 --num-seeds 2 --quiet --out ";
    const std::string env_cmd1 = "STAR_PRUNE_THREADS=1 " + std::string(STAR_CLI_PATH) + " " +
                                 sweep_args + s1.string() + " > /dev/null 2>&1";
    const std::string env_cmd2 = "STAR_PRUNE_THREADS=3 " + std::string(STAR_CLI_PATH) + " " +
                                 sweep_args + s2.string() + " > /dev/null 2>&1";
    if (std::system(env_cmd1.c_str()) != 0 || std::system(env_cmd2.c_str()) != 0) {
        detail = "sweep invocation failed";
        return false;
    }
    if (harness::read_text_file(s1 / "sweep.csv") != harness::read_text_file(s2 / "sweep.csv")) {
        detail = "sweep CSVs differ across reruns";
        return false;
    }
    return true;
}

bool baseline_consistency(std::string& detail) {
    ToyConfig cfg;
    cfg.d_enc = cfg.d_dec = 64;
    cfg.heads = 4;
    cfg.encoder_layers = 4;
    cfg.decoder_layers = 8;
    cfg.patches = 64;
    cfg.patch_dim = 16;
    cfg.vocab = 128;
    cfg.gen_steps = 2;

    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        cfg.seed = seed;
        const ToyModel model(cfg);
        const Tensor image = random_image(cfg, seed * 13 + 1);
        const auto query = random_query_ids(cfg, seed * 7 + 2, 6);
        const std::size_t budget = 8 + seed;

        PruneSchedule star;
        star.strategy = Strategy::Star;
        star.stage1_ratio = 0.0;
        star.pivot_layer = 2;
        star.target_remaining = budget;
        PruneSchedule fastv;
        fastv.strategy = Strategy::FastV;
        fastv.target_remaining = budget;

        const GenerationResult a = model.run_generate(image, query, star);
        const GenerationResult b = model.run_generate(image, query, fastv);
        if (a.trace.stage2.kept != b.trace.stage2.kept) {
            detail = "star(R=0, K=2) and fastv disagree at seed " + std::to_string(seed);
            return false;
        }

        PruneSchedule faster;
        faster.strategy = Strategy::FasterVLM;
        faster.target_remaining = budget;
        const GenerationResult c = model.run_generate(image, query, faster);
        const EncodeResult enc = model.encode_image(image);
        const KeepSet expect = select_keep(cls_attention_scores(enc.full_attention, 0), budget);
        if (c.trace.stage1.kept != expect.indices) {
            detail = "fastervlm keep set is not the top-k of the [CLS] scores at seed " +
                     std::to_string(seed);
            return false;
        }
    }
    return true;
}

}  // namespace

int main() {
    std::printf("acceptance suite\n");
    const auto start = std::chrono::steady_clock::now();

    run_criterion(1, {"FLOPs formula exactness vs brute-force oracle", flops_exactness});
    run_criterion(2, {"published efficiency ratio reproduction", paper_ratios});
    run_criterion(3, {"dynamic threshold and top-k correctness", threshold_correctness});
    run_criterion(4, {"remaining-token budget resolution", budget_resolution});
    run_criterion(5, {"pipeline invariants on randomized end-to-end runs", pipeline_invariants});
    run_criterion(6, {"decoder causality and row stochasticity", causality_and_stochasticity});
    run_criterion(7, {"pruning-ratio and pivot-layer trends", trend_reproduction});
    run_criterion(8, {"golden traces, STT round trips, sweep determinism",
                      determinism_and_golden});
    run_criterion(9, {"baseline keep-set consistency", baseline_consistency});

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%d of 9 criteria passed in %.1fs\n", 9 - g_failures, secs);
    return g_failures == 0 ? 0 : 1;
}
