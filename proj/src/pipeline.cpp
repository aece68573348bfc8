#include "star/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include <json.hpp>

namespace star {

namespace {

int modality_order(Modality m) {
    switch (m) {
        case Modality::System: return 0;
        case Modality::Visual: return 1;
        case Modality::Query: return 2;
        case Modality::Response: return 3;
    }
    return 4;
}

// Effective cutoff of a count-based selection: the lowest kept score.
std::optional<float> effective_cutoff(const ImportanceVector& scores, const KeepSet& keep) {
    if (keep.indices.empty()) return std::nullopt;
    float lo = std::numeric_limits<float>::infinity();
    for (std::size_t i : keep.indices) lo = std::min(lo, scores.scores[i]);
    return lo;
}

StageTrace make_stage_trace(const TokenSequence& visual, const ImportanceVector& scores,
                            const KeepSet& keep, std::optional<float> tau) {
    StageTrace trace;
    trace.tau = tau;
    trace.kept.reserve(keep.size());
    for (std::size_t i : keep.indices) trace.kept.push_back(visual.origin[i]);
    for (std::size_t i = 0; i < visual.length(); ++i) {
        if (!keep.contains(i)) {
            trace.dropped.emplace_back(visual.origin[i],
                                       scores.scores.empty() ? 0.0f : scores.scores[i]);
        }
    }
    return trace;
}

StageTrace passthrough_trace(const std::vector<std::size_t>& survivors) {
    StageTrace trace;
    trace.kept = survivors;
    return trace;
}

std::vector<std::size_t> visual_origins(const TokenSequence& seq) {
    std::vector<std::size_t> out;
    const IndexRange v = seq.modality_range(Modality::Visual);
    for (std::size_t i = v.begin; i < v.end; ++i) out.push_back(seq.origin[i]);
    return out;
}

}  // namespace

IndexRange TokenSequence::modality_range(Modality m) const {
    IndexRange range{0, 0};
    bool found = false;
    for (std::size_t i = 0; i < modality.size(); ++i) {
        if (modality[i] == m) {
            if (!found) {
                range.begin = i;
                found = true;
            }
            range.end = i + 1;
        }
    }
    if (!found) return {0, 0};
    return range;
}

std::vector<RoleSpan> TokenSequence::role_spans() const {
    std::vector<RoleSpan> spans;
    std::size_t i = 0;
    while (i < modality.size()) {
        std::size_t j = i;
        while (j < modality.size() && modality[j] == modality[i]) ++j;
        spans.push_back({modality[i], {i, j}});
        i = j;
    }
    return spans;
}

TokenSequence TokenSequence::gather(const std::vector<std::size_t>& positions) const {
    TokenSequence out;
    const std::size_t d = width();
    out.embeddings = Tensor({positions.size(), d});
    out.origin.reserve(positions.size());
    out.modality.reserve(positions.size());
    for (std::size_t n = 0; n < positions.size(); ++n) {
        const std::size_t p = positions[n];
        if (p >= length()) {
            throw ArgumentError("TokenSequence::gather: position " + std::to_string(p) +
                                " outside sequence of length " + std::to_string(length()));
        }
        std::copy_n(embeddings.data() + p * d, d, out.embeddings.data() + n * d);
        out.origin.push_back(origin[p]);
        out.modality.push_back(modality[p]);
    }
    return out;
}

void TokenSequence::append(const TokenSequence& tail) {
    if (tail.length() == 0) return;
    if (length() > 0 && tail.width() != width()) {
        throw ShapeError("TokenSequence::append: width mismatch (" + std::to_string(width()) +
                         " vs " + std::to_string(tail.width()) + ")");
    }
    std::vector<float> data = embeddings.values();
    data.insert(data.end(), tail.embeddings.values().begin(), tail.embeddings.values().end());
    embeddings = Tensor({length() + tail.length(), tail.width()}, std::move(data));
    origin.insert(origin.end(), tail.origin.begin(), tail.origin.end());
    modality.insert(modality.end(), tail.modality.begin(), tail.modality.end());
}

void TokenSequence::validate() const {
    if (embeddings.rank() != 2 || embeddings.dim(0) != modality.size() ||
        origin.size() != modality.size()) {
        throw ShapeError("TokenSequence: embeddings " + shape_to_string(embeddings.shape()) +
                         " inconsistent with " + std::to_string(modality.size()) + " tokens");
    }
    for (std::size_t i = 1; i < modality.size(); ++i) {
        if (modality_order(modality[i]) < modality_order(modality[i - 1])) {
            throw ArgumentError("TokenSequence: modalities out of order at position " +
                                std::to_string(i));
        }
    }
    std::unordered_set<std::size_t> seen;
    Modality current = Modality::System;
    for (std::size_t i = 0; i < modality.size(); ++i) {
        if (i == 0 || modality[i] != current) {
            seen.clear();
            current = modality[i];
        }
        if (!seen.insert(origin[i]).second) {
            throw ArgumentError("TokenSequence: duplicate origin " + std::to_string(origin[i]) +
                                " within " + modality_name(current) + " block");
        }
    }
}

TokenSequence make_sequence(Tensor embeddings, Modality m) {
    if (embeddings.rank() != 2) {
        throw ShapeError("make_sequence: expected [L, d] embeddings, got " +
                         shape_to_string(embeddings.shape()));
    }
    TokenSequence seq;
    const std::size_t len = embeddings.dim(0);
    seq.embeddings = std::move(embeddings);
    seq.origin.resize(len);
    for (std::size_t i = 0; i < len; ++i) seq.origin[i] = i;
    seq.modality.assign(len, m);
    return seq;
}

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Star: return "star";
        case Strategy::FastV: return "fastv";
        case Strategy::FasterVLM: return "fastervlm";
        case Strategy::Random: return "random";
        case Strategy::None: return "none";
    }
    return "?";
}

Strategy strategy_from_name(const std::string& name) {
    if (name == "star") return Strategy::Star;
    if (name == "fastv") return Strategy::FastV;
    if (name == "fastervlm") return Strategy::FasterVLM;
    if (name == "random") return Strategy::Random;
    if (name == "none") return Strategy::None;
    throw ArgumentError("unknown strategy '" + name + "'");
}

ResolvedSchedule resolve_schedule(const PruneSchedule& schedule, std::size_t original_count) {
    if (original_count == 0) {
        throw ArgumentError("resolve_schedule: no visual tokens");
    }
    const double r = schedule.stage1_ratio;
    const double p = schedule.stage2_ratio;
    if (r < 0.0 || r >= 1.0 || p < 0.0 || p >= 1.0) {
        throw ConstraintError("resolve_schedule: ratios must lie in [0, 1), got R=" +
                              std::to_string(r) + ", P=" + std::to_string(p));
    }

    ResolvedSchedule out;
    out.strategy = schedule.strategy;
    out.original_count = original_count;

    auto budget_from_target_or_ratio = [&](double ratio) {
        std::size_t keep = schedule.target_remaining
                               ? *schedule.target_remaining
                               : original_count -
                                     static_cast<std::size_t>(std::floor(
                                         ratio * static_cast<double>(original_count)));
        if (keep > original_count) {
            throw ConstraintError("resolve_schedule: infeasible target_remaining " +
                                  std::to_string(keep) + " exceeds token count " +
                                  std::to_string(original_count));
        }
        return std::max<std::size_t>(1, keep);
    };

    switch (schedule.strategy) {
        case Strategy::None:
            out.stage1_keep = out.final_keep = original_count;
            out.pivot_layer = 0;
            return out;
        case Strategy::FasterVLM:
        case Strategy::Random:
            out.stage1_keep = out.final_keep = budget_from_target_or_ratio(p);
            out.pivot_layer = 0;
            return out;
        case Strategy::FastV:
            out.stage1_keep = original_count;
            out.final_keep = budget_from_target_or_ratio(p);
            out.stage2_ratio = 1.0 - static_cast<double>(out.final_keep) /
                                         static_cast<double>(original_count);
            out.pivot_layer = 2;
            return out;
        case Strategy::Star:
            break;
    }

    if (schedule.pivot_layer < 1) {
        throw ConstraintError("resolve_schedule: pivot layer K must be >= 1");
    }
    out.stage1_ratio = r;
    out.pivot_layer = schedule.pivot_layer;
    out.stage1_keep = std::max<std::size_t>(1, keep_budget(original_count, r));

    if (schedule.target_remaining) {
        const std::size_t target = *schedule.target_remaining;
        if (target > out.stage1_keep) {
            throw ConstraintError("resolve_schedule: infeasible target_remaining " +
                                  std::to_string(target) + " exceeds stage-1 survivors " +
                                  std::to_string(out.stage1_keep));
        }
        out.final_keep = std::max<std::size_t>(1, target);
        out.stage2_ratio = 1.0 - static_cast<double>(out.final_keep) /
                                     static_cast<double>(out.stage1_keep);
    } else {
        const std::size_t drop = static_cast<std::size_t>(
            std::floor(p * static_cast<double>(out.stage1_keep)));
        out.final_keep = std::max<std::size_t>(1, out.stage1_keep - drop);
        out.stage2_ratio = p;
    }

    const bool stage1_active = out.stage1_keep < original_count;
    const bool stage2_active = out.final_keep < out.stage1_keep;
    if (stage1_active && stage2_active && !(out.stage1_ratio < out.stage2_ratio)) {
        throw ConstraintError(
            "resolve_schedule: invalid star schedule (R=" + std::to_string(out.stage1_ratio) +
            ", P=" + std::to_string(out.stage2_ratio) + "): we enforce R < P");
    }
    return out;
}

std::pair<TokenSequence, StageTrace> stage1_prune(const TokenSequence& visual,
                                                  const Tensor& encoder_attention, double ratio,
                                                  std::vector<std::string>* warnings) {
    visual.validate();
    for (Modality m : visual.modality) {
        if (m != Modality::Visual) {
            throw ArgumentError("stage1_prune: sequence must contain visual tokens only");
        }
    }
    const std::size_t lv = visual.length();
    if (encoder_attention.rank() != 2 || encoder_attention.dim(0) != lv ||
        encoder_attention.dim(1) != lv) {
        throw ShapeError("stage1_prune: attention shape " +
                         shape_to_string(encoder_attention.shape()) + " does not match " +
                         std::to_string(lv) + " visual tokens");
    }
    const ImportanceVector scores = visual_self_attn_scores(encoder_attention);
    const float tau = dynamic_threshold(scores, ratio);
    std::size_t count = keep_budget(lv, ratio);
    if (count == 0) {
        count = 1;
        if (warnings) {
            warnings->push_back("stage1: keep budget clamped to 1 (ratio " +
                                std::to_string(ratio) + " would empty the visual block)");
        }
    }
    KeepSet keep = select_keep(scores, count);
    keep.tau = tau;
    return {visual.gather(keep.indices), make_stage_trace(visual, scores, keep, tau)};
}

std::pair<TokenSequence, StageTrace> stage1_prune(const TokenSequence& visual,
                                                  const Tensor& encoder_attention, double ratio) {
    return stage1_prune(visual, encoder_attention, ratio, nullptr);
}

TokenSequence project_and_concat(const TokenSequence& visual, const Tensor& projector,
                                 const TokenSequence& query) {
    if (projector.rank() != 2 || projector.dim(0) != visual.width()) {
        throw ShapeError("project_and_concat: projector " + shape_to_string(projector.shape()) +
                         " does not accept visual width " + std::to_string(visual.width()));
    }
    if (query.length() > 0 && query.width() != projector.dim(1)) {
        throw ShapeError("project_and_concat: query width " + std::to_string(query.width()) +
                         " does not match projector output " + std::to_string(projector.dim(1)));
    }
    TokenSequence out;
    out.embeddings = matmul(visual.embeddings, projector);
    out.origin = visual.origin;
    out.modality = visual.modality;
    out.append(query);
    out.validate();
    return out;
}

Stage2Selection stage2_select(const TokenSequence& seq, const AttentionMap& decoder_map,
                              std::size_t keep_count, std::vector<std::string>* warnings) {
    seq.validate();
    const IndexRange visual = seq.modality_range(Modality::Visual);
    if (visual.size() == 0) {
        throw ArgumentError("stage2_select: sequence has no visual tokens");
    }
    const IndexRange query = seq.modality_range(Modality::Query);
    const IndexRange response = seq.modality_range(Modality::Response);
    IndexRange text{query.begin, query.end};
    if (text.size() == 0) text = response;
    else if (response.size() > 0) text.end = response.end;
    if (text.size() == 0) {
        throw ArgumentError("stage2_select: no query or response tokens to score against");
    }
    if (decoder_map.query_len() != seq.length()) {
        throw ShapeError("stage2_select: attention map covers " +
                         std::to_string(decoder_map.query_len()) + " positions, sequence has " +
                         std::to_string(seq.length()));
    }
    if (keep_count > visual.size()) {
        throw ArgumentError("stage2_select: keep count " + std::to_string(keep_count) +
                            " exceeds visual block of " + std::to_string(visual.size()));
    }
    if (keep_count == 0) {
        keep_count = 1;
        if (warnings) warnings->push_back("stage2: keep count clamped to 1");
    }

    const Tensor block = extract_cross_modal(decoder_map, visual, text);
    const ImportanceVector scores = cross_modal_scores(block);
    const KeepSet keep = select_keep(scores, keep_count);

    Stage2Selection sel;
    for (std::size_t i = 0; i < visual.begin; ++i) sel.keep_positions.push_back(i);
    for (std::size_t i : keep.indices) sel.keep_positions.push_back(visual.begin + i);
    for (std::size_t i = visual.end; i < seq.length(); ++i) sel.keep_positions.push_back(i);

    const TokenSequence visual_only = seq.gather([&] {
        std::vector<std::size_t> v(visual.size());
        for (std::size_t i = 0; i < visual.size(); ++i) v[i] = visual.begin + i;
        return v;
    }());
    sel.trace = make_stage_trace(visual_only, scores, keep, effective_cutoff(scores, keep));
    return sel;
}

std::pair<TokenSequence, StageTrace> stage2_prune_to_count(const TokenSequence& seq,
                                                           const AttentionMap& decoder_map,
                                                           std::size_t keep_count,
                                                           std::vector<std::string>* warnings) {
    Stage2Selection sel = stage2_select(seq, decoder_map, keep_count, warnings);
    return {seq.gather(sel.keep_positions), std::move(sel.trace)};
}

std::pair<TokenSequence, StageTrace> stage2_prune(const TokenSequence& seq,
                                                  const AttentionMap& decoder_map, double ratio) {
    if (ratio < 0.0 || ratio >= 1.0) {
        throw ArgumentError("stage2_prune: ratio must lie in [0, 1), got " + std::to_string(ratio));
    }
    const std::size_t lv = seq.modality_range(Modality::Visual).size();
    if (lv == 0) throw ArgumentError("stage2_prune: sequence has no visual tokens");
    // floor(ratio * lv) <= lv - 1 for ratio < 1, so at least one token stays.
    const std::size_t drop =
        static_cast<std::size_t>(std::floor(ratio * static_cast<double>(lv)));
    return stage2_prune_to_count(seq, decoder_map, lv - drop, nullptr);
}

KeepSet random_keep(std::size_t token_count, std::size_t keep_count, std::uint64_t seed) {
    if (keep_count > token_count) {
        throw ArgumentError("random_keep: keep count " + std::to_string(keep_count) +
                            " exceeds token count " + std::to_string(token_count));
    }
    std::vector<std::size_t> pool(token_count);
    for (std::size_t i = 0; i < token_count; ++i) pool[i] = i;
    Prng prng(seed);
    for (std::size_t i = 0; i < keep_count; ++i) {
        const std::size_t j = i + prng.next_below(token_count - i);
        std::swap(pool[i], pool[j]);
    }
    KeepSet keep;
    keep.indices.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep_count));
    std::sort(keep.indices.begin(), keep.indices.end());
    return keep;
}

void note_zero_target(const PruneSchedule& schedule, std::vector<std::string>& warnings) {
    if (schedule.target_remaining && *schedule.target_remaining == 0) {
        warnings.push_back("target_remaining 0 clamped to 1 visual token");
    }
}

PruneRun run_star(const PruneContext& ctx, const PruneSchedule& schedule) {
    if (schedule.strategy != Strategy::Star) {
        throw ArgumentError("run_star: schedule strategy is not star");
    }
    PruneRun run;
    run.resolved = resolve_schedule(schedule, ctx.visual.length());
    note_zero_target(schedule, run.trace.warnings);

    auto [survivors, trace1] =
        stage1_prune(ctx.visual, ctx.encoder_patch_attention, schedule.stage1_ratio,
                     &run.trace.warnings);
    run.trace.stage1 = std::move(trace1);

    TokenSequence seq = project_and_concat(survivors, ctx.projector, ctx.query);

    if (run.resolved.final_keep < run.resolved.stage1_keep) {
        const AttentionMap map = ctx.decoder_attention_at(seq, run.resolved.pivot_layer);
        auto [pruned, trace2] =
            stage2_prune_to_count(seq, map, run.resolved.final_keep, &run.trace.warnings);
        run.trace.stage2 = std::move(trace2);
        run.sequence = std::move(pruned);
    } else {
        run.trace.stage2 = passthrough_trace(visual_origins(seq));
        run.sequence = std::move(seq);
    }
    run.trace.final_count = run.trace.stage2.kept.size();
    return run;
}

PruneRun run_baseline(const PruneContext& ctx, const PruneSchedule& schedule) {
    if (schedule.strategy == Strategy::Star) {
        throw ArgumentError("run_baseline: use run_star for the star strategy");
    }
    PruneRun run;
    run.resolved = resolve_schedule(schedule, ctx.visual.length());
    note_zero_target(schedule, run.trace.warnings);
    const std::size_t budget = run.resolved.final_keep;

    switch (schedule.strategy) {
        case Strategy::None: {
            run.trace.stage1 = passthrough_trace(ctx.visual.origin);
            run.sequence = project_and_concat(ctx.visual, ctx.projector, ctx.query);
            run.trace.stage2 = passthrough_trace(visual_origins(run.sequence));
            break;
        }
        case Strategy::FasterVLM: {
            const ImportanceVector scores =
                cls_attention_scores(ctx.encoder_full_attention, 0);
            if (scores.size() != ctx.visual.length()) {
                throw ShapeError("run_baseline: encoder map and visual block disagree (" +
                                 std::to_string(scores.size()) + " vs " +
                                 std::to_string(ctx.visual.length()) + ")");
            }
            const KeepSet keep = select_keep(scores, budget);
            run.trace.stage1 = make_stage_trace(ctx.visual, scores, keep,
                                                effective_cutoff(scores, keep));
            run.sequence =
                project_and_concat(ctx.visual.gather(keep.indices), ctx.projector, ctx.query);
            run.trace.stage2 = passthrough_trace(visual_origins(run.sequence));
            break;
        }
        case Strategy::Random: {
            const KeepSet keep = random_keep(ctx.visual.length(), budget, schedule.seed);
            run.trace.stage1 = make_stage_trace(ctx.visual, ImportanceVector{}, keep, std::nullopt);
            run.sequence =
                project_and_concat(ctx.visual.gather(keep.indices), ctx.projector, ctx.query);
            run.trace.stage2 = passthrough_trace(visual_origins(run.sequence));
            break;
        }
        case Strategy::FastV: {
            run.trace.stage1 = passthrough_trace(ctx.visual.origin);
            TokenSequence seq = project_and_concat(ctx.visual, ctx.projector, ctx.query);
            const AttentionMap map = ctx.decoder_attention_at(seq, run.resolved.pivot_layer);
            auto [pruned, trace2] =
                stage2_prune_to_count(seq, map, budget, &run.trace.warnings);
            run.trace.stage2 = std::move(trace2);
            run.sequence = std::move(pruned);
            break;
        }
        case Strategy::Star:
            break;  // unreachable
    }
    run.trace.final_count = run.trace.stage2.kept.size();
    return run;
}

PruneRun run_schedule(const PruneContext& ctx, const PruneSchedule& schedule) {
    return schedule.strategy == Strategy::Star ? run_star(ctx, schedule)
                                               : run_baseline(ctx, schedule);
}

namespace {

nlohmann::json stage_to_json(const StageTrace& stage) {
    nlohmann::json j;
    if (!stage.tau) {
        j["tau"] = nullptr;
    } else if (std::isinf(*stage.tau)) {
        j["tau"] = "inf";
    } else {
        j["tau"] = *stage.tau;
    }
    j["kept"] = stage.kept;
    nlohmann::json dropped = nlohmann::json::array();
    for (const auto& [idx, score] : stage.dropped) {
        dropped.push_back({{"idx", idx}, {"score", score}});
    }
    j["dropped"] = std::move(dropped);
    return j;
}

StageTrace stage_from_json(const nlohmann::json& j) {
    StageTrace stage;
    const auto& tau = j.at("tau");
    if (tau.is_number()) {
        stage.tau = tau.get<float>();
    } else if (tau.is_string() && tau.get<std::string>() == "inf") {
        stage.tau = std::numeric_limits<float>::infinity();
    }
    stage.kept = j.at("kept").get<std::vector<std::size_t>>();
    for (const auto& d : j.at("dropped")) {
        stage.dropped.emplace_back(d.at("idx").get<std::size_t>(), d.at("score").get<float>());
    }
    return stage;
}

}  // namespace

std::string PruneTrace::to_json() const {
    nlohmann::json j;
    j["final_count"] = final_count;
    j["stage1"] = stage_to_json(stage1);
    j["stage2"] = stage_to_json(stage2);
    j["warnings"] = warnings;
    return j.dump(2) + "\n";
}

PruneTrace PruneTrace::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("trace: invalid JSON: ") + e.what());
    }
    try {
        PruneTrace trace;
        trace.final_count = j.at("final_count").get<std::size_t>();
        trace.stage1 = stage_from_json(j.at("stage1"));
        trace.stage2 = stage_from_json(j.at("stage2"));
        trace.warnings = j.at("warnings").get<std::vector<std::string>>();
        return trace;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("trace: missing or mistyped field: ") + e.what());
    }
}

}  // namespace star
