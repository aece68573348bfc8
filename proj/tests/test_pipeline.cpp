#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "star/pipeline.hpp"

using namespace star;

namespace {

Tensor row_stochastic_map(Prng& prng, std::size_t n) {
    Tensor a({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += (a.at(i, j) = prng.next_unit() + 0.02f);
        for (std::size_t j = 0; j < n; ++j) a.at(i, j) = static_cast<float>(a.at(i, j) / sum);
    }
    return a;
}

Tensor uniform_map(std::size_t n) {
    Tensor a({n, n});
    for (float& v : a.values()) v = 1.0f / static_cast<float>(n);
    return a;
}

Tensor identity_projector(std::size_t d) {
    Tensor g({d, d});
    for (std::size_t i = 0; i < d; ++i) g.at(i, i) = 1.0f;
    return g;
}

// Self-contained decoder stand-in: one causal attention layer with weights
// seeded off the layer index, enough to produce honest maps of the right
// shape for a given sequence.
AttentionMap synthetic_decoder_map(const TokenSequence& seq, std::size_t layer) {
    const std::size_t d = seq.width();
    Prng prng(1000 + layer);
    const float s = 1.0f / std::sqrt(static_cast<float>(d));
    const HeadConfig cfg{2, d / 2};
    auto res = self_attention(seq.embeddings, random_tensor({d, d}, prng, s),
                              random_tensor({d, d}, prng, s), random_tensor({d, d}, prng, s),
                              cfg, true);
    res.map.query_roles = seq.role_spans();
    res.map.key_roles = res.map.query_roles;
    return res.map;
}

PruneContext make_context(std::uint64_t seed, std::size_t lv, std::size_t lq, std::size_t d) {
    Prng prng(seed);
    PruneContext ctx;
    ctx.visual = make_sequence(random_tensor({lv, d}, prng, 1.0f), Modality::Visual);
    ctx.query = make_sequence(random_tensor({lq, d}, prng, 1.0f), Modality::Query);
    ctx.projector = identity_projector(d);
    ctx.encoder_patch_attention = row_stochastic_map(prng, lv);
    ctx.encoder_full_attention = row_stochastic_map(prng, lv + 1);
    ctx.decoder_attention_at = synthetic_decoder_map;
    return ctx;
}

}  // namespace

TEST_CASE("stage 1 with a zero ratio keeps all 576 tokens") {
    Prng prng(1);
    TokenSequence visual = make_sequence(random_tensor({576, 8}, prng, 1.0f), Modality::Visual);
    const Tensor attn = uniform_map(576);
    auto [kept, trace] = stage1_prune(visual, attn, 0.0);
    CHECK(kept.length() == 576);
    CHECK(trace.dropped.empty());
    CHECK(trace.kept.size() == 576);
}

TEST_CASE("stage 1 keeps floor((1-R) * 576) = 518 tokens at R = 0.1") {
    Prng prng(2);
    TokenSequence visual = make_sequence(random_tensor({576, 8}, prng, 1.0f), Modality::Visual);
    auto [kept, trace] = stage1_prune(visual, row_stochastic_map(prng, 576), 0.1);
    CHECK(kept.length() == 518);
    CHECK(trace.dropped.size() == 58);
    CHECK(trace.tau.has_value());
}

TEST_CASE("stage 1 ties resolve toward low indices") {
    Prng prng(3);
    TokenSequence visual = make_sequence(random_tensor({4, 8}, prng, 1.0f), Modality::Visual);
    auto [kept, trace] = stage1_prune(visual, uniform_map(4), 0.5);
    CHECK(trace.kept == std::vector<std::size_t>{0, 1});
    CHECK(std::isinf(*trace.tau));
}

TEST_CASE("stage 1 rejects a mismatched attention map") {
    Prng prng(4);
    TokenSequence visual = make_sequence(random_tensor({4, 8}, prng, 1.0f), Modality::Visual);
    CHECK_THROWS_AS(stage1_prune(visual, uniform_map(5), 0.1), ShapeError);
}

TEST_CASE("projection and concatenation preserve content and order") {
    Prng prng(5);
    const std::size_t d = 8;
    TokenSequence visual = make_sequence(random_tensor({2, d}, prng, 1.0f), Modality::Visual);
    TokenSequence query = make_sequence(random_tensor({3, d}, prng, 1.0f), Modality::Query);

    SUBCASE("identity projector with an empty query copies the visual block") {
        TokenSequence empty_query;
        empty_query.embeddings = Tensor({0, d});
        const TokenSequence out = project_and_concat(visual, identity_projector(d), empty_query);
        CHECK(out.embeddings.values() == visual.embeddings.values());
    }
    SUBCASE("modality pattern is VVQQQ") {
        const TokenSequence out = project_and_concat(visual, identity_projector(d), query);
        CHECK(out.length() == 5);
        const std::vector<Modality> want{Modality::Visual, Modality::Visual, Modality::Query,
                                         Modality::Query, Modality::Query};
        CHECK(out.modality == want);
        CHECK(out.origin == std::vector<std::size_t>{0, 1, 0, 1, 2});
    }
    SUBCASE("zero projector blanks the visual block only") {
        const TokenSequence out = project_and_concat(visual, Tensor({d, d}), query);
        for (std::size_t i = 0; i < 2; ++i) {
            for (std::size_t j = 0; j < d; ++j) CHECK(out.embeddings.at(i, j) == 0.0f);
        }
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                CHECK(out.embeddings.at(2 + i, j) == query.embeddings.at(i, j));
            }
        }
    }
    SUBCASE("width mismatch is rejected") {
        CHECK_THROWS_AS(project_and_concat(visual, Tensor({d + 1, d}), query), ShapeError);
    }
}

TEST_CASE("stage 2 with a zero ratio is the identity") {
    PruneContext ctx = make_context(10, 6, 2, 8);
    TokenSequence seq = project_and_concat(ctx.visual, ctx.projector, ctx.query);
    auto [out, trace] = stage2_prune(seq, synthetic_decoder_map(seq, 1), 0.0);
    CHECK(out.length() == seq.length());
    CHECK(trace.dropped.empty());
}

TEST_CASE("stage 2 without text tokens is rejected") {
    PruneContext ctx = make_context(11, 6, 2, 8);
    TokenSequence empty_query;
    empty_query.embeddings = Tensor({0, std::size_t(8)});
    TokenSequence seq = project_and_concat(ctx.visual, ctx.projector, empty_query);
    CHECK_THROWS_AS(stage2_prune(seq, synthetic_decoder_map(seq, 1), 0.5), ArgumentError);
}

TEST_CASE("stage 2 clamps a zero keep count to one token") {
    PruneContext ctx = make_context(12, 6, 2, 8);
    TokenSequence seq = project_and_concat(ctx.visual, ctx.projector, ctx.query);
    std::vector<std::string> warnings;
    auto [out, trace] =
        stage2_prune_to_count(seq, synthetic_decoder_map(seq, 1), 0, &warnings);
    CHECK(trace.kept.size() == 1);
    CHECK(out.modality_range(Modality::Visual).size() == 1);
    CHECK(warnings.size() == 1);
}

TEST_CASE("schedule resolution matches the published remaining-token budgets") {
    PruneSchedule s;
    s.stage1_ratio = 0.1;
    s.pivot_layer = 14;

    SUBCASE("target 29 of 576") {
        s.target_remaining = 29;
        const ResolvedSchedule res = resolve_schedule(s, 576);
        CHECK(res.stage1_keep == 518);
        CHECK(res.final_keep == 29);
        CHECK(res.stage2_ratio == doctest::Approx(0.944015).epsilon(1e-5));
    }
    SUBCASE("target 288 of 576") {
        s.target_remaining = 288;
        const ResolvedSchedule res = resolve_schedule(s, 576);
        CHECK(res.stage1_keep == 518);
        CHECK(res.final_keep == 288);
        CHECK(res.stage2_ratio == doctest::Approx(0.444015).epsilon(1e-5));
    }
    SUBCASE("R >= P is rejected with the constraint message") {
        s.target_remaining.reset();
        s.stage1_ratio = 0.5;
        s.stage2_ratio = 0.3;
        CHECK_THROWS_WITH_AS(resolve_schedule(s, 576), doctest::Contains("we enforce R < P"),
                             ConstraintError);
    }
    SUBCASE("target above the stage-1 survivors is infeasible") {
        s.target_remaining = 519;
        CHECK_THROWS_WITH_AS(resolve_schedule(s, 576), doctest::Contains("infeasible"),
                             ConstraintError);
    }
    SUBCASE("target equal to the stage-1 survivors disables stage 2") {
        s.target_remaining = 518;
        const ResolvedSchedule res = resolve_schedule(s, 576);
        CHECK(res.final_keep == 518);
        CHECK(res.stage2_ratio == 0.0);
    }
}

TEST_CASE("stage 2 drop count follows the resolved schedule") {
    // 518 survivors with target 29 must drop 489 at the pivot.
    PruneSchedule s;
    s.stage1_ratio = 0.1;
    s.pivot_layer = 2;
    s.target_remaining = 29;
    const ResolvedSchedule res = resolve_schedule(s, 576);
    CHECK(res.stage1_keep - res.final_keep == 489);
}

TEST_CASE("baseline none drops nothing") {
    PruneContext ctx = make_context(20, 8, 3, 8);
    PruneSchedule s;
    s.strategy = Strategy::None;
    const PruneRun run = run_baseline(ctx, s);
    CHECK(run.trace.final_count == 8);
    CHECK(run.trace.stage1.dropped.empty());
    CHECK(run.trace.stage2.dropped.empty());
    CHECK(run.sequence.length() == 11);
}

TEST_CASE("random baseline is reproducible and seed-sensitive") {
    PruneContext ctx = make_context(21, 32, 3, 8);
    PruneSchedule s;
    s.strategy = Strategy::Random;
    s.target_remaining = 10;
    s.seed = 7;
    const PruneRun a = run_baseline(ctx, s);
    const PruneRun b = run_baseline(ctx, s);
    CHECK(a.trace.stage1.kept == b.trace.stage1.kept);
    s.seed = 8;
    const PruneRun c = run_baseline(ctx, s);
    CHECK(a.trace.stage1.kept != c.trace.stage1.kept);
}

TEST_CASE("fastervlm meets the budget exactly") {
    PruneContext ctx = make_context(22, 576, 4, 8);
    PruneSchedule s;
    s.strategy = Strategy::FasterVLM;
    s.target_remaining = 288;
    const PruneRun run = run_baseline(ctx, s);
    CHECK(run.trace.final_count == 288);
    CHECK(run.sequence.modality_range(Modality::Visual).size() == 288);
    // Keep set equals the top-k of the [CLS] scores.
    const ImportanceVector scores = cls_attention_scores(ctx.encoder_full_attention, 0);
    const KeepSet expect = select_keep(scores, 288);
    CHECK(run.trace.stage1.kept == expect.indices);
}

TEST_CASE("unknown-strategy dispatch is covered by construction") {
    PruneContext ctx = make_context(23, 8, 2, 8);
    PruneSchedule s;
    s.strategy = Strategy::Star;
    CHECK_THROWS_AS(run_baseline(ctx, s), ArgumentError);
    s.strategy = Strategy::FastV;
    CHECK_THROWS_AS(run_star(ctx, s), ArgumentError);
    CHECK_THROWS_AS(strategy_from_name("quantum"), ArgumentError);
}

TEST_CASE("star with P = 0 equals stage-1-only pruning") {
    PruneContext ctx = make_context(24, 24, 3, 8);
    PruneSchedule s;
    s.stage1_ratio = 0.25;
    s.pivot_layer = 1;
    const PruneRun run = run_star(ctx, s);

    auto [kept, trace] = stage1_prune(ctx.visual, ctx.encoder_patch_attention, 0.25);
    CHECK(run.trace.stage1.kept == trace.kept);
    CHECK(run.trace.stage2.kept == trace.kept);
    CHECK(run.trace.final_count == kept.length());
}

TEST_CASE("star with R = 0 at pivot 2 reproduces the fastv keep set") {
    PruneContext ctx = make_context(25, 40, 5, 8);

    PruneSchedule star;
    star.strategy = Strategy::Star;
    star.stage1_ratio = 0.0;
    star.pivot_layer = 2;
    star.target_remaining = 12;

    PruneSchedule fastv;
    fastv.strategy = Strategy::FastV;
    fastv.target_remaining = 12;

    const PruneRun a = run_star(ctx, star);
    const PruneRun b = run_baseline(ctx, fastv);
    CHECK(a.trace.stage2.kept == b.trace.stage2.kept);
    CHECK(a.trace.final_count == 12);
}

TEST_CASE("pipeline invariants hold over 100 randomized runs") {
    Prng prng(31415);
    for (int round = 0; round < 100; ++round) {
        const std::size_t lv = 4 + prng.next_below(60);
        const std::size_t lq = 1 + prng.next_below(6);
        PruneContext ctx = make_context(prng.next_u64(), lv, lq, 8);

        PruneSchedule s;
        const std::size_t which = prng.next_below(5);
        s.strategy = static_cast<Strategy>(which);
        s.seed = prng.next_u64();
        std::size_t target = 0;
        if (s.strategy == Strategy::Star) {
            s.stage1_ratio = 0.05 + 0.2 * prng.next_unit();
            s.pivot_layer = 1 + prng.next_below(4);
            const std::size_t stage1 = keep_budget(lv, s.stage1_ratio);
            // Valid targets either disable stage 2 or imply P > R.
            const auto max_two_stage = static_cast<std::size_t>(
                std::ceil(static_cast<double>(stage1) * (1.0 - s.stage1_ratio)) - 1);
            if (max_two_stage < 1 || prng.next_below(8) == 0) {
                target = stage1;
            } else {
                target = 1 + prng.next_below(max_two_stage);
            }
            s.target_remaining = target;
        } else if (s.strategy != Strategy::None) {
            s.pivot_layer = 2;
            target = 1 + prng.next_below(lv);
            s.target_remaining = target;
        } else {
            target = lv;
        }

        const PruneRun run = run_schedule(ctx, s);

        // Budget exactness.
        CHECK(run.trace.final_count == target);
        CHECK(run.sequence.modality_range(Modality::Visual).size() == target);

        // Subset chain and order preservation in original indices.
        CHECK(std::is_sorted(run.trace.stage1.kept.begin(), run.trace.stage1.kept.end()));
        CHECK(std::is_sorted(run.trace.stage2.kept.begin(), run.trace.stage2.kept.end()));
        CHECK(std::includes(run.trace.stage1.kept.begin(), run.trace.stage1.kept.end(),
                            run.trace.stage2.kept.begin(), run.trace.stage2.kept.end()));
        for (std::size_t idx : run.trace.stage1.kept) CHECK(idx < lv);

        // Non-visual tokens are never pruned.
        CHECK(run.sequence.modality_range(Modality::Query).size() == lq);

        // Survivors appear in increasing original order inside the sequence.
        const IndexRange v = run.sequence.modality_range(Modality::Visual);
        for (std::size_t i = v.begin + 1; i < v.end; ++i) {
            CHECK(run.sequence.origin[i - 1] < run.sequence.origin[i]);
        }
    }
}

TEST_CASE("trace serialization round-trips through JSON") {
    PruneContext ctx = make_context(30, 16, 2, 8);
    PruneSchedule s;
    s.stage1_ratio = 0.2;
    s.pivot_layer = 1;
    s.target_remaining = 5;
    const PruneRun run = run_star(ctx, s);

    const std::string text = run.trace.to_json();
    const PruneTrace back = PruneTrace::from_json(text);
    CHECK(back.final_count == run.trace.final_count);
    CHECK(back.stage1.kept == run.trace.stage1.kept);
    CHECK(back.stage2.kept == run.trace.stage2.kept);
    CHECK(back.stage1.dropped == run.trace.stage1.dropped);
    CHECK(*back.stage1.tau == *run.trace.stage1.tau);
    CHECK(back.to_json() == text);

    CHECK_THROWS_AS(PruneTrace::from_json("not json"), FormatError);
    CHECK_THROWS_AS(PruneTrace::from_json("{}"), FormatError);
}

TEST_CASE("sequences reject out-of-order modalities and duplicate origins") {
    TokenSequence seq;
    seq.embeddings = Tensor({2, 4});
    seq.origin = {0, 0};
    seq.modality = {Modality::Query, Modality::Visual};
    CHECK_THROWS_AS(seq.validate(), ArgumentError);
    seq.modality = {Modality::Visual, Modality::Visual};
    CHECK_THROWS_AS(seq.validate(), ArgumentError);
    seq.origin = {0, 1};
    CHECK_NOTHROW(seq.validate());
}
