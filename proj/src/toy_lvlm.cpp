#include "star/toy_lvlm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace star {

namespace {

constexpr double kRmsEps = 1e-5;

Tensor rmsnorm_rows(const Tensor& x) {
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double v = x.data()[i * n + j];
            ms += v * v;
        }
        const double inv = 1.0 / std::sqrt(ms / static_cast<double>(n) + kRmsEps);
        for (std::size_t j = 0; j < n; ++j) {
            out.data()[i * n + j] = static_cast<float>(x.data()[i * n + j] * inv);
        }
    }
    return out;
}

void add_inplace(Tensor& x, const Tensor& y) {
    for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] += y.data()[i];
}

Tensor silu(Tensor x) {
    for (float& v : x.values()) {
        const double d = v;
        v = static_cast<float>(d / (1.0 + std::exp(-d)));
    }
    return x;
}

float init_scale(std::size_t fan_in) {
    return 1.0f / std::sqrt(static_cast<float>(fan_in));
}

}  // namespace

void ToyConfig::validate() const {
    if (d_enc == 0 || d_dec == 0 || heads == 0 || encoder_layers == 0 || decoder_layers == 0 ||
        patches == 0 || patch_dim == 0 || vocab == 0 || gen_steps == 0) {
        throw ConfigError("ToyConfig: all dimensions must be positive");
    }
    if (d_enc % heads != 0 || d_dec % heads != 0) {
        throw ConfigError("ToyConfig: widths " + std::to_string(d_enc) + "/" +
                          std::to_string(d_dec) + " not divisible by " + std::to_string(heads) +
                          " heads");
    }
    if (scoring_layer > encoder_layers) {
        throw ConfigError("ToyConfig: scoring layer " + std::to_string(scoring_layer) +
                          " exceeds encoder depth " + std::to_string(encoder_layers));
    }
}

std::size_t ToyConfig::resolved_scoring_layer() const {
    if (scoring_layer != 0) return scoring_layer;
    return encoder_layers > 1 ? encoder_layers - 1 : 1;
}

// Weight draw order is fixed and guarded by the golden logits fixture:
// patch embed, [CLS], encoder layers (q,k,v,o,ffn1,ffn2 each), projector,
// vocabulary table, decoder layers (same order), unembedding.
ToyModel::ToyModel(const ToyConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Prng master(cfg_.seed);
    auto draw = [&master](std::vector<std::size_t> shape, float scale) {
        Prng sub = master.fork();
        return random_tensor(shape, sub, scale);
    };
    auto draw_layer = [&](std::size_t d) {
        LayerWeights w;
        const float s = init_scale(d);
        w.wq = draw({d, d}, s);
        w.wk = draw({d, d}, s);
        w.wv = draw({d, d}, s);
        w.wo = draw({d, d}, s);
        w.w1 = draw({d, d}, s);
        w.w2 = draw({d, d}, s);
        return w;
    };

    patch_embed_ = draw({cfg_.patch_dim, cfg_.d_enc}, init_scale(cfg_.patch_dim));
    cls_embed_ = draw({1, cfg_.d_enc}, init_scale(cfg_.d_enc));
    encoder_.reserve(cfg_.encoder_layers);
    for (std::size_t i = 0; i < cfg_.encoder_layers; ++i) encoder_.push_back(draw_layer(cfg_.d_enc));
    projector_ = draw({cfg_.d_enc, cfg_.d_dec}, init_scale(cfg_.d_enc));
    vocab_embed_ = draw({cfg_.vocab, cfg_.d_dec}, init_scale(cfg_.d_dec));
    decoder_.reserve(cfg_.decoder_layers);
    for (std::size_t i = 0; i < cfg_.decoder_layers; ++i) decoder_.push_back(draw_layer(cfg_.d_dec));
    unembed_ = draw({cfg_.d_dec, cfg_.vocab}, init_scale(cfg_.d_dec));
}

Tensor ToyModel::block_forward(Tensor x, const LayerWeights& w, bool causal,
                               AttentionMap* map_out) const {
    const HeadConfig hc{cfg_.heads, x.dim(1) / cfg_.heads};
    SelfAttentionResult attn = self_attention(rmsnorm_rows(x), w.wq, w.wk, w.wv, hc, causal);
    add_inplace(x, matmul(attn.output, w.wo));
    add_inplace(x, matmul(silu(matmul(rmsnorm_rows(x), w.w1)), w.w2));
    if (map_out) *map_out = std::move(attn.map);
    return x;
}

EncodeResult ToyModel::encode_image(const Tensor& patch_values) const {
    if (patch_values.rank() != 2 || patch_values.dim(0) != cfg_.patches ||
        patch_values.dim(1) != cfg_.patch_dim) {
        throw ShapeError("encode_image: patch values " + shape_to_string(patch_values.shape()) +
                         " do not match config [" + std::to_string(cfg_.patches) + "x" +
                         std::to_string(cfg_.patch_dim) + "]");
    }
    const std::size_t lv = cfg_.patches;
    const std::size_t d = cfg_.d_enc;

    Tensor x({1 + lv, d});
    std::copy_n(cls_embed_.data(), d, x.data());
    const Tensor patches = matmul(patch_values, patch_embed_);
    std::copy_n(patches.data(), patches.numel(), x.data() + d);

    EncodeResult res;
    res.layer_maps.resize(cfg_.encoder_layers);
    for (std::size_t layer = 0; layer < cfg_.encoder_layers; ++layer) {
        x = block_forward(std::move(x), encoder_[layer], /*causal=*/false,
                          &res.layer_maps[layer]);
    }

    res.patch_tokens = Tensor({lv, d});
    std::copy_n(x.data() + d, lv * d, res.patch_tokens.data());

    const AttentionMap& scoring = res.layer_maps[cfg_.resolved_scoring_layer() - 1];
    res.full_attention = head_average(scoring);

    // Patch-level stage-1 map: per-head patch block with rows re-normalized
    // (equals softmax of the patch-to-patch logits alone), then head-averaged.
    res.patch_attention = Tensor({lv, lv});
    const std::size_t full = 1 + lv;
    for (std::size_t head = 0; head < cfg_.heads; ++head) {
        const float* slice = scoring.weights.data() + head * full * full;
        for (std::size_t i = 0; i < lv; ++i) {
            double row_sum = 0.0;
            for (std::size_t j = 0; j < lv; ++j) row_sum += slice[(1 + i) * full + 1 + j];
            for (std::size_t j = 0; j < lv; ++j) {
                res.patch_attention.data()[i * lv + j] += static_cast<float>(
                    slice[(1 + i) * full + 1 + j] / (row_sum * cfg_.heads));
            }
        }
    }
    return res;
}

DecodeResult ToyModel::decode(const TokenSequence& seq) const {
    return decode(seq, 0, MidStackHook{});
}

DecodeResult ToyModel::decode(const TokenSequence& seq, std::size_t pivot_layer,
                              const MidStackHook& hook) const {
    seq.validate();
    if (seq.length() == 0) throw ShapeError("decode: empty sequence");
    if (seq.width() != cfg_.d_dec) {
        throw ShapeError("decode: sequence width " + std::to_string(seq.width()) +
                         " does not match decoder width " + std::to_string(cfg_.d_dec));
    }
    if (hook && (pivot_layer < 1 || pivot_layer > cfg_.decoder_layers)) {
        throw ArgumentError("decode: pivot layer " + std::to_string(pivot_layer) +
                            " outside 1.." + std::to_string(cfg_.decoder_layers));
    }

    DecodeResult res;
    res.sequence = seq;  // keeps the (possibly pruned) INPUT embeddings
    res.layer_maps.resize(cfg_.decoder_layers);
    Tensor x = seq.embeddings;

    for (std::size_t layer = 1; layer <= cfg_.decoder_layers; ++layer) {
        AttentionMap& map = res.layer_maps[layer - 1];
        x = block_forward(std::move(x), decoder_[layer - 1], /*causal=*/true, &map);
        map.query_roles = res.sequence.role_spans();
        map.key_roles = map.query_roles;

        if (hook && layer == pivot_layer) {
            const std::vector<std::size_t> keep = hook(map, res.sequence);
            res.sequence = res.sequence.gather(keep);
            // Carry the live activations of the survivors into layer K+1.
            const std::size_t d = cfg_.d_dec;
            Tensor gathered({keep.size(), d});
            for (std::size_t n = 0; n < keep.size(); ++n) {
                std::copy_n(x.data() + keep[n] * d, d, gathered.data() + n * d);
            }
            x = std::move(gathered);
        }
    }

    res.final_hidden = rmsnorm_rows(x);
    res.logits = matmul(res.final_hidden, unembed_);
    return res;
}

TokenSequence ToyModel::embed_query(const std::vector<std::uint32_t>& ids) const {
    Tensor emb({ids.size(), cfg_.d_dec});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= cfg_.vocab) {
            throw ArgumentError("embed_query: token id " + std::to_string(ids[i]) +
                                " outside vocabulary of " + std::to_string(cfg_.vocab));
        }
        std::copy_n(vocab_embed_.data() + ids[i] * cfg_.d_dec, cfg_.d_dec,
                    emb.data() + i * cfg_.d_dec);
    }
    return make_sequence(std::move(emb), Modality::Query);
}

std::uint32_t argmax_id(const Tensor& logits_row) {
    std::uint32_t best = 0;
    float best_v = logits_row.values().at(0);
    for (std::size_t i = 1; i < logits_row.numel(); ++i) {
        if (logits_row.values()[i] > best_v) {
            best_v = logits_row.values()[i];
            best = static_cast<std::uint32_t>(i);
        }
    }
    return best;
}

GenerationResult ToyModel::run_generate(const Tensor& patch_values,
                                        const std::vector<std::uint32_t>& query_ids,
                                        const PruneSchedule& schedule) const {
    if (query_ids.empty()) throw ArgumentError("run_generate: query must not be empty");
    if (schedule.strategy == Strategy::FastV && cfg_.decoder_layers < 2) {
        throw ArgumentError("run_generate: fastv needs at least two decoder layers");
    }

    const EncodeResult enc = encode_image(patch_values);
    const ResolvedSchedule resolved = resolve_schedule(schedule, cfg_.patches);
    if (resolved.pivot_layer > cfg_.decoder_layers) {
        throw ArgumentError("run_generate: pivot layer " + std::to_string(resolved.pivot_layer) +
                            " exceeds decoder depth " + std::to_string(cfg_.decoder_layers));
    }

    GenerationResult gen;
    note_zero_target(schedule, gen.trace.warnings);

    // Pre-decoder selection (stage 1 for star; the whole prune for
    // fastervlm/random; a no-op for fastv/none).
    TokenSequence visual = make_sequence(enc.patch_tokens, Modality::Visual);
    switch (schedule.strategy) {
        case Strategy::Star: {
            auto [survivors, trace1] = stage1_prune(visual, enc.patch_attention,
                                                    schedule.stage1_ratio, &gen.trace.warnings);
            gen.trace.stage1 = std::move(trace1);
            visual = std::move(survivors);
            break;
        }
        case Strategy::FasterVLM: {
            const ImportanceVector scores = cls_attention_scores(enc.full_attention, 0);
            const KeepSet keep = select_keep(scores, resolved.final_keep);
            StageTrace trace;
            trace.kept.reserve(keep.size());
            for (std::size_t i : keep.indices) trace.kept.push_back(visual.origin[i]);
            for (std::size_t i = 0; i < visual.length(); ++i) {
                if (!keep.contains(i)) trace.dropped.emplace_back(visual.origin[i], scores.scores[i]);
            }
            if (!keep.indices.empty()) {
                float lo = scores.scores[keep.indices[0]];
                for (std::size_t i : keep.indices) lo = std::min(lo, scores.scores[i]);
                trace.tau = lo;
            }
            gen.trace.stage1 = std::move(trace);
            visual = visual.gather(keep.indices);
            break;
        }
        case Strategy::Random: {
            const KeepSet keep = random_keep(visual.length(), resolved.final_keep, schedule.seed);
            StageTrace trace;
            for (std::size_t i : keep.indices) trace.kept.push_back(visual.origin[i]);
            for (std::size_t i = 0; i < visual.length(); ++i) {
                if (!keep.contains(i)) trace.dropped.emplace_back(visual.origin[i], 0.0f);
            }
            gen.trace.stage1 = std::move(trace);
            visual = visual.gather(keep.indices);
            break;
        }
        case Strategy::FastV:
        case Strategy::None: {
            gen.trace.stage1.kept = visual.origin;
            break;
        }
    }

    TokenSequence seq = project_and_concat(visual, projector_, embed_query(query_ids));

    // Prefill, with the stage-2 prune applied mid-stack when the schedule
    // calls for one.
    const bool stage2_active = resolved.final_keep < resolved.stage1_keep &&
                               (schedule.strategy == Strategy::Star ||
                                schedule.strategy == Strategy::FastV);
    DecodeResult pass;
    if (stage2_active) {
        MidStackHook hook = [&](const AttentionMap& map, const TokenSequence& current) {
            Stage2Selection sel =
                stage2_select(current, map, resolved.final_keep, &gen.trace.warnings);
            gen.trace.stage2 = std::move(sel.trace);
            return sel.keep_positions;
        };
        pass = decode(seq, resolved.pivot_layer, hook);
    } else {
        pass = decode(seq);
        StageTrace trace;
        const IndexRange v = pass.sequence.modality_range(Modality::Visual);
        for (std::size_t i = v.begin; i < v.end; ++i) trace.kept.push_back(pass.sequence.origin[i]);
        gen.trace.stage2 = std::move(trace);
    }
    gen.trace.final_count = gen.trace.stage2.kept.size();

    const std::size_t vocab = cfg_.vocab;
    auto last_row = [vocab](const Tensor& m) {
        Tensor row({vocab});
        std::copy_n(m.data() + (m.dim(0) - 1) * vocab, vocab, row.data());
        return row;
    };
    gen.first_step_logits = last_row(pass.logits);
    gen.prefill_sequence = pass.sequence;

    TokenSequence current = std::move(pass.sequence);
    Tensor step_logits = gen.first_step_logits;
    Tensor last_hidden({cfg_.d_dec});
    std::copy_n(pass.final_hidden.data() + (pass.final_hidden.dim(0) - 1) * cfg_.d_dec,
                cfg_.d_dec, last_hidden.data());

    for (std::size_t step = 0; step < cfg_.gen_steps; ++step) {
        const std::uint32_t next = argmax_id(step_logits);
        gen.ids.push_back(next);
        if (step + 1 == cfg_.gen_steps) break;

        TokenSequence tail = embed_query({next});
        tail.modality.assign(1, Modality::Response);
        tail.origin.assign(1, step);
        current.append(tail);

        const DecodeResult next_pass = decode(current);
        step_logits = last_row(next_pass.logits);
        std::copy_n(next_pass.final_hidden.data() +
                        (next_pass.final_hidden.dim(0) - 1) * cfg_.d_dec,
                    cfg_.d_dec, last_hidden.data());
    }
    gen.final_hidden = std::move(last_hidden);
    return gen;
}

RunResult ToyModel::run_with_schedule(const Tensor& patch_values,
                                      const std::vector<std::uint32_t>& query_ids,
                                      const PruneSchedule& schedule) const {
    PruneSchedule none;
    none.strategy = Strategy::None;
    const GenerationResult reference = run_generate(patch_values, query_ids, none);
    GenerationResult pruned = run_generate(patch_values, query_ids, schedule);

    RunResult out;
    out.fidelity = fidelity(reference, pruned);
    out.ids = std::move(pruned.ids);
    out.trace = std::move(pruned.trace);
    return out;
}

Tensor random_image(const ToyConfig& cfg, std::uint64_t image_seed) {
    Prng prng(image_seed);
    return random_tensor({cfg.patches, cfg.patch_dim}, prng, 1.0f);
}

std::vector<std::uint32_t> random_query_ids(const ToyConfig& cfg, std::uint64_t query_seed,
                                            std::size_t count) {
    Prng prng(query_seed);
    std::vector<std::uint32_t> ids(count);
    for (auto& id : ids) id = static_cast<std::uint32_t>(prng.next_below(cfg.vocab));
    return ids;
}

double kl_divergence_nats(const Tensor& full_logits, const Tensor& pruned_logits) {
    if (full_logits.numel() != pruned_logits.numel()) {
        throw ShapeError("kl_divergence: vocabulary sizes differ (" +
                         std::to_string(full_logits.numel()) + " vs " +
                         std::to_string(pruned_logits.numel()) + ")");
    }
    const std::size_t n = full_logits.numel();
    auto log_softmax = [n](const Tensor& t) {
        std::vector<double> out(n);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(t.values()[i]));
        double denom = 0.0;
        for (std::size_t i = 0; i < n; ++i) denom += std::exp(t.values()[i] - mx);
        const double log_denom = std::log(denom);
        for (std::size_t i = 0; i < n; ++i) out[i] = t.values()[i] - mx - log_denom;
        return out;
    };
    const std::vector<double> lp = log_softmax(full_logits);
    const std::vector<double> lq = log_softmax(pruned_logits);
    double kl = 0.0;
    for (std::size_t i = 0; i < n; ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
    return std::max(kl, 0.0);
}

FidelityMetrics fidelity(const GenerationResult& full, const GenerationResult& pruned) {
    if (full.ids.size() != pruned.ids.size()) {
        throw ArgumentError("fidelity: generated step counts differ");
    }
    FidelityMetrics m;
    m.kl_divergence = kl_divergence_nats(full.first_step_logits, pruned.first_step_logits);

    std::size_t agree = 0;
    for (std::size_t i = 0; i < full.ids.size(); ++i) {
        if (full.ids[i] == pruned.ids[i]) ++agree;
    }
    m.top1_agreement = full.ids.empty()
                           ? 1.0
                           : static_cast<double>(agree) / static_cast<double>(full.ids.size());

    if (full.final_hidden.values() == pruned.final_hidden.values()) {
        m.cosine = 1.0;
    } else {
        if (full.final_hidden.numel() != pruned.final_hidden.numel()) {
            throw ShapeError("fidelity: hidden widths differ");
        }
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t i = 0; i < full.final_hidden.numel(); ++i) {
            const double a = full.final_hidden.values()[i];
            const double b = pruned.final_hidden.values()[i];
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        m.cosine = dot / std::sqrt(na * nb);
    }
    return m;
}

}  // namespace star
