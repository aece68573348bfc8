#include "star/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace star::harness {

namespace {

using nlohmann::json;

json config_to_json(const ToyConfig& cfg) {
    return json{{"d_enc", cfg.d_enc},
                {"d_dec", cfg.d_dec},
                {"heads", cfg.heads},
                {"encoder_layers", cfg.encoder_layers},
                {"decoder_layers", cfg.decoder_layers},
                {"patches", cfg.patches},
                {"patch_dim", cfg.patch_dim},
                {"vocab", cfg.vocab},
                {"gen_steps", cfg.gen_steps},
                {"scoring_layer", cfg.scoring_layer},
                {"seed", cfg.seed}};
}

ToyConfig config_from_json(const json& j) {
    ToyConfig cfg;
    cfg.d_enc = j.at("d_enc").get<std::size_t>();
    cfg.d_dec = j.at("d_dec").get<std::size_t>();
    cfg.heads = j.at("heads").get<std::size_t>();
    cfg.encoder_layers = j.at("encoder_layers").get<std::size_t>();
    cfg.decoder_layers = j.at("decoder_layers").get<std::size_t>();
    cfg.patches = j.at("patches").get<std::size_t>();
    cfg.patch_dim = j.at("patch_dim").get<std::size_t>();
    cfg.vocab = j.at("vocab").get<std::size_t>();
    cfg.gen_steps = j.at("gen_steps").get<std::size_t>();
    cfg.scoring_layer = j.at("scoring_layer").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

json tensor_entry(const std::string& filename, const Tensor& t) {
    return json{{"path", filename}, {"shape", t.shape()}};
}

void write_entry(const std::filesystem::path& dir, const std::string& filename,
                 const Tensor& t) {
    stt_write(t, dir / filename);
}

Tensor read_entry(const std::filesystem::path& dir, const json& entry) {
    const Tensor t = stt_read(dir / entry.at("path").get<std::string>());
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (t.shape() != shape) {
        throw FormatError("fixture " + entry.at("path").get<std::string>() +
                          ": shape " + shape_to_string(t.shape()) +
                          " does not match manifest " + shape_to_string(shape));
    }
    return t;
}

}  // namespace

ToyInputs derive_inputs(const ToyRunSpec& spec, std::uint64_t seed) {
    Prng prng(seed ^ 0x1157A9F00DULL);
    ToyInputs in;
    in.image = random_image(spec.model, prng.next_u64());
    in.query_ids = random_query_ids(spec.model, prng.next_u64(),
                                    std::max<std::size_t>(1, spec.query_tokens));
    return in;
}

FixtureSet generate_fixtures(const ToyRunSpec& spec, std::uint64_t seed) {
    ToyRunSpec local = spec;
    local.model.seed = seed;
    const ToyModel model(local.model);
    const ToyInputs inputs = derive_inputs(local, seed);

    FixtureSet fx;
    fx.config = local.model;
    fx.seed = seed;
    fx.query_tokens = inputs.query_ids.size();

    const EncodeResult enc = model.encode_image(inputs.image);
    fx.encoder_patch_attention = enc.patch_attention;
    fx.encoder_full_attention = enc.full_attention;
    fx.visual_embeddings = enc.patch_tokens;
    fx.projector = model.projector();

    PruneSchedule none;
    none.strategy = Strategy::None;
    const GenerationResult gen = model.run_generate(inputs.image, inputs.query_ids, none);
    fx.response_tokens = gen.ids.size();

    const TokenSequence query = model.embed_query(inputs.query_ids);
    fx.query_embeddings = query.embeddings;
    TokenSequence response = model.embed_query(gen.ids);
    response.modality.assign(gen.ids.size(), Modality::Response);
    fx.response_embeddings = response.embeddings;

    TokenSequence full = project_and_concat(make_sequence(enc.patch_tokens, Modality::Visual),
                                            model.projector(), query);
    full.append(response);

    const DecodeResult dec = model.decode(full);
    fx.decoder_attention.reserve(dec.layer_maps.size());
    for (const AttentionMap& map : dec.layer_maps) fx.decoder_attention.push_back(map.weights);
    fx.logits = dec.logits;
    return fx;
}

void FixtureSet::write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    json files;
    files["encoder_patch_attention"] =
        tensor_entry("encoder_patch_attention.stt", encoder_patch_attention);
    files["encoder_full_attention"] =
        tensor_entry("encoder_full_attention.stt", encoder_full_attention);
    files["visual_embeddings"] = tensor_entry("visual_embeddings.stt", visual_embeddings);
    files["query_embeddings"] = tensor_entry("query_embeddings.stt", query_embeddings);
    files["response_embeddings"] = tensor_entry("response_embeddings.stt", response_embeddings);
    files["projector"] = tensor_entry("projector.stt", projector);
    files["logits"] = tensor_entry("logits.stt", logits);

    json decoder = json::array();
    for (std::size_t i = 0; i < decoder_attention.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "decoder_attention_layer_%02zu.stt", i + 1);
        decoder.push_back(tensor_entry(name, decoder_attention[i]));
    }
    files["decoder_attention"] = std::move(decoder);

    json manifest;
    manifest["config"] = config_to_json(config);
    manifest["seed"] = seed;
    manifest["layout"] = {{"visual", config.patches},
                          {"query", query_tokens},
                          {"response", response_tokens}};
    manifest["files"] = std::move(files);

    write_entry(dir, "encoder_patch_attention.stt", encoder_patch_attention);
    write_entry(dir, "encoder_full_attention.stt", encoder_full_attention);
    write_entry(dir, "visual_embeddings.stt", visual_embeddings);
    write_entry(dir, "query_embeddings.stt", query_embeddings);
    write_entry(dir, "response_embeddings.stt", response_embeddings);
    write_entry(dir, "projector.stt", projector);
    write_entry(dir, "logits.stt", logits);
    for (std::size_t i = 0; i < decoder_attention.size(); ++i) {
        write_entry(dir, manifest["files"]["decoder_attention"][i]["path"].get<std::string>(),
                    decoder_attention[i]);
    }
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

FixtureSet FixtureSet::read(const std::filesystem::path& dir) {
    json manifest;
    try {
        manifest = json::parse(read_text_file(dir / "manifest.json"));
    } catch (const json::parse_error& e) {
        throw FormatError("fixture manifest " + (dir / "manifest.json").string() +
                          ": invalid JSON: " + e.what());
    }
    try {
        FixtureSet fx;
        fx.config = config_from_json(manifest.at("config"));
        fx.seed = manifest.at("seed").get<std::uint64_t>();
        fx.query_tokens = manifest.at("layout").at("query").get<std::size_t>();
        fx.response_tokens = manifest.at("layout").at("response").get<std::size_t>();
        const json& files = manifest.at("files");
        fx.encoder_patch_attention = read_entry(dir, files.at("encoder_patch_attention"));
        fx.encoder_full_attention = read_entry(dir, files.at("encoder_full_attention"));
        fx.visual_embeddings = read_entry(dir, files.at("visual_embeddings"));
        fx.query_embeddings = read_entry(dir, files.at("query_embeddings"));
        fx.response_embeddings = read_entry(dir, files.at("response_embeddings"));
        fx.projector = read_entry(dir, files.at("projector"));
        fx.logits = read_entry(dir, files.at("logits"));
        for (const json& entry : files.at("decoder_attention")) {
            fx.decoder_attention.push_back(read_entry(dir, entry));
        }
        return fx;
    } catch (const json::exception& e) {
        throw FormatError("fixture manifest " + (dir / "manifest.json").string() +
                          ": missing or mistyped field: " + e.what());
    }
}

PruneRun run_offline(const FixtureSet& fixtures, const PruneSchedule& schedule) {
    const std::size_t lv0 = fixtures.config.patches;
    const std::size_t lt = fixtures.query_tokens;

    PruneContext ctx;
    ctx.visual = make_sequence(fixtures.visual_embeddings, Modality::Visual);
    ctx.query = make_sequence(fixtures.query_embeddings, Modality::Query);
    {
        TokenSequence response = make_sequence(fixtures.response_embeddings, Modality::Response);
        ctx.query.append(response);
    }
    ctx.projector = fixtures.projector;
    ctx.encoder_patch_attention = fixtures.encoder_patch_attention;
    ctx.encoder_full_attention = fixtures.encoder_full_attention;

    // The recorded maps cover the full original sequence; a live run sees
    // only the survivors, so sub-sample the map at their original positions.
    ctx.decoder_attention_at = [&fixtures, lv0, lt](const TokenSequence& seq,
                                                    std::size_t layer) -> AttentionMap {
        if (layer < 1 || layer > fixtures.decoder_attention.size()) {
            throw ArgumentError("fixture run: decoder layer " + std::to_string(layer) +
                                " not in the recorded dump of " +
                                std::to_string(fixtures.decoder_attention.size()) + " layers");
        }
        const Tensor& full = fixtures.decoder_attention[layer - 1];
        const std::size_t heads = full.dim(0);
        const std::size_t full_len = full.dim(1);

        std::vector<std::size_t> positions;
        positions.reserve(seq.length());
        for (std::size_t i = 0; i < seq.length(); ++i) {
            std::size_t base = 0;
            switch (seq.modality[i]) {
                case Modality::Visual: base = 0; break;
                case Modality::Query: base = lv0; break;
                case Modality::Response: base = lv0 + lt; break;
                case Modality::System:
                    throw ArgumentError("fixture run: system tokens are not recorded");
            }
            const std::size_t pos = base + seq.origin[i];
            if (pos >= full_len) {
                throw FormatError("fixture run: position " + std::to_string(pos) +
                                  " outside recorded map of length " + std::to_string(full_len));
            }
            positions.push_back(pos);
        }

        AttentionMap map;
        map.weights = Tensor({heads, positions.size(), positions.size()});
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < positions.size(); ++i) {
                for (std::size_t j = 0; j < positions.size(); ++j) {
                    map.weights.at(h, i, j) = full.at(h, positions[i], positions[j]);
                }
            }
        }
        map.query_roles = seq.role_spans();
        map.key_roles = map.query_roles;
        return map;
    };

    return run_schedule(ctx, schedule);
}

ModelDims toy_dims(const ToyRunSpec& spec) {
    ModelDims dims;
    dims.hidden_dim = spec.model.d_dec;
    dims.num_layers = spec.model.decoder_layers;
    dims.visual_tokens = spec.model.patches;
    dims.text_tokens = spec.query_tokens;
    return dims;
}

std::size_t worker_count() {
    if (const char* env = std::getenv("STAR_PRUNE_THREADS")) {
        const long n = std::strtol(env, nullptr, 10);
        if (n >= 1) return static_cast<std::size_t>(n);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? hw : 1;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw FormatError("short write to " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

namespace {

struct CellOutcome {
    SweepRow row;
};

std::string schedule_sort_key(const PruneSchedule& s) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s|%012.6f|%012.6f|%06zu|%020llu", strategy_name(s.strategy),
                  s.stage1_ratio, s.stage2_ratio, s.pivot_layer,
                  static_cast<unsigned long long>(
                      s.target_remaining ? *s.target_remaining + 1 : 0));
    return buf;
}

std::string csv_row(const PruneSchedule& s, const std::string& seed_field,
                    const std::string& status, const SweepRow* data) {
    std::ostringstream os;
    os << strategy_name(s.strategy) << ',' << format_double(s.stage1_ratio) << ','
       << format_double(s.stage2_ratio) << ',' << s.pivot_layer << ',';
    if (s.target_remaining) os << *s.target_remaining;
    os << ',' << seed_field << ',';
    if (data) {
        os << data->final_tokens << ',' << flops_to_string(data->delta_total) << ','
           << format_double(data->relative_reduction) << ','
           << format_double(data->fidelity.top1_agreement) << ','
           << format_double(data->fidelity.kl_divergence) << ','
           << format_double(data->fidelity.cosine);
    } else {
        os << ",,,,,";
    }
    os << ',' << status;
    return os.str();
}

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::string run_sweep_csv(const ToyRunSpec& spec, const std::vector<SweepCell>& cells) {
    // Deterministic order first, then fan the work out.
    std::vector<SweepCell> ordered = cells;
    std::stable_sort(ordered.begin(), ordered.end(), [](const SweepCell& a, const SweepCell& b) {
        const std::string ka = schedule_sort_key(a.schedule), kb = schedule_sort_key(b.schedule);
        if (ka != kb) return ka < kb;
        return a.seed < b.seed;
    });

    // Phase 1: one reference run per distinct seed.
    std::vector<std::uint64_t> seeds;
    for (const SweepCell& cell : ordered) seeds.push_back(cell.seed);
    std::sort(seeds.begin(), seeds.end());
    seeds.erase(std::unique(seeds.begin(), seeds.end()), seeds.end());

    struct Reference {
        ToyModel model;
        ToyInputs inputs;
        GenerationResult run;
    };
    std::vector<std::unique_ptr<Reference>> refs(seeds.size());
    const std::size_t workers = worker_count();

    auto parallel_for = [workers](std::size_t count, auto&& body) {
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) body(i);
        };
        std::vector<std::thread> pool;
        const std::size_t n = std::min(workers, count > 0 ? count : 1);
        pool.reserve(n);
        for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
        worker();
        for (std::thread& t : pool) t.join();
    };

    std::exception_ptr first_error;
    std::atomic<bool> failed{false};
    auto guard = [&](auto&& fn) {
        try {
            fn();
        } catch (...) {
            if (!failed.exchange(true)) first_error = std::current_exception();
        }
    };

    parallel_for(seeds.size(), [&](std::size_t i) {
        guard([&] {
            ToyRunSpec local = spec;
            local.model.seed = seeds[i];
            auto ref = std::make_unique<Reference>(Reference{
                ToyModel(local.model), derive_inputs(local, seeds[i]), GenerationResult{}});
            PruneSchedule none;
            none.strategy = Strategy::None;
            ref->run = ref->model.run_generate(ref->inputs.image, ref->inputs.query_ids, none);
            refs[i] = std::move(ref);
        });
    });
    if (failed) std::rethrow_exception(first_error);

    auto ref_for = [&](std::uint64_t seed) -> const Reference& {
        const auto it = std::lower_bound(seeds.begin(), seeds.end(), seed);
        return *refs[static_cast<std::size_t>(std::distance(seeds.begin(), it))];
    };

    // Phase 2: the cells themselves.
    std::vector<CellOutcome> outcomes(ordered.size());
    parallel_for(ordered.size(), [&](std::size_t i) {
        guard([&] {
            const SweepCell& cell = ordered[i];
            SweepRow& row = outcomes[i].row;
            row.schedule = cell.schedule;
            row.seed = cell.seed;
            const Reference& ref = ref_for(cell.seed);
            try {
                const ResolvedSchedule resolved =
                    resolve_schedule(cell.schedule, spec.model.patches);
                GenerationResult pruned = ref.model.run_generate(
                    ref.inputs.image, ref.inputs.query_ids, cell.schedule);
                row.status = "ok";
                row.final_tokens = pruned.trace.final_count;
                row.fidelity = fidelity(ref.run, pruned);
                const FlopsReport rep = delta_total_from_counts(
                    resolved.pruned_until_pivot(), resolved.pruned_after_pivot(),
                    resolved.pivot_layer, toy_dims(spec));
                row.delta_total = rep.delta_total;
                row.relative_reduction = rep.relative_reduction;
            } catch (const ConstraintError&) {
                row.status = "skipped";
            }
        });
    });
    if (failed) std::rethrow_exception(first_error);

    // Emit: per-seed rows grouped by schedule, one aggregate row per group.
    std::ostringstream csv;
    csv << kSweepCsvHeader << '\n';
    std::size_t i = 0;
    while (i < outcomes.size()) {
        std::size_t j = i;
        const std::string key = schedule_sort_key(ordered[i].schedule);
        std::vector<double> top1, kl, cosine, final_tokens, reduction;
        flops_t group_delta = 0;
        while (j < outcomes.size() && schedule_sort_key(ordered[j].schedule) == key) {
            const SweepRow& row = outcomes[j].row;
            csv << csv_row(row.schedule, std::to_string(row.seed), row.status,
                           row.status == "ok" ? &row : nullptr)
                << '\n';
            if (row.status == "ok") {
                top1.push_back(row.fidelity.top1_agreement);
                kl.push_back(row.fidelity.kl_divergence);
                cosine.push_back(row.fidelity.cosine);
                final_tokens.push_back(static_cast<double>(row.final_tokens));
                reduction.push_back(row.relative_reduction);
                group_delta = row.delta_total;
            }
            ++j;
        }
        if (!top1.empty()) {
            SweepRow agg;
            agg.schedule = ordered[i].schedule;
            agg.final_tokens = static_cast<std::size_t>(median_of(final_tokens));
            agg.relative_reduction = median_of(reduction);
            agg.fidelity.top1_agreement = median_of(top1);
            agg.fidelity.kl_divergence = median_of(kl);
            agg.fidelity.cosine = median_of(cosine);
            agg.delta_total = group_delta;
            csv << csv_row(agg.schedule, "median", "median", &agg) << '\n';
        } else {
            csv << csv_row(ordered[i].schedule, "median", "skipped", nullptr) << '\n';
        }
        i = j;
    }
    return csv.str();
}

}  // namespace star::harness
