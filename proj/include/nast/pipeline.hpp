#pragma once

// Run orchestration shared by the CLI and the acceptance harness: config
// loading, run-directory layout, and the gen-data / gen-benchmark / trace /
// train / eval / report phases. Tracing runs before training; layer weights
// are file artifacts so both experiment arms stay auditable.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "nast/benchmark.hpp"
#include "nast/common.hpp"
#include "nast/corpus.hpp"
#include "nast/eval.hpp"
#include "nast/model.hpp"
#include "nast/tokenizer.hpp"
#include "nast/tracing.hpp"
#include "nast/trainer.hpp"
#include "json.hpp"

namespace nast {

namespace fs = std::filesystem;

struct RunConfig {
    fs::path config_path;
    fs::path out_root = "runs";
    fs::path out_dir;  // empty -> out_root / (config hash + timestamp)
    fs::path ontology_path = "configs/ontology.json";

    CorpusConfig data;
    ModelConfig model;  // vocab_size / image_feature_dim filled at model build time
    TrainConfig train;

    double trace_d_min = 1e-3;
    int trace_probe_count = 120;
    int benchmark_max_pairs = 0;  // 0 = all eligible
    std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
    std::string arm = "both";  // nast | uniform | both
    bool parallel_seeds = false;

    std::string config_hash;
};

inline RunConfig load_run_config(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const std::exception& e) {
        throw ConfigError("config parse failure: " + std::string(e.what()));
    }

    RunConfig cfg;
    cfg.config_path = path;
    try {
        if (j.contains("out_root")) cfg.out_root = j.at("out_root").get<std::string>();
        if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
        if (j.contains("ontology")) cfg.ontology_path = j.at("ontology").get<std::string>();
        if (j.contains("data")) {
            const auto& d = j.at("data");
            if (d.contains("seed")) cfg.data.seed = d.at("seed").get<uint64_t>();
            if (d.contains("num_studies")) cfg.data.num_studies = d.at("num_studies").get<int>();
            if (d.contains("noise_sigma")) cfg.data.noise_sigma = d.at("noise_sigma").get<double>();
            if (d.contains("claim_k_min")) cfg.data.claim_k_min = d.at("claim_k_min").get<int>();
            if (d.contains("claim_k_max")) cfg.data.claim_k_max = d.at("claim_k_max").get<int>();
            if (d.contains("split_ratios"))
                cfg.data.split_ratios = d.at("split_ratios").get<std::vector<double>>();
            if (d.contains("uncertain_prob"))
                cfg.data.uncertain_prob = d.at("uncertain_prob").get<double>();
        }
        if (j.contains("model")) {
            const auto& m = j.at("model");
            if (m.contains("d_model")) cfg.model.d_model = m.at("d_model").get<int>();
            if (m.contains("n_heads")) cfg.model.n_heads = m.at("n_heads").get<int>();
            if (m.contains("n_layers")) cfg.model.n_layers = m.at("n_layers").get<int>();
            if (m.contains("max_seq_len")) cfg.model.max_seq_len = m.at("max_seq_len").get<int>();
            if (m.contains("embed_dim")) cfg.model.embed_dim = m.at("embed_dim").get<int>();
            if (m.contains("lora_rank")) cfg.model.lora_rank = m.at("lora_rank").get<int>();
            if (m.contains("lora_scale")) cfg.model.lora_scale = m.at("lora_scale").get<double>();
            if (m.contains("temperature_init"))
                cfg.model.temperature_init = m.at("temperature_init").get<double>();
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            if (t.contains("learning_rate")) cfg.train.learning_rate = t.at("learning_rate").get<double>();
            if (t.contains("beta")) cfg.train.beta = t.at("beta").get<double>();
            if (t.contains("lambda_mix")) cfg.train.lambda_mix = t.at("lambda_mix").get<double>();
            if (t.contains("batch_size")) cfg.train.batch_size = t.at("batch_size").get<int>();
            if (t.contains("claim_batch_size"))
                cfg.train.claim_batch_size = t.at("claim_batch_size").get<int>();
            if (t.contains("steps")) cfg.train.steps = t.at("steps").get<int>();
            if (t.contains("weight_decay")) cfg.train.weight_decay = t.at("weight_decay").get<double>();
            if (t.contains("adam_beta1")) cfg.train.adam_beta1 = t.at("adam_beta1").get<double>();
            if (t.contains("adam_beta2")) cfg.train.adam_beta2 = t.at("adam_beta2").get<double>();
            if (t.contains("adam_eps")) cfg.train.adam_eps = t.at("adam_eps").get<double>();
        }
        if (j.contains("trace")) {
            const auto& t = j.at("trace");
            if (t.contains("d_min")) cfg.trace_d_min = t.at("d_min").get<double>();
            if (t.contains("probe_count")) cfg.trace_probe_count = t.at("probe_count").get<int>();
        }
        if (j.contains("benchmark")) {
            const auto& b = j.at("benchmark");
            if (b.contains("max_pairs")) cfg.benchmark_max_pairs = b.at("max_pairs").get<int>();
        }
        if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<uint64_t>>();
        if (j.contains("arm")) cfg.arm = j.at("arm").get<std::string>();
        if (j.contains("parallel_seeds")) cfg.parallel_seeds = j.at("parallel_seeds").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config field error: " + std::string(e.what()));
    }

    if (cfg.seeds.empty()) throw ConfigError("config must list at least one seed");
    if (cfg.arm != "nast" && cfg.arm != "uniform" && cfg.arm != "both")
        throw ConfigError("arm must be nast, uniform, or both");
    if (cfg.trace_d_min <= 0.0) throw ConfigError("trace d_min must be positive");

    char hash[24];
    std::snprintf(hash, sizeof(hash), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(j.dump())));
    cfg.config_hash = hash;
    if (cfg.out_dir.empty()) {
        auto now = std::chrono::system_clock::now();
        auto tt = std::chrono::system_clock::to_time_t(now);
        char ts[32];
        std::tm tmv{};
        gmtime_r(&tt, &tmv);
        std::strftime(ts, sizeof(ts), "%Y%m%d-%H%M%S", &tmv);
        cfg.out_dir = cfg.out_root / (cfg.config_hash + "-" + std::string(ts));
    }
    return cfg;
}

// --- run directory layout ---
inline fs::path corpus_dir(const RunConfig& c) { return c.out_dir / "corpus"; }
inline fs::path benchmark_path(const RunConfig& c) { return c.out_dir / "benchmark" / "benchmark.jsonl"; }
inline fs::path trace_dir(const RunConfig& c) { return c.out_dir / "trace"; }
inline fs::path train_dir(const RunConfig& c) { return c.out_dir / "train"; }
inline fs::path eval_dir(const RunConfig& c) { return c.out_dir / "eval"; }
inline fs::path report_dir(const RunConfig& c) { return c.out_dir / "report"; }

inline fs::path alpha_path(const RunConfig& c, uint64_t seed) {
    return trace_dir(c) / ("alpha_seed" + std::to_string(seed) + ".json");
}
inline fs::path checkpoint_path(const RunConfig& c, const std::string& arm, uint64_t seed) {
    return train_dir(c) / ("ckpt_" + arm + "_seed" + std::to_string(seed) + ".bin");
}
inline fs::path metrics_path(const RunConfig& c, const std::string& arm, uint64_t seed) {
    return train_dir(c) / ("metrics_" + arm + "_seed" + std::to_string(seed) + ".jsonl");
}
inline fs::path update_norms_path(const RunConfig& c, const std::string& arm, uint64_t seed) {
    return train_dir(c) / ("update_norms_" + arm + "_seed" + std::to_string(seed) + ".csv");
}
inline fs::path eval_path(const RunConfig& c, const std::string& arm, uint64_t seed) {
    return eval_dir(c) / ("eval_" + arm + "_seed" + std::to_string(seed) + ".json");
}

inline std::vector<std::string> arms_of(const RunConfig& c) {
    if (c.arm == "both") return {"uniform", "nast"};
    return {c.arm};
}

// Model wired to a corpus: vocabulary from the ontology lexicon, feature width
// from the ontology's block layout.
inline Model build_model(const RunConfig& cfg, const Corpus& corpus, const Tokenizer& tok,
                         uint64_t seed) {
    ModelConfig mc = cfg.model;
    mc.vocab_size = tok.vocab_size();
    mc.image_feature_dim = corpus.layout.dim;
    mc.seed = seed;
    return Model(mc);
}

// ----------------------------- phases -----------------------------

inline void cmd_gen_data(const RunConfig& cfg) {
    if (!fs::exists(cfg.ontology_path))
        throw DataError("missing ontology file: " + cfg.ontology_path.string());
    auto ont = Ontology::from_json(nlohmann::json::parse(read_file(cfg.ontology_path)));
    auto corpus = generate_corpus(ont, cfg.data);
    write_corpus(corpus, corpus_dir(cfg));
    std::cout << "gen-data: " << corpus.studies.size() << " studies, " << corpus.num_patients
              << " patients -> " << corpus_dir(cfg).string() << "\n";
}

inline void cmd_gen_benchmark(const RunConfig& cfg) {
    auto corpus = load_corpus(corpus_dir(cfg));
    auto built = build_benchmark(corpus, derive_seed(cfg.data.seed, "benchmark"),
                                 cfg.benchmark_max_pairs);
    if (built.pairs.empty()) throw DataError("benchmark: no eligible test studies");
    write_benchmark(built.pairs, benchmark_path(cfg));
    nlohmann::json meta = {{"pairs", built.pairs.size()},
                           {"eligible", built.eligible},
                           {"skipped", built.skipped}};
    write_file(benchmark_path(cfg).parent_path() / "benchmark_meta.json", meta.dump(2) + "\n");
    std::cout << "gen-benchmark: " << built.pairs.size() << " MCQ pairs (" << built.eligible
              << " eligible, " << built.skipped << " skipped)\n";
}

// Probe sources: train-split facts with confident polarity; present facts must
// carry the severe grade, mirroring the probe caption templates.
inline std::vector<ProbeSource> collect_probe_sources(const Corpus& corpus, uint64_t seed,
                                                      int count) {
    std::vector<ProbeSource> all;
    for (const auto& rec : corpus.studies) {
        if (rec.split != "train") continue;
        for (const auto& f : rec.facts) {
            if (!f.definitive()) continue;
            if (f.existence == Existence::present &&
                (!f.severity.has_value() || *f.severity != "severe"))
                continue;
            all.push_back({f, rec.image_features});
        }
    }
    Rng rng(derive_seed(seed, "probe-pick"));
    rng.shuffle(all);
    if (count > 0 && static_cast<int>(all.size()) > count) all.resize(static_cast<size_t>(count));
    return all;
}

inline void cmd_trace(const RunConfig& cfg, const std::vector<uint64_t>& seeds) {
    auto corpus = load_corpus(corpus_dir(cfg));
    Tokenizer tok(corpus.ontology, cfg.model.max_seq_len);
    for (uint64_t seed : seeds) {
        Model model = build_model(cfg, corpus, tok, seed);
        auto sources = collect_probe_sources(corpus, cfg.data.seed, cfg.trace_probe_count);
        auto probes = build_probe_set(sources, corpus.ontology, tok);
        if (probes.empty()) throw DataError("trace: no probe pairs could be built");

        std::vector<TraceResult> results;
        results.reserve(probes.size());
        for (const auto& p : probes) results.push_back(trace_pair(model, p, cfg.trace_d_min));
        auto agg = aggregate_cte(results);  // throws when zero pairs survive the filter
        auto weights = normalize_weights(agg.cte_layer);

        fs::create_directories(trace_dir(cfg));
        write_file(alpha_path(cfg, seed),
                   layer_weights_json(weights, agg.num_valid, agg.num_skipped).dump(2) + "\n");
        write_file(trace_dir(cfg) / ("cte_layers_seed" + std::to_string(seed) + ".csv"),
                   layer_table_csv(weights));
        write_file(trace_dir(cfg) / ("cte_heatmap_seed" + std::to_string(seed) + ".svg"),
                   cte_heatmap_svg(results));
        auto att = negator_attention_report(model, probes, tok);
        write_file(trace_dir(cfg) / ("attention_seed" + std::to_string(seed) + ".csv"),
                   att.to_csv());
        std::cout << "trace: seed " << seed << ", " << agg.num_valid << " valid pairs ("
                  << agg.num_skipped << " filtered)\n";
    }
}

inline void train_one(const RunConfig& cfg, const Corpus& corpus, const Tokenizer& tok,
                      const TrainData& data, const std::string& arm, uint64_t seed) {
    Model model = build_model(cfg, corpus, tok, seed);
    std::vector<double> alpha;
    GradScaling scaling = GradScaling::uniform;
    if (arm == "nast") {
        auto apath = alpha_path(cfg, seed);
        if (!fs::exists(apath))
            throw DataError("nast arm needs layer weights; missing " + apath.string());
        auto weights = layer_weights_from_json(nlohmann::json::parse(read_file(apath)));
        alpha = weights.alpha;
        scaling = GradScaling::cte_weighted;
    }
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    auto result = train(model, data, alpha, tc, scaling);

    model.save_checkpoint(checkpoint_path(cfg, arm, seed));
    {
        std::ostringstream out;
        for (const auto& r : result.curve) {
            nlohmann::json line = {{"step", r.step},
                                   {"loss_total", r.loss_total},
                                   {"loss_clip", r.loss_clip},
                                   {"loss_claim", r.loss_claim}};
            out << line.dump() << "\n";
        }
        write_file(metrics_path(cfg, arm, seed), out.str());
    }
    write_file(update_norms_path(cfg, arm, seed), result.update_log.to_csv());
}

inline void cmd_train(const RunConfig& cfg, const std::vector<uint64_t>& seeds) {
    auto corpus = load_corpus(corpus_dir(cfg));
    Tokenizer tok(corpus.ontology, cfg.model.max_seq_len);
    auto data = build_train_data(corpus, tok, "train");
    fs::create_directories(train_dir(cfg));

    for (const auto& arm : arms_of(cfg)) {
        if (cfg.parallel_seeds && seeds.size() > 1) {
            std::vector<std::thread> pool;
            std::vector<std::exception_ptr> errors(seeds.size());
            for (size_t i = 0; i < seeds.size(); ++i) {
                pool.emplace_back([&, i]() {
                    try {
                        train_one(cfg, corpus, tok, data, arm, seeds[i]);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                });
            }
            for (auto& t : pool) t.join();
            for (auto& e : errors) {
                if (e) std::rethrow_exception(e);
            }
        } else {
            for (uint64_t seed : seeds) train_one(cfg, corpus, tok, data, arm, seed);
        }
        for (uint64_t seed : seeds)
            std::cout << "train: arm " << arm << ", seed " << seed << " -> "
                      << checkpoint_path(cfg, arm, seed).string() << "\n";
    }
}

inline nlohmann::json eval_one(const RunConfig& cfg, const Corpus& corpus, const Tokenizer& tok,
                               const std::vector<McqPair>& pairs, const std::string& arm,
                               uint64_t seed) {
    auto ckpt = checkpoint_path(cfg, arm, seed);
    if (!fs::exists(ckpt)) throw DataError("missing checkpoint: " + ckpt.string());
    Model model = Model::load_checkpoint(ckpt);

    auto retrieval = retrieval_eval(model, corpus, tok, "test");
    auto claims = claim_eval(model, corpus, tok, "test");
    auto gap = gap_report(model, pairs, tok);

    nlohmann::json j;
    j["arm"] = arm;
    j["seed"] = seed;
    j["retrieval"] = {{"r_at_1", retrieval.r_at_1},
                      {"r_at_5", retrieval.r_at_5},
                      {"n", retrieval.n_queries},
                      {"pool_size", retrieval.pool_size}};
    j["claim"] = {{"accuracy", claims.accuracy}, {"n", claims.n}, {"ties", claims.ties}};
    j["mcq"] = {{"acc_affirmative", gap.acc_affirmative},
                {"acc_negated", gap.acc_negated},
                {"gap", gap.gap},
                {"n", gap.n},
                {"ties_affirmative", gap.ties_affirmative},
                {"ties_negated", gap.ties_negated}};

    auto norms_file = update_norms_path(cfg, arm, seed);
    auto apath = alpha_path(cfg, seed);
    if (fs::exists(norms_file) && fs::exists(apath)) {
        auto log = UpdateNormLog::from_csv(read_file(norms_file));
        auto weights = layer_weights_from_json(nlohmann::json::parse(read_file(apath)));
        nlohmann::json conc;
        if (log.n_layers >= 3) conc["top3"] = concentration_report(log, weights.alpha, 3);
        if (log.n_layers >= 5) conc["top5"] = concentration_report(log, weights.alpha, 5);
        j["concentration"] = conc;
    }
    validate_eval_report(j);
    return j;
}

inline void cmd_eval(const RunConfig& cfg, const std::vector<uint64_t>& seeds) {
    auto corpus = load_corpus(corpus_dir(cfg));
    Tokenizer tok(corpus.ontology, cfg.model.max_seq_len);
    auto pairs = load_benchmark(benchmark_path(cfg));
    fs::create_directories(eval_dir(cfg));

    std::string csv =
        "arm,seed,r_at_1,r_at_5,claim_accuracy,mcq_affirmative,mcq_negated,mcq_gap,conc_top3,conc_top5\n";
    for (const auto& arm : arms_of(cfg)) {
        for (uint64_t seed : seeds) {
            auto j = eval_one(cfg, corpus, tok, pairs, arm, seed);
            write_file(eval_path(cfg, arm, seed), j.dump(2) + "\n");
            char row[512];
            std::snprintf(row, sizeof(row), "%s,%llu,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n",
                          arm.c_str(), static_cast<unsigned long long>(seed),
                          j["retrieval"]["r_at_1"].get<double>(),
                          j["retrieval"]["r_at_5"].get<double>(),
                          j["claim"]["accuracy"].get<double>(),
                          j["mcq"]["acc_affirmative"].get<double>(),
                          j["mcq"]["acc_negated"].get<double>(), j["mcq"]["gap"].get<double>(),
                          j.contains("concentration") && j["concentration"].contains("top3")
                              ? j["concentration"]["top3"].get<double>()
                              : -1.0,
                          j.contains("concentration") && j["concentration"].contains("top5")
                              ? j["concentration"]["top5"].get<double>()
                              : -1.0);
            csv += row;
            std::cout << "eval: arm " << arm << ", seed " << seed << ": gap "
                      << j["mcq"]["gap"].get<double>() << "\n";
        }
    }
    write_file(eval_dir(cfg) / "eval_summary.csv", csv);
}

// Published full-scale reference values shown alongside desk results; they are
// context, not targets.
inline nlohmann::json full_scale_reference() {
    return nlohmann::json{
        {"note", "published full-scale reference values; not a desk-scale target"},
        {"mcq_gap", {{"clip", 21.6}, {"nast", 4.2}}},
        {"update_concentration_top3", {{"uniform", 28.4}, {"nast", 52.6}}},
        {"update_concentration_top5", {{"uniform", 41.7}, {"nast", 69.3}}}};
}

inline void cmd_report(const RunConfig& cfg, const std::vector<uint64_t>& seeds) {
    nlohmann::json report;
    report["config_hash"] = cfg.config_hash;
    report["seeds"] = seeds;
    report["reference_full_scale"] = full_scale_reference();

    const std::vector<std::string> metric_keys = {"r_at_1",        "r_at_5",     "claim_accuracy",
                                                  "acc_affirmative", "acc_negated", "gap",
                                                  "conc_top3",     "conc_top5"};
    nlohmann::json per_seed = nlohmann::json::array();
    nlohmann::json means;
    bool partial = false;

    for (const auto& arm : {std::string("uniform"), std::string("nast")}) {
        std::map<std::string, std::vector<double>> collected;
        for (uint64_t seed : seeds) {
            auto path = eval_path(cfg, arm, seed);
            nlohmann::json row;
            row["arm"] = arm;
            row["seed"] = seed;
            if (!fs::exists(path)) {
                row["status"] = "absent";
                partial = true;
                per_seed.push_back(row);
                continue;
            }
            auto j = nlohmann::json::parse(read_file(path));
            row["status"] = "ok";
            row["r_at_1"] = j["retrieval"]["r_at_1"];
            row["r_at_5"] = j["retrieval"]["r_at_5"];
            row["claim_accuracy"] = j["claim"]["accuracy"];
            row["acc_affirmative"] = j["mcq"]["acc_affirmative"];
            row["acc_negated"] = j["mcq"]["acc_negated"];
            row["gap"] = j["mcq"]["gap"];
            if (j.contains("concentration")) {
                if (j["concentration"].contains("top3")) row["conc_top3"] = j["concentration"]["top3"];
                if (j["concentration"].contains("top5")) row["conc_top5"] = j["concentration"]["top5"];
            }
            per_seed.push_back(row);
            for (const auto& k : metric_keys) {
                if (row.contains(k)) collected[k].push_back(row[k].get<double>());
            }
        }
        nlohmann::json mean_row;
        for (const auto& [k, vals] : collected) {
            if (vals.empty()) continue;
            double s = 0.0;
            for (double v : vals) s += v;
            mean_row[k] = s / static_cast<double>(vals.size());
            mean_row[k + "_n"] = vals.size();
        }
        means[arm] = mean_row;
    }
    report["per_seed"] = per_seed;
    report["mean"] = means;
    report["partial"] = partial;

    fs::create_directories(report_dir(cfg));
    write_file(report_dir(cfg) / "report.json", report.dump(2) + "\n");

    // CSV + markdown renderings
    std::string csv = "arm,seed,r_at_1,r_at_5,claim_accuracy,acc_affirmative,acc_negated,gap,conc_top3,conc_top5\n";
    std::string md = "| arm | seed | R@1 | R@5 | claim acc | affirmative | negated | gap | top-3 conc | top-5 conc |\n";
    md += "|---|---|---|---|---|---|---|---|---|---|\n";
    auto cell = [](const nlohmann::json& row, const std::string& key) {
        if (!row.contains(key)) return std::string("absent");
        char b[32];
        std::snprintf(b, sizeof(b), "%.3f", row[key].get<double>());
        return std::string(b);
    };
    for (const auto& row : per_seed) {
        std::string seed_label = row["status"] == "ok" ? std::to_string(row["seed"].get<uint64_t>())
                                                       : std::to_string(row["seed"].get<uint64_t>());
        csv += row["arm"].get<std::string>() + "," + seed_label;
        md += "| " + row["arm"].get<std::string>() + " | " + seed_label;
        for (const auto& k : metric_keys) {
            std::string v = row["status"] == "ok" ? cell(row, k) : "absent";
            csv += "," + v;
            md += " | " + v;
        }
        csv += "\n";
        md += " |\n";
    }
    for (const auto& arm : {std::string("uniform"), std::string("nast")}) {
        csv += arm + ",mean";
        md += "| " + arm + " | mean";
        for (const auto& k : metric_keys) {
            std::string v = cell(means[arm], k);
            csv += "," + v;
            md += " | " + v;
        }
        csv += "\n";
        md += " |\n";
    }
    write_file(report_dir(cfg) / "report.csv", csv);
    write_file(report_dir(cfg) / "report.md", md);
    std::cout << "report -> " << (report_dir(cfg) / "report.json").string() << "\n";
}

}  // namespace nast
