#include "splitf/metrics.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

namespace splitf {

namespace {

// Aggregates one decode mode over every prompt of a corpus on a fresh
// pipeline per prompt (fresh session, shared link profile).
struct CorpusRun {
    int tokens = 0;
    int steps = 0;
    int pool_hit_steps = 0;
    double wall_seconds = 0.0;

    double acceptance() const { return steps > 0 ? static_cast<double>(tokens) / steps : 1.0; }
    double match_rate() const {
        return steps > 0 ? static_cast<double>(pool_hit_steps) / steps : 0.0;
    }
    double tok_s() const { return wall_seconds > 0 ? tokens / wall_seconds : 0.0; }
    double mean_step_ms() const { return steps > 0 ? wall_seconds * 1000.0 / steps : 0.0; }
};

CorpusRun run_corpus(const Weights& weights, const SplitConfig& split, const LatencyProfile& link,
                     const Corpus& corpus, int max_new, DecodeMode mode,
                     const LookaheadConfig& lookahead) {
    CorpusRun agg;
    JacobiConfig jacobi;
    for (const auto& prompt : corpus.prompts) {
        SimPipeline pipe = make_sim_pipeline(weights, split, link);
        DecodeResult res = run_decode(mode, *pipe.client, prompt, max_new, jacobi, lookahead);
        agg.tokens += res.stats.tokens_committed;
        agg.steps += res.stats.steps;
        agg.wall_seconds += res.stats.wall_seconds;
        for (const auto& t : res.stats.step_timings) agg.pool_hit_steps += t.pool_hit ? 1 : 0;
    }
    return agg;
}

double self_perplexity(const Logits& rows, std::span<const int> tokens) {
    if (rows.seq == 0) return 0.0;
    double sum_logp = 0.0;
    for (int i = 0; i < rows.seq; ++i) {
        const float* r = rows.row(i);
        float maxv = r[0];
        for (int j = 1; j < rows.vocab; ++j) maxv = std::max(maxv, r[j]);
        double denom = 0.0;
        for (int j = 0; j < rows.vocab; ++j) denom += std::exp(static_cast<double>(r[j]) - maxv);
        const double logp =
            static_cast<double>(r[tokens[static_cast<size_t>(i)]]) - maxv - std::log(denom);
        sum_logp += logp;
    }
    return std::exp(-sum_logp / rows.seq);
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw SplitError(ErrorKind::input, "cannot open for write: " + path);
    os << content;
    if (!os) throw SplitError(ErrorKind::input, "short write: " + path);
}

} // namespace

double decompose_fixed_overhead(double mean_step_wall_ms, double measured_rtt_ms) {
    if (mean_step_wall_ms < measured_rtt_ms) {
        throw SplitError(ErrorKind::decomposition,
                         "per-step wall time below measured RTT; RTT was mis-measured");
    }
    return mean_step_wall_ms - measured_rtt_ms;
}

double project_throughput(const ProjectionModel& model, double target_rtt_ms) {
    if (target_rtt_ms < 0) throw SplitError(ErrorKind::input, "target RTT must be >= 0");
    return model.acceptance_rate / ((target_rtt_ms + model.fixed_overhead_ms) / 1000.0);
}

std::vector<double> cross_validate(const ProjectionModel& model,
                                   std::span<const std::pair<double, double>> measured_runs) {
    if (measured_runs.empty()) {
        throw SplitError(ErrorKind::input, "cross-validation needs at least one measured run");
    }
    std::vector<double> errors;
    errors.reserve(measured_runs.size());
    for (const auto& [rtt_ms, measured_tok_s] : measured_runs) {
        const double projected = project_throughput(model, rtt_ms);
        errors.push_back(std::abs(projected - measured_tok_s) / measured_tok_s);
    }
    return errors;
}

double rtt_to_compute_ratio(double rtt_ms, double cloud_compute_ms) {
    if (cloud_compute_ms <= 0) {
        throw SplitError(ErrorKind::input, "cloud compute time must be positive");
    }
    return rtt_ms / cloud_compute_ms;
}

// ── Corpora ──────────────────────────────────────────────────────────────

Corpus make_repetitive_corpus(const ModelConfig& cfg, int n_prompts, int prompt_len,
                              uint64_t seed) {
    Corpus corpus;
    corpus.name = "repetitive";
    std::mt19937_64 rng(seed);
    for (int p = 0; p < n_prompts; ++p) {
        // period 1-2 motifs: maximally repetitive, strong n-gram structure
        const int period = 1 + static_cast<int>(rng() % 2);
        std::vector<int> motif(static_cast<size_t>(period));
        for (auto& t : motif) t = static_cast<int>(rng() % static_cast<uint64_t>(cfg.vocab_size));
        std::vector<int> prompt(static_cast<size_t>(prompt_len));
        for (int i = 0; i < prompt_len; ++i) prompt[static_cast<size_t>(i)] = motif[static_cast<size_t>(i % period)];
        corpus.prompts.push_back(std::move(prompt));
    }
    return corpus;
}

Corpus make_random_corpus(const ModelConfig& cfg, int n_prompts, int prompt_len, uint64_t seed) {
    Corpus corpus;
    corpus.name = "random";
    std::mt19937_64 rng(seed);
    for (int p = 0; p < n_prompts; ++p) {
        std::vector<int> prompt(static_cast<size_t>(prompt_len));
        for (auto& t : prompt) t = static_cast<int>(rng() % static_cast<uint64_t>(cfg.vocab_size));
        corpus.prompts.push_back(std::move(prompt));
    }
    return corpus;
}

Corpus load_corpus_file(const std::string& path, const ModelConfig& cfg) {
    std::ifstream is(path);
    if (!is) throw SplitError(ErrorKind::input, "cannot open corpus file: " + path);
    Corpus corpus;
    corpus.name = path;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::vector<int> prompt;
        int tok;
        while (ls >> tok) {
            if (tok < 0 || tok >= cfg.vocab_size) {
                throw SplitError(ErrorKind::input, "token id out of range in corpus: " + path);
            }
            prompt.push_back(tok);
        }
        if (!prompt.empty()) corpus.prompts.push_back(std::move(prompt));
    }
    if (corpus.prompts.empty()) throw SplitError(ErrorKind::input, "empty corpus: " + path);
    return corpus;
}

Corpus resolve_corpus(const std::string& spec, const ModelConfig& cfg, uint64_t seed) {
    if (spec == "builtin:repetitive") return make_repetitive_corpus(cfg, 2, 24, seed);
    if (spec == "builtin:random") return make_random_corpus(cfg, 2, 24, seed);
    return load_corpus_file(spec, cfg);
}

SimPipeline make_sim_pipeline(const Weights& weights, const SplitConfig& split,
                              const LatencyProfile& link,
                              std::optional<wire::WireDtype> server_dtype,
                              std::shared_ptr<TranscriptWriter> transcript) {
    SimPipeline pipe;
    ServerConfig server_cfg;
    server_cfg.layer_begin = split.prefix_layers;
    server_cfg.layer_end = weights.config.n_layers - split.suffix_layers;
    server_cfg.response_dtype = server_dtype;
    pipe.engine = std::make_unique<ServerEngine>(weights, server_cfg);
    ServerEngine* engine = pipe.engine.get();
    auto channel =
        open_sim_channel(link, [engine](const wire::Frame& f) { return engine->handle(f); });
    if (transcript) {
        pipe.channel = std::make_unique<RecordingChannel>(std::move(channel), transcript);
    } else {
        pipe.channel = std::move(channel);
    }
    pipe.client = std::make_unique<SplitClient>(weights, split, *pipe.channel);
    return pipe;
}

// ── Ablation ─────────────────────────────────────────────────────────────

std::vector<AblationRow> run_ablation(const Weights& weights, const std::vector<Corpus>& corpora,
                                      const AblationConfig& cfg) {
    std::vector<AblationRow> rows;
    for (const auto& corpus : corpora) {
        LookaheadConfig lookahead = cfg.lookahead;
        const CorpusRun seq = run_corpus(weights, cfg.split, cfg.link, corpus, cfg.max_new,
                                         DecodeMode::sequential, lookahead);
        AblationRow seq_row;
        seq_row.corpus = corpus.name;
        seq_row.mode = "sequential";
        seq_row.ngram_n = 0;
        seq_row.tok_s = seq.tok_s();
        seq_row.acceptance = seq.acceptance();
        seq_row.match_rate = 0.0;
        seq_row.tokens = seq.tokens;
        seq_row.steps = seq.steps;
        seq_row.mean_step_wall_ms = seq.mean_step_ms();
        seq_row.break_even = 1.0;
        rows.push_back(seq_row);

        for (int n : cfg.ngram_sizes) {
            lookahead.ngram_n = n;
            const CorpusRun la = run_corpus(weights, cfg.split, cfg.link, corpus, cfg.max_new,
                                            DecodeMode::lookahead, lookahead);
            AblationRow row;
            row.corpus = corpus.name;
            row.mode = "lookahead";
            row.ngram_n = n;
            row.tok_s = la.tok_s();
            row.acceptance = la.acceptance();
            row.match_rate = la.match_rate();
            row.tokens = la.tokens;
            row.steps = la.steps;
            row.mean_step_wall_ms = la.mean_step_ms();
            row.break_even =
                seq.mean_step_ms() > 0 ? la.mean_step_ms() / seq.mean_step_ms() : 0.0;
            rows.push_back(row);
        }
    }
    return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
    std::ostringstream os;
    os << "corpus,mode,ngram_n,tok_s,acceptance,match_rate,tokens,steps,mean_step_wall_ms,break_even\n";
    for (const auto& r : rows) {
        os << r.corpus << ',' << r.mode << ',' << r.ngram_n << ',' << r.tok_s << ','
           << r.acceptance << ',' << r.match_rate << ',' << r.tokens << ',' << r.steps << ','
           << r.mean_step_wall_ms << ',' << r.break_even << '\n';
    }
    write_text_file(path, os.str());
}

void write_ablation_json(const std::vector<AblationRow>& rows, const std::string& path) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) {
        arr.push_back({{"corpus", r.corpus},
                       {"mode", r.mode},
                       {"ngram_n", r.ngram_n},
                       {"tok_s", r.tok_s},
                       {"acceptance", r.acceptance},
                       {"match_rate", r.match_rate},
                       {"tokens", r.tokens},
                       {"steps", r.steps},
                       {"mean_step_wall_ms", r.mean_step_wall_ms},
                       {"break_even", r.break_even}});
    }
    write_text_file(path, arr.dump(2) + "\n");
}

// ── RTT sweep ────────────────────────────────────────────────────────────

BenchReport run_rtt_bench(const Weights& weights, const SplitConfig& split, const Corpus& corpus,
                          int max_new, std::span<const double> rtts_ms, double fit_rtt_ms,
                          DecodeMode mode, const LookaheadConfig& lookahead) {
    if (rtts_ms.empty()) throw SplitError(ErrorKind::input, "RTT list must be non-empty");
    BenchReport report;
    report.fit_rtt_ms = fit_rtt_ms;

    for (double rtt : rtts_ms) {
        LatencyProfile link;
        link.one_way_delay_ms = rtt / 2.0;

        BenchPoint point;
        point.injected_rtt_ms = rtt;
        {
            SimPipeline pipe = make_sim_pipeline(weights, split, link);
            point.measured_rtt_ms = measure_rtt(*pipe.channel, 20);
        }
        CorpusRun run = run_corpus(weights, split, link, corpus, max_new, mode, lookahead);
        point.mean_step_wall_ms = run.mean_step_ms();
        point.measured_tok_s = run.tok_s();
        point.acceptance = run.acceptance();
        report.points.push_back(point);
    }

    // Fit fixed overhead at the requested RTT, then project every point at
    // its own measured RTT.
    const BenchPoint* fit_point = nullptr;
    for (const auto& p : report.points) {
        if (p.injected_rtt_ms == fit_rtt_ms) fit_point = &p;
    }
    if (!fit_point) {
        throw SplitError(ErrorKind::input, "fit RTT must be one of the swept RTTs");
    }
    report.model.fixed_overhead_ms =
        decompose_fixed_overhead(fit_point->mean_step_wall_ms, fit_point->measured_rtt_ms);
    report.model.acceptance_rate = fit_point->acceptance;

    for (auto& p : report.points) {
        p.projected_tok_s = project_throughput(report.model, p.measured_rtt_ms);
        p.rel_error = std::abs(p.projected_tok_s - p.measured_tok_s) / p.measured_tok_s;
    }
    return report;
}

void write_bench_csv(const BenchReport& report, const std::string& path) {
    std::ostringstream os;
    os << "injected_rtt_ms,measured_rtt_ms,mean_step_wall_ms,measured_tok_s,acceptance,"
          "projected_tok_s,rel_error\n";
    for (const auto& p : report.points) {
        os << p.injected_rtt_ms << ',' << p.measured_rtt_ms << ',' << p.mean_step_wall_ms << ','
           << p.measured_tok_s << ',' << p.acceptance << ',' << p.projected_tok_s << ','
           << p.rel_error << '\n';
    }
    write_text_file(path, os.str());
}

void write_bench_json(const BenchReport& report, const std::string& path) {
    nlohmann::json j;
    j["fit_rtt_ms"] = report.fit_rtt_ms;
    j["fixed_overhead_ms"] = report.model.fixed_overhead_ms;
    j["acceptance_rate"] = report.model.acceptance_rate;
    j["points"] = nlohmann::json::array();
    for (const auto& p : report.points) {
        j["points"].push_back({{"injected_rtt_ms", p.injected_rtt_ms},
                               {"measured_rtt_ms", p.measured_rtt_ms},
                               {"mean_step_wall_ms", p.mean_step_wall_ms},
                               {"measured_tok_s", p.measured_tok_s},
                               {"acceptance", p.acceptance},
                               {"projected_tok_s", p.projected_tok_s},
                               {"rel_error", p.rel_error}});
    }
    write_text_file(path, j.dump(2) + "\n");
}

// ── Quality ──────────────────────────────────────────────────────────────

QualityReport verify_quality(const Weights& weights, const std::vector<Corpus>& corpora,
                             int max_new, const SplitConfig& split,
                             const LookaheadConfig& lookahead) {
    QualityReport report;
    report.all_identical = true;
    LatencyProfile link; // zero latency: quality is about values, not timing

    SplitConfig f32_split = split;
    f32_split.dtype = wire::WireDtype::f32;
    SplitConfig f16_split = split;
    f16_split.dtype = wire::WireDtype::f16;

    long f16_mismatches = 0;
    long f16_positions = 0;

    for (const auto& corpus : corpora) {
        for (size_t p = 0; p < corpus.prompts.size(); ++p) {
            const auto& prompt = corpus.prompts[p];
            MonolithicTrace oracle = generate_monolithic_traced(weights, prompt, max_new);

            SimPipeline seq_pipe =
                make_sim_pipeline(weights, f32_split, link, wire::WireDtype::f32);
            DecodeResult seq = decode_sequential(*seq_pipe.client, prompt, max_new);

            SimPipeline la_pipe = make_sim_pipeline(weights, f32_split, link, wire::WireDtype::f32);
            DecodeResult la = decode_lookahead(*la_pipe.client, prompt, max_new, lookahead);

            QualityRow row;
            row.prompt_name = corpus.name + "/" + std::to_string(p);
            row.tokens_identical = seq.tokens == la.tokens;
            row.matches_monolithic = seq.tokens == oracle.tokens && la.tokens == oracle.tokens;
            row.self_ppl_sequential = self_perplexity(seq.committed_logits, seq.tokens);
            row.self_ppl_lookahead = self_perplexity(la.committed_logits, la.tokens);
            double max_diff = 0.0;
            if (row.tokens_identical && seq.committed_logits.seq == la.committed_logits.seq) {
                for (size_t i = 0; i < seq.committed_logits.data.size(); ++i) {
                    max_diff = std::max(max_diff,
                                        std::abs(static_cast<double>(seq.committed_logits.data[i]) -
                                                 la.committed_logits.data[i]));
                }
            }
            row.max_abs_logit_diff = max_diff;
            report.all_identical = report.all_identical && row.tokens_identical;
            report.rows.push_back(row);

            // f16 wire fidelity vs. the monolithic stream (reported only).
            SimPipeline f16_pipe =
                make_sim_pipeline(weights, f16_split, link, wire::WireDtype::f16);
            DecodeResult f16 = decode_sequential(*f16_pipe.client, prompt, max_new);
            for (size_t i = 0; i < f16.tokens.size(); ++i) {
                f16_positions += 1;
                if (f16.tokens[i] != oracle.tokens[i]) f16_mismatches += 1;
            }
        }
    }
    report.f16_mismatch_fraction =
        f16_positions > 0 ? static_cast<double>(f16_mismatches) / f16_positions : 0.0;
    return report;
}

void write_quality_json(const QualityReport& report, const std::string& path) {
    nlohmann::json j;
    j["all_identical"] = report.all_identical;
    j["f16_mismatch_fraction"] = report.f16_mismatch_fraction;
    j["prompts"] = nlohmann::json::array();
    for (const auto& r : report.rows) {
        j["prompts"].push_back({{"prompt", r.prompt_name},
                                {"tokens_identical", r.tokens_identical},
                                {"matches_monolithic", r.matches_monolithic},
                                {"max_abs_logit_diff", r.max_abs_logit_diff},
                                {"self_ppl_sequential", r.self_ppl_sequential},
                                {"self_ppl_lookahead", r.self_ppl_lookahead}});
    }
    write_text_file(path, j.dump(2) + "\n");
}

} // namespace splitf
