// splitf — split transformer inference over a latency-bearing link.
//
// Subcommands: serve, generate, bench, ablate, verify-quality, project,
// invert, protocol-dump. Exit codes: 0 success, 1 runtime failure, 2 usage.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "splitf/client.hpp"
#include "splitf/decoding.hpp"
#include "splitf/inversion.hpp"
#include "splitf/metrics.hpp"
#include "splitf/server.hpp"
#include "splitf/transport.hpp"

namespace {

using namespace splitf;

std::atomic<bool> g_stop{false};

void handle_signal(int) { g_stop.store(true); }

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

std::vector<double> parse_double_list(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stod(item));
    }
    return out;
}

// "START..END" half-open layer range.
std::pair<int, int> parse_layer_range(const std::string& s) {
    const size_t dots = s.find("..");
    if (dots == std::string::npos) {
        throw SplitError(ErrorKind::config, "layer range must be START..END: " + s);
    }
    return {std::stoi(s.substr(0, dots)), std::stoi(s.substr(dots + 2))};
}

std::vector<std::vector<int>> read_prompts(const std::string& inline_prompt,
                                           const std::string& prompt_file,
                                           const ModelConfig& cfg) {
    std::vector<std::vector<int>> prompts;
    if (!inline_prompt.empty()) {
        std::istringstream ss(inline_prompt);
        std::vector<int> prompt;
        int tok;
        while (ss >> tok) prompt.push_back(tok);
        if (prompt.empty()) throw SplitError(ErrorKind::input, "empty --prompt");
        prompts.push_back(std::move(prompt));
    }
    if (!prompt_file.empty()) {
        Corpus corpus = load_corpus_file(prompt_file, cfg);
        for (auto& p : corpus.prompts) prompts.push_back(std::move(p));
    }
    if (prompts.empty()) {
        throw SplitError(ErrorKind::input, "provide --prompt or --prompt-file");
    }
    return prompts;
}

struct CommonModelOpts {
    std::string weights_path;
    uint64_t seed = 1234;

    Weights load() const {
        if (!weights_path.empty()) return load_weights(weights_path);
        ModelConfig cfg;
        cfg.seed = seed;
        return init_weights(cfg);
    }
};

void add_model_opts(CLI::App* cmd, CommonModelOpts& opts) {
    cmd->add_option("--weights", opts.weights_path, "weight snapshot file (default: seeded init)");
    cmd->add_option("--seed", opts.seed, "model seed when no weight file is given")
        ->envname("SPLITF_SEED");
}

int cmd_serve(const CommonModelOpts& model_opts, const std::string& listen,
              const std::string& layers, double expiry_s, int max_sessions,
              const std::string& dtype) {
    const Endpoint ep = Endpoint::parse(listen);
    if (ep.kind != Endpoint::Kind::tcp) {
        throw SplitError(ErrorKind::config, "serve requires a tcp listen endpoint");
    }
    Weights weights = model_opts.load();

    ServerConfig cfg;
    const auto [begin, end] = parse_layer_range(layers);
    cfg.layer_begin = begin;
    cfg.layer_end = end;
    cfg.session_expiry_s = expiry_s;
    cfg.max_sessions = max_sessions;
    if (!dtype.empty()) cfg.response_dtype = wire::dtype_from_string(dtype);

    auto engine = std::make_shared<ServerEngine>(weights, cfg);
    FrameServer server(ep.host, ep.port,
                       [engine](const wire::Frame& f) { return engine->handle(f); });
    server.start();
    std::fprintf(stderr, "splitf serve: layers %d..%d on %s:%d (expiry %.0fs)\n", begin, end,
                 ep.host.c_str(), server.port(), expiry_s);

    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);
    auto last_sweep = std::chrono::steady_clock::now();
    while (!g_stop.load()) {
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
        const auto now = std::chrono::steady_clock::now();
        if (now - last_sweep > std::chrono::seconds(30)) {
            engine->expire_sessions();
            last_sweep = now;
        }
    }
    server.stop();
    return 0;
}

int cmd_generate(const CommonModelOpts& model_opts, const std::string& server_desc, int prefix,
                 int suffix, const std::string& dtype, const std::string& inline_prompt,
                 const std::string& prompt_file, int max_new, const std::string& mode_str,
                 const std::string& stats_out, const std::string& transcript_path,
                 const JacobiConfig& jacobi, const LookaheadConfig& lookahead) {
    Weights weights = model_opts.load();
    SplitConfig split;
    split.prefix_layers = prefix;
    split.suffix_layers = suffix;
    split.dtype = wire::dtype_from_string(dtype);
    const DecodeMode mode = decode_mode_from_string(mode_str);
    const Endpoint ep = Endpoint::parse(server_desc);

    std::shared_ptr<TranscriptWriter> transcript;
    if (!transcript_path.empty()) {
        transcript = std::make_shared<TranscriptWriter>(transcript_path);
    }
    std::ofstream stats_stream;
    std::ostream* stats = nullptr;
    if (!stats_out.empty()) {
        stats_stream.open(stats_out, std::ios::trunc);
        if (!stats_stream) throw SplitError(ErrorKind::input, "cannot open " + stats_out);
        stats = &stats_stream;
    }

    const auto prompts = read_prompts(inline_prompt, prompt_file, weights.config);

    // Middle-range engine for sim endpoints; tcp endpoints talk to a running
    // serve process that holds the same weights.
    std::unique_ptr<ServerEngine> engine;
    for (const auto& prompt : prompts) {
        std::unique_ptr<Channel> channel;
        if (ep.kind == Endpoint::Kind::sim) {
            ServerConfig scfg;
            scfg.layer_begin = split.prefix_layers;
            scfg.layer_end = weights.config.n_layers - split.suffix_layers;
            engine = std::make_unique<ServerEngine>(weights, scfg);
            ServerEngine* raw = engine.get();
            channel = open_sim_channel(ep.profile,
                                       [raw](const wire::Frame& f) { return raw->handle(f); });
        } else {
            channel = open_tcp_channel(ep.host, ep.port);
        }
        if (transcript) {
            channel = std::make_unique<RecordingChannel>(std::move(channel), transcript);
        }
        SplitClient client(weights, split, *channel);
        DecodeResult res = run_decode(mode, client, prompt, max_new, jacobi, lookahead, stats);
        for (size_t i = 0; i < res.tokens.size(); ++i) {
            if (i) std::cout << ' ';
            std::cout << res.tokens[i];
        }
        std::cout << '\n';
        std::fprintf(stderr,
                     "generated %zu tokens in %d steps (acceptance %.3f, match %.3f, %.1f ms)\n",
                     res.tokens.size(), res.stats.steps, res.stats.acceptance_rate,
                     res.stats.match_rate, res.stats.wall_seconds * 1000.0 + res.stats.prefill_ms);
        channel->close();
    }
    return 0;
}

int cmd_bench(const CommonModelOpts& model_opts, const std::string& rtts_csv, double fit_rtt,
              const std::string& mode_str, const std::string& corpus_spec, int max_new,
              int prefix, int suffix, const std::string& out_prefix,
              const LookaheadConfig& lookahead) {
    Weights weights = model_opts.load();
    SplitConfig split;
    split.prefix_layers = prefix;
    split.suffix_layers = suffix;
    split.dtype = wire::WireDtype::f16;
    const Corpus corpus = resolve_corpus(corpus_spec, weights.config, model_opts.seed);
    const std::vector<double> rtts = parse_double_list(rtts_csv);

    BenchReport report = run_rtt_bench(weights, split, corpus, max_new, rtts, fit_rtt,
                                       decode_mode_from_string(mode_str), lookahead);
    std::printf("fit: overhead %.3f ms, acceptance %.4f (at %.0f ms RTT)\n",
                report.model.fixed_overhead_ms, report.model.acceptance_rate, report.fit_rtt_ms);
    std::printf("%10s %12s %12s %12s %10s\n", "rtt_ms", "measured", "projected", "tok/s err",
                "accept");
    bool ok = true;
    for (const auto& p : report.points) {
        std::printf("%10.1f %12.3f %12.3f %11.2f%% %10.4f\n", p.injected_rtt_ms, p.measured_tok_s,
                    p.projected_tok_s, p.rel_error * 100.0, p.acceptance);
        ok = ok && p.rel_error < 0.10;
    }
    if (!out_prefix.empty()) {
        write_bench_csv(report, out_prefix + ".csv");
        write_bench_json(report, out_prefix + ".json");
    }
    return ok ? 0 : 1;
}

int cmd_ablate(const CommonModelOpts& model_opts, const std::string& corpora_csv,
               const std::string& ngrams_csv, int max_new, double rtt_ms, int prefix, int suffix,
               const std::string& out_prefix) {
    Weights weights = model_opts.load();
    AblationConfig cfg;
    cfg.ngram_sizes = parse_int_list(ngrams_csv);
    cfg.max_new = max_new;
    cfg.link.one_way_delay_ms = rtt_ms / 2.0;
    cfg.split.prefix_layers = prefix;
    cfg.split.suffix_layers = suffix;

    std::vector<Corpus> corpora;
    std::stringstream ss(corpora_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) corpora.push_back(resolve_corpus(item, weights.config, model_opts.seed));
    }
    if (corpora.empty()) throw SplitError(ErrorKind::input, "no corpora given");

    const auto rows = run_ablation(weights, corpora, cfg);
    std::printf("%-16s %-11s %3s %10s %10s %10s %8s\n", "corpus", "mode", "n", "tok/s", "accept",
                "match", "steps");
    for (const auto& r : rows) {
        std::printf("%-16s %-11s %3d %10.3f %10.4f %10.4f %8d\n", r.corpus.c_str(),
                    r.mode.c_str(), r.ngram_n, r.tok_s, r.acceptance, r.match_rate, r.steps);
    }
    if (!out_prefix.empty()) {
        write_ablation_csv(rows, out_prefix + ".csv");
        write_ablation_json(rows, out_prefix + ".json");
    }
    return 0;
}

int cmd_verify_quality(const CommonModelOpts& model_opts, const std::string& corpora_csv,
                       int max_new, int prefix, int suffix, const std::string& out_path,
                       const LookaheadConfig& lookahead) {
    Weights weights = model_opts.load();
    SplitConfig split;
    split.prefix_layers = prefix;
    split.suffix_layers = suffix;

    std::vector<Corpus> corpora;
    std::stringstream ss(corpora_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) corpora.push_back(resolve_corpus(item, weights.config, model_opts.seed));
    }
    QualityReport report = verify_quality(weights, corpora, max_new, split, lookahead);
    for (const auto& r : report.rows) {
        std::printf("%-24s identical=%s monolithic=%s max_logit_diff=%.3g ppl_seq=%.4f ppl_la=%.4f\n",
                    r.prompt_name.c_str(), r.tokens_identical ? "yes" : "NO",
                    r.matches_monolithic ? "yes" : "NO", r.max_abs_logit_diff,
                    r.self_ppl_sequential, r.self_ppl_lookahead);
    }
    std::printf("f16 wire argmax mismatch fraction: %.4f\n", report.f16_mismatch_fraction);
    if (!out_path.empty()) write_quality_json(report, out_path);
    return report.all_identical ? 0 : 1;
}

int cmd_project(double overhead_ms, double acceptance, const std::string& rtts_csv) {
    ProjectionModel model{overhead_ms, acceptance};
    for (double rtt : parse_double_list(rtts_csv)) {
        std::printf("%.1f\n", project_throughput(model, rtt));
    }
    return 0;
}

int cmd_invert(const CommonModelOpts& model_opts, const std::string& depths_csv, int n_samples,
               int seq_len, uint64_t sweep_seed, const std::string& report_path) {
    Weights weights = model_opts.load();
    SweepConfig cfg;
    cfg.n_sequences = (n_samples + seq_len - 1) / seq_len;
    cfg.seq_len = seq_len;
    cfg.corpus_seed = sweep_seed;
    cfg.decoder = AttackDecoderConfig::for_model(weights.config);
    cfg.decoder.seed = sweep_seed;

    const std::vector<int> depths = parse_int_list(depths_csv);
    const auto rows = depth_sweep(weights, depths, cfg);
    const double baseline = 1.0 / weights.config.vocab_size;
    std::printf("%6s %8s %8s %8s %8s\n", "depth", "top1", "top5", "n_train", "n_test");
    for (const auto& r : rows) {
        std::printf("%6d %8.4f %8.4f %8d %8d\n", r.depth, r.top1, r.top5, r.n_train, r.n_test);
    }
    std::printf("random baseline top1: %.6f\n", baseline);
    if (!report_path.empty()) {
        write_sweep_json(rows, baseline, report_path + ".json");
        write_sweep_csv(rows, report_path + ".csv");
    }
    return 0;
}

int cmd_protocol_dump(const CommonModelOpts& model_opts, const std::string& transcript_path) {
    Weights weights = model_opts.load();
    const auto records = read_transcript(transcript_path);
    const TranscriptAudit audit =
        audit_transcript(records, weights.config.hidden_dim, weights.config.vocab_size);
    std::printf("frames: %zu (%zu requests, %zu responses)\n", audit.frames, audit.requests,
                audit.responses);
    std::printf("byte-exact re-encode: %s\n", audit.roundtrip_exact ? "yes" : "NO");
    std::printf("header fields within protocol: %s\n", audit.fields_clean ? "yes" : "NO");
    for (const auto& v : audit.violations) std::printf("violation: %s\n", v.c_str());
    return audit.ok() ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"split transformer inference over a latency-bearing link"};
    app.require_subcommand(1);
    app.set_config("--config", "",
                   "key=value config file (keys like generate.max-new); flags take precedence");

    CommonModelOpts model_opts;

    // serve
    auto* serve = app.add_subcommand("serve", "host the middle layers over TCP");
    std::string listen = "tcp:127.0.0.1:9000";
    std::string layers = "2..6";
    double expiry_s = 300.0;
    int max_sessions = 64;
    std::string serve_dtype;
    add_model_opts(serve, model_opts);
    serve->add_option("--listen", listen, "tcp:HOST:PORT")->envname("SPLITF_ENDPOINT");
    serve->add_option("--layers", layers, "hosted layer range START..END");
    serve->add_option("--expiry", expiry_s, "session expiry seconds (default 300)");
    serve->add_option("--max-sessions", max_sessions, "session table capacity");
    serve->add_option("--dtype", serve_dtype, "pin response dtype f16|f32 (default: mirror)");

    // generate
    auto* gen = app.add_subcommand("generate", "run split generation against a server");
    std::string server_desc = "sim:0";
    int prefix = 2, suffix = 2;
    std::string gen_dtype = "f16";
    std::string inline_prompt, prompt_file;
    int max_new = 64;
    std::string mode_str = "sequential";
    std::string stats_out, transcript_path;
    JacobiConfig jacobi;
    LookaheadConfig lookahead;
    add_model_opts(gen, model_opts);
    gen->add_option("--server", server_desc, "tcp:HOST:PORT or sim:DELAY[:JITTER[:BPS]]")
        ->envname("SPLITF_ENDPOINT");
    gen->add_option("--prefix", prefix, "local layers before the wire");
    gen->add_option("--suffix", suffix, "local layers after the wire");
    gen->add_option("--dtype", gen_dtype, "wire dtype f16|f32");
    gen->add_option("--prompt", inline_prompt, "inline prompt: space-separated token ids");
    gen->add_option("--prompt-file", prompt_file, "one prompt per line, space-separated ids");
    gen->add_option("--max-new", max_new, "tokens to generate per prompt");
    gen->add_option("--mode", mode_str, "sequential|jacobi|lookahead");
    gen->add_option("--stats-out", stats_out, "per-step stats JSONL path");
    gen->add_option("--transcript", transcript_path, "record the wire session to this file");
    gen->add_option("--block-k", jacobi.block_k, "jacobi block size");
    gen->add_option("--ngram", lookahead.ngram_n, "lookahead n-gram size");
    gen->add_option("--window", lookahead.window_w, "lookahead window size");
    gen->add_option("--candidates", lookahead.max_candidates_g, "max pool candidates per step");

    // bench
    auto* bench = app.add_subcommand("bench", "RTT sweep with projection cross-validation");
    std::string rtts_csv = "20,40,80,120";
    double fit_rtt = 80.0;
    std::string bench_mode = "sequential";
    std::string bench_corpus = "builtin:random";
    int bench_max_new = 64;
    std::string bench_out;
    add_model_opts(bench, model_opts);
    bench->add_option("--rtts", rtts_csv, "injected RTT list, ms");
    bench->add_option("--fit-rtt", fit_rtt, "RTT to fit fixed overhead at");
    bench->add_option("--mode", bench_mode, "sequential|jacobi|lookahead");
    bench->add_option("--corpus", bench_corpus, "builtin:random|builtin:repetitive|file");
    bench->add_option("--max-new", bench_max_new, "tokens per prompt");
    bench->add_option("--prefix", prefix, "local layers before the wire");
    bench->add_option("--suffix", suffix, "local layers after the wire");
    bench->add_option("--out", bench_out, "output prefix for .csv/.json");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "n-gram/corpus ablation table");
    std::string corpora_csv = "builtin:repetitive,builtin:random";
    std::string ngrams_csv = "3,4,5";
    int ablate_max_new = 100;
    double ablate_rtt = 0.0;
    std::string ablate_out;
    add_model_opts(ablate, model_opts);
    ablate->add_option("--corpora", corpora_csv, "comma-separated corpus specs");
    ablate->add_option("--ngrams", ngrams_csv, "n-gram sizes to sweep");
    ablate->add_option("--max-new", ablate_max_new, "tokens per prompt");
    ablate->add_option("--rtt", ablate_rtt, "injected RTT in ms");
    ablate->add_option("--prefix", prefix, "local layers before the wire");
    ablate->add_option("--suffix", suffix, "local layers after the wire");
    ablate->add_option("--out", ablate_out, "output prefix for .csv/.json");

    // verify-quality
    auto* quality = app.add_subcommand("verify-quality",
                                       "sequential vs lookahead token identity report");
    std::string quality_corpora = "builtin:repetitive,builtin:random";
    int quality_max_new = 64;
    std::string quality_out;
    add_model_opts(quality, model_opts);
    quality->add_option("--corpora", quality_corpora, "comma-separated corpus specs");
    quality->add_option("--max-new", quality_max_new, "tokens per prompt");
    quality->add_option("--prefix", prefix, "local layers before the wire");
    quality->add_option("--suffix", suffix, "local layers after the wire");
    quality->add_option("--ngram", lookahead.ngram_n, "lookahead n-gram size");
    quality->add_option("--out", quality_out, "report JSON path");

    // project
    auto* project = app.add_subcommand("project", "throughput projection from the RTT model");
    double overhead_ms = 42.9;
    double acceptance = 1.0;
    std::string project_rtts = "20";
    project->add_option("--overhead", overhead_ms, "fixed overhead, ms")->required();
    project->add_option("--acceptance", acceptance, "acceptance rate (tokens per step)");
    project->add_option("--rtt", project_rtts, "target RTT(s), ms");

    // invert
    auto* invert = app.add_subcommand("invert", "inversion attack depth sweep");
    std::string depths_csv = "1,3,5,7";
    int n_samples = 1152;
    int seq_len = 32;
    uint64_t sweep_seed = 99;
    std::string invert_report;
    add_model_opts(invert, model_opts);
    invert->add_option("--depths", depths_csv, "split depths to sweep");
    invert->add_option("--samples", n_samples, "activation-token pairs to harvest");
    invert->add_option("--seq-len", seq_len, "tokens per corpus sequence");
    invert->add_option("--sweep-seed", sweep_seed, "corpus/training seed");
    invert->add_option("--report", invert_report, "output prefix for .json/.csv");

    // protocol-dump
    auto* dump = app.add_subcommand("protocol-dump", "replay and audit a recorded session");
    std::string dump_transcript;
    add_model_opts(dump, model_opts);
    dump->add_option("--transcript", dump_transcript, "transcript file")->required();

    // let --config appear after the subcommand name too
    for (auto* sub : app.get_subcommands(nullptr)) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (serve->parsed()) {
            return cmd_serve(model_opts, listen, layers, expiry_s, max_sessions, serve_dtype);
        }
        if (gen->parsed()) {
            return cmd_generate(model_opts, server_desc, prefix, suffix, gen_dtype, inline_prompt,
                                prompt_file, max_new, mode_str, stats_out, transcript_path, jacobi,
                                lookahead);
        }
        if (bench->parsed()) {
            return cmd_bench(model_opts, rtts_csv, fit_rtt, bench_mode, bench_corpus,
                             bench_max_new, prefix, suffix, bench_out, lookahead);
        }
        if (ablate->parsed()) {
            return cmd_ablate(model_opts, corpora_csv, ngrams_csv, ablate_max_new, ablate_rtt,
                              prefix, suffix, ablate_out);
        }
        if (quality->parsed()) {
            return cmd_verify_quality(model_opts, quality_corpora, quality_max_new, prefix, suffix,
                                      quality_out, lookahead);
        }
        if (project->parsed()) {
            return cmd_project(overhead_ms, acceptance, project_rtts);
        }
        if (invert->parsed()) {
            return cmd_invert(model_opts, depths_csv, n_samples, seq_len, sweep_seed,
                              invert_report);
        }
        if (dump->parsed()) {
            return cmd_protocol_dump(model_opts, dump_transcript);
        }
        std::fprintf(stderr, "no subcommand\n");
        return 2;
    } catch (const SplitError& e) {
        std::fprintf(stderr, "error (%s)\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
