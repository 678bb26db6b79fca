#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "splitf/client.hpp"
#include "splitf/decoding.hpp"
#include "splitf/server.hpp"
#include "splitf/transport.hpp"

namespace splitf {

// per_step_time = RTT + fixed_overhead; throughput projection follows from
// the acceptance rate being RTT-independent.
struct ProjectionModel {
    double fixed_overhead_ms = 0.0;
    double acceptance_rate = 1.0;
};

// wall - rtt. Throws ErrorKind::decomposition when wall < rtt (mis-measured RTT).
double decompose_fixed_overhead(double mean_step_wall_ms, double measured_rtt_ms);

// acceptance_rate / ((target_rtt + fixed_overhead) / 1000)
double project_throughput(const ProjectionModel& model, double target_rtt_ms);

// |projected - measured| / measured for each (rtt_ms, measured tok/s) run.
std::vector<double> cross_validate(const ProjectionModel& model,
                                   std::span<const std::pair<double, double>> measured_runs);

// rtt / cloud_compute; cloud_compute must be positive.
double rtt_to_compute_ratio(double rtt_ms, double cloud_compute_ms);

// ── Harness ──────────────────────────────────────────────────────────────

struct Corpus {
    std::string name;
    std::vector<std::vector<int>> prompts;
};

// Periodic token patterns (strong n-gram structure).
Corpus make_repetitive_corpus(const ModelConfig& cfg, int n_prompts, int prompt_len,
                              uint64_t seed);
// Uniform random tokens.
Corpus make_random_corpus(const ModelConfig& cfg, int n_prompts, int prompt_len, uint64_t seed);
// One prompt per line, space-separated token ids.
Corpus load_corpus_file(const std::string& path, const ModelConfig& cfg);
// "builtin:repetitive", "builtin:random", or a file path.
Corpus resolve_corpus(const std::string& spec, const ModelConfig& cfg, uint64_t seed);

// Whole split stack in one process behind a simulated link.
struct SimPipeline {
    std::unique_ptr<ServerEngine> engine;
    std::unique_ptr<Channel> channel;
    std::unique_ptr<SplitClient> client;
};
SimPipeline make_sim_pipeline(const Weights& weights, const SplitConfig& split,
                              const LatencyProfile& link,
                              std::optional<wire::WireDtype> server_dtype = std::nullopt,
                              std::shared_ptr<TranscriptWriter> transcript = nullptr);

// ── Ablation ─────────────────────────────────────────────────────────────

struct AblationRow {
    std::string corpus;
    std::string mode;
    int ngram_n = 0; // 0 for sequential
    double tok_s = 0.0;
    double acceptance = 0.0;
    double match_rate = 0.0;
    int tokens = 0;
    int steps = 0;
    double mean_step_wall_ms = 0.0;
    double break_even = 0.0; // per-step lookahead wall / per-step sequential wall
};

struct AblationConfig {
    std::vector<int> ngram_sizes{3, 4, 5};
    int max_new = 100;
    LatencyProfile link;
    SplitConfig split;
    LookaheadConfig lookahead;
};

std::vector<AblationRow> run_ablation(const Weights& weights,
                                      const std::vector<Corpus>& corpora,
                                      const AblationConfig& cfg);

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path);
void write_ablation_json(const std::vector<AblationRow>& rows, const std::string& path);

// ── RTT sweep + projection cross-validation ──────────────────────────────

struct BenchPoint {
    double injected_rtt_ms = 0.0;
    double measured_rtt_ms = 0.0;
    double mean_step_wall_ms = 0.0;
    double measured_tok_s = 0.0;
    double acceptance = 0.0;
    double projected_tok_s = 0.0;
    double rel_error = 0.0;
};

struct BenchReport {
    std::vector<BenchPoint> points;
    ProjectionModel model;
    double fit_rtt_ms = 0.0;
};

BenchReport run_rtt_bench(const Weights& weights, const SplitConfig& split, const Corpus& corpus,
                          int max_new, std::span<const double> rtts_ms, double fit_rtt_ms,
                          DecodeMode mode, const LookaheadConfig& lookahead);

void write_bench_csv(const BenchReport& report, const std::string& path);
void write_bench_json(const BenchReport& report, const std::string& path);

// ── Output quality verification ──────────────────────────────────────────

struct QualityRow {
    std::string prompt_name;
    bool tokens_identical = false; // lookahead vs sequential, f32 link
    bool matches_monolithic = false;
    double max_abs_logit_diff = 0.0;
    double self_ppl_sequential = 0.0;
    double self_ppl_lookahead = 0.0;
};

struct QualityReport {
    std::vector<QualityRow> rows;
    bool all_identical = false;
    // Fraction of generated positions where f16 wire quantization changed the
    // emitted token relative to the monolithic stream (reported, not gated).
    double f16_mismatch_fraction = 0.0;
};

QualityReport verify_quality(const Weights& weights, const std::vector<Corpus>& corpora,
                             int max_new, const SplitConfig& split,
                             const LookaheadConfig& lookahead);

void write_quality_json(const QualityReport& report, const std::string& path);

} // namespace splitf
