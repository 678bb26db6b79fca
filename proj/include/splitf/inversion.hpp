#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "splitf/tinyformer.hpp"

namespace splitf {

// One (activation, token) pair harvested at the split boundary: the hidden
// row after `depth` layers, labeled with the input token at that position.
struct ActivationSample {
    std::vector<float> activation;
    int token_id = 0;
    int depth = 0;
};

// Runs each sequence through layers [0, depth) with a causal mask and records
// every position. depth 0 yields raw embeddings.
std::vector<ActivationSample> collect_activations(const Weights& weights,
                                                  const std::vector<std::vector<int>>& corpus,
                                                  int depth);

// Half model-generated continuations, half uniform-random sequences.
std::vector<std::vector<int>> build_inversion_corpus(const Weights& weights, int n_sequences,
                                                     int seq_len, uint64_t seed);

struct AttackDecoderConfig {
    int input_dim = 0;  // set from hidden_dim
    int hidden_dim = 0; // default 4 * input_dim
    int output_dim = 0; // vocab_size
    double learning_rate = 0.2;
    int epochs = 40;
    int batch_size = 32;
    uint64_t seed = 7;

    static AttackDecoderConfig for_model(const ModelConfig& cfg);
};

// 3-layer rectifier MLP in double precision; forward/backward are hand-rolled
// so the gradients can be checked against central finite differences.
struct AttackDecoder {
    int input_dim = 0;
    int hidden_dim = 0;
    int output_dim = 0;
    std::vector<double> w1, b1; // [in x hid], [hid]
    std::vector<double> w2, b2; // [hid x hid], [hid]
    std::vector<double> w3, b3; // [hid x out], [out]

    std::vector<double> forward(std::span<const double> x) const;
};

struct AttackGradients {
    std::vector<double> w1, b1, w2, b2, w3, b3;
};

AttackDecoder init_attack_decoder(const AttackDecoderConfig& cfg);

// Mean cross-entropy over the batch; gradients accumulated when grads != nullptr.
double attack_batch_loss(const AttackDecoder& decoder,
                         std::span<const ActivationSample* const> batch,
                         AttackGradients* grads);

struct TrainResult {
    AttackDecoder decoder;
    std::vector<double> epoch_losses;
};

TrainResult train_attack_decoder(const std::vector<ActivationSample>& samples,
                                 const AttackDecoderConfig& cfg);

struct EvalResult {
    double top1 = 0.0;
    double top5 = 0.0;
    int n = 0;
};

EvalResult evaluate_attack(const AttackDecoder& decoder,
                           const std::vector<ActivationSample>& samples);

// Max relative error of analytic vs. central-difference gradients on a small
// decoder and batch; the correctness oracle for the backward pass.
double gradient_check_max_rel_error(const AttackDecoderConfig& cfg, int n_samples, uint64_t seed);

struct DepthReport {
    int depth = 0;
    double top1 = 0.0;
    double top5 = 0.0;
    int n_train = 0;
    int n_test = 0;
    double final_train_loss = 0.0;
    double initial_train_loss = 0.0;
};

struct SweepConfig {
    int n_sequences = 36;
    int seq_len = 32;
    uint64_t corpus_seed = 99;
    double train_fraction = 0.8;
    AttackDecoderConfig decoder; // input/output dims filled per model
};

std::vector<DepthReport> depth_sweep(const Weights& weights, std::span<const int> depths,
                                     const SweepConfig& cfg);

void write_sweep_json(const std::vector<DepthReport>& rows, double random_baseline,
                      const std::string& path);
void write_sweep_csv(const std::vector<DepthReport>& rows, const std::string& path);

} // namespace splitf
