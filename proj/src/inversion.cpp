#include "splitf/inversion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace splitf {

namespace {

double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

void init_param(std::vector<double>& p, size_t n, int fan_in, std::mt19937_64& rng) {
    const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    p.resize(n);
    for (auto& v : p) v = a * (2.0 * uniform01(rng) - 1.0);
}

// z = W^T x + b with W stored [in x out] row-major.
void affine(std::span<const double> x, const std::vector<double>& w, const std::vector<double>& b,
            int in, int out, std::vector<double>& z) {
    z.assign(b.begin(), b.end());
    for (int i = 0; i < in; ++i) {
        const double xi = x[static_cast<size_t>(i)];
        if (xi == 0.0) continue;
        const double* wrow = w.data() + static_cast<size_t>(i) * out;
        for (int j = 0; j < out; ++j) z[static_cast<size_t>(j)] += xi * wrow[j];
    }
}

void relu_inplace(std::vector<double>& z) {
    for (auto& v : z) v = v > 0.0 ? v : 0.0;
}

void for_each_param_pair(AttackDecoder& d, AttackGradients& g,
                         const std::function<void(std::vector<double>&, std::vector<double>&)>& fn) {
    fn(d.w1, g.w1);
    fn(d.b1, g.b1);
    fn(d.w2, g.w2);
    fn(d.b2, g.b2);
    fn(d.w3, g.w3);
    fn(d.b3, g.b3);
}

AttackGradients zero_gradients(const AttackDecoder& d) {
    AttackGradients g;
    g.w1.assign(d.w1.size(), 0.0);
    g.b1.assign(d.b1.size(), 0.0);
    g.w2.assign(d.w2.size(), 0.0);
    g.b2.assign(d.b2.size(), 0.0);
    g.w3.assign(d.w3.size(), 0.0);
    g.b3.assign(d.b3.size(), 0.0);
    return g;
}

} // namespace

std::vector<ActivationSample> collect_activations(const Weights& weights,
                                                  const std::vector<std::vector<int>>& corpus,
                                                  int depth) {
    const ModelConfig& cfg = weights.config;
    if (depth < 0 || depth > cfg.n_layers) {
        throw SplitError(ErrorKind::input, "depth outside model layer count");
    }
    std::vector<ActivationSample> samples;
    for (const auto& seq : corpus) {
        if (seq.empty()) continue;
        HiddenStates h = embed(weights, seq, 0);
        if (depth > 0) {
            CacheBank bank(cfg, 0, depth);
            AttentionMask mask = build_attention_mask(h.seq, 0);
            h = forward_layers(weights, 0, depth, h, bank, mask);
        }
        for (int i = 0; i < h.seq; ++i) {
            ActivationSample s;
            s.activation.assign(h.row(i), h.row(i) + h.dim);
            s.token_id = seq[static_cast<size_t>(i)];
            s.depth = depth;
            samples.push_back(std::move(s));
        }
    }
    return samples;
}

std::vector<std::vector<int>> build_inversion_corpus(const Weights& weights, int n_sequences,
                                                     int seq_len, uint64_t seed) {
    const ModelConfig& cfg = weights.config;
    if (seq_len < 2 || seq_len > cfg.max_seq_len) {
        throw SplitError(ErrorKind::input, "bad inversion sequence length");
    }
    std::mt19937_64 rng(seed);
    std::vector<std::vector<int>> corpus;
    corpus.reserve(static_cast<size_t>(n_sequences));
    for (int s = 0; s < n_sequences; ++s) {
        if (s % 2 == 0) {
            // Model-generated continuation from a random first token.
            std::vector<int> prompt{static_cast<int>(rng() % static_cast<uint64_t>(cfg.vocab_size))};
            std::vector<int> gen = generate_monolithic(weights, prompt, seq_len - 1);
            prompt.insert(prompt.end(), gen.begin(), gen.end());
            corpus.push_back(std::move(prompt));
        } else {
            std::vector<int> seq(static_cast<size_t>(seq_len));
            for (auto& t : seq) t = static_cast<int>(rng() % static_cast<uint64_t>(cfg.vocab_size));
            corpus.push_back(std::move(seq));
        }
    }
    return corpus;
}

AttackDecoderConfig AttackDecoderConfig::for_model(const ModelConfig& cfg) {
    AttackDecoderConfig c;
    c.input_dim = cfg.hidden_dim;
    c.hidden_dim = 4 * cfg.hidden_dim;
    c.output_dim = cfg.vocab_size;
    return c;
}

AttackDecoder init_attack_decoder(const AttackDecoderConfig& cfg) {
    if (cfg.input_dim < 1 || cfg.hidden_dim < 1 || cfg.output_dim < 2) {
        throw SplitError(ErrorKind::config, "bad attack decoder dimensions");
    }
    AttackDecoder d;
    d.input_dim = cfg.input_dim;
    d.hidden_dim = cfg.hidden_dim;
    d.output_dim = cfg.output_dim;
    std::mt19937_64 rng(cfg.seed);
    init_param(d.w1, static_cast<size_t>(cfg.input_dim) * cfg.hidden_dim, cfg.input_dim, rng);
    init_param(d.b1, static_cast<size_t>(cfg.hidden_dim), cfg.input_dim, rng);
    init_param(d.w2, static_cast<size_t>(cfg.hidden_dim) * cfg.hidden_dim, cfg.hidden_dim, rng);
    init_param(d.b2, static_cast<size_t>(cfg.hidden_dim), cfg.hidden_dim, rng);
    init_param(d.w3, static_cast<size_t>(cfg.hidden_dim) * cfg.output_dim, cfg.hidden_dim, rng);
    init_param(d.b3, static_cast<size_t>(cfg.output_dim), cfg.hidden_dim, rng);
    return d;
}

std::vector<double> AttackDecoder::forward(std::span<const double> x) const {
    std::vector<double> z1, z2, z3;
    affine(x, w1, b1, input_dim, hidden_dim, z1);
    relu_inplace(z1);
    affine(z1, w2, b2, hidden_dim, hidden_dim, z2);
    relu_inplace(z2);
    affine(z2, w3, b3, hidden_dim, output_dim, z3);
    return z3;
}

double attack_batch_loss(const AttackDecoder& decoder,
                         std::span<const ActivationSample* const> batch, AttackGradients* grads) {
    if (batch.empty()) throw SplitError(ErrorKind::training, "empty batch");
    const int in = decoder.input_dim;
    const int hid = decoder.hidden_dim;
    const int out = decoder.output_dim;
    const double inv_batch = 1.0 / static_cast<double>(batch.size());

    std::vector<double> x(static_cast<size_t>(in));
    std::vector<double> z1, a1, z2, a2, z3;
    std::vector<double> dz3(static_cast<size_t>(out));
    std::vector<double> dz2(static_cast<size_t>(hid));
    std::vector<double> dz1(static_cast<size_t>(hid));

    double loss = 0.0;
    for (const ActivationSample* sample : batch) {
        for (int i = 0; i < in; ++i) x[static_cast<size_t>(i)] = sample->activation[static_cast<size_t>(i)];
        const int label = sample->token_id;
        if (label < 0 || label >= out) throw SplitError(ErrorKind::training, "label out of range");

        affine(x, decoder.w1, decoder.b1, in, hid, z1);
        a1 = z1;
        relu_inplace(a1);
        affine(a1, decoder.w2, decoder.b2, hid, hid, z2);
        a2 = z2;
        relu_inplace(a2);
        affine(a2, decoder.w3, decoder.b3, hid, out, z3);

        // log-softmax cross entropy
        double maxv = z3[0];
        for (double v : z3) maxv = std::max(maxv, v);
        double denom = 0.0;
        for (double v : z3) denom += std::exp(v - maxv);
        const double log_denom = std::log(denom);
        loss += -(z3[static_cast<size_t>(label)] - maxv - log_denom) * inv_batch;

        if (!grads) continue;

        for (int j = 0; j < out; ++j) {
            const double p = std::exp(z3[static_cast<size_t>(j)] - maxv) / denom;
            dz3[static_cast<size_t>(j)] = (p - (j == label ? 1.0 : 0.0)) * inv_batch;
        }
        for (int i = 0; i < hid; ++i) {
            const double a = a2[static_cast<size_t>(i)];
            if (a != 0.0) {
                double* grow = grads->w3.data() + static_cast<size_t>(i) * out;
                for (int j = 0; j < out; ++j) grow[j] += a * dz3[static_cast<size_t>(j)];
            }
        }
        for (int j = 0; j < out; ++j) grads->b3[static_cast<size_t>(j)] += dz3[static_cast<size_t>(j)];

        for (int i = 0; i < hid; ++i) {
            double acc = 0.0;
            const double* wrow = decoder.w3.data() + static_cast<size_t>(i) * out;
            for (int j = 0; j < out; ++j) acc += wrow[j] * dz3[static_cast<size_t>(j)];
            dz2[static_cast<size_t>(i)] = z2[static_cast<size_t>(i)] > 0.0 ? acc : 0.0;
        }
        for (int i = 0; i < hid; ++i) {
            const double a = a1[static_cast<size_t>(i)];
            if (a != 0.0) {
                double* grow = grads->w2.data() + static_cast<size_t>(i) * hid;
                for (int j = 0; j < hid; ++j) grow[j] += a * dz2[static_cast<size_t>(j)];
            }
        }
        for (int j = 0; j < hid; ++j) grads->b2[static_cast<size_t>(j)] += dz2[static_cast<size_t>(j)];

        for (int i = 0; i < hid; ++i) {
            double acc = 0.0;
            const double* wrow = decoder.w2.data() + static_cast<size_t>(i) * hid;
            for (int j = 0; j < hid; ++j) acc += wrow[j] * dz2[static_cast<size_t>(j)];
            dz1[static_cast<size_t>(i)] = z1[static_cast<size_t>(i)] > 0.0 ? acc : 0.0;
        }
        for (int i = 0; i < in; ++i) {
            const double xv = x[static_cast<size_t>(i)];
            if (xv != 0.0) {
                double* grow = grads->w1.data() + static_cast<size_t>(i) * hid;
                for (int j = 0; j < hid; ++j) grow[j] += xv * dz1[static_cast<size_t>(j)];
            }
        }
        for (int j = 0; j < hid; ++j) grads->b1[static_cast<size_t>(j)] += dz1[static_cast<size_t>(j)];
    }
    return loss;
}

TrainResult train_attack_decoder(const std::vector<ActivationSample>& samples,
                                 const AttackDecoderConfig& cfg) {
    if (samples.size() < 2) throw SplitError(ErrorKind::training, "need at least two samples");
    std::set<int> classes;
    for (const auto& s : samples) classes.insert(s.token_id);
    if (classes.size() < 2) {
        throw SplitError(ErrorKind::training, "training data has a single class");
    }

    TrainResult result;
    result.decoder = init_attack_decoder(cfg);
    AttackDecoder& d = result.decoder;

    std::vector<size_t> order(samples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

    std::vector<const ActivationSample*> batch;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        int n_batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            batch.clear();
            for (size_t i = start; i < end; ++i) batch.push_back(&samples[order[i]]);
            AttackGradients grads = zero_gradients(d);
            epoch_loss += attack_batch_loss(d, batch, &grads);
            n_batches += 1;
            for_each_param_pair(d, grads, [&](std::vector<double>& p, std::vector<double>& g) {
                for (size_t i = 0; i < p.size(); ++i) p[i] -= cfg.learning_rate * g[i];
            });
        }
        result.epoch_losses.push_back(epoch_loss / n_batches);
    }
    if (result.epoch_losses.size() >= 2 &&
        !(result.epoch_losses.back() < result.epoch_losses.front())) {
        throw SplitError(ErrorKind::training, "training failed to reduce the loss");
    }
    return result;
}

EvalResult evaluate_attack(const AttackDecoder& decoder,
                           const std::vector<ActivationSample>& samples) {
    EvalResult res;
    res.n = static_cast<int>(samples.size());
    if (samples.empty()) return res;
    std::vector<double> x(static_cast<size_t>(decoder.input_dim));
    int top1 = 0, top5 = 0;
    const int k = std::min(5, decoder.output_dim);
    std::vector<int> idx(static_cast<size_t>(decoder.output_dim));
    for (const auto& s : samples) {
        for (int i = 0; i < decoder.input_dim; ++i) x[static_cast<size_t>(i)] = s.activation[static_cast<size_t>(i)];
        const std::vector<double> logits = decoder.forward(x);
        std::iota(idx.begin(), idx.end(), 0);
        // lowest index wins ties
        std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
            if (logits[static_cast<size_t>(a)] != logits[static_cast<size_t>(b)]) {
                return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
            }
            return a < b;
        });
        if (idx[0] == s.token_id) top1 += 1;
        for (int r = 0; r < k; ++r) {
            if (idx[static_cast<size_t>(r)] == s.token_id) {
                top5 += 1;
                break;
            }
        }
    }
    res.top1 = static_cast<double>(top1) / res.n;
    res.top5 = static_cast<double>(top5) / res.n;
    return res;
}

double gradient_check_max_rel_error(const AttackDecoderConfig& cfg, int n_samples, uint64_t seed) {
    AttackDecoder decoder = init_attack_decoder(cfg);
    std::mt19937_64 rng(seed);
    std::vector<ActivationSample> samples(static_cast<size_t>(n_samples));
    for (auto& s : samples) {
        s.activation.resize(static_cast<size_t>(cfg.input_dim));
        for (auto& v : s.activation) v = static_cast<float>(2.0 * uniform01(rng) - 1.0);
        s.token_id = static_cast<int>(rng() % static_cast<uint64_t>(cfg.output_dim));
    }
    std::vector<const ActivationSample*> batch;
    for (const auto& s : samples) batch.push_back(&s);

    AttackGradients grads = zero_gradients(decoder);
    attack_batch_loss(decoder, batch, &grads);

    const double eps = 1e-5;
    double max_rel = 0.0;
    for_each_param_pair(decoder, grads, [&](std::vector<double>& p, std::vector<double>& g) {
        for (size_t i = 0; i < p.size(); ++i) {
            const double saved = p[i];
            p[i] = saved + eps;
            const double lp = attack_batch_loss(decoder, batch, nullptr);
            p[i] = saved - eps;
            const double lm = attack_batch_loss(decoder, batch, nullptr);
            p[i] = saved;
            const double numeric = (lp - lm) / (2.0 * eps);
            const double denom = std::max({std::abs(numeric), std::abs(g[i]), 1e-8});
            max_rel = std::max(max_rel, std::abs(numeric - g[i]) / denom);
        }
    });
    return max_rel;
}

std::vector<DepthReport> depth_sweep(const Weights& weights, std::span<const int> depths,
                                     const SweepConfig& cfg) {
    const std::vector<std::vector<int>> corpus =
        build_inversion_corpus(weights, cfg.n_sequences, cfg.seq_len, cfg.corpus_seed);
    std::vector<DepthReport> rows;
    for (int depth : depths) {
        std::vector<ActivationSample> samples = collect_activations(weights, corpus, depth);
        std::mt19937_64 rng(cfg.corpus_seed ^ (0xabcdull + static_cast<uint64_t>(depth)));
        std::shuffle(samples.begin(), samples.end(), rng);
        const size_t n_train = static_cast<size_t>(cfg.train_fraction * samples.size());
        std::vector<ActivationSample> train(samples.begin(), samples.begin() + n_train);
        std::vector<ActivationSample> test(samples.begin() + n_train, samples.end());

        AttackDecoderConfig dcfg = cfg.decoder;
        if (dcfg.input_dim == 0) dcfg = AttackDecoderConfig::for_model(weights.config);
        TrainResult trained = train_attack_decoder(train, dcfg);
        EvalResult eval = evaluate_attack(trained.decoder, test);

        DepthReport row;
        row.depth = depth;
        row.top1 = eval.top1;
        row.top5 = eval.top5;
        row.n_train = static_cast<int>(train.size());
        row.n_test = static_cast<int>(test.size());
        row.initial_train_loss = trained.epoch_losses.front();
        row.final_train_loss = trained.epoch_losses.back();
        rows.push_back(row);
    }
    return rows;
}

void write_sweep_json(const std::vector<DepthReport>& rows, double random_baseline,
                      const std::string& path) {
    nlohmann::json j;
    j["random_baseline_top1"] = random_baseline;
    j["random_baseline_top5"] = 5.0 * random_baseline;
    j["depths"] = nlohmann::json::array();
    for (const auto& r : rows) {
        j["depths"].push_back({{"depth", r.depth},
                               {"top1", r.top1},
                               {"top5", r.top5},
                               {"n_train", r.n_train},
                               {"n_test", r.n_test},
                               {"initial_train_loss", r.initial_train_loss},
                               {"final_train_loss", r.final_train_loss}});
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw SplitError(ErrorKind::input, "cannot open for write: " + path);
    os << j.dump(2) << "\n";
}

void write_sweep_csv(const std::vector<DepthReport>& rows, const std::string& path) {
    std::ostringstream body;
    body << "depth,top1,top5,n_train,n_test,initial_train_loss,final_train_loss\n";
    for (const auto& r : rows) {
        body << r.depth << ',' << r.top1 << ',' << r.top5 << ',' << r.n_train << ',' << r.n_test
             << ',' << r.initial_train_loss << ',' << r.final_train_loss << '\n';
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw SplitError(ErrorKind::input, "cannot open for write: " + path);
    os << body.str();
}

} // namespace splitf
