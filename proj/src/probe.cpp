#include "dirmag/probe.hpp"

#include "dirmag/errors.hpp"
#include "dirmag/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

namespace dirmag {

std::string to_string(FeatureMode m) {
    switch (m) {
    case FeatureMode::full: return "full";
    case FeatureMode::direction_only: return "direction_only";
    case FeatureMode::magnitude_only: return "magnitude_only";
    }
    return "?";
}

FeatureMode parse_feature_mode(const std::string& s) {
    if (s == "full") return FeatureMode::full;
    if (s == "direction_only") return FeatureMode::direction_only;
    if (s == "magnitude_only") return FeatureMode::magnitude_only;
    throw ConfigError("unknown probe feature mode '" + s + "'");
}

std::vector<double> probe_features(std::span<const double> h, FeatureMode mode) {
    const double norm = l2_norm(h);
    switch (mode) {
    case FeatureMode::full: return {h.begin(), h.end()};
    case FeatureMode::magnitude_only: return {norm};
    case FeatureMode::direction_only: {
        std::vector<double> out(h.size(), 0.0);
        if (norm > 0.0) {
            for (std::size_t i = 0; i < h.size(); ++i) out[i] = h[i] / norm;
        }
        return out;
    }
    }
    return {};
}

namespace {

struct Design {
    std::size_t n = 0, f = 0;
    std::vector<double> x;  // standardized, [n x f]
};

void softmax_row(std::vector<double>& z) {
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double& v : z) {
        v = std::exp(v - mx);
        total += v;
    }
    for (double& v : z) v /= total;
}

// Largest eigenvalue of X^T X / n by power iteration (bias column included).
double design_spectral_bound(const Design& d) {
    std::vector<double> v(d.f + 1, 1.0 / std::sqrt(static_cast<double>(d.f + 1)));
    double lambda = 1.0;
    for (int it = 0; it < 50; ++it) {
        std::vector<double> w(d.f + 1, 0.0);
        for (std::size_t i = 0; i < d.n; ++i) {
            const double* row = &d.x[i * d.f];
            double proj = v[d.f];
            for (std::size_t j = 0; j < d.f; ++j) proj += row[j] * v[j];
            for (std::size_t j = 0; j < d.f; ++j) w[j] += proj * row[j];
            w[d.f] += proj;
        }
        double norm = 0.0;
        for (double& x : w) {
            x /= static_cast<double>(d.n);
            norm += x * x;
        }
        norm = std::sqrt(norm);
        if (!(norm > 0.0)) break;
        lambda = norm;
        for (std::size_t j = 0; j <= d.f; ++j) v[j] = w[j] / norm;
    }
    return lambda;
}

} // namespace

std::vector<double> ProbeModel::logits(std::span<const double> h) const {
    const auto raw = probe_features(h, feature_mode);
    if (raw.size() != n_features) throw DimensionError("probe input width does not match training features");
    std::vector<double> z(bias);
    for (std::size_t j = 0; j < n_features; ++j) {
        const double xj = (raw[j] - feature_mean[j]) / feature_scale[j];
        if (xj == 0.0) continue;
        for (std::size_t k = 0; k < n_classes; ++k) z[k] += xj * weights[j * n_classes + k];
    }
    return z;
}

int ProbeModel::predict(std::span<const double> h) const {
    const auto z = logits(h);
    return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

ProbeModel train_probe(const std::vector<std::vector<double>>& vectors, const std::vector<int>& labels,
                       FeatureMode mode, const ProbeHyper& hyper, std::size_t layer) {
    if (vectors.size() != labels.size()) throw InputError("probe vectors and labels differ in count");
    if (vectors.empty()) throw TrainingError("no probe training data");
    std::set<int> classes(labels.begin(), labels.end());
    if (*classes.begin() < 0) throw InputError("probe labels must be nonnegative");
    if (classes.size() < 2) throw TrainingError("probe training needs at least 2 classes");

    ProbeModel m;
    m.feature_mode = mode;
    m.layer = layer;
    m.n_classes = static_cast<std::size_t>(*classes.rbegin()) + 1;

    Design d;
    d.n = vectors.size();
    std::vector<std::vector<double>> feats;
    feats.reserve(d.n);
    for (const auto& v : vectors) {
        feats.push_back(probe_features(v, mode));
        if (!std::all_of(feats.back().begin(), feats.back().end(), [](double x) { return std::isfinite(x); })) {
            throw InputError("probe features must be finite");
        }
    }
    d.f = feats.front().size();
    m.n_features = d.f;
    m.feature_mean.assign(d.f, 0.0);
    m.feature_scale.assign(d.f, 1.0);
    for (const auto& f : feats) {
        if (f.size() != d.f) throw DimensionError("probe vectors have inconsistent widths");
        for (std::size_t j = 0; j < d.f; ++j) m.feature_mean[j] += f[j];
    }
    for (double& mu : m.feature_mean) mu /= static_cast<double>(d.n);
    std::vector<double> var(d.f, 0.0);
    for (const auto& f : feats) {
        for (std::size_t j = 0; j < d.f; ++j) var[j] += (f[j] - m.feature_mean[j]) * (f[j] - m.feature_mean[j]);
    }
    for (std::size_t j = 0; j < d.f; ++j) {
        const double sd = std::sqrt(var[j] / static_cast<double>(d.n));
        m.feature_scale[j] = sd > 1e-12 ? sd : 1.0;
    }
    d.x.resize(d.n * d.f);
    for (std::size_t i = 0; i < d.n; ++i) {
        for (std::size_t j = 0; j < d.f; ++j) d.x[i * d.f + j] = (feats[i][j] - m.feature_mean[j]) / m.feature_scale[j];
    }

    const std::size_t k = m.n_classes;
    const std::size_t n_params = d.f * k + k;
    // Softmax cross-entropy has curvature at most 1/2 * lambda_max(X^T X / n).
    const double lipschitz = 0.5 * design_spectral_bound(d) + hyper.l2;
    const double step = 1.0 / lipschitz;

    std::vector<double> params(n_params, 0.0), prev(n_params, 0.0), look(n_params, 0.0), grad(n_params, 0.0);
    std::vector<double> z(k);

    auto gradient = [&](const std::vector<double>& p, std::vector<double>& g) {
        std::fill(g.begin(), g.end(), 0.0);
        for (std::size_t i = 0; i < d.n; ++i) {
            const double* row = &d.x[i * d.f];
            for (std::size_t c = 0; c < k; ++c) z[c] = p[d.f * k + c];
            for (std::size_t j = 0; j < d.f; ++j) {
                if (row[j] == 0.0) continue;
                for (std::size_t c = 0; c < k; ++c) z[c] += row[j] * p[j * k + c];
            }
            softmax_row(z);
            z[static_cast<std::size_t>(labels[i])] -= 1.0;
            for (std::size_t j = 0; j < d.f; ++j) {
                if (row[j] == 0.0) continue;
                for (std::size_t c = 0; c < k; ++c) g[j * k + c] += row[j] * z[c];
            }
            for (std::size_t c = 0; c < k; ++c) g[d.f * k + c] += z[c];
        }
        const double inv_n = 1.0 / static_cast<double>(d.n);
        double norm = 0.0;
        for (std::size_t q = 0; q < n_params; ++q) {
            g[q] *= inv_n;
            if (q < d.f * k) g[q] += hyper.l2 * p[q];
            norm += g[q] * g[q];
        }
        return std::sqrt(norm);
    };

    // Nesterov-accelerated gradient descent with gradient-based restarts.
    double momentum_t = 1.0;
    for (m.epochs_run = 0; m.epochs_run < hyper.max_epochs; ++m.epochs_run) {
        m.final_grad_norm = gradient(params, grad);
        if (m.final_grad_norm < hyper.grad_tol) break;
        gradient(look, grad);
        std::vector<double> next(n_params);
        for (std::size_t q = 0; q < n_params; ++q) next[q] = look[q] - step * grad[q];
        const double next_t = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum_t * momentum_t));
        double restart = 0.0;
        for (std::size_t q = 0; q < n_params; ++q) restart += grad[q] * (next[q] - params[q]);
        if (restart > 0.0) {
            momentum_t = 1.0;
            look = next;
        } else {
            const double beta = (momentum_t - 1.0) / next_t;
            for (std::size_t q = 0; q < n_params; ++q) look[q] = next[q] + beta * (next[q] - params[q]);
            momentum_t = next_t;
        }
        prev = params;
        params = std::move(next);
    }

    m.weights.assign(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(d.f * k));
    m.bias.assign(params.begin() + static_cast<std::ptrdiff_t>(d.f * k), params.end());
    return m;
}

double probe_accuracy(const ProbeModel& model, const std::vector<std::vector<double>>& vectors,
                      const std::vector<int>& labels) {
    if (vectors.size() != labels.size() || vectors.empty()) throw InputError("probe accuracy needs labelled data");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < vectors.size(); ++i) correct += model.predict(vectors[i]) == labels[i] ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(vectors.size());
}

ProbeEvaluation evaluate_probe_by_sentence(const std::vector<std::vector<std::vector<double>>>& sentence_vectors,
                                           const std::vector<std::vector<int>>& sentence_labels, FeatureMode mode,
                                           const ProbeHyper& hyper, std::uint64_t split_seed, double train_fraction,
                                           std::size_t layer) {
    const std::size_t n = sentence_vectors.size();
    if (n != sentence_labels.size()) throw InputError("sentence vectors and labels differ in count");
    if (n < 2) throw InputError("sentence split needs at least 2 sentences");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(split_seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);

    std::vector<std::vector<double>> train_x, test_x;
    std::vector<int> train_y, test_y;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t s = order[i];
        if (sentence_vectors[s].size() != sentence_labels[s].size()) {
            throw InputError("sentence " + std::to_string(s) + " has mismatched vectors and labels");
        }
        auto& xs = i < n_train ? train_x : test_x;
        auto& ys = i < n_train ? train_y : test_y;
        xs.insert(xs.end(), sentence_vectors[s].begin(), sentence_vectors[s].end());
        ys.insert(ys.end(), sentence_labels[s].begin(), sentence_labels[s].end());
    }
    const ProbeModel model = train_probe(train_x, train_y, mode, hyper, layer);
    ProbeEvaluation out;
    out.n_train = train_x.size();
    out.n_test = test_x.size();
    out.train_accuracy = probe_accuracy(model, train_x, train_y);
    out.test_accuracy = probe_accuracy(model, test_x, test_y);
    return out;
}

} // namespace dirmag
