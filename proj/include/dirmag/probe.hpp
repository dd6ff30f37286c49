#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dirmag {

enum class FeatureMode { full, direction_only, magnitude_only };

std::string to_string(FeatureMode m);
FeatureMode parse_feature_mode(const std::string& s);

// full -> h, direction_only -> h / |h|, magnitude_only -> {|h|}.
std::vector<double> probe_features(std::span<const double> h, FeatureMode mode);

struct ProbeHyper {
    double l2 = 1e-3;
    std::size_t max_epochs = 3000;
    double grad_tol = 1e-4;
};

// Multinomial logistic regression over standardized probe features.
struct ProbeModel {
    FeatureMode feature_mode = FeatureMode::full;
    std::size_t layer = 0;
    std::size_t n_features = 0;
    std::size_t n_classes = 0;
    std::vector<double> weights;  // [n_features x n_classes], row-major
    std::vector<double> bias;     // [n_classes]
    std::vector<double> feature_mean;
    std::vector<double> feature_scale;
    std::size_t epochs_run = 0;
    double final_grad_norm = 0.0;

    // Class scores for a raw hidden vector (features are derived internally).
    std::vector<double> logits(std::span<const double> h) const;
    int predict(std::span<const double> h) const;
};

// `vectors` are raw hidden states; labels are classes 0..K-1.
ProbeModel train_probe(const std::vector<std::vector<double>>& vectors, const std::vector<int>& labels,
                       FeatureMode mode, const ProbeHyper& hyper = {}, std::size_t layer = 0);

double probe_accuracy(const ProbeModel& model, const std::vector<std::vector<double>>& vectors,
                      const std::vector<int>& labels);

struct ProbeEvaluation {
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
};

// Splits sentences (not tokens) into train/test with a fixed seed, trains on
// the train tokens, reports held-out token accuracy.
ProbeEvaluation evaluate_probe_by_sentence(const std::vector<std::vector<std::vector<double>>>& sentence_vectors,
                                           const std::vector<std::vector<int>>& sentence_labels, FeatureMode mode,
                                           const ProbeHyper& hyper, std::uint64_t split_seed,
                                           double train_fraction = 0.8, std::size_t layer = 0);

} // namespace dirmag
