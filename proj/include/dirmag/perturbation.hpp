#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dirmag {

// Hidden-state perturbations at a fixed Euclidean displacement.
//
// The math runs in double on a copy of the activation row; callers writing
// back into float32 activations lose at most one rounding per element, far
// below the 0.01 matching tolerance.

enum class PerturbationKind { angular, magnitude };
enum class BranchPolicy { random, plus, minus };

std::string to_string(PerturbationKind k);
std::string to_string(BranchPolicy b);
PerturbationKind parse_perturbation_kind(const std::string& s);
BranchPolicy parse_branch_policy(const std::string& s);

using Rng = std::mt19937_64;

struct PerturbationSpec {
    PerturbationKind kind = PerturbationKind::angular;
    double delta = 1.0;
    BranchPolicy branch = BranchPolicy::random;  // magnitude only
    std::uint64_t seed = 0;

    void validate() const;
};

struct PerturbationOutcome {
    std::vector<double> perturbed;
    double achieved_delta = 0.0;
    // alpha for magnitude, theta in radians for angular.
    double applied_parameter = 0.0;
    // +1 / -1 for the magnitude branch taken, 0 for angular.
    int branch = 0;
};

struct Decomposition {
    double norm = 0.0;
    std::vector<double> direction;
};

inline constexpr double kMatchTolerance = 0.01;

Decomposition decompose(std::span<const double> h);

// alpha = 1 +/- delta / |h|.
double magnitude_alpha(double norm, double delta, int sign);
// theta = arccos(1 - delta^2 / (2 |h|^2)), argument clamped to [-1, 1].
double rotation_angle(double norm, double delta);

PerturbationOutcome magnitude_perturb(std::span<const double> h, const PerturbationSpec& spec, Rng& rng);
PerturbationOutcome angular_perturb(std::span<const double> h, const PerturbationSpec& spec, Rng& rng);
PerturbationOutcome perturb(std::span<const double> h, const PerturbationSpec& spec, Rng& rng);

// Deterministic pieces the random operations are built from.
PerturbationOutcome scale_with_branch(std::span<const double> h, double delta, int sign);
PerturbationOutcome rotate_toward(std::span<const double> h, std::span<const double> orthogonal_unit, double delta);

// Unit vector orthogonal to h: Gaussian draw, Gram-Schmidt against h-hat
// (applied twice), resampled when the projection swallows the draw.
std::vector<double> sample_orthogonal(std::span<const double> h, Rng& rng);
// Projects `raw` off h-hat and normalizes; throws DegenerateInputError when
// nothing is left.
std::vector<double> orthogonalize(std::span<const double> h, std::span<const double> raw);

struct DisplacementReport {
    double achieved = 0.0;
    bool pass = false;
};

DisplacementReport verify_displacement(std::span<const double> original, std::span<const double> perturbed,
                                       double target_delta, double tolerance = kMatchTolerance);
DisplacementReport verify_displacement(std::span<const float> original, std::span<const float> perturbed,
                                       double target_delta, double tolerance = kMatchTolerance);

// Independent stream per (seed, layer, token); SplitMix64 finalizer.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t layer, std::uint64_t token);

} // namespace dirmag
