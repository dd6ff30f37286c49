#include "dirmag/perturbation.hpp"

#include "dirmag/errors.hpp"
#include "dirmag/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace dirmag {

std::string to_string(PerturbationKind k) { return k == PerturbationKind::angular ? "angular" : "magnitude"; }

std::string to_string(BranchPolicy b) {
    switch (b) {
    case BranchPolicy::random: return "random";
    case BranchPolicy::plus: return "plus";
    case BranchPolicy::minus: return "minus";
    }
    return "?";
}

PerturbationKind parse_perturbation_kind(const std::string& s) {
    if (s == "angular") return PerturbationKind::angular;
    if (s == "magnitude") return PerturbationKind::magnitude;
    throw ConfigError("unknown perturbation kind '" + s + "'");
}

BranchPolicy parse_branch_policy(const std::string& s) {
    if (s == "random") return BranchPolicy::random;
    if (s == "plus") return BranchPolicy::plus;
    if (s == "minus") return BranchPolicy::minus;
    throw ConfigError("unknown branch policy '" + s + "'");
}

void PerturbationSpec::validate() const {
    if (!(delta > 0.0) || !std::isfinite(delta)) throw PreconditionError("delta must be positive and finite");
}

Decomposition decompose(std::span<const double> h) {
    const double norm = l2_norm(h);
    if (!(norm > 0.0)) throw DegenerateInputError("cannot decompose a zero vector");
    Decomposition out{norm, std::vector<double>(h.size())};
    for (std::size_t i = 0; i < h.size(); ++i) out.direction[i] = h[i] / norm;
    return out;
}

double magnitude_alpha(double norm, double delta, int sign) { return 1.0 + (sign >= 0 ? 1.0 : -1.0) * delta / norm; }

double rotation_angle(double norm, double delta) {
    const double arg = 1.0 - (delta * delta) / (2.0 * norm * norm);
    return std::acos(std::clamp(arg, -1.0, 1.0));
}

namespace {

double displacement(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        s += diff * diff;
    }
    return std::sqrt(s);
}

} // namespace

PerturbationOutcome scale_with_branch(std::span<const double> h, double delta, int sign) {
    const double norm = l2_norm(h);
    if (!(norm > 0.0)) throw DegenerateInputError("magnitude perturbation of a zero vector");
    if (!(delta < norm)) throw PreconditionError("magnitude perturbation needs delta < |h|");
    PerturbationOutcome out;
    out.branch = sign >= 0 ? 1 : -1;
    out.applied_parameter = magnitude_alpha(norm, delta, out.branch);
    out.perturbed.resize(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) out.perturbed[i] = out.applied_parameter * h[i];
    out.achieved_delta = displacement(h, out.perturbed);
    return out;
}

PerturbationOutcome magnitude_perturb(std::span<const double> h, const PerturbationSpec& spec, Rng& rng) {
    spec.validate();
    int sign = 1;
    switch (spec.branch) {
    case BranchPolicy::plus: sign = 1; break;
    case BranchPolicy::minus: sign = -1; break;
    case BranchPolicy::random: sign = std::bernoulli_distribution(0.5)(rng) ? 1 : -1; break;
    }
    return scale_with_branch(h, spec.delta, sign);
}

std::vector<double> orthogonalize(std::span<const double> h, std::span<const double> raw) {
    if (h.size() != raw.size()) throw DimensionError("orthogonalize: length mismatch");
    const Decomposition dec = decompose(h);
    std::vector<double> v(raw.begin(), raw.end());
    const double raw_norm = l2_norm(raw);
    for (int pass = 0; pass < 2; ++pass) {
        const double proj = dot(v, dec.direction);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= proj * dec.direction[i];
    }
    const double n = l2_norm(v);
    if (!(n > 1e-8 * raw_norm) || !(n > 0.0)) throw DegenerateInputError("direction is parallel to h");
    for (double& x : v) x /= n;
    return v;
}

std::vector<double> sample_orthogonal(std::span<const double> h, Rng& rng) {
    if (h.size() < 2) throw DegenerateInputError("orthogonal complement of a 1-d vector is empty");
    if (!(l2_norm(h) > 0.0)) throw DegenerateInputError("cannot sample orthogonal to a zero vector");
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> g(h.size());
    for (int attempt = 0; attempt < 100; ++attempt) {
        for (double& x : g) x = gauss(rng);
        try {
            return orthogonalize(h, g);
        } catch (const DegenerateInputError&) {
            continue;
        }
    }
    throw DegenerateInputError("orthogonal sampling failed after 100 attempts");
}

PerturbationOutcome rotate_toward(std::span<const double> h, std::span<const double> orthogonal_unit, double delta) {
    if (h.size() != orthogonal_unit.size()) throw DimensionError("rotate_toward: length mismatch");
    const Decomposition dec = decompose(h);
    if (!(delta <= 2.0 * dec.norm)) throw PreconditionError("angular perturbation needs delta <= 2|h|");
    PerturbationOutcome out;
    out.applied_parameter = rotation_angle(dec.norm, delta);
    const double c = std::cos(out.applied_parameter);
    const double s = std::sin(out.applied_parameter);
    out.perturbed.resize(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) {
        out.perturbed[i] = dec.norm * (c * dec.direction[i] + s * orthogonal_unit[i]);
    }
    out.achieved_delta = displacement(h, out.perturbed);
    return out;
}

PerturbationOutcome angular_perturb(std::span<const double> h, const PerturbationSpec& spec, Rng& rng) {
    spec.validate();
    if (h.size() < 2) throw DegenerateInputError("angular perturbation needs d >= 2");
    const double norm = l2_norm(h);
    if (!(norm > 0.0)) throw DegenerateInputError("angular perturbation of a zero vector");
    if (!(spec.delta <= 2.0 * norm)) throw PreconditionError("angular perturbation needs delta <= 2|h|");
    const auto v = sample_orthogonal(h, rng);
    return rotate_toward(h, v, spec.delta);
}

PerturbationOutcome perturb(std::span<const double> h, const PerturbationSpec& spec, Rng& rng) {
    return spec.kind == PerturbationKind::angular ? angular_perturb(h, spec, rng) : magnitude_perturb(h, spec, rng);
}

DisplacementReport verify_displacement(std::span<const double> original, std::span<const double> perturbed,
                                       double target_delta, double tolerance) {
    if (original.size() != perturbed.size()) throw DimensionError("verify_displacement: length mismatch");
    DisplacementReport r;
    r.achieved = displacement(original, perturbed);
    r.pass = std::fabs(r.achieved - target_delta) <= tolerance;
    return r;
}

DisplacementReport verify_displacement(std::span<const float> original, std::span<const float> perturbed,
                                       double target_delta, double tolerance) {
    if (original.size() != perturbed.size()) throw DimensionError("verify_displacement: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < original.size(); ++i) {
        const double diff = static_cast<double>(original[i]) - perturbed[i];
        s += diff * diff;
    }
    DisplacementReport r;
    r.achieved = std::sqrt(s);
    r.pass = std::fabs(r.achieved - target_delta) <= tolerance;
    return r;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t layer, std::uint64_t token) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(seed) ^ layer) ^ (token * 0x2545f4914f6cdd1dull));
}

} // namespace dirmag
