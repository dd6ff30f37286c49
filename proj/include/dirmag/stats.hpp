#pragma once

#include <cstddef>
#include <span>

namespace dirmag {

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;  // sample sd (n-1) / sqrt(n)
    std::size_t n = 0;
};

MeanSe mean_se(std::span<const double> xs);

struct TTest {
    double t = 0.0;
    double df = 0.0;
    double p = 1.0;  // two-sided
};

// Paired samples: a[i] and b[i] come from the same unit (seed). Tests
// mean(a - b) = 0.
TTest paired_t_test(std::span<const double> a, std::span<const double> b);

// Regularized incomplete beta I_x(a, b), continued-fraction evaluation.
double incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double df);
double student_t_two_sided_p(double t, double df);

// min(1, m * p)
double bonferroni(double p, std::size_t m);

} // namespace dirmag
