#pragma once

#include <span>
#include <string>

namespace mvae {

struct TTestResult {
  double t = 0.0;
  double p_two_sided = 1.0;
  int dof = 0;
  double mean_difference = 0.0;
};

// Paired-sample t-test on d = a − b: t = mean(d) / (sd(d) / √n) with the
// n − 1 sample standard deviation, dof = n − 1. Throws "degenerate paired
// sample" when sd(d) = 0, and on fewer than two pairs or unequal lengths.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

// P(T > t) for T ~ Student-t(dof). Halves the two-sided p of a one-sided
// alternative mean(a − b) > 0.
double student_t_upper_tail(double t, double dof);
double one_sided_p(const TTestResult& r);

// Regularised incomplete beta I_x(a, b), continued fraction evaluated to a
// relative tolerance of 1e-12.
double regularized_incomplete_beta(double a, double b, double x);

// "*" iff p < 0.001. Throws for p outside [0, 1].
std::string significance_stars(double p);

}  // namespace mvae
