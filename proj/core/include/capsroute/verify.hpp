#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace capsroute {

// 64-bit self-checks behind `capsroute verify`: finite-difference gradient
// checks, routing against a scalar transcription of both loop orders, and
// normalizer properties over random rows.

struct CheckResult {
  std::string name;
  std::string kind;  // gradient, oracle or property
  bool passed = false;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t samples = 0;
  double seconds = 0.0;
  std::string detail;
};

struct VerifyOptions {
  std::uint64_t seed = 1;
  /// Run only these checks (all when empty). Unknown names raise
  /// std::invalid_argument.
  std::vector<std::string> only;
  /// Negates the analytic gradient of the named gradient check before it is
  /// compared. Used to confirm the harness catches a broken backward pass.
  std::string sign_flip;
  std::size_t routing_instances = 100;
  std::size_t normalizer_rows = 10000;
};

/// Every registered check in run order.
std::vector<std::string> verify_check_names();

std::vector<CheckResult> run_verification(const VerifyOptions& options = {});

/// One line per check: PASS/FAIL, name, max error, tolerance, time.
std::string format_report(std::span<const CheckResult> results);

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Central differences of `loss` with respect to values[k] for each k in
/// `indices`, compared against analytic[k]. `values` is restored afterwards.
/// Returns the largest relative error.
double finite_difference_check(std::span<double> values, std::span<const double> analytic,
                               std::span<const std::size_t> indices, const std::function<double()>& loss,
                               double eps = 1e-5);

// Scalar transcription of the two routing tables for one sample. u_hat is
// [I x J x D]; results hold v [J x D] and the coefficients and logits after the
// last loop iteration, [I x J].
struct ScalarRouting {
  std::vector<double> v;
  std::vector<double> b;
  std::vector<double> c;
};

ScalarRouting scalar_route_softmax(std::span<const double> u_hat, std::size_t I, std::size_t J, std::size_t D,
                                   int iterations);

ScalarRouting scalar_route_maxmin(std::span<const double> u_hat, std::size_t I, std::size_t J, std::size_t D,
                                  int iterations, double p = 0.0, double q = 1.0);

}  // namespace capsroute
