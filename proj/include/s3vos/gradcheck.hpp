#pragma once

// Finite-difference verification of analytic gradients for every
// differentiable operation and for the composed two-frame training pass.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "s3vos/autograd.hpp"
#include "s3vos/config.hpp"

namespace s3vos {

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::size_t coordinates = 0;
  /// Coordinates dropped because the difference quotient changed with the
  /// step size (the step crossed a kink); replaced by fresh samples.
  std::size_t unstable_skipped = 0;
};

/// A scalar function of some leaves. `loss` must recompute from the leaves'
/// current values every call and be deterministic.
struct GradCheckCase {
  std::vector<Var> leaves;
  std::function<Var()> loss;
};

struct GradCheckEntry {
  std::string name;
  /// Tolerance multiplier relative to the requested op tolerance; composed
  /// passes use 10 (1e-4 -> 1e-3).
  double tol_scale = 1.0;
  std::function<GradCheckCase(Rng&)> build;
};

/// Every registered check, in a fixed order. With `include_faulty`, a
/// deliberately wrong-gradient op ("faulty_square") is appended as a
/// negative control.
std::vector<GradCheckEntry> gradcheck_registry(bool include_faulty = false);

/// Central differences with step h = 1e-5; relative error
/// |a-b| / max(|a|,|b|,1e-8). Leaves larger than `max_coords` are checked
/// on a seeded subset that always includes the largest analytic entry.
/// A mismatching coordinate whose estimate at h/10 differs from the one at
/// h by more than tol/2 is treated as straddling a kink and resampled.
GradCheckReport run_grad_check(const std::string& name, const GradCheckCase& c, double tol,
                               std::size_t max_coords, Rng& rng);

/// Runs one registered check by name; throws std::invalid_argument for an
/// unregistered name.
GradCheckReport grad_check(const std::string& op_name, double tol = 1e-4,
                           std::uint64_t seed = 0, bool include_faulty = false);

/// Runs the whole registry (or those whose name equals `only` when set).
std::vector<GradCheckReport> grad_check_all(double tol = 1e-4, std::uint64_t seed = 0,
                                            bool include_faulty = false,
                                            const std::string& only = "");

/// Small configuration used for model-level checks.
ModelConfig tiny_model_config();

}  // namespace s3vos
