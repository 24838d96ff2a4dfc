#pragma once

// Randomized property suites shared by the unit tests, the acceptance binary
// and `evim verify`. Every function returns the worst measured error; the
// caller owns the tolerance.

#include <cstdint>
#include <string>
#include <vector>

namespace evim::verify {

/// HSM-SSD vs the NC-SSD layer with N = L, A⊙B = I and diagonal C, with
/// layer norm and DWConv bypassed. Max relative error over the output.
double equivalence_error(std::uint64_t seed, std::size_t tokens, std::size_t channels);

/// (A⊙B)ᵀ(x·W) against ((A⊙B)ᵀx)·W.
double factorization_error(std::uint64_t seed);
/// Additivity and homogeneity of h_in(x) = (A⊙B)ᵀx at fixed A, B.
double linearity_error(std::uint64_t seed);

/// Masked-matrix causal SSD against the recurrent scan, random L in [1, 16].
double causal_forms_error(std::uint64_t seed);

struct PermutationError {
  double hidden = 0.0;  // h after permuting tokens vs h before
  double output = 0.0;  // permuted x_out rows vs x_out after permuting
};
/// Token permutation through hsm_ssd_layer with DWConv bypassed.
PermutationError permutation_error(std::uint64_t seed);

struct GradcheckSummary {
  double primitives = 0.0;  // worst over every registered primitive
  std::string worst_primitive;
  double mixer = 0.0;  // composed hsm_ssd_layer, all parameters and input
  double beta_shift = 0.0;  // |∂z/∂β · 𝟙| for the fusion head
};
GradcheckSummary gradcheck_suite(std::uint64_t seed);

struct PropertyLine {
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// Suites: "prop1" (the mixing equivalence), "gradcheck", "invariants" or
/// "all". Throws std::invalid_argument on an unknown suite name.
std::vector<PropertyLine> run_suite(const std::string& suite, std::uint64_t seed);

}  // namespace evim::verify
