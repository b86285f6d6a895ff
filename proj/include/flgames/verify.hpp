#pragma once

// Property and oracle checks behind `flgames verify`: finite-difference
// gradients, generator statistics and the protocol invariants.

#include <cstdint>
#include <string>
#include <vector>

namespace flgames {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double value = 0.0;  // the measured quantity (error, z-score, ...)
};

// Max relative error between analytic and central-difference gradients of
// the composed loss: phi [8,6] feeding 4-class predictors [6,5,4], with
// opponents and opponent buffer averages in the ensemble. Covers the
// candidate predictor, phi through the mean ensemble, and a bare [8,6,4] MLP.
CheckResult check_gradients(std::uint64_t seed, double tolerance = 1e-4);

// Label-noise and spurious-flip rates of every generator at n samples,
// each within `sigmas` binomial standard deviations.
std::vector<CheckResult> check_generator_statistics(std::uint64_t seed, std::size_t n = 100000,
                                                    double sigmas = 3.0);

CheckResult check_round_parity(std::uint64_t seed);
CheckResult check_fifo_buffer(std::uint64_t seed);
CheckResult check_snapshot_law(std::uint64_t seed);
CheckResult check_single_client_schedules(std::uint64_t seed);
CheckResult check_fedsgd_equivalence(std::uint64_t seed, double tolerance = 1e-12);
CheckResult check_stop_warm_start();

std::vector<CheckResult> run_property_suite(std::uint64_t seed);

}  // namespace flgames
