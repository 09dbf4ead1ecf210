#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mfc/cli.hpp"
#include "mfc/fem.hpp"
#include "mfc/measures.hpp"
#include "mfc/model.hpp"
#include "mfc/policy.hpp"

namespace mfc {

// Plain-loop twins of the OpenMP kernels. They share none of the scheduling
// code and exist so tests and the benchmark can certify that parallel
// execution never changes a result bit.
[[nodiscard]] McCost mc_cost_serial(const CoefficientBundle& bundle, const PolicyParams* policy,
                                    int K, int m, const Grid1D& grid, std::uint64_t seed);

[[nodiscard]] std::vector<ChaosRow> chaos_table_serial(const CoefficientBundle& bundle,
                                                       const PolicyParams* policy,
                                                       std::span<const int> N_list, int reps,
                                                       const Grid1D& grid, int m,
                                                       std::uint64_t seed);

}  // namespace mfc
