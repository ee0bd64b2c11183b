#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpcanet/net.hpp"

namespace cpcanet {

struct GradcheckReport {
    std::string scope;
    double worst = 0.0;
    double threshold = 0.0;
    std::vector<std::pair<std::string, double>> per_case;

    bool passed() const { return worst < threshold; }
};

/// Central-difference check of every primitive on small random graphs,
/// 10 seeds per primitive. Threshold 1e-5.
GradcheckReport gradcheck_primitives(std::uint64_t seed);

/// The unfolded solver composed with the CPCA penalty, differentiated
/// against the covariances and step sizes. Threshold 1e-5.
GradcheckReport gradcheck_unfold(std::size_t d, std::size_t stages, std::uint64_t seed);

/// The whole training loss at toy dimensions, every bound input.
/// Threshold 1e-4.
GradcheckReport gradcheck_full(const Dims& dims, std::size_t batch_per_domain,
                               std::uint64_t seed);

}  // namespace cpcanet
