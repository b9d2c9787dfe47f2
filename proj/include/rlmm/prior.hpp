#pragma once
#include <cmath>
#include <rlmm/error.hpp>

namespace rlmm {

// log beta ~ N(mu, sigma2)
struct PopulationPrior
{
    double mu = 0.0;
    double sigma2 = 0.25;

    void validate() const
    {
        if (!std::isfinite(mu)) throw precondition_error("prior mean must be finite");
        if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) throw precondition_error("prior variance must be positive");
    }

    friend bool operator==(const PopulationPrior&, const PopulationPrior&) = default;
};

} // namespace rlmm
