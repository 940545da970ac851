#ifndef EVIFUSE_DST_HPP
#define EVIFUSE_DST_HPP

// Dempster-Shafer algebra on the binary frame Omega = {0, 1}.
// Mass may sit on {0}, {1} or Omega; mass on the empty set is identically
// zero and never stored. Bayesian masses are the special case mOmega == 0.

#include <cmath>
#include <string>

#include "evifuse/error.hpp"

namespace evifuse::dst {

inline constexpr double kTotalConflictEps = 1e-12;

struct BinaryMass {
    double m0 = 0.0;      // mass on {0}
    double m1 = 0.0;      // mass on {1}
    double mOmega = 1.0;  // mass on Omega

    [[nodiscard]] bool valid(double tol = 1e-9) const {
        return m0 >= 0.0 && m1 >= 0.0 && mOmega >= 0.0 &&
               std::abs(m0 + m1 + mOmega - 1.0) <= tol;
    }
};

struct FusedMass {
    BinaryMass mass;
    double conflict = 0.0;  // kappa, total mass on contradictory pairs
};

// Bayesian mass from a foreground probability.
inline BinaryMass mass_from_prob(double p) {
    if (!(p >= 0.0 && p <= 1.0)) {
        throw domain_error("mass_from_prob: probability outside [0,1]: " + std::to_string(p));
    }
    return BinaryMass{1.0 - p, p, 0.0};
}

// Total ignorance; the neutral element of Dempster's rule.
inline BinaryMass vacuous() { return BinaryMass{0.0, 0.0, 1.0}; }

// Pignistic probability of {1}: residual Omega mass split evenly.
inline double prob_from_mass(const BinaryMass& m) { return m.m1 + 0.5 * m.mOmega; }

// Dempster's rule of combination. Conflict kappa is the mass the two
// sources place on disjoint singletons; the remainder is renormalized.
inline FusedMass combine(const BinaryMass& a, const BinaryMass& b) {
    const double kappa = a.m0 * b.m1 + a.m1 * b.m0;
    if (kappa >= 1.0 - kTotalConflictEps) {
        throw conflict_error("combine: totally conflicting evidence (kappa = " +
                             std::to_string(kappa) + ")");
    }
    const double norm = 1.0 / (1.0 - kappa);
    FusedMass out;
    out.mass.m0 = (a.m0 * b.m0 + a.m0 * b.mOmega + a.mOmega * b.m0) * norm;
    out.mass.m1 = (a.m1 * b.m1 + a.m1 * b.mOmega + a.mOmega * b.m1) * norm;
    out.mass.mOmega = (a.mOmega * b.mOmega) * norm;
    out.conflict = kappa;
    return out;
}

}  // namespace evifuse::dst

#endif
