#pragma once

#include <array>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "kam/lattice.hpp"
#include "kam/models.hpp"
#include "kam/poly.hpp"

namespace kam {

// ---------------------------------------------------------------------------
// Birkhoff normal form around the elliptic fixed point: removes the cubic
// (bbm) resp. the nonresonant quartic (gpc) part of the Hamiltonian by
// polynomial Lie transforms and extracts the resonant twist data that seeds
// the KAM iteration: omega0(zeta) = lambda_tangent + twist * zeta and
// Omega0(zeta) = lambda_normal + coupling * zeta.
// ---------------------------------------------------------------------------

/// Cubic divisor lambda_j + lambda_k + lambda_l of the bbm mode triple
/// j + k + l = 0 (signed, nonzero modes). Cross-checked against the closed
/// product form
///   -sign(jkl) d_j^2 d_k^2 d_l^2 (3 + tau^2 (k^2 + kl + l^2)),
/// d_m the bbm weight, which never vanishes on zero-sum triples; throws
/// std::domain_error when the selection rule is violated or the two
/// evaluations disagree.
double cubic_divisor(int j, int k, int l, double tau);

/// Solve R + {H0, F} = 0 termwise for H0 = sum_m lambda[m] z_m zbar_m:
/// F_t = R_t / (i D_t) with D_t = sum_m lambda[m] (alpha_m - beta_m), indexed
/// by slot site. Throws std::domain_error listing every term whose divisor
/// magnitude is <= floor. `min_divisor` (optional) receives the smallest
/// |D_t| encountered.
Poly third_order_generator(const Poly& cubic, const Eigen::VectorXd& lambda, double floor = 1e-9,
                           double* min_divisor = nullptr);

/// Closed form of the resonant quartic table for bbm (modes k, l >= 1):
///   k == l : 1 / (12 T (tau^2 k^2 + 1))
///   k != l : -(1/T) tau^2 k l / ((tau^2(k^2+kl+l^2)+3)(tau^2(k^2-kl+l^2)+3)).
/// The assembled (1/2){R, F3} carries this value on z_k^2 zbar_k^2 and twice
/// it on z_k zbar_k z_l zbar_l (ordered-pair double count).
double resonant_quartic_bbm(int k, int l, double tau, double T);

/// Partition of a homogeneous quartic against H0 = sum lambda_m z_m zbar_m:
///   hat       - no tangent-site factor; left untouched,
///   resonant  - tangent-touching with matching z/zbar exponents per site,
///   generator - F4 removing the remaining tangent-touching part,
///   unresolved- terms whose divisor fell below the floor (witnessed).
struct QuarticReduction {
    Poly resonant;
    Poly generator;
    Poly hat;
    Poly unresolved;
    double min_divisor = std::numeric_limits<double>::infinity();
    std::vector<std::string> witnesses;
};
QuarticReduction fourth_order_reduction(const Poly& quartic, const Eigen::VectorXd& lambda,
                                        const Lattice& lat, const std::vector<int>& tangent_ids,
                                        double floor = 1e-9);

/// Twist matrix d omega0 / d zeta for bbm tangent modes J (positive, sorted):
/// entries 2 * resonant_quartic_bbm(j_k, j_l); the diagonal equals
/// 1 / (6 T (tau^2 j_k^2 + 1)).
Eigen::MatrixXd bbm_twist_matrix(double tau, double T, const std::vector<int>& J);

/// Coupling d Omega0 / d zeta over the normal lattice (rows) and J (columns):
/// entries 2 * resonant_quartic_bbm(i, j_l); rows decay like 1/i^2. These are
/// whole-lattice values: the assembly on a truncated lattice reproduces row i
/// only when the generating triples fit, i.e. i + max(J) <= radius.
Eigen::MatrixXd bbm_coupling_matrix(double tau, double T, const Lattice& normal,
                                    const std::vector<int>& J);

/// (a, b) with a = (3/8)^d and b = (5/8)^d - a: the diagonal and off-diagonal
/// strengths of the gpc resonant table after dividing out the box volume T.
std::pair<double, double> gpc_constants(int d);

/// gpc twist matrix B (per unit box volume): diagonal a, off-diagonal
/// (b/2)(sqrt(lam_k/lam_l) + sqrt(lam_l/lam_k)). d omega0/d zeta = T * B.
Eigen::MatrixXd gpc_twist_matrix(const std::vector<double>& tau, const std::vector<Site>& J);

/// gpc coupling matrix S (per unit box volume) over the normal lattice (rows)
/// and J (columns): entries (b/2)(sqrt(lam_i/lam_l) + sqrt(lam_l/lam_i)).
Eigen::MatrixXd gpc_coupling_matrix(const std::vector<double>& tau, const Lattice& normal,
                                    const std::vector<Site>& J);

struct BirkhoffOptions {
    double divisor_floor = 1e-9;
    int max_zdeg = 5;       // cap for the composed Lie transforms (6 for gpc)
    int lie_order = 6;      // truncation order of each Lie series
    bool with_remainder = true;
    double p = 1.0;
};

/// Everything the KAM iteration needs from the normal form: lattices, twist
/// data, the generators, and the split quartic. zeta are the tangent actions;
/// xi = xi_offset + twist * zeta is the frequency parameterization.
struct NormalFormPackage {
    std::string equation;  // "bbm" | "gpc"
    double varpi = 0.0;
    double kappa = 1.0;
    std::vector<double> tau;
    double T = 0.0;  // box volume (bbm: period)
    double p = 1.0;

    Lattice full;                  // truncated lattice including tangent sites
    Lattice normal;                // full minus the tangent sites
    std::vector<Site> J;           // tangent sites, fixed order = angle index
    std::vector<int> tangent_ids;  // ids of J inside `full`

    Eigen::VectorXd lambda_tangent;  // linear frequencies on J
    Eigen::VectorXd lambda_normal;   // linear frequencies on `normal`
    Eigen::VectorXd lambda_full;     // slot frequencies on `full`

    Eigen::MatrixXd twist;      // N x N
    Eigen::MatrixXd coupling;   // n x N
    Eigen::VectorXd xi_offset;  // bbm: lambda_tangent; gpc: 0
    double twist_det = 0.0;
    double twist_cond = 0.0;

    Poly f3;         // cubic generator (empty for gpc)
    Poly f4;         // quartic generator
    Poly resonant;   // tangent-touching resonant quartic (the twist source)
    Poly hat;        // tangent-free quartic, untouched
    Poly remainder;  // degree >= 5 leftovers of the composed transform
    double cubic_min_divisor = std::numeric_limits<double>::infinity();
    double quartic_min_divisor = std::numeric_limits<double>::infinity();
    double dropped_mass = 0.0;  // |coeff| mass truncated during composition
    std::vector<std::string> notes;

    Eigen::VectorXd omega0(const Eigen::VectorXd& zeta) const {
        return lambda_tangent + twist * zeta;
    }
    Eigen::VectorXd Omega0(const Eigen::VectorXd& zeta) const {
        return lambda_normal + coupling * zeta;
    }
    Eigen::VectorXd xi_of(const Eigen::VectorXd& zeta) const { return xi_offset + twist * zeta; }
    Eigen::VectorXd zeta_of(const Eigen::VectorXd& xi) const {
        return twist.partialPivLu().solve(xi - xi_offset);
    }
    Eigen::VectorXd Omega0_of_xi(const Eigen::VectorXd& xi) const { return Omega0(zeta_of(xi)); }
};

/// Normal form of the truncated bbm Hamiltonian: removes the cubic with F3,
/// splits (1/2){R, F3} into resonant / hat / F4-removable, and composes the
/// two time-1 flows to collect the remainder. J lists positive tangent modes.
NormalFormPackage bbm_normal_form(double tau, double T, int radius, const std::vector<int>& J,
                                  const BirkhoffOptions& opt = {});

/// Normal form of the truncated gpc Hamiltonian (no cubic): splits the
/// quartic against the tangent set J (components > L apart from the bulk) and
/// removes the nonresonant part with F4. Twist data follows the closed-form
/// tables T*B and T*S; the assembled resonant coefficients carry the usual
/// symmetrization multiplicities on top (see tests).
NormalFormPackage gpc_normal_form(const std::vector<double>& tau, int radius,
                                  const std::vector<Site>& J, double L,
                                  const BirkhoffOptions& opt = {});

/// Action-angle reduction at actions zeta: substitutes
/// z_{j_t} = sqrt(zeta_t + y_t) e^{-i x_t}, zbar_{j_t} = sqrt(zeta_t + y_t) e^{+i x_t}
/// on tangent slots (odd powers expanded to y_order in y with the cut mass
/// recorded), reindexes normal slots, and splits off
///   H0 = omega . y + sum_j Omega_j z_j zbar_j
/// with the assembled angle-free coefficients; everything else lands in R0.
struct ActionAngleForm {
    int nangles = 0;
    Lattice normal;
    Poly H0;
    Poly R0;
    Eigen::VectorXd omega;   // assembled y-linear coefficients
    Eigen::VectorXd Omega;   // assembled z zbar diagonal
    double constant = 0.0;   // dropped zeta-energy offset
    double sqrt_truncation = 0.0;
    std::string warning;  // set when zeta leaves [sqrt(eps0), 2 sqrt(eps0)]^N
};
ActionAngleForm action_angle_reduce(const NormalFormPackage& pkg, const Eigen::VectorXd& zeta,
                                    int y_order = 2, double eps0 = 1e-4);

/// Margin of the directional nonresonance check: measured = min over tangent
/// directions t of 1 - lmax * max_i |(coupling * twist^{-1})_{it}|, the slack
/// of |<l, d Omega0/d xi . e_t>| < |k_t| for |l| <= lmax. printed_bound is
/// the closed-form gpc value (a+(N-2)b)/(a+(N-1)b), NaN for bbm.
struct DirectionalMargin {
    double measured = 0.0;
    double printed_bound = 0.0;
    int site = 0;  // l1 of the normal site attaining the extreme coupling
};
DirectionalMargin directional_margin(const NormalFormPackage& pkg, int lmax = 2);

/// Minimum of one scanned divisor family.
struct DivisorFamilyScan {
    std::string what;
    double min_abs = std::numeric_limits<double>::infinity();
    std::array<int, 4> tuple{0, 0, 0, 0};  // attaining modes (unused -> 0)
    int shift = 0;                         // integer offset p where applicable
};

struct NonresonanceReport {
    std::vector<DivisorFamilyScan> families;
    double tail_bound = 0.0;  // sup over |j| > Ntilde of |lambda_j - varpi|
    double floor = 0.0;
    bool ok = false;  // every family minimum exceeds the floor
    std::string note;
};

/// bbm: minimum |lambda_j + lambda_k + lambda_l| over zero-sum triples and
/// minimum quartic divisor over tangent-touching nonresonant zero-sum
/// quadruples, both within `radius`.
NonresonanceReport bbm_nonresonance_scan(double tau, int radius, int Ntilde,
                                         const std::vector<int>& J, double floor = 1e-9);

/// gpc: the four first-order divisor families (paired four-mode combinations,
/// unbalanced four-mode combinations, triples against integers, pairs against
/// integers) scanned over the box of side `radius`.
NonresonanceReport gpc_nonresonance_scan(const std::vector<double>& tau, int radius, int Ntilde,
                                         const std::vector<Site>& J, double floor = 1e-9);

}  // namespace kam
