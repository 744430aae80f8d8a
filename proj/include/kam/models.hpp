#pragma once

#include <optional>
#include <string>

#include <Eigen/Dense>

#include "kam/lattice.hpp"
#include "kam/norms.hpp"
#include "kam/poly.hpp"

namespace kam {

// ---------------------------------------------------------------------------
// BBM: u_t + u_x + u u_x - u_xxt = 0, period T, tau = 2 pi / T.
// ---------------------------------------------------------------------------

/// lambda_j = tau j / (1 + tau^2 j^2); throws std::domain_error at j = 0.
double bbm_normal_frequency(int j, double tau);

/// delta_j = sqrt(tau |j| / (1 + tau^2 j^2)); delta_j^2 = |lambda_j|.
double bbm_weight(int j, double tau);

struct CubicTerm {
    int j, k, l;
    double g;
};

/// Symmetric cubic table G_{jkl} = delta_j delta_k delta_l / (6 sqrt(T)) over
/// zero-sum triples with 0 < |j|,|k|,|l| <= radius, one entry per unordered triple.
std::vector<CubicTerm> bbm_cubic_table(double tau, double T, int radius);

// ---------------------------------------------------------------------------
// Generalized Pochhammer-Chree: u_tt - Du - Du_tt + D(u^3) = 0, Dirichlet on
// a box with tau_i = 2 pi / T_i, modes k in Z_+^d.
// ---------------------------------------------------------------------------

/// ||k||^2 = sum tau_i^2 k_i^2.
double gpc_ksq(const Site& k, const std::vector<double>& tau);

/// lambda_k = ||k||^2 / (1 + ||k||^2); the normal frequency is sqrt(lambda_k).
double gpc_lambda(const Site& k, const std::vector<double>& tau);
double gpc_frequency(const Site& k, const std::vector<double>& tau);

/// Box integral of phi_m phi_n phi_l phi_k (products of sines); vanishes
/// unless an axiswise sign combination m +- n +- l +- k = 0 exists.
double gpc_quartic_integral(const Site& m, const Site& n, const Site& l, const Site& k,
                            const std::vector<double>& tau);

/// C_mnlk = (lam_m+lam_n+lam_l+lam_k) / (4 (lam_m lam_n lam_l lam_k)^{1/4})
///          * integral phi_m phi_n phi_l phi_k.
double gpc_quartic_coupling(const Site& m, const Site& n, const Site& l, const Site& k,
                          const std::vector<double>& tau);

// ---------------------------------------------------------------------------
// Normal-frequency model consumed by the homological solvers and scans.
// ---------------------------------------------------------------------------

/// Frequencies lambda_j(xi) = lambda0_j + slope_j . (xi - xi0); slope may be
/// empty (parameter-independent model).
struct NormalModel {
    Lattice lat;
    Eigen::VectorXd lambda0;
    Eigen::MatrixXd lambda_slope;  // lat.size() x N, or 0 x 0
    Eigen::VectorXd xi0;           // N, or empty
    double varpi = 0.0;
    double kappa = 1.0;
    double p = 1.0;
    double q = 2.0;

    Eigen::VectorXd lambda(const Eigen::VectorXd& xi) const {
        if (lambda_slope.size() == 0) return lambda0;
        return lambda0 + lambda_slope * (xi - xi0);
    }
    Eigen::VectorXd lambda() const { return lambda0; }
};

/// BBM normal model on positive sites {1..radius} \ J, frequencies lambda_j.
NormalModel bbm_normal_model(double tau, int radius, const std::vector<int>& J, double p = 1.0);

struct GpcConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// gPC normal model on Z_+^d box sites minus the tangent set J.
/// Validates: tau components in (1,2); J sites with |j| > L; J disjoint from
/// the normal lattice. Throws GpcConfigError on violation.
NormalModel gpc_normal_model(const std::vector<double>& tau, int radius, const std::vector<Site>& J,
                             double L, double p);

// ---------------------------------------------------------------------------
// Truncated Hamiltonians as polynomials.
// ---------------------------------------------------------------------------

/// BBM truncated Hamiltonian over sites {1..radius} (ids = j-1), with the
/// signed mode z_j mapped to slot (|j|-1, bar = [j<0]):
///   H = sum_{j>=1} lambda_j z_j zbar_j + sum_{j+k+l=0} G_{jkl} (signed modes).
Poly bbm_hamiltonian(double tau, double T, int radius);

/// gPC truncated Hamiltonian on `lat` (all modes, tangent sites included):
///   H = sum sqrt(lambda_k) z_k zbar_k + (1/4) sum C_mnlk prod (z + zbar).
Poly gpc_hamiltonian(const std::vector<double>& tau, const Lattice& lat);

// ---------------------------------------------------------------------------
// Assumption audit.
// ---------------------------------------------------------------------------

struct AssumptionReport {
    bool frequency_map_nondegenerate = false;
    double jacobian_det = 0.0;       // FD determinant of the frequency map
    double jacobian_sup = 0.0;       // sup |d omega / d xi|
    double kappa_fit = 0.0;          // fitted decay exponent of |lambda - varpi|
    double c11 = 0.0, c12 = 0.0;     // decay band constants
    double c13 = 0.0;                // sup |j|^kappa |d lambda_j / d xi|
    double directional_min = 0.0;    // min directional derivative of divisors
    bool directional_ok = false;
    double reality_defect_h = 0.0;   // Hamiltonian reality defect (if poly given)
    bool reality_ok = false;
    double b0_norm_pq = 0.0;         // || |B0| ||_{h_p -> h_q}
    bool b0_ok = false;
    std::vector<std::string> failures;
};

/// Numerical audit of the standing assumptions for a model (and optionally the
/// assembled Hamiltonian and an initial operator B0). Failures are reported,
/// not thrown.
AssumptionReport check_assumptions(const NormalModel& model, const Poly* hamiltonian = nullptr,
                                   const Eigen::MatrixXcd* B0 = nullptr,
                                   double eps0 = 1e-4, int kmax = 8);

}  // namespace kam
