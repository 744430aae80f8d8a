#pragma once

#include <Eigen/Dense>

#include <cstdint>

#include "kam/kam.hpp"
#include "kam/poly.hpp"

namespace kam {

/// Residual of the embedded torus in the original equations of motion.
/// The embedding theta -> (x, y, z, zbar)(theta) is restricted to its
/// invariant torus (the y = 0, z = 0 slice of the composed map) and the
/// defect  d/dt Emb(theta + omega t) - X_H(Emb(theta))  is sampled on a
/// uniform angle grid; the components are trigonometric polynomials, so a
/// Nyquist-safe grid sees their sup.
struct TorusResidualReport {
    double residual = 0.0;     // sup over the grid of the weighted defect norm
    double sup_z = 0.0;        // largest weighted z mass on the torus
    double imag_defect = 0.0;  // largest |Im| of an embedded x coordinate
    int grid = 0;              // grid size actually used (per angle)
};

/// `q` is the site-weight exponent of the z block norm; `grid_size == 0`
/// picks the smallest Nyquist-safe grid.  Throws std::invalid_argument when a
/// given grid undersamples the embedding's Fourier support.
TorusResidualReport torus_residual(const TorusEmbedding& emb, const Eigen::VectorXd& omega,
                                   const Poly& H, double q, int grid_size = 0);

/// Drift of ||z(t)|| under the reduced linear flow  z' = i (Lambda + B) z,
/// integrated with the exact eigen-exponential so that only the operator's
/// structure (and not an integrator) can break conservation.  With the
/// default weights (all ones) the measured norm is the one a self-adjoint
/// Lambda + B conserves identically.
struct ConservationReport {
    double max_drift = 0.0;           // max_t | ||z(t)|| - ||z(0)|| |
    double final_drift = 0.0;         // same at t = horizon
    double selfadjoint_defect = 0.0;  // || (Lambda + B) - (Lambda + B)^* ||_2
    int samples = 0;
};
ConservationReport norm_conservation(const Eigen::VectorXd& lambda, const Eigen::MatrixXcd& B,
                                     const Eigen::VectorXcd& z0, double horizon, double dt,
                                     const Eigen::VectorXd* weights = nullptr);

/// Reality audit: sample real angles, real actions, and conjugate-paired z,
/// and report the largest |Im H| seen, together with the coefficientwise
/// mirror defect ||H - bar(H)||_1 (the exact form of the sampled property).
struct RealityReport {
    bool real = false;
    double max_violation = 0.0;  // sampled |Im H(x, y, z, conj z)|
    double coeff_defect = 0.0;   // ||H - bar(H)||_1
    double scale = 0.0;          // largest sampled |H|, for relative reads
};
RealityReport reality_audit(const Poly& H, int nangles, int nsites, int samples, uint64_t seed);

/// Symplecticity of the composed transform: Poisson brackets of coordinate
/// functions against their canonical values,
///   {Z_i, Zbar_j} = i delta_ij,   {Z_i, Z_j} = 0,
///   {e^{i x_t}, Y_s} = i delta_ts e^{i x_t},
/// with e^{i x_t} expanded through the stored angle shift.  The distortion is
/// the coefficient l1 mass of each defect (a majorant of its sup on the
/// torus).
struct SymplecticReport {
    double max_distortion = 0.0;
    int pairs = 0;
};
SymplecticReport symplectic_audit(const TorusEmbedding& emb, const Caps& caps, int exp_order = 8);

}  // namespace kam
