#pragma once

#include <random>

#include <Eigen/Dense>

#include "kam/lattice.hpp"
#include "kam/poly.hpp"

namespace kam {

/// || z ||_p = sqrt( sum |z_j|^2 |j|^{2p} ), |j| = 1 at j = 0.
double hp_norm(const Eigen::VectorXcd& z, const Lattice& lat, double p);

/// Exact operator norm h_p(cols) -> h_q(rows): largest singular value of
/// diag(|i|^q) A diag(|j|^{-p}).
double op_norm(const Eigen::MatrixXcd& A, const Lattice& rows, double q, const Lattice& cols,
               double p);
inline double op_norm(const Eigen::MatrixXcd& A, const Lattice& lat, double q, double p) {
    return op_norm(A, lat, q, lat, p);
}

/// Operator norm of the sub-block A(rows_ids, cols_ids) with the same weights.
double block_op_norm(const Eigen::MatrixXcd& A, const Lattice& rows, double q, const Lattice& cols,
                     double p, const std::vector<int>& row_ids, const std::vector<int>& col_ids);

/// Hamiltonian vector field X_H = (H_y, -H_x, i H_zbar, -i H_z) as component
/// polynomials; X[i], Y[i] for i < nangles, Z[j], Zb[j] for lattice site ids j.
struct VectorFieldPolys {
    std::vector<Poly> X, Y, Z, Zb;
};
VectorFieldPolys hamiltonian_vf(const Poly& H, int nangles, int nsites);

/// Domain and sampling parameters for the analytic vector-field norm.
struct NormContext {
    int nangles = 2;
    const Lattice* lattice = nullptr;
    double p = 1.0;
    double q = 2.0;  // p + kappa
    double s = 0.5;  // analyticity width: Fourier weight e^{2|k|s}
    double r = 0.1;  // |y| < r^2, ||z||_p < r
    int phase_samples = 8;
    int boundary_samples = 16;
    uint64_t seed = 0x9e3779b97f4a7c15ull;
};

/// Triple norm: sqrt(|X|^2 + |Y|^2 + ||Z||^2 + ||Zbar||^2) where each component
/// norm is sup over sampled boundary points of the exact Fourier sum
/// sum_k e^{2|k|s} |fhat(k; y,z,zbar)|^2 (Euclidean for X,Y; h_q for Z,Zbar).
/// The supremum is sampled: boundary_samples random draws with |y| = r^2,
/// ||z||_p = ||zbar||_p = r, each rotated through phase_samples phases.
double vf_triple_norm(const VectorFieldPolys& vf, const NormContext& ctx);

/// Triple norm of the majorant field: component polynomials replaced by their
/// coefficientwise absolute values before sampling.
double vf_triple_norm_majorant(const VectorFieldPolys& vf, const NormContext& ctx);

/// Convenience: triple norm of lfloor X_H rceil.
double hamiltonian_vf_norm(const Poly& H, const NormContext& ctx);

/// Sampled boundary points (deterministic given ctx.seed).
struct DomainSample {
    Eigen::VectorXcd y, z, zbar;
};
std::vector<DomainSample> boundary_samples(const NormContext& ctx);

}  // namespace kam
