#pragma once

#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "kam/lattice.hpp"
#include "kam/poly.hpp"

namespace kam {

// ---------------------------------------------------------------------------
// Fourier cutoff.
// ---------------------------------------------------------------------------

/// Terms with |k| <= K.
Poly cutoff(const Poly& p, int K);
/// Terms with |k| > K.
Poly cutoff_tail(const Poly& p, int K);

// ---------------------------------------------------------------------------
// Divisor exponent profile. Thresholds shrink like K^{-e}; every threshold is
// floored at `divisor_floor` so production-size exponents stay meaningful in
// binary64 (the analytic thresholds underflow long before the scans do).
// ---------------------------------------------------------------------------

struct ExponentProfile {
    int N = 2;
    int d = 1;
    double kappa = 1.0;
    double p = 1.0;
    double y = 6.0;    // 3d/kappa + 3
    double c = 3.0;    // normal-divisor exponent
    double c20 = 3.0;  // tangent measure exponent
    double c21 = 5.0;  // tangent divisor exponent, c20 + N
    double divisor_floor = 1e-10;

    /// Small exponents for desk-size experiments and scans.
    static ExponentProfile desk(int N, int d, double kappa, double p = 1.0);
    /// Exponents satisfying the coupled largeness constraints
    /// c/y > 100 N (1+kappa+d) and c (1 - 3d/(y kappa)) > 100 N (1+kappa+d).
    static ExponentProfile production(int N, int d, double kappa, double p = 1.0);

    /// Site radius below which normal divisors need excision: (2 K^{c/y})^{3/kappa}.
    double K2(double K) const;
    /// Head/tail partition radius for the operator equations; +inf when the
    /// double range is exceeded (then every finite lattice is head).
    double K3(double K) const;
    /// Partition exponent for the vector equation: smallest c22 with
    /// K^{-kappa c22} <= 1e-2 K^{-c21}; the split radius is K^{c22}.
    double c22(double K) const;
    double split_radius_first(double K) const;  // K^{c22}

    double tangent_threshold(double K) const;  // max(K^{-c21}, floor)
    double first_threshold(double K) const;    // max(K^{-c}/2, floor)
    double second_threshold(double K) const;   // max(K^{-c}, floor)
};

/// Partition site ids by |j| <= radius (head) / |j| > radius (tail).
std::pair<std::vector<int>, std::vector<int>> split_sites(const Lattice& lat, double radius);

// ---------------------------------------------------------------------------
// Vector equation (a + Lambda + B) F = R, one Fourier mode at a time; the
// callers pass a = -(k,omega) or +(k,omega). The structured route splits at a
// head/tail partition, inverts the tail by a Neumann series around
// rho = a + varpi and solves the head through the Schur complement
// B1 = B11 - B12 B2^{-1} B21.
// ---------------------------------------------------------------------------

struct FirstSolveReport {
    bool structured = false;    // head/tail route taken
    bool neumann_ok = false;    // tail contraction ratio < 1
    int neumann_terms = 0;      // series terms used
    double neumann_ratio = 0.0; // ||Lambda_tail - varpi + B22|| / |rho|
    double residual = 0.0;      // ||(a+Lambda+B)F - R|| / ||R||
    double min_divisor = 0.0;   // min |a + eig(Lambda+B)| when B is Hermitian
    std::string note;
};

Eigen::VectorXcd solve_first_melnikov(double a, double varpi, const Eigen::VectorXd& lambda,
                                      const Eigen::MatrixXcd& B, const Eigen::VectorXcd& R,
                                      const std::vector<int>& head, const std::vector<int>& tail,
                                      FirstSolveReport* rep = nullptr);

// ---------------------------------------------------------------------------
// Operator (Sylvester) equation M F + F N = R and its building blocks.
// ---------------------------------------------------------------------------

/// Columnwise stacking and its inverse.
Eigen::VectorXcd vec(const Eigen::MatrixXcd& X);
Eigen::MatrixXcd unvec(const Eigen::VectorXcd& v, Eigen::Index rows, Eigen::Index cols);

/// Kronecker product and the Sylvester system matrix 1 (x) M + N^T (x) 1.
Eigen::MatrixXcd kron(const Eigen::MatrixXcd& A, const Eigen::MatrixXcd& B);
Eigen::MatrixXcd sylvester_matrix(const Eigen::MatrixXcd& M, const Eigen::MatrixXcd& N);

/// Direct solve of M X + X N = R through the vectorized system (LU).
Eigen::MatrixXcd solve_sylvester_dense(const Eigen::MatrixXcd& M, const Eigen::MatrixXcd& N,
                                       const Eigen::MatrixXcd& R, double* residual = nullptr);

/// Entrywise solve when both coefficients are diagonal: X_ij = Y_ij/(dl_i+dr_j).
Eigen::MatrixXcd sylvester_diagonal(const Eigen::VectorXd& dl, const Eigen::VectorXd& dr,
                                    const Eigen::MatrixXcd& Y);

struct IntegralReport {
    double t_star = 0.0;
    int panels = 0;
    double last_change = 0.0;
    bool converged = false;
};

/// X = int_0^inf exp(-tM) Y exp(-tN) dt, valid when the real parts of the
/// spectra of M and N sum above mu > 0. Composite Gauss-Legendre on [0, T*]
/// with panel doubling until the quadrature stabilizes.
Eigen::MatrixXcd sylvester_integral(const Eigen::MatrixXcd& M, const Eigen::MatrixXcd& N,
                                    const Eigen::MatrixXcd& Y, double mu, double tol = 1e-12,
                                    IntegralReport* rep = nullptr);

struct PicardReport {
    bool converged = false;
    int iters = 0;
    double initial_defect = 0.0;
    double final_defect = 0.0;
    std::vector<double> defect_ratios;  // per-step contraction of the defect
};

/// Zero-mode sum equation (S+B) X + X (S+Bbreve) = R with S = diag(lambda)+shift:
/// X^{(m+1)} = X^{(m)} + g(defect), g the diagonal inverse. Defects are
/// measured as weighted operator norms h_p -> h_q when a lattice is supplied,
/// otherwise as spectral norms.
Eigen::MatrixXcd sylvester_picard_k0(const Eigen::VectorXd& lambda, double shift,
                                     const Eigen::MatrixXcd& B, const Eigen::MatrixXcd& Bbreve,
                                     const Eigen::MatrixXcd& R, double tol, int max_iters,
                                     const Lattice* lat = nullptr, double p = 1.0, double q = 2.0,
                                     PicardReport* rep = nullptr);

// ---------------------------------------------------------------------------
// Second Melnikov operator equation
//   (komega + sl (shift + Lambda + B)) F + sr F (shift + Lambda + Bbreve) = R,
// sl, sr in {+1, -1}. The difference form (sl sr = -1) at komega = 0 is
// resonant on the diagonal: R must carry no diagonal there (the caller removes
// it into the normal form) and the minimum-norm solution is returned.
// ---------------------------------------------------------------------------

enum class SylvesterStrategy { Auto, DenseKron, Structured };

struct SecondSolveReport {
    SylvesterStrategy used = SylvesterStrategy::DenseKron;
    bool converged = true;
    int sweeps = 0;            // Gauss-Seidel sweeps of the block chain
    bool integral_used = false;
    double residual = 0.0;
    std::string note;
};

Eigen::MatrixXcd solve_second_melnikov(double komega, int sign_left, int sign_right, double shift,
                                       const Eigen::VectorXd& lambda, const Eigen::MatrixXcd& B,
                                       const Eigen::MatrixXcd& Bbreve, const Eigen::MatrixXcd& R,
                                       const std::vector<int>& head, const std::vector<int>& tail,
                                       SylvesterStrategy strategy = SylvesterStrategy::Auto,
                                       SecondSolveReport* rep = nullptr);

}  // namespace kam
