#include "kam/homology.hpp"

#include <cmath>
#include <complex>
#include <limits>
#include <stdexcept>

#include <unsupported/Eigen/KroneckerProduct>
#include <unsupported/Eigen/MatrixFunctions>

#include "kam/norms.hpp"

namespace kam {

namespace {

double spectral_norm(const Eigen::MatrixXcd& A) {
    if (A.rows() == 0 || A.cols() == 0) return 0.0;
    return Eigen::JacobiSVD<Eigen::MatrixXcd>(A).singularValues()[0];
}

Eigen::MatrixXcd select(const Eigen::MatrixXcd& A, const std::vector<int>& rows,
                        const std::vector<int>& cols) {
    Eigen::MatrixXcd S(static_cast<Eigen::Index>(rows.size()),
                       static_cast<Eigen::Index>(cols.size()));
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < cols.size(); ++j)
            S(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = A(rows[i], cols[j]);
    return S;
}

Eigen::VectorXcd select(const Eigen::VectorXcd& v, const std::vector<int>& ids) {
    Eigen::VectorXcd s(static_cast<Eigen::Index>(ids.size()));
    for (size_t i = 0; i < ids.size(); ++i) s[static_cast<Eigen::Index>(i)] = v[ids[i]];
    return s;
}

Eigen::VectorXd select(const Eigen::VectorXd& v, const std::vector<int>& ids) {
    Eigen::VectorXd s(static_cast<Eigen::Index>(ids.size()));
    for (size_t i = 0; i < ids.size(); ++i) s[static_cast<Eigen::Index>(i)] = v[ids[i]];
    return s;
}

// exp of a scaled exponent, saturating instead of overflowing
double safe_pow(double base, double e) {
    double v = e * std::log(base);
    if (v > 690.0) return std::numeric_limits<double>::infinity();
    if (v < -690.0) return 0.0;
    return std::exp(v);
}

}  // namespace

// ---------------------------------------------------------------------------
// Cutoff.
// ---------------------------------------------------------------------------

Poly cutoff(const Poly& p, int K) {
    return p.filter([K](const MonKey& m) { return m.kl1() <= K; });
}

Poly cutoff_tail(const Poly& p, int K) {
    return p.filter([K](const MonKey& m) { return m.kl1() > K; });
}

// ---------------------------------------------------------------------------
// Exponent profile.
// ---------------------------------------------------------------------------

ExponentProfile ExponentProfile::desk(int N, int d, double kappa, double p) {
    ExponentProfile e;
    e.N = N;
    e.d = d;
    e.kappa = kappa;
    e.p = p;
    e.y = 3.0 * d / kappa + 3.0;
    e.c = 3.0;
    e.c20 = static_cast<double>(N + 1);
    e.c21 = e.c20 + N;
    return e;
}

ExponentProfile ExponentProfile::production(int N, int d, double kappa, double p) {
    ExponentProfile e = desk(N, d, kappa, p);
    double bound = 100.0 * N * (1.0 + kappa + d);
    double c_from_small = bound * e.y;                          // c/y > bound
    double c_from_measure = bound / (1.0 - 3.0 * d / (e.y * kappa));  // the (105)-type bound
    e.c = 1.01 * std::max(c_from_small, c_from_measure);
    return e;
}

double ExponentProfile::K2(double K) const { return safe_pow(2.0 * safe_pow(K, c / y), 3.0 / kappa); }

double ExponentProfile::K3(double K) const {
    double a = safe_pow(K2(K), 100.0 * (N + 1) * kappa * y);
    double b = safe_pow(2.0, 1.0 / kappa) * safe_pow(K, 100.0 * (1.0 + (p + kappa) / (kappa * y)) * c / kappa);
    return std::max(a, b);
}

double ExponentProfile::c22(double K) const {
    return (c21 + 2.0 * std::log(10.0) / std::log(K)) / kappa;
}

double ExponentProfile::split_radius_first(double K) const { return safe_pow(K, c22(K)); }

double ExponentProfile::tangent_threshold(double K) const {
    return std::max(safe_pow(K, -c21), divisor_floor);
}

double ExponentProfile::first_threshold(double K) const {
    return std::max(0.5 * safe_pow(K, -c), divisor_floor);
}

double ExponentProfile::second_threshold(double K) const {
    return std::max(safe_pow(K, -c), divisor_floor);
}

std::pair<std::vector<int>, std::vector<int>> split_sites(const Lattice& lat, double radius) {
    std::vector<int> head, tail;
    for (int j = 0; j < lat.size(); ++j)
        (l1(lat.site(j), lat.dim()) <= radius ? head : tail).push_back(j);
    return {head, tail};
}

// ---------------------------------------------------------------------------
// Vector equation.
// ---------------------------------------------------------------------------

Eigen::VectorXcd solve_first_melnikov(double a, double varpi, const Eigen::VectorXd& lambda,
                                      const Eigen::MatrixXcd& B, const Eigen::VectorXcd& R,
                                      const std::vector<int>& head, const std::vector<int>& tail,
                                      FirstSolveReport* rep) {
    const Eigen::Index n = lambda.size();
    Eigen::MatrixXcd M = B;
    if (M.size() == 0) M = Eigen::MatrixXcd::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) M(j, j) += a + lambda[j];

    FirstSolveReport local;
    FirstSolveReport& r = rep ? *rep : local;

    auto finish = [&](const Eigen::VectorXcd& F) {
        double rn = R.norm();
        r.residual = rn > 0 ? (M * F - R).norm() / rn : 0.0;
        if (B.size() == 0 || (B - B.adjoint()).norm() < 1e-12 * std::max(1.0, B.norm())) {
            Eigen::MatrixXcd H = M;
            for (Eigen::Index j = 0; j < n; ++j) H(j, j) -= a;
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(H);
            double md = std::numeric_limits<double>::infinity();
            for (Eigen::Index j = 0; j < n; ++j)
                md = std::min(md, std::abs(a + es.eigenvalues()[j]));
            r.min_divisor = md;
        }
        return F;
    };

    if (tail.empty() || head.empty()) {
        r.structured = false;
        return finish(M.partialPivLu().solve(R));
    }

    // tail block: rho (1 + rho^{-1} S) with S = Lambda_tail - varpi + B22
    double rho = a + varpi;
    Eigen::MatrixXcd S = select(B.size() ? B : Eigen::MatrixXcd::Zero(n, n), tail, tail);
    Eigen::VectorXd lt = select(lambda, tail);
    for (Eigen::Index j = 0; j < S.rows(); ++j) S(j, j) += lt[j] - varpi;

    r.neumann_ratio = std::abs(rho) > 0 ? spectral_norm(S) / std::abs(rho)
                                        : std::numeric_limits<double>::infinity();
    Eigen::Index nt = S.rows();
    Eigen::MatrixXcd B2inv;
    if (r.neumann_ratio < 0.9) {
        Eigen::MatrixXcd P = Eigen::MatrixXcd::Identity(nt, nt);
        Eigen::MatrixXcd acc = P;
        int terms = 1;
        for (; terms <= 200; ++terms) {
            P = (S * P) * (-1.0 / rho);
            acc += P;
            if (P.norm() <= 1e-15 * acc.norm()) break;
        }
        B2inv = acc / rho;
        r.neumann_ok = true;
        r.neumann_terms = terms;
    } else {
        // contraction fails: fall back to a direct inverse of the tail block
        Eigen::MatrixXcd B2 = S;
        for (Eigen::Index j = 0; j < nt; ++j) B2(j, j) += rho;
        B2inv = B2.partialPivLu().inverse();
        r.neumann_ok = false;
        r.note = "tail Neumann ratio >= 1, dense tail inverse used";
    }
    r.structured = true;

    Eigen::MatrixXcd Bfull = B.size() ? B : Eigen::MatrixXcd::Zero(n, n);
    Eigen::MatrixXcd B11 = select(Bfull, head, head), B12 = select(Bfull, head, tail),
                     B21 = select(Bfull, tail, head);
    Eigen::VectorXcd R1 = select(R, head), R2 = select(R, tail);
    Eigen::VectorXd lh = select(lambda, head);

    Eigen::MatrixXcd Hm = B11 - B12 * B2inv * B21;  // Schur complement correction
    for (Eigen::Index j = 0; j < Hm.rows(); ++j) Hm(j, j) += a + lh[j];
    Eigen::VectorXcd F1 = Hm.partialPivLu().solve(R1 - B12 * (B2inv * R2));
    Eigen::VectorXcd F2 = B2inv * (R2 - B21 * F1);

    Eigen::VectorXcd F = Eigen::VectorXcd::Zero(n);
    for (size_t i = 0; i < head.size(); ++i) F[head[i]] = F1[static_cast<Eigen::Index>(i)];
    for (size_t i = 0; i < tail.size(); ++i) F[tail[i]] = F2[static_cast<Eigen::Index>(i)];
    return finish(F);
}

// ---------------------------------------------------------------------------
// Sylvester building blocks.
// ---------------------------------------------------------------------------

Eigen::VectorXcd vec(const Eigen::MatrixXcd& X) {
    return Eigen::Map<const Eigen::VectorXcd>(X.data(), X.size());
}

Eigen::MatrixXcd unvec(const Eigen::VectorXcd& v, Eigen::Index rows, Eigen::Index cols) {
    return Eigen::Map<const Eigen::MatrixXcd>(v.data(), rows, cols);
}

Eigen::MatrixXcd kron(const Eigen::MatrixXcd& A, const Eigen::MatrixXcd& B) {
    return Eigen::kroneckerProduct(A, B);
}

Eigen::MatrixXcd sylvester_matrix(const Eigen::MatrixXcd& M, const Eigen::MatrixXcd& N) {
    Eigen::MatrixXcd Im = Eigen::MatrixXcd::Identity(M.rows(), M.cols());
    Eigen::MatrixXcd In = Eigen::MatrixXcd::Identity(N.rows(), N.cols());
    return kron(In, M) + kron(N.transpose(), Im);
}

Eigen::MatrixXcd solve_sylvester_dense(const Eigen::MatrixXcd& M, const Eigen::MatrixXcd& N,
                                       const Eigen::MatrixXcd& R, double* residual) {
    Eigen::MatrixXcd A = sylvester_matrix(M, N);
    Eigen::VectorXcd x = A.partialPivLu().solve(vec(R));
    Eigen::MatrixXcd X = unvec(x, M.rows(), N.rows());
    if (residual) {
        double rn = R.norm();
        *residual = rn > 0 ? (M * X + X * N - R).norm() / rn : 0.0;
    }
    return X;
}

Eigen::MatrixXcd sylvester_diagonal(const Eigen::VectorXd& dl, const Eigen::VectorXd& dr,
                                    const Eigen::MatrixXcd& Y) {
    Eigen::MatrixXcd X(Y.rows(), Y.cols());
    for (Eigen::Index i = 0; i < Y.rows(); ++i)
        for (Eigen::Index j = 0; j < Y.cols(); ++j) X(i, j) = Y(i, j) / (dl[i] + dr[j]);
    return X;
}

Eigen::MatrixXcd sylvester_integral(const Eigen::MatrixXcd& M, const Eigen::MatrixXcd& N,
                                    const Eigen::MatrixXcd& Y, double mu, double tol,
                                    IntegralReport* rep) {
    if (mu <= 0) throw std::invalid_argument("sylvester_integral: spectral margin mu must be > 0");
    IntegralReport local;
    IntegralReport& r = rep ? *rep : local;

    double yn = std::max(Y.norm(), tol);
    r.t_star = std::log(yn / (2.0 * mu * tol) + 1.0) / (2.0 * mu) + 1.0;

    // 8-point Gauss-Legendre on [-1, 1]
    static const double gx[8] = {-0.9602898564975363, -0.7966664774136267, -0.5255324099163290,
                                 -0.1834346424956498, 0.1834346424956498,  0.5255324099163290,
                                 0.7966664774136267,  0.9602898564975363};
    static const double gw[8] = {0.1012285362903763, 0.2223810344533745, 0.3137066458778873,
                                 0.3626837833783620, 0.3626837833783620, 0.3137066458778873,
                                 0.2223810344533745, 0.1012285362903763};

    auto quad = [&](int panels) {
        Eigen::MatrixXcd acc = Eigen::MatrixXcd::Zero(Y.rows(), Y.cols());
        double hstep = r.t_star / panels;
        for (int pnl = 0; pnl < panels; ++pnl) {
            double t0 = pnl * hstep;
            for (int g = 0; g < 8; ++g) {
                double t = t0 + 0.5 * hstep * (gx[g] + 1.0);
                Eigen::MatrixXcd el = (-t * M).exp();
                Eigen::MatrixXcd er = (-t * N).exp();
                acc += (0.5 * hstep * gw[g]) * (el * Y * er);
            }
        }
        return acc;
    };

    int panels = 8;
    Eigen::MatrixXcd X = quad(panels);
    for (; panels <= 512;) {
        panels *= 2;
        Eigen::MatrixXcd X2 = quad(panels);
        r.last_change = (X2 - X).norm();
        X = X2;
        if (r.last_change <= tol * std::max(1.0, X.norm())) {
            r.converged = true;
            break;
        }
    }
    r.panels = panels;
    return X;
}

Eigen::MatrixXcd sylvester_picard_k0(const Eigen::VectorXd& lambda, double shift,
                                     const Eigen::MatrixXcd& B, const Eigen::MatrixXcd& Bbreve,
                                     const Eigen::MatrixXcd& R, double tol, int max_iters,
                                     const Lattice* lat, double p, double q, PicardReport* rep) {
    PicardReport local;
    PicardReport& r = rep ? *rep : local;
    const Eigen::Index n = lambda.size();
    Eigen::VectorXd s = lambda.array() + shift;

    auto defect_norm = [&](const Eigen::MatrixXcd& D) {
        if (lat) return op_norm(D.cwiseAbs().cast<Complex>(), *lat, q, *lat, p);
        return spectral_norm(D);
    };
    auto apply = [&](const Eigen::MatrixXcd& X) {
        Eigen::MatrixXcd L = X, Rr = X;
        for (Eigen::Index i = 0; i < n; ++i) L.row(i) *= s[i];
        for (Eigen::Index j = 0; j < n; ++j) Rr.col(j) *= s[j];
        Eigen::MatrixXcd out = L + Rr;
        if (B.size()) out += B * X;
        if (Bbreve.size()) out += X * Bbreve;
        return out;
    };

    Eigen::MatrixXcd X = sylvester_diagonal(s, s, R);
    Eigen::MatrixXcd D = R - apply(X);
    double d0 = defect_norm(D);
    r.initial_defect = d0;
    double dprev = d0;
    double target = std::max(tol * std::max(d0, 1e-300), 1e-300);
    for (int it = 0; it < max_iters; ++it) {
        if (dprev <= target) {
            r.converged = true;
            break;
        }
        X += sylvester_diagonal(s, s, D);
        D = R - apply(X);
        double dn = defect_norm(D);
        r.defect_ratios.push_back(dprev > 0 ? dn / dprev : 0.0);
        dprev = dn;
        r.iters = it + 1;
    }
    if (dprev <= target) r.converged = true;
    r.final_defect = dprev;
    return X;
}

// ---------------------------------------------------------------------------
// Second Melnikov operator equation.
// ---------------------------------------------------------------------------

namespace {

struct SylBlocks {
    Eigen::MatrixXcd M, N;  // full coefficients
};

SylBlocks build_coefficients(double komega, int sl, int sr, double shift,
                             const Eigen::VectorXd& lambda, const Eigen::MatrixXcd& B,
                             const Eigen::MatrixXcd& Bbreve) {
    const Eigen::Index n = lambda.size();
    Eigen::MatrixXcd M = B.size() ? Eigen::MatrixXcd(static_cast<double>(sl) * B)
                                  : Eigen::MatrixXcd::Zero(n, n);
    Eigen::MatrixXcd N = Bbreve.size() ? Eigen::MatrixXcd(static_cast<double>(sr) * Bbreve)
                                       : Eigen::MatrixXcd::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        M(j, j) += komega + sl * (shift + lambda[j]);
        N(j, j) += sr * (shift + lambda[j]);
    }
    return {std::move(M), std::move(N)};
}

// minimum real part of the spectrum
double min_real_eig(const Eigen::MatrixXcd& A) {
    if (A.rows() == 0) return std::numeric_limits<double>::infinity();
    Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(A, false);
    return es.eigenvalues().real().minCoeff();
}

}  // namespace

Eigen::MatrixXcd solve_second_melnikov(double komega, int sign_left, int sign_right, double shift,
                                       const Eigen::VectorXd& lambda, const Eigen::MatrixXcd& B,
                                       const Eigen::MatrixXcd& Bbreve, const Eigen::MatrixXcd& R,
                                       const std::vector<int>& head, const std::vector<int>& tail,
                                       SylvesterStrategy strategy, SecondSolveReport* rep) {
    if (std::abs(sign_left) != 1 || std::abs(sign_right) != 1)
        throw std::invalid_argument("solve_second_melnikov: signs must be +-1");
    SecondSolveReport local;
    SecondSolveReport& r = rep ? *rep : local;
    const Eigen::Index n = lambda.size();

    SylBlocks full = build_coefficients(komega, sign_left, sign_right, shift, lambda, B, Bbreve);

    const bool difference = sign_left * sign_right < 0;
    const bool resonant_zero_mode = difference && std::abs(komega) < 1e-12;
    if (resonant_zero_mode) {
        double diag_mass = R.diagonal().norm();
        if (diag_mass > 1e-10 * std::max(R.norm(), 1e-300))
            throw std::invalid_argument(
                "difference equation at k = 0 carries a resonant diagonal; move it into the "
                "normal form before solving");
    }

    auto finish = [&](const Eigen::MatrixXcd& F) {
        double rn = R.norm();
        r.residual = rn > 0 ? (full.M * F + F * full.N - R).norm() / rn : 0.0;
        return F;
    };

    bool want_structured = strategy == SylvesterStrategy::Structured ||
                           (strategy == SylvesterStrategy::Auto && !tail.empty() && n > 48);
    if (resonant_zero_mode) want_structured = false;  // blocks would be singular

    if (!want_structured || tail.empty() || head.empty()) {
        r.used = SylvesterStrategy::DenseKron;
        Eigen::MatrixXcd A = sylvester_matrix(full.M, full.N);
        Eigen::VectorXcd x;
        if (resonant_zero_mode) {
            // rank-deficient: minimum-norm least squares keeps the resonant
            // directions empty
            Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXcd> cod(A);
            x = cod.solve(vec(R));
            r.note = "minimum-norm solve through the resonant zero mode";
        } else {
            x = A.partialPivLu().solve(vec(R));
        }
        return finish(unvec(x, n, n));
    }

    r.used = SylvesterStrategy::Structured;

    auto Mhh = select(full.M, head, head), Mht = select(full.M, head, tail),
         Mth = select(full.M, tail, head), Mtt = select(full.M, tail, tail);
    auto Nhh = select(full.N, head, head), Nht = select(full.N, head, tail),
         Nth = select(full.N, tail, head), Ntt = select(full.N, tail, tail);
    auto Rhh = select(R, head, head), Rht = select(R, head, tail), Rth = select(R, tail, head),
         Rtt = select(R, tail, tail);

    Eigen::MatrixXcd F11 = Eigen::MatrixXcd::Zero(Mhh.rows(), Nhh.rows());
    Eigen::MatrixXcd F12 = Eigen::MatrixXcd::Zero(Mhh.rows(), Ntt.rows());
    Eigen::MatrixXcd F21 = Eigen::MatrixXcd::Zero(Mtt.rows(), Nhh.rows());
    Eigen::MatrixXcd F22 = Eigen::MatrixXcd::Zero(Mtt.rows(), Ntt.rows());

    // integral representation is valid when the tail spectra sit above zero
    double mu_tail = min_real_eig(Mtt) + min_real_eig(Ntt);
    bool integral_ok = mu_tail > 1e-8;

    auto assemble = [&]() {
        Eigen::MatrixXcd F = Eigen::MatrixXcd::Zero(n, n);
        for (size_t i = 0; i < head.size(); ++i)
            for (size_t j = 0; j < head.size(); ++j) F(head[i], head[j]) = F11(i, j);
        for (size_t i = 0; i < head.size(); ++i)
            for (size_t j = 0; j < tail.size(); ++j) F(head[i], tail[j]) = F12(i, j);
        for (size_t i = 0; i < tail.size(); ++i)
            for (size_t j = 0; j < head.size(); ++j) F(tail[i], head[j]) = F21(i, j);
        for (size_t i = 0; i < tail.size(); ++i)
            for (size_t j = 0; j < tail.size(); ++j) F(tail[i], tail[j]) = F22(i, j);
        return F;
    };

    double rn = std::max(R.norm(), 1e-300);
    constexpr int kMaxSweeps = 60;
    for (int sweep = 1; sweep <= kMaxSweeps; ++sweep) {
        F11 = solve_sylvester_dense(Mhh, Nhh, Rhh - Mht * F21 - F12 * Nth);
        F12 = solve_sylvester_dense(Mhh, Ntt, Rht - Mht * F22 - F11 * Nht);
        F21 = solve_sylvester_dense(Mtt, Nhh, Rth - Mth * F11 - F22 * Nth);
        Eigen::MatrixXcd Y22 = Rtt - Mth * F12 - F21 * Nht;
        if (integral_ok) {
            F22 = sylvester_integral(Mtt, Ntt, Y22, mu_tail / 2.0, 1e-12);
            r.integral_used = true;
        } else {
            F22 = solve_sylvester_dense(Mtt, Ntt, Y22);
        }
        Eigen::MatrixXcd F = assemble();
        r.sweeps = sweep;
        r.residual = (full.M * F + F * full.N - R).norm() / rn;
        if (r.residual < 1e-10) {
            r.converged = true;
            return F;
        }
    }

    // chain did not contract: fall back to the direct solve when feasible
    if (n <= 160) {
        r.note = "block chain stalled, dense fallback";
        r.converged = true;
        r.used = SylvesterStrategy::DenseKron;
        Eigen::MatrixXcd A = sylvester_matrix(full.M, full.N);
        return finish(unvec(Eigen::VectorXcd(A.partialPivLu().solve(vec(R))), n, n));
    }
    r.converged = false;
    r.note = "block chain stalled";
    return finish(assemble());
}

}  // namespace kam
