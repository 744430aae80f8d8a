#include "kam/models.hpp"

#include <cmath>
#include <numeric>

namespace kam {

namespace {

// least-squares slope of log|v| against log|j| over the given points
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    size_t n = x.size();
    for (size_t i = 0; i < n; ++i) {
        double lx = std::log(x[i]), ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    double denom = n * sxx - sx * sx;
    return denom == 0 ? 0.0 : (n * sxy - sx * sy) / denom;
}

}  // namespace

double bbm_normal_frequency(int j, double tau) {
    if (j == 0) throw std::domain_error("bbm_normal_frequency: j = 0 excluded");
    double tj = tau * j;
    return tj / (1.0 + tj * tj);
}

double bbm_weight(int j, double tau) {
    if (j == 0) throw std::domain_error("bbm_weight: j = 0 excluded");
    double tj = tau * j;
    return std::sqrt(tau * std::abs(j) / (1.0 + tj * tj));
}

std::vector<CubicTerm> bbm_cubic_table(double tau, double T, int radius) {
    std::vector<CubicTerm> out;
    double pref = 1.0 / (6.0 * std::sqrt(T));
    for (int j = -radius; j <= radius; ++j) {
        if (j == 0) continue;
        for (int k = j; k <= radius; ++k) {
            if (k == 0) continue;
            int l = -j - k;
            if (l < k || l == 0 || std::abs(l) > radius) continue;  // ordered j <= k <= l
            out.push_back(
                CubicTerm{j, k, l, pref * bbm_weight(j, tau) * bbm_weight(k, tau) * bbm_weight(l, tau)});
        }
    }
    return out;
}

double gpc_ksq(const Site& k, const std::vector<double>& tau) {
    double v = 0;
    for (size_t i = 0; i < tau.size(); ++i) {
        double t = tau[i] * k[static_cast<int>(i)];
        v += t * t;
    }
    return v;
}

double gpc_lambda(const Site& k, const std::vector<double>& tau) {
    double ks = gpc_ksq(k, tau);
    return ks / (1.0 + ks);
}

double gpc_frequency(const Site& k, const std::vector<double>& tau) {
    return std::sqrt(gpc_lambda(k, tau));
}

double gpc_quartic_integral(const Site& m, const Site& n, const Site& l, const Site& k,
                            const std::vector<double>& tau) {
    // per axis: int_0^{T} prod sin(n_i tau x) dx = (T/16) sum over sign choices
    // sigma in {+-1}^4 with sum sigma_i n_i = 0 of prod sigma_i, T = 2 pi / tau.
    double total = 1.0;
    for (size_t ax = 0; ax < tau.size(); ++ax) {
        int a = m[static_cast<int>(ax)], b = n[static_cast<int>(ax)], c = l[static_cast<int>(ax)],
            d = k[static_cast<int>(ax)];
        int acc = 0;
        for (int s1 = -1; s1 <= 1; s1 += 2)
            for (int s2 = -1; s2 <= 1; s2 += 2)
                for (int s3 = -1; s3 <= 1; s3 += 2)
                    for (int s4 = -1; s4 <= 1; s4 += 2)
                        if (s1 * a + s2 * b + s3 * c + s4 * d == 0) acc += s1 * s2 * s3 * s4;
        double T = 2.0 * M_PI / tau[ax];
        total *= (T / 16.0) * acc;
        if (total == 0.0) return 0.0;
    }
    return total;
}

double gpc_quartic_coupling(const Site& m, const Site& n, const Site& l, const Site& k,
                          const std::vector<double>& tau) {
    double I = gpc_quartic_integral(m, n, l, k, tau);
    if (I == 0.0) return 0.0;
    double lm = gpc_lambda(m, tau), ln = gpc_lambda(n, tau), ll = gpc_lambda(l, tau),
           lk = gpc_lambda(k, tau);
    return (lm + ln + ll + lk) / (4.0 * std::pow(lm * ln * ll * lk, 0.25)) * I;
}

NormalModel bbm_normal_model(double tau, int radius, const std::vector<int>& J, double p) {
    NormalModel m;
    m.lat = positive_line(radius, J);
    m.lambda0.resize(m.lat.size());
    for (int i = 0; i < m.lat.size(); ++i)
        m.lambda0[i] = bbm_normal_frequency(m.lat.site(i)[0], tau);
    m.varpi = 0.0;
    m.kappa = 1.0;
    m.p = p;
    m.q = p + m.kappa;
    return m;
}

NormalModel gpc_normal_model(const std::vector<double>& tau, int radius, const std::vector<Site>& J,
                             double L, double p) {
    int d = static_cast<int>(tau.size());
    for (double t : tau)
        if (!(t > 1.0 && t < 2.0)) throw GpcConfigError("gpc: tau components must lie in (1,2)");
    for (const Site& j : J) {
        if (l1(j, d) <= static_cast<int>(L))
            throw GpcConfigError("gpc: tangent sites must satisfy |j| > L");
        for (int i = 0; i < d; ++i)
            if (j[i] < 1) throw GpcConfigError("gpc: tangent sites must lie in Z_+^d");
    }
    NormalModel m;
    m.lat = positive_box(d, radius, J);
    for (const Site& j : J)
        if (m.lat.contains(j)) throw GpcConfigError("gpc: tangent set must be disjoint from lattice");
    m.lambda0.resize(m.lat.size());
    for (int i = 0; i < m.lat.size(); ++i) m.lambda0[i] = gpc_frequency(m.lat.site(i), tau);
    m.varpi = 1.0;
    m.kappa = 2.0;
    m.p = p;
    m.q = p;  // the operator gain for clustered frequencies acts through B*, not q
    return m;
}

Poly bbm_hamiltonian(double tau, double T, int radius) {
    std::vector<Term> terms;
    Lattice lat = positive_line(radius);
    for (int j = 1; j <= radius; ++j) {
        MonKey m;
        m.add_factor(lat.id(site1(j)), 0);
        m.add_factor(lat.id(site1(j)), 1);
        terms.push_back(Term{m, Complex(bbm_normal_frequency(j, tau), 0)});
    }
    auto add_mode = [&](MonKey& m, int signed_j) {
        int id = lat.id(site1(std::abs(signed_j)));
        m.add_factor(id, signed_j < 0 ? 1 : 0);
    };
    for (const CubicTerm& t : bbm_cubic_table(tau, T, radius)) {
        // multiplicity of the ordered triple within the symmetric sum
        int mult = 6;
        if (t.j == t.k && t.k == t.l)
            mult = 1;
        else if (t.j == t.k || t.k == t.l || t.j == t.l)
            mult = 3;
        MonKey m;
        add_mode(m, t.j);
        add_mode(m, t.k);
        add_mode(m, t.l);
        terms.push_back(Term{m, Complex(mult * t.g, 0)});
    }
    return Poly(std::move(terms));
}

Poly gpc_hamiltonian(const std::vector<double>& tau, const Lattice& lat) {
    std::vector<Term> terms;
    for (int i = 0; i < lat.size(); ++i) {
        MonKey m;
        m.add_factor(i, 0);
        m.add_factor(i, 1);
        terms.push_back(Term{m, Complex(gpc_frequency(lat.site(i), tau), 0)});
    }
    int S = lat.size();
    // (1/4) sum over ordered quadruples C_mnlk prod (z + zbar): expand the
    // product over bar patterns; collect once per unordered quadruple.
    for (int a = 0; a < S; ++a)
        for (int b = a; b < S; ++b)
            for (int c = b; c < S; ++c)
                for (int e = c; e < S; ++e) {
                    double C =
                        gpc_quartic_coupling(lat.site(a), lat.site(b), lat.site(c), lat.site(e), tau);
                    if (C == 0.0) continue;
                    // number of ordered quadruples mapping to this multiset
                    int ids[4] = {a, b, c, e};
                    int mult = 24;
                    {
                        int run = 1;
                        int distinct_mult = 1;
                        for (int i = 1; i < 4; ++i) {
                            if (ids[i] == ids[i - 1]) {
                                ++run;
                            } else {
                                for (int r = 2; r <= run; ++r) distinct_mult *= r;
                                run = 1;
                            }
                        }
                        for (int r = 2; r <= run; ++r) distinct_mult *= r;
                        mult = 24 / distinct_mult;
                    }
                    double coeff = 0.25 * C * mult;
                    for (int pat = 0; pat < 16; ++pat) {
                        MonKey m;
                        bool ok = true;
                        for (int i = 0; i < 4; ++i)
                            ok = ok && m.add_factor(ids[i], (pat >> i) & 1);
                        if (ok) terms.push_back(Term{m, Complex(coeff, 0)});
                    }
                }
    return Poly(std::move(terms));
}

AssumptionReport check_assumptions(const NormalModel& model, const Poly* hamiltonian,
                                   const Eigen::MatrixXcd* B0, double eps0, int kmax) {
    AssumptionReport rep;
    int S = model.lat.size();
    int N = model.xi0.size() > 0 ? static_cast<int>(model.xi0.size()) : 2;

    // frequency map omega(xi) = xi: central-difference Jacobian at a reference point
    {
        Eigen::VectorXd xi = model.xi0.size() > 0 ? model.xi0 : Eigen::VectorXd::Ones(N);
        auto omega = [](const Eigen::VectorXd& v) { return v; };
        double h = 1e-5 * std::max(1.0, xi.norm());
        Eigen::MatrixXd jac(N, N);
        for (int j = 0; j < N; ++j) {
            Eigen::VectorXd hi = xi, lo = xi;
            hi[j] += h;
            lo[j] -= h;
            jac.col(j) = (omega(hi) - omega(lo)) / (2.0 * h);
        }
        rep.jacobian_det = jac.determinant();
        rep.jacobian_sup = jac.cwiseAbs().maxCoeff();
        rep.frequency_map_nondegenerate = std::abs(rep.jacobian_det) > 1e-8;
        if (!rep.frequency_map_nondegenerate) rep.failures.push_back("frequency map degenerate");
    }

    // decay band of |lambda - varpi| against |j|^{-kappa}
    {
        std::vector<double> xs, ys;
        double c11 = 1e300, c12 = 0;
        for (int i = 0; i < S; ++i) {
            double w = model.lat.weight(i);
            double v = std::abs(model.lambda0[i] - model.varpi);
            if (v <= 0 || w < 2) continue;
            xs.push_back(w);
            ys.push_back(v);
            double c = v * std::pow(w, model.kappa);
            c11 = std::min(c11, c);
            c12 = std::max(c12, c);
        }
        rep.kappa_fit = xs.size() >= 3 ? -loglog_slope(xs, ys) : 0.0;
        rep.c11 = (c11 == 1e300) ? 0.0 : c11;
        rep.c12 = c12;
        if (xs.size() >= 3 && std::abs(rep.kappa_fit - model.kappa) > 0.25 * model.kappa)
            rep.failures.push_back("kappa decay fit off nominal");
    }

    // parameter derivative bound c13 = sup |j|^kappa |d lambda_j / d xi|
    if (model.lambda_slope.size() > 0) {
        double c13 = 0;
        for (int i = 0; i < S; ++i)
            c13 = std::max(c13, model.lambda_slope.row(i).norm() *
                                    std::pow(model.lat.weight(i), model.kappa));
        rep.c13 = c13;
    }

    // directional derivative of (k,omega) +- lambda_i(+lambda_j) along k/|k|:
    // equals |k| + O(c13); evaluate the worst case over small k
    {
        double dmin = 1e300;
        for (int k1 = -kmax; k1 <= kmax; ++k1)
            for (int k2 = 0; k2 <= kmax; ++k2) {
                if (k1 == 0 && k2 == 0) continue;
                double kn = std::sqrt(double(k1) * k1 + double(k2) * k2);
                // |d/du (k,omega)| = |k|; lambda contributes at most c13 along u
                double v = kn - rep.c13;
                dmin = std::min(dmin, v);
            }
        rep.directional_min = dmin;
        rep.directional_ok = dmin > 0;
        if (!rep.directional_ok) rep.failures.push_back("directional derivative nonpositive");
    }

    if (hamiltonian) {
        rep.reality_defect_h = reality_defect(*hamiltonian);
        rep.reality_ok = rep.reality_defect_h <= 1e-12 * std::max(1.0, hamiltonian->max_abs());
        if (!rep.reality_ok) rep.failures.push_back("hamiltonian reality defect");
    } else {
        rep.reality_ok = true;
    }

    if (B0 && B0->size() > 0) {
        rep.b0_norm_pq = op_norm(B0->cwiseAbs().cast<Complex>(), model.lat, model.q, model.lat,
                                 model.p);
    }
    rep.b0_ok = rep.b0_norm_pq <= 10.0 * eps0 + 1e-15;
    if (!rep.b0_ok) rep.failures.push_back("initial operator bound exceeds scale");

    return rep;
}

}  // namespace kam
