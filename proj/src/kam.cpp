#include "kam/kam.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "kam/norms.hpp"

namespace kam {

namespace {

constexpr double kPi = 3.14159265358979323846;

double spectral_norm(const Eigen::MatrixXcd& A) {
    if (A.size() == 0) return 0.0;
    Eigen::JacobiSVD<Eigen::MatrixXcd> svd(A);
    return svd.singularValues()(0);
}

int barred_degree(const MonKey& m) {
    int v = 0;
    for (const Slot& s : m.slots)
        if (s.bar == 1) v += s.exp;
    return v;
}

/// (omega, y) + <(Lambda + B) z, zbar> as a polynomial.
Poly normal_poly(const Eigen::VectorXd& omega, const Eigen::VectorXd& lambda,
                 const Eigen::MatrixXcd& B) {
    std::vector<Term> terms;
    for (int t = 0; t < omega.size(); ++t) {
        if (omega[t] == 0.0) continue;
        MonKey m;
        m.gamma[static_cast<size_t>(t)] = 1;
        terms.push_back(Term{m, Complex(omega[t], 0.0)});
    }
    int n = static_cast<int>(lambda.size());
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            Complex c = (B.size() ? B(i, j) : Complex(0, 0));
            if (i == j) c += lambda[i];
            if (c == 0.0) continue;
            MonKey m;
            m.add_factor(j, 0);
            m.add_factor(i, 1);
            terms.push_back(Term{m, c});
        }
    }
    return Poly(std::move(terms));
}

using ModeK = std::array<int8_t, kMaxAngles>;

double k_dot(const ModeK& k, const Eigen::VectorXd& omega) {
    double v = 0.0;
    for (int t = 0; t < omega.size() && t < kMaxAngles; ++t)
        v += static_cast<double>(k[static_cast<size_t>(t)]) * omega[t];
    return v;
}

int k_l1(const ModeK& k) {
    int v = 0;
    for (int8_t e : k) v += std::abs(static_cast<int>(e));
    return v;
}

/// Fourier modes of a degree-one block, gathered as site vectors.
std::map<ModeK, Eigen::VectorXcd> gather_vec(const Poly& p, int nsites, int want_bar) {
    std::map<ModeK, Eigen::VectorXcd> out;
    for (const Term& t : p.terms()) {
        int site = -1;
        for (const Slot& s : t.key.slots) {
            if (s.bar == 0xFF) continue;
            if (s.bar != want_bar || s.exp != 1 || site >= 0)
                throw std::logic_error("gather_vec: term is not a pure degree-one block entry");
            site = s.site;
        }
        if (site < 0) throw std::logic_error("gather_vec: missing site factor");
        auto [it, fresh] = out.try_emplace(t.key.k, Eigen::VectorXcd());
        if (fresh) it->second = Eigen::VectorXcd::Zero(nsites);
        it->second[site] += t.c;
    }
    return out;
}

Poly scatter_vec(const std::map<ModeK, Eigen::VectorXcd>& modes, int want_bar) {
    std::vector<Term> terms;
    for (const auto& [k, v] : modes) {
        for (int j = 0; j < v.size(); ++j) {
            if (v[j] == 0.0) continue;
            MonKey m;
            m.k = k;
            m.add_factor(j, want_bar);
            terms.push_back(Term{m, v[j]});
        }
    }
    return Poly(std::move(terms));
}

/// Same-conjugation quadratic block as symmetric form matrices:
/// sum_{i<=j} c_ij u_i u_j -> A with A_ij = A_ji = c_ij/2 (i != j), A_ii = c_ii.
std::map<ModeK, Eigen::MatrixXcd> gather_sym(const Poly& p, int nsites, int want_bar) {
    std::map<ModeK, Eigen::MatrixXcd> out;
    for (const Term& t : p.terms()) {
        int a = -1, b = -1;
        for (const Slot& s : t.key.slots) {
            if (s.bar == 0xFF) continue;
            if (s.bar != want_bar) throw std::logic_error("gather_sym: mixed conjugation");
            if (s.exp == 2 && a < 0) {
                a = b = s.site;
            } else if (s.exp == 1 && a < 0) {
                a = s.site;
            } else if (s.exp == 1 && b < 0) {
                b = s.site;
            } else {
                throw std::logic_error("gather_sym: term is not quadratic");
            }
        }
        if (a < 0 || b < 0) throw std::logic_error("gather_sym: missing factors");
        auto [it, fresh] = out.try_emplace(t.key.k, Eigen::MatrixXcd());
        if (fresh) it->second = Eigen::MatrixXcd::Zero(nsites, nsites);
        if (a == b) {
            it->second(a, a) += t.c;
        } else {
            it->second(a, b) += 0.5 * t.c;
            it->second(b, a) += 0.5 * t.c;
        }
    }
    return out;
}

Poly scatter_sym(const std::map<ModeK, Eigen::MatrixXcd>& modes, int want_bar) {
    std::vector<Term> terms;
    for (const auto& [k, A] : modes) {
        for (int i = 0; i < A.rows(); ++i) {
            for (int j = i; j < A.cols(); ++j) {
                Complex c = (i == j) ? A(i, i) : A(i, j) + A(j, i);
                if (c == 0.0) continue;
                MonKey m;
                m.k = k;
                m.add_factor(i, want_bar);
                m.add_factor(j, want_bar);
                terms.push_back(Term{m, c});
            }
        }
    }
    return Poly(std::move(terms));
}

/// Mixed block <A z, zbar>: coefficient of z_j zbar_i is A_ij.
std::map<ModeK, Eigen::MatrixXcd> gather_mixed(const Poly& p, int nsites) {
    std::map<ModeK, Eigen::MatrixXcd> out;
    for (const Term& t : p.terms()) {
        int zi = -1, bi = -1;
        for (const Slot& s : t.key.slots) {
            if (s.bar == 0xFF) continue;
            if (s.exp != 1) throw std::logic_error("gather_mixed: bad exponent");
            (s.bar ? bi : zi) = s.site;
        }
        if (zi < 0 || bi < 0) throw std::logic_error("gather_mixed: need one z and one zbar");
        auto [it, fresh] = out.try_emplace(t.key.k, Eigen::MatrixXcd());
        if (fresh) it->second = Eigen::MatrixXcd::Zero(nsites, nsites);
        it->second(bi, zi) += t.c;
    }
    return out;
}

Poly scatter_mixed(const std::map<ModeK, Eigen::MatrixXcd>& modes) {
    std::vector<Term> terms;
    for (const auto& [k, A] : modes) {
        for (int i = 0; i < A.rows(); ++i) {
            for (int j = 0; j < A.cols(); ++j) {
                if (A(i, j) == 0.0) continue;
                MonKey m;
                m.k = k;
                m.add_factor(j, 0);
                m.add_factor(i, 1);
                terms.push_back(Term{m, A(i, j)});
            }
        }
    }
    return Poly(std::move(terms));
}

std::string mode_str(const ModeK& k, int nangles) {
    std::ostringstream os;
    os << "(";
    for (int t = 0; t < nangles; ++t) os << (t ? "," : "") << static_cast<int>(k[t]);
    os << ")";
    return os.str();
}

/// F(k) = R(k) / (i (k, omega)) for the scalar tangential blocks (x and y);
/// modes beyond the cutoff stay unsolved (they flow into the next R).
Poly solve_tangential(const Poly& rhs, const Eigen::VectorXd& omega, double K, double floor,
                      double* min_div) {
    std::vector<Term> terms;
    for (const Term& t : rhs.terms()) {
        if (t.key.kl1() > static_cast<int>(K)) continue;
        if (t.key.kl1() == 0)
            throw std::domain_error("solve_tangential: angle average present in the right-hand side");
        double d = k_dot(t.key.k, omega);
        if (std::abs(d) <= floor)
            throw std::domain_error("solve_tangential: divisor under the floor at mode " +
                                    mode_str(t.key.k, static_cast<int>(omega.size())));
        if (min_div) *min_div = std::min(*min_div, std::abs(d));
        terms.push_back(Term{t.key, t.c / Complex(0.0, d)});
    }
    return Poly(std::move(terms));
}

Poly filter_block(const Poly& low, int g, int z, int nbar) {
    return low.filter([g, z, nbar](const MonKey& m) {
        return m.ydeg() == g && m.zdeg() == z && barred_degree(m) == nbar;
    });
}

/// k = 0 part of the y and z-zbar blocks (the update hats), exact.
Poly hat_part(const Poly& low) {
    return low.filter([](const MonKey& m) {
        if (m.kl1() != 0) return false;
        int g = m.ydeg(), z = m.zdeg();
        return (g == 1 && z == 0) || (g == 0 && z == 2 && barred_degree(m) == 1);
    });
}

NormContext make_ctx(const KamState& st, const KamOptions& opt, double s, double r) {
    NormContext ctx;
    ctx.nangles = st.nangles;
    ctx.lattice = &st.model.lat;
    ctx.p = st.model.p;
    ctx.q = st.model.q;
    ctx.s = s;
    ctx.r = r;
    ctx.phase_samples = opt.phase_samples;
    ctx.boundary_samples = opt.boundary_samples;
    ctx.seed = opt.seed;
    return ctx;
}

TorusEmbedding identity_embedding(int nangles, const Lattice& lat) {
    TorusEmbedding emb;
    emb.nangles = nangles;
    emb.lat = lat;
    emb.xshift.resize(static_cast<size_t>(nangles));
    for (int t = 0; t < nangles; ++t) {
        MonKey m;
        m.gamma[static_cast<size_t>(t)] = 1;
        emb.y.push_back(Poly::monomial(m, 1.0));
    }
    for (int j = 0; j < lat.size(); ++j) {
        MonKey mz, mb;
        mz.add_factor(j, 0);
        mb.add_factor(j, 1);
        emb.z.push_back(Poly::monomial(mz, 1.0));
        emb.zbar.push_back(Poly::monomial(mb, 1.0));
    }
    return emb;
}

/// sum_{n>=1} ad_F^n(x_t) / n! starting from ad_F(x_t) = dF/dy_t.
Poly angle_shift_series(int t, const Poly& F, int nangles, const Caps& caps, int max_order,
                        double tol, OpStats* stats) {
    Poly u = F.dy(t);
    Poly acc = u;
    double fact = 1.0;
    for (int n = 2; n <= max_order; ++n) {
        u = poisson(u, F, nangles, caps, stats);
        fact *= n;
        Poly term = u * Complex(1.0 / fact, 0.0);
        double mass = term.abs_sum();
        if (mass == 0.0) break;
        acc += term;
        if (mass < tol) break;
    }
    return acc;
}

void advance_embedding(TorusEmbedding& emb, const Poly& F, const Caps& caps, int max_order,
                       double tol, OpStats* stats) {
    int N = emb.nangles;
    for (int t = 0; t < N; ++t) {
        Poly g = angle_shift_series(t, F, N, caps, max_order, tol, stats);
        emb.xshift[static_cast<size_t>(t)] =
            g + lie_transform(emb.xshift[static_cast<size_t>(t)], F, N, caps, max_order, tol).value;
        emb.y[static_cast<size_t>(t)] =
            lie_transform(emb.y[static_cast<size_t>(t)], F, N, caps, max_order, tol).value;
    }
    for (size_t j = 0; j < emb.z.size(); ++j) {
        emb.z[j] = lie_transform(emb.z[j], F, N, caps, max_order, tol).value;
        emb.zbar[j] = lie_transform(emb.zbar[j], F, N, caps, max_order, tol).value;
    }
}

}  // namespace

// --------------------------------------------------------------- schedule

StepScale schedule(int m, const KamParams& prm) {
    if (m < 0) throw std::invalid_argument("schedule: negative step index");
    if (!(prm.eps0 > 0.0 && prm.eps0 < 1.0) || !(prm.rho0 > 0.0))
        throw std::invalid_argument("schedule: need 0 < eps0 < 1 and rho0 > 0");
    auto shrink = [](int i) {
        double acc = 0.0;
        for (int v = 1; v <= i; ++v) acc += 1.0 / (static_cast<double>(v) * v);
        return acc / (2.0 * kPi * kPi / 6.0);  // sum_{v>=1} v^-2 = pi^2/6
    };
    StepScale sc;
    sc.m = m;
    sc.eps = std::pow(prm.eps0, std::pow(1.0 + prm.rho0, m));
    sc.eps_next = std::pow(prm.eps0, std::pow(1.0 + prm.rho0, m + 1));
    sc.e = shrink(m);
    double e_next = shrink(m + 1);
    sc.s = prm.s0 * (1.0 - sc.e);
    sc.s_next = prm.s0 * (1.0 - e_next);
    sc.r = prm.r0 * (1.0 - sc.e);
    sc.r_next = prm.r0 * (1.0 - e_next);
    for (int j = 0; j <= 6; ++j) {
        double w = static_cast<double>(j) / 6.0;
        sc.s_bridge[static_cast<size_t>(j)] = (1.0 - w) * sc.s + w * sc.s_next;
        sc.r_bridge[static_cast<size_t>(j)] = (1.0 - w) * sc.r + w * sc.r_next;
    }
    sc.K = 2.0 * std::abs(std::log(sc.eps)) / (sc.s_bridge[5] - sc.s_bridge[6]);
    return sc;
}

// ------------------------------------------------------------------ split

bool high_class(const MonKey& m) { return 2 * m.ydeg() + m.zdeg() >= 3; }

PerturbationSplit split_perturbation(const Poly& R) {
    PerturbationSplit out;
    std::vector<Term> low, high;
    for (const Term& t : R.terms()) {
        if (high_class(t.key)) {
            high.push_back(t);
        } else if (t.key.ydeg() == 0 && t.key.zdeg() == 0 && t.key.kl1() == 0) {
            out.gauge += t.c;
        } else {
            low.push_back(t);
        }
    }
    out.low = Poly(std::move(low));
    out.high = Poly(std::move(high));
    return out;
}

HatUpdate frequency_and_operator_update(const Poly& low, int nangles, int nsites) {
    HatUpdate out;
    out.omega_shift = Eigen::VectorXd::Zero(nangles);
    out.b_shift = Eigen::MatrixXcd::Zero(nsites, nsites);
    for (const Term& t : low.terms()) {
        if (t.key.kl1() != 0) continue;
        int g = t.key.ydeg(), z = t.key.zdeg();
        if (g == 1 && z == 0) {
            for (int a = 0; a < nangles; ++a) {
                if (t.key.gamma[static_cast<size_t>(a)] == 1) {
                    out.omega_shift[a] += t.c.real();
                    out.imag_defect = std::max(out.imag_defect, std::abs(t.c.imag()));
                }
            }
        } else if (g == 0 && z == 2 && barred_degree(t.key) == 1) {
            int zi = -1, bi = -1;
            for (const Slot& s : t.key.slots) {
                if (s.bar == 0xFF) continue;
                (s.bar ? bi : zi) = s.site;
            }
            out.b_shift(bi, zi) += t.c;
        }
    }
    return out;
}

// ---------------------------------------------------- bracket corrections

Poly BracketCorrections::low() const {
    return y_block + z_block + zbar_block + zz_block + zzbar_block + zbarzbar_block;
}

BracketCorrections bracket_corrections(const Poly& Ptilde, const Poly& Fx, const Poly& Fz,
                                       const Poly& Fzbar, int nangles, const Caps& caps) {
    BracketCorrections out;
    Poly Fsum = Fx + Fz + Fzbar;
    if (Ptilde.empty() || Fsum.empty()) return out;
    Poly br = poisson(Ptilde, Fsum, nangles, caps, &out.stats);
    std::vector<Term> y, z, zb, zz, zzb, zbzb, high;
    for (const Term& t : br.terms()) {
        int g = t.key.ydeg(), zd = t.key.zdeg();
        if (2 * g + zd >= 3 || (g == 0 && zd == 0)) {
            high.push_back(t);
        } else if (g == 1) {
            y.push_back(t);
        } else if (zd == 1) {
            (barred_degree(t.key) ? zb : z).push_back(t);
        } else {
            int nb = barred_degree(t.key);
            (nb == 0 ? zz : nb == 1 ? zzb : zbzb).push_back(t);
        }
    }
    out.y_block = Poly(std::move(y));
    out.z_block = Poly(std::move(z));
    out.zbar_block = Poly(std::move(zb));
    out.zz_block = Poly(std::move(zz));
    out.zzbar_block = Poly(std::move(zzb));
    out.zbarzbar_block = Poly(std::move(zbzb));
    out.high = Poly(std::move(high));
    return out;
}

// -------------------------------------------------------------- Lie series

LieConjugation lie_conjugate(const Poly& H, const Poly& F, int nangles, const Caps& caps,
                             int max_order, double tol) {
    LieConjugation out;
    out.value = H;
    if (F.empty() || H.empty()) return out;
    Poly t = poisson(H, F, nangles, caps, &out.stats);
    out.bracket1 = t;
    out.value += t;
    out.order_used = 1;
    out.last_term_abs = t.abs_sum();
    double prev = out.last_term_abs;
    double fact = 1.0;
    for (int n = 2; n <= max_order; ++n) {
        t = poisson(t, F, nangles, caps, &out.stats);
        fact *= n;
        Poly term = t * Complex(1.0 / fact, 0.0);
        double mass = term.abs_sum();
        if (mass == 0.0) break;
        if (n > 2 && mass > prev && mass > tol)
            throw std::runtime_error("lie_conjugate: series terms growing at order " +
                                     std::to_string(n) + " (" + std::to_string(prev) + " -> " +
                                     std::to_string(mass) + ")");
        out.value += term;
        out.remainder += term;
        out.order_used = n;
        out.last_term_abs = mass;
        prev = mass;
        if (mass < tol) break;
    }
    return out;
}

// ------------------------------------------------------------------ state

KamState make_state(const NormalModel& model, const Eigen::VectorXd& omega, const Poly& R0,
                    const KamOptions& opt) {
    KamState st;
    st.nangles = static_cast<int>(omega.size());
    if (st.nangles > kMaxAngles) throw std::invalid_argument("make_state: too many angles");
    st.model = model;
    st.xi = omega;
    st.omega0 = omega;
    st.omega = omega;
    st.lambda = model.lambda0;
    int n = model.lat.size();
    st.B0 = Eigen::MatrixXcd::Zero(n, n);
    st.B = st.B0;
    PerturbationSplit sp = split_perturbation(R0);
    st.R = sp.low;
    st.P = sp.high;
    st.energy_const = sp.gauge.real();
    st.H_initial = normal_poly(omega, model.lambda0, st.B0) + R0;
    st.profile = ExponentProfile::desk(std::max(st.nangles, 1), model.lat.dim(), model.kappa,
                                       model.p);
    st.profile.divisor_floor = opt.divisor_floor;
    st.box.lower = omega;
    st.box.upper = omega;
    st.box.samples = omega;
    st.box.alive.assign(1, 1);
    st.embedding = identity_embedding(st.nangles, model.lat);
    return st;
}

KamState initial_state(const NormalFormPackage& pkg, const KamOptions& opt) {
    int N = static_cast<int>(pkg.J.size());
    if (N == 0 || N > kMaxAngles) throw std::invalid_argument("initial_state: bad tangent set");
    double se = std::sqrt(opt.scales.eps0);
    Eigen::VectorXd zeta = Eigen::VectorXd::Constant(N, 1.5 * se);
    ActionAngleForm aa = action_angle_reduce(pkg, zeta, opt.y_order, opt.scales.eps0);

    KamState st;
    st.nangles = N;
    NormalModel mdl;
    mdl.lat = aa.normal;
    mdl.lambda0 = aa.Omega;
    mdl.lambda_slope = pkg.twist.transpose()
                           .partialPivLu()
                           .solve(pkg.coupling.transpose())
                           .transpose();  // coupling * twist^{-1} = dOmega0/dxi
    mdl.xi0 = aa.omega;
    mdl.varpi = pkg.varpi;
    mdl.kappa = pkg.kappa;
    mdl.p = pkg.p;
    mdl.q = pkg.p + pkg.kappa;
    st.model = mdl;
    st.xi = aa.omega;
    st.omega0 = aa.omega;
    st.omega = aa.omega;
    st.lambda = aa.Omega;
    int n = mdl.lat.size();
    st.B0 = Eigen::MatrixXcd::Zero(n, n);
    st.B = st.B0;
    PerturbationSplit sp = split_perturbation(aa.R0);
    st.R = sp.low;
    st.P = sp.high;
    st.energy_const = aa.constant + sp.gauge.real();
    st.sqrt_truncation = aa.sqrt_truncation;
    st.H_initial = aa.H0 + aa.R0;
    st.profile = ExponentProfile::desk(N, mdl.lat.dim(), mdl.kappa, mdl.p);
    st.profile.divisor_floor = opt.divisor_floor;

    // Sobol samples of the action box Pi_0, mapped to frequency space.
    Eigen::VectorXd lo_z = Eigen::VectorXd::Constant(N, se);
    Eigen::VectorXd hi_z = Eigen::VectorXd::Constant(N, 2.0 * se);
    ParameterBox zbox = sobol_box(lo_z, hi_z, std::max(opt.samples, 1));
    st.box.samples.resize(N, zbox.samples.cols());
    for (int c = 0; c < zbox.samples.cols(); ++c)
        st.box.samples.col(c) = pkg.xi_of(zbox.samples.col(c));
    st.box.lower = st.box.samples.rowwise().minCoeff();
    st.box.upper = st.box.samples.rowwise().maxCoeff();
    st.box.alive.assign(static_cast<size_t>(st.box.samples.cols()), 1);
    st.embedding = identity_embedding(N, mdl.lat);
    return st;
}

// --------------------------------------------------------------- excision

StepExcision step_excision(KamState& st, const std::vector<std::array<int, kMaxAngles>>& modes,
                           double K) {
    StepExcision out;
    const double thr_t = st.profile.tangent_threshold(K);
    const double thr_1 = st.profile.first_threshold(K);
    const double thr_2 = st.profile.second_threshold(K);
    const double varpi = st.model.varpi;
    Eigen::VectorXd shift = st.omega - st.xi;
    Eigen::VectorXd bdiag = st.B.diagonal().real();
    int n = st.model.lat.size();
    int N = st.nangles;
    for (int c = 0; c < st.box.count(); ++c) {
        if (!st.box.alive[static_cast<size_t>(c)]) continue;
        Eigen::VectorXd xi_s = st.box.samples.col(c);
        Eigen::VectorXd om = xi_s + shift;
        Eigen::VectorXd lam = st.model.lambda(xi_s) + bdiag;
        double mt = std::numeric_limits<double>::infinity();
        double m1 = mt, m2 = mt;
        int fail = 0;  // 0 alive, 1/2/3 per family
        for (const auto& kk : modes) {
            double ko = 0.0;
            int l1k = 0;
            for (int t = 0; t < N; ++t) {
                ko += kk[static_cast<size_t>(t)] * om[t];
                l1k += std::abs(kk[static_cast<size_t>(t)]);
            }
            if (l1k == 0 || l1k > static_cast<int>(K)) continue;
            mt = std::min(mt, std::abs(ko));
            if (varpi != 0.0)
                mt = std::min(mt, std::min(std::abs(varpi - ko), std::abs(varpi + ko)));
            if (mt < thr_t) {
                fail = 1;
                break;
            }
            for (int j = 0; j < n && fail == 0; ++j) {
                m1 = std::min(m1, std::min(std::abs(ko + lam[j]), std::abs(ko - lam[j])));
                if (m1 < thr_1) fail = 2;
            }
            if (fail) break;
            for (int i = 0; i < n && fail == 0; ++i) {
                for (int j = i; j < n; ++j) {
                    double sum = lam[i] + lam[j];
                    m2 = std::min(m2, std::min(std::abs(ko + sum), std::abs(ko - sum)));
                    if (i < j) {
                        double dif = lam[i] - lam[j];
                        m2 = std::min(m2, std::min(std::abs(ko + dif), std::abs(ko - dif)));
                    }
                    if (m2 < thr_2) {
                        fail = 3;
                        break;
                    }
                }
            }
            if (fail) break;
        }
        if (fail) {
            st.box.alive[static_cast<size_t>(c)] = 0;
            (fail == 1 ? out.killed_tangent : fail == 2 ? out.killed_first : out.killed_second)++;
        } else {
            out.min_tangent = std::min(out.min_tangent, mt);
            out.min_first = std::min(out.min_first, m1);
            out.min_second = std::min(out.min_second, m2);
        }
    }
    out.surviving_fraction = st.box.surviving_fraction();
    return out;
}

// ------------------------------------------------------------------- step

StepTrace kam_step(KamState& st, const KamOptions& opt, StepDebug* dbg) {
    const int N = st.nangles;
    const int n = st.model.lat.size();
    const double floor = opt.divisor_floor;
    StepScale sc = schedule(st.m, opt.scales);
    // weighted floor: products drop accumulated terms whose coefficient could
    // not reach opt.drop_weighted even under the full e^{s_m |k|_1} weight
    Caps caps = opt.caps;
    caps.drop_floor = std::max(caps.drop_floor, opt.drop_weighted);
    caps.kl1_weight = sc.s;
    double lie_tol = opt.lie_tol > 0.0 ? opt.lie_tol : 1e-3 * sc.eps_next;

    StepTrace tr;
    tr.m = st.m;
    tr.eps = sc.eps;
    tr.K = sc.K;
    OpStats stats;

    // temporary stage timing (dev only)
    auto t_last = std::chrono::steady_clock::now();
    const bool timing = std::getenv("KAM_TIMING") != nullptr;
    auto lap = [&](const char* what) {
        if (!timing) return;
        auto now = std::chrono::steady_clock::now();
        std::fprintf(stderr, "    [%s] %.0f ms\n", what,
                     std::chrono::duration<double, std::milli>(now - t_last).count());
        t_last = now;
    };

    NormContext ctx_in = make_ctx(st, opt, sc.s, sc.r);
    tr.r_norm_before = hamiltonian_vf_norm(st.R, ctx_in);
    tr.cm_ratio = tr.r_norm_before / sc.eps;
    double base_ratio = st.trace.empty() ? tr.cm_ratio : st.trace.front().cm_ratio;
    tr.cm_flag = tr.cm_ratio > std::pow(2.0, st.m) * base_ratio * (1.0 + 1e-12);
    lap("norm_in");

    // ---- stage 1: angle averages of the y / z-zbar blocks into (omega, B)
    PerturbationSplit sp = split_perturbation(st.R);
    st.energy_const += sp.gauge.real();
    Poly hat1 = hat_part(sp.low);
    HatUpdate h1 = frequency_and_operator_update(hat1, N, n);
    Eigen::VectorXd omega_t = st.omega + h1.omega_shift;
    Eigen::MatrixXcd B_t = st.B + h1.b_shift;
    tr.omega_update = N ? h1.omega_shift.cwiseAbs().maxCoeff() : 0.0;
    tr.b_update = spectral_norm(h1.b_shift);
    tr.hat_imag_defect = h1.imag_defect;
    Poly R_star = sp.low - hat1;
    Poly Ptilde = sp.high + st.P;
    Poly H0t = normal_poly(omega_t, st.lambda, B_t);
    Eigen::VectorXd lam_eff = st.lambda + B_t.diagonal().real();

    // Every high-class key has 2*ydeg + zdeg >= 3, every low-class key has
    // <= 2, and one bracket lowers that grading by at most 2.  Only the
    // <= 4 slice of the pile can therefore reach a low class in one bracket;
    // the rest feeds strictly high-class bookkeeping, where a weighted floor
    // (recorded in trimmed_mass) is safe.  Operand terms below
    // tail_trim / (64 * max weighted generator coefficient) cannot produce a
    // product above the output floor, so they are trimmed up front.
    auto wscale = [&sc](const MonKey& m) { return std::exp(sc.s * m.kl1()); };
    auto wmax_of = [&](const Poly& p) {
        double v = 0.0;
        for (const Term& t : p.terms()) v = std::max(v, std::abs(t.c) * wscale(t.key));
        return v;
    };
    auto reach_low = [](const MonKey& m) { return 2 * m.ydeg() + m.zdeg() <= 4; };
    Poly P_reach = Ptilde.filter(reach_low);
    Poly P_book = Ptilde.filter([&](const MonKey& m) { return !reach_low(m); });
    Caps book_caps = caps;
    book_caps.drop_floor = std::max(book_caps.drop_floor, opt.tail_trim);
    auto book_poisson = [&](const Poly& pile, const Poly& gen) {
        if (opt.tail_trim <= 0.0) return poisson(pile, gen, N, caps, &stats);
        double wg = wmax_of(gen);
        if (wg == 0.0 || pile.empty()) return Poly();
        Poly op = pile;
        tr.trimmed_mass += op.trim(opt.tail_trim / (64.0 * wg), wscale) * 64.0 * wg;
        OpStats bs;
        Poly out = poisson(op, gen, N, book_caps, &bs);
        tr.trimmed_mass += bs.dropped_abs;
        return out;
    };

    // ---- x block and phase-A corrections (z / zbar need only Fx)
    Poly Fx = solve_tangential(filter_block(R_star, 0, 0, 0), omega_t, sc.K, floor,
                               &tr.min_div_tangent);
    BracketCorrections corrA = bracket_corrections(P_reach, Fx, Poly(), Poly(), N, caps);
    stats.dropped_abs += corrA.stats.dropped_abs;
    lap("corrA");

    std::vector<int> head(static_cast<size_t>(n)), tail;
    for (int j = 0; j < n; ++j) head[static_cast<size_t>(j)] = j;
    double split_radius = st.profile.split_radius_first(sc.K);
    if (std::isfinite(split_radius)) {
        auto parts = split_sites(st.model.lat, split_radius);
        head = parts.first;
        tail = parts.second;
    }

    auto solve_first_block = [&](const Poly& rhs, int bar) {
        // bar == 0: ((k,omega) + Lambda + B^T) Fhat = -i Rhat
        // bar == 1: (-(k,omega) + Lambda + B)  Fhat = +i Rhat
        std::map<ModeK, Eigen::VectorXcd> modes = gather_vec(rhs, n, bar);
        std::map<ModeK, Eigen::VectorXcd> sol;
        Eigen::MatrixXcd Bt_tr = B_t.transpose();
        const Eigen::MatrixXcd& Bop = bar ? B_t : Bt_tr;
        for (const auto& [k, R] : modes) {
            if (k_l1(k) > static_cast<int>(sc.K)) continue;
            double ko = k_dot(k, omega_t);
            double a = bar ? -ko : ko;
            double dmin = std::numeric_limits<double>::infinity();
            for (int j = 0; j < n; ++j) dmin = std::min(dmin, std::abs(a + lam_eff[j]));
            if (dmin <= floor)
                throw std::domain_error("kam_step: first-order divisor under the floor at mode " +
                                        mode_str(k, N));
            tr.min_div_first = std::min(tr.min_div_first, dmin);
            Complex mul = bar ? Complex(0.0, 1.0) : Complex(0.0, -1.0);
            FirstSolveReport rep;
            sol[k] = solve_first_melnikov(a, st.model.varpi, st.lambda, Bop,
                                          (R * mul).eval(), head, tail, &rep);
            tr.max_first_residual = std::max(tr.max_first_residual, rep.residual);
        }
        return scatter_vec(sol, bar);
    };

    Poly Fz = solve_first_block(filter_block(R_star, 0, 1, 0) + corrA.z_block, 0);
    Poly Fzb = solve_first_block(filter_block(R_star, 0, 1, 1) + corrA.zbar_block, 1);
    lap("solve_z");

    // ---- phase-B corrections and stage-2 hats
    BracketCorrections corr = bracket_corrections(P_reach, Fx, Fz, Fzb, N, caps);
    stats.dropped_abs += corr.stats.dropped_abs;
    Poly book_corr = book_poisson(P_book, Fx + Fz + Fzb);
    lap("corrB");
    Poly corr_low = corr.low();
    Poly hat2 = hat_part(corr_low);
    HatUpdate h2 = frequency_and_operator_update(hat2, N, n);
    tr.omega_update2 = N ? h2.omega_shift.cwiseAbs().maxCoeff() : 0.0;
    tr.b_update2 = spectral_norm(h2.b_shift);
    tr.hat_imag_defect = std::max(tr.hat_imag_defect, h2.imag_defect);
    Poly Rplus_star = corr_low - hat2;

    // ---- y block
    Poly Fy = solve_tangential(filter_block(R_star, 1, 0, 0) + corr.y_block -
                                   hat2.filter([](const MonKey& m) { return m.ydeg() == 1; }),
                               omega_t, sc.K, floor, &tr.min_div_tangent);

    // ---- quadratic blocks
    auto pair_min = [&](double ko, int kind) {
        // kind 0: ko + (lam_i + lam_j); 1: ko - (lam_i + lam_j); 2: ko + lam_i - lam_j
        double dmin = std::numeric_limits<double>::infinity();
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                double v = kind == 0   ? ko + lam_eff[i] + lam_eff[j]
                           : kind == 1 ? ko - lam_eff[i] - lam_eff[j]
                                       : ko + lam_eff[i] - lam_eff[j];
                dmin = std::min(dmin, std::abs(v));
            }
        }
        return dmin;
    };

    auto solve_sym_block = [&](const Poly& rhs, int bar) {
        // bar == 0 (zz):      ((k,omega) + (L+B^T)) F + F (L+B)  = -i Rhat
        // bar == 2 (zbzb):    (-(k,omega) + (L+B)) F + F (L+B^T) = +i Rhat
        std::map<ModeK, Eigen::MatrixXcd> modes = gather_sym(rhs, n, bar ? 1 : 0);
        std::map<ModeK, Eigen::MatrixXcd> sol;
        for (const auto& [k, R] : modes) {
            if (k_l1(k) > static_cast<int>(sc.K)) continue;
            double ko = k_dot(k, omega_t);
            double komega = bar ? -ko : ko;
            double dmin = pair_min(komega, 0);
            if (dmin <= floor)
                throw std::domain_error("kam_step: second-order divisor under the floor at mode " +
                                        mode_str(k, N));
            tr.min_div_second = std::min(tr.min_div_second, dmin);
            Complex mul = bar ? Complex(0.0, 1.0) : Complex(0.0, -1.0);
            SecondSolveReport rep;
            Eigen::MatrixXcd Bt_tr = B_t.transpose();
            const Eigen::MatrixXcd& Bl = bar ? B_t : Bt_tr;
            const Eigen::MatrixXcd& Br = bar ? Bt_tr : B_t;
            sol[k] = solve_second_melnikov(komega, +1, +1, 0.0, st.lambda, Bl, Br,
                                           (R * mul).eval(), head, tail,
                                           SylvesterStrategy::Auto, &rep);
            tr.max_second_residual = std::max(tr.max_second_residual, rep.residual);
        }
        return scatter_sym(sol, bar ? 1 : 0);
    };

    Poly Fzz = solve_sym_block(filter_block(R_star, 0, 2, 0) + corr.zz_block, 0);
    Poly Fzbzb = solve_sym_block(filter_block(R_star, 0, 2, 2) + corr.zbarzbar_block, 2);

    Poly Fzzb;
    {
        // (-(k,omega) + (L+B)) F - F (L+B) = +i Rhat, k != 0
        Poly rhs = filter_block(R_star, 0, 2, 1) + corr.zzbar_block -
                   hat2.filter([](const MonKey& m) { return m.zdeg() == 2; });
        std::map<ModeK, Eigen::MatrixXcd> modes = gather_mixed(rhs, n);
        std::map<ModeK, Eigen::MatrixXcd> sol;
        for (const auto& [k, R] : modes) {
            if (k_l1(k) == 0)
                throw std::domain_error("kam_step: angle average left in the z-zbar block");
            if (k_l1(k) > static_cast<int>(sc.K)) continue;
            double ko = k_dot(k, omega_t);
            double dmin = pair_min(-ko, 2);
            if (dmin <= floor)
                throw std::domain_error("kam_step: difference divisor under the floor at mode " +
                                        mode_str(k, N));
            tr.min_div_second = std::min(tr.min_div_second, dmin);
            SecondSolveReport rep;
            sol[k] = solve_second_melnikov(-ko, +1, -1, 0.0, st.lambda, B_t, B_t,
                                           (R * Complex(0.0, 1.0)).eval(), head, tail,
                                           SylvesterStrategy::Auto, &rep);
            tr.max_second_residual = std::max(tr.max_second_residual, rep.residual);
        }
        Fzzb = scatter_mixed(sol);
    }

    Poly F = Fx + Fy + Fz + Fzb + Fzz + Fzzb + Fzbzb;
    tr.f_norm = hamiltonian_vf_norm(F, ctx_in);

    // ---- cancellation defect and the Lie pieces
    Poly brH0 = poisson(H0t, F, N, caps, &stats);
    Poly defect = brH0 + R_star + Rplus_star;
    tr.homological_defect = cutoff(defect, static_cast<int>(sc.K)).abs_sum();
    tr.gamma_leftover = cutoff_tail(defect, static_cast<int>(sc.K)).abs_sum();
    lap("brH0_defect");

    Poly brR = poisson(R_star, F, N, caps, &stats);
    Poly brP_rest = book_poisson(Ptilde, Fy + Fzz + Fzzb + Fzbzb);
    Poly t_prev = brH0 + brR + corr_low + corr.high + book_corr + brP_rest;  // {H, F}
    lap("brR_brP_trim");
    Poly rem;
    {
        // The tail operand feeds the next R through its low-class part, so it
        // gets a tighter guard than the bookkeeping lanes: an absolute floor
        // at rem_guard / (64 * wmax(F)) plus a relative floor at rem_rel of
        // the iterate's own largest weighted coefficient.  Either way a
        // dropped operand term moves a bracket output by at most
        // 64 * wmax(F) times its weighted size, which is what gets recorded.
        double wF = wmax_of(F);
        double guard_cut = (opt.rem_guard > 0.0 && wF > 0.0)
                               ? opt.rem_guard / (64.0 * wF)
                               : 0.0;
        double prev = t_prev.abs_sum();
        double fact = 1.0;
        for (int nn = 2; nn <= opt.lie_order; ++nn) {
            double cut = guard_cut;
            if (opt.rem_rel > 0.0) cut = std::max(cut, opt.rem_rel * wmax_of(t_prev));
            if (cut > 0.0 && wF > 0.0)
                tr.trimmed_mass += t_prev.trim(cut, wscale) * 64.0 * wF;
            t_prev = poisson(t_prev, F, N, caps, &stats);
            fact *= nn;
            Poly term = t_prev * Complex(1.0 / fact, 0.0);
            double mass = term.abs_sum();
            if (mass == 0.0) break;
            if (nn > 2 && mass > prev && mass > lie_tol)
                throw std::runtime_error("kam_step: Lie series diverging at order " +
                                         std::to_string(nn));
            rem += term;
            tr.lie_order_used = nn;
            tr.lie_last_term = mass;
            prev = mass;
            if (mass < lie_tol) break;
        }
    }

    // ---- assemble the new Hamiltonian pieces
    Eigen::VectorXd omega_next = omega_t + h2.omega_shift;
    Eigen::MatrixXcd B_next = B_t + h2.b_shift;
    PerturbationSplit spR = split_perturbation(defect + brR + rem);
    PerturbationSplit spP = split_perturbation(Ptilde + corr.high + book_corr + brP_rest);
    if (!spP.low.empty()) tr.note += "[P pile leaked low-class terms] ";
    Poly R_next = spR.low + spP.low;
    Poly P_next = spR.high + spP.high;
    st.energy_const += (spR.gauge + spP.gauge).real();
    // the P pile re-enters only through brackets against later generators
    auto wscale_next = [&sc](const MonKey& m) { return std::exp(sc.s_next * m.kl1()); };
    if (opt.tail_trim > 0.0) tr.trimmed_mass += P_next.trim(opt.tail_trim, wscale_next);

    tr.b_selfadjoint_defect = spectral_norm((B_next - B_next.adjoint().eval()).eval());
    tr.reality_defect_r = reality_defect(R_next);
    tr.dropped_mass = stats.dropped_abs;
    lap("rem_assemble");

    NormContext ctx_out = make_ctx(st, opt, sc.s_next, sc.r_next);
    tr.r_norm_after = hamiltonian_vf_norm(R_next, ctx_out);
    tr.p_norm_after = hamiltonian_vf_norm(P_next, ctx_out);
    lap("norm_out");

    if (dbg) {
        dbg->Fx = Fx;
        dbg->Fy = Fy;
        dbg->Fz = Fz;
        dbg->Fzbar = Fzb;
        dbg->Fzz = Fzz;
        dbg->Fzzbar = Fzzb;
        dbg->Fzbarzbar = Fzbzb;
        dbg->F = F;
        dbg->R_star = R_star;
        dbg->Ptilde = Ptilde;
        dbg->corrections_low = corr_low;
        dbg->defect = defect;
        dbg->H0_next = normal_poly(omega_next, st.lambda, B_next);
    }

    // ---- commit
    st.omega = omega_next;
    st.B = B_next;
    st.R = R_next;
    st.P = P_next;
    st.dropped_mass += stats.dropped_abs;
    st.m += 1;

    if (opt.track_embedding) {
        OpStats emb_stats;
        advance_embedding(st.embedding, F, caps, opt.lie_order, lie_tol, &emb_stats);
    }
    lap("embedding");

    // ---- per-sample divisor excision over the generator's support
    std::set<std::array<int, kMaxAngles>> support;
    for (const Term& t : F.terms()) {
        std::array<int, kMaxAngles> kk{};
        for (int a = 0; a < kMaxAngles; ++a) kk[static_cast<size_t>(a)] = t.key.k[static_cast<size_t>(a)];
        support.insert(kk);
    }
    std::vector<std::array<int, kMaxAngles>> modes(support.begin(), support.end());
    if (opt.excise && !modes.empty()) {
        StepExcision ex = step_excision(st, modes, sc.K);
        tr.killed = ex.killed_tangent + ex.killed_first + ex.killed_second;
        tr.min_div_tangent = std::min(tr.min_div_tangent, ex.min_tangent);
        tr.min_div_first = std::min(tr.min_div_first, ex.min_first);
        tr.min_div_second = std::min(tr.min_div_second, ex.min_second);
    }
lap("excision");
    tr.surviving_fraction = st.box.surviving_fraction();

    st.trace.push_back(tr);
    return tr;
}

KamRunResult run_kam(KamState state, const KamOptions& opt) {
    KamRunResult out;
    for (int s = 0; s < opt.steps; ++s) {
        kam_step(state, opt);
        if (state.box.alive_count() == 0) {
            out.halted = true;
            out.halt_reason = "parameter box emptied by excision at step " + std::to_string(s);
            break;
        }
    }
    out.omega_drift =
        state.nangles ? (state.omega - state.omega0).cwiseAbs().maxCoeff() : 0.0;
    out.b_drift = op_norm(state.B - state.B0, state.model.lat, state.model.q, state.model.p);
    out.final_r_norm = state.trace.empty() ? 0.0 : state.trace.back().r_norm_after;
    out.torus = state.embedding;
    out.state = std::move(state);
    return out;
}

}  // namespace kam
