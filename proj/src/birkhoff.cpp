#include "kam/birkhoff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace kam {

namespace {

// Signed bbm frequency: lambda_{-j} = -lambda_j.
double bbm_signed_frequency(int j, double tau) {
    return j > 0 ? bbm_normal_frequency(j, tau) : -bbm_normal_frequency(-j, tau);
}

std::string describe_slots(const MonKey& m) {
    std::ostringstream os;
    for (const Slot& s : m.slots) {
        if (s.bar == 0xFF) continue;
        os << (s.bar ? " zbar(" : " z(") << static_cast<int>(s.site) << ")";
        if (s.exp > 1) os << "^" << static_cast<int>(s.exp);
    }
    return os.str();
}

std::string describe_term(const MonKey& m, const Lattice& lat) {
    std::ostringstream os;
    for (const Slot& s : m.slots) {
        if (s.bar == 0xFF) continue;
        const Site& site = lat.site(s.site);
        os << (s.bar ? " zbar[" : " z[");
        for (int i = 0; i < lat.dim(); ++i) os << (i ? "," : "") << site[i];
        os << "]";
        if (s.exp > 1) os << "^" << static_cast<int>(s.exp);
    }
    return os.str();
}

// D = sum over slots lambda[site] * exp * (+1 for z, -1 for zbar).
double diagonal_divisor(const MonKey& m, const Eigen::VectorXd& lambda) {
    double d = 0.0;
    for (const Slot& s : m.slots) {
        if (s.bar == 0xFF) continue;
        double sign = (s.bar == 0) ? 1.0 : -1.0;
        d += sign * lambda[s.site] * static_cast<double>(s.exp);
    }
    return d;
}

bool balanced_per_site(const MonKey& m) {
    for (const Slot& s : m.slots) {
        if (s.bar == 0xFF) continue;
        if (m.exp_of(s.site, 0) != m.exp_of(s.site, 1)) return false;
    }
    return true;
}

void require_z_only(const Poly& p, const char* who) {
    for (const Term& t : p.terms())
        if (t.key.kl1() != 0 || t.key.ydeg() != 0)
            throw std::invalid_argument(std::string(who) + ": expects a pure z/zbar polynomial");
}

// Generalized binomial coefficient C(power, i).
double gbinom(double power, int i) {
    double v = 1.0;
    for (int r = 0; r < i; ++r) v *= (power - r) / (r + 1);
    return v;
}

void finish_twist_data(NormalFormPackage& pkg) {
    pkg.twist_det = pkg.twist.determinant();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(pkg.twist);
    double smin = svd.singularValues().minCoeff();
    pkg.twist_cond =
        smin > 0 ? svd.singularValues().maxCoeff() / smin : std::numeric_limits<double>::infinity();
}

}  // namespace

double cubic_divisor(int j, int k, int l, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("cubic_divisor: tau must be positive");
    if (j == 0 || k == 0 || l == 0 || j + k + l != 0)
        throw std::domain_error("cubic_divisor: needs a zero-sum triple of nonzero modes");
    double direct = bbm_signed_frequency(j, tau) + bbm_signed_frequency(k, tau) +
                    bbm_signed_frequency(l, tau);
    double dj = bbm_weight(j, tau), dk = bbm_weight(k, tau), dl = bbm_weight(l, tau);
    double quad = 3.0 + tau * tau * (static_cast<double>(k) * k + static_cast<double>(k) * l +
                                     static_cast<double>(l) * l);
    double sign = (static_cast<double>(j) * k * l > 0) ? -1.0 : 1.0;
    double product = sign * dj * dj * dk * dk * dl * dl * quad;
    if (std::abs(direct - product) > 1e-12 * std::max(1.0, std::abs(direct)))
        throw std::domain_error("cubic_divisor: direct and product evaluations disagree");
    return direct;
}

Poly third_order_generator(const Poly& cubic, const Eigen::VectorXd& lambda, double floor,
                           double* min_divisor) {
    require_z_only(cubic, "third_order_generator");
    std::vector<Term> out;
    out.reserve(cubic.size());
    double mind = std::numeric_limits<double>::infinity();
    std::string offenders;
    int noff = 0;
    for (const Term& t : cubic.terms()) {
        double d = diagonal_divisor(t.key, lambda);
        if (std::abs(d) <= floor) {
            if (noff < 8) offenders += describe_slots(t.key) + ";";
            ++noff;
            continue;
        }
        mind = std::min(mind, std::abs(d));
        out.push_back(Term{t.key, t.c / Complex(0.0, d)});
    }
    if (noff > 0)
        throw std::domain_error("third_order_generator: " + std::to_string(noff) +
                                " divisor(s) at or below floor:" + offenders);
    if (min_divisor) *min_divisor = mind;
    return Poly(std::move(out));
}

double resonant_quartic_bbm(int k, int l, double tau, double T) {
    if (k < 1 || l < 1) throw std::invalid_argument("resonant_quartic_bbm: modes must be >= 1");
    if (tau <= 0.0 || T <= 0.0)
        throw std::invalid_argument("resonant_quartic_bbm: tau and T must be positive");
    double t2 = tau * tau;
    if (k == l) return 1.0 / (12.0 * T * (t2 * k * k + 1.0));
    double kk = static_cast<double>(k) * k, ll = static_cast<double>(l) * l;
    double kl = static_cast<double>(k) * l;
    return -(1.0 / T) * t2 * kl / ((t2 * (kk + kl + ll) + 3.0) * (t2 * (kk - kl + ll) + 3.0));
}

QuarticReduction fourth_order_reduction(const Poly& quartic, const Eigen::VectorXd& lambda,
                                        const Lattice& lat, const std::vector<int>& tangent_ids,
                                        double floor) {
    require_z_only(quartic, "fourth_order_reduction");
    std::vector<char> is_tangent(static_cast<size_t>(lat.size()), 0);
    for (int id : tangent_ids) {
        if (id < 0 || id >= lat.size())
            throw std::invalid_argument("fourth_order_reduction: tangent id out of range");
        is_tangent[static_cast<size_t>(id)] = 1;
    }
    QuarticReduction out;
    std::vector<Term> res, gen, hat, unres;
    for (const Term& t : quartic.terms()) {
        if (t.key.zdeg() != 4)
            throw std::invalid_argument("fourth_order_reduction: expects a homogeneous quartic");
        bool touches = false;
        for (const Slot& s : t.key.slots)
            if (s.bar != 0xFF && is_tangent[s.site]) touches = true;
        if (!touches) {
            hat.push_back(t);
            continue;
        }
        if (balanced_per_site(t.key)) {
            res.push_back(t);
            continue;
        }
        double d = diagonal_divisor(t.key, lambda);
        if (std::abs(d) <= floor) {
            unres.push_back(t);
            std::ostringstream os;
            os << "divisor " << d << " at" << describe_term(t.key, lat);
            out.witnesses.push_back(os.str());
            continue;
        }
        out.min_divisor = std::min(out.min_divisor, std::abs(d));
        gen.push_back(Term{t.key, t.c / Complex(0.0, d)});
    }
    out.resonant = Poly(std::move(res));
    out.generator = Poly(std::move(gen));
    out.hat = Poly(std::move(hat));
    out.unresolved = Poly(std::move(unres));
    return out;
}

Eigen::MatrixXd bbm_twist_matrix(double tau, double T, const std::vector<int>& J) {
    int n = static_cast<int>(J.size());
    Eigen::MatrixXd m(n, n);
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) m(a, b) = 2.0 * resonant_quartic_bbm(J[a], J[b], tau, T);
    return m;
}

Eigen::MatrixXd bbm_coupling_matrix(double tau, double T, const Lattice& normal,
                                    const std::vector<int>& J) {
    int rows = normal.size(), cols = static_cast<int>(J.size());
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int b = 0; b < cols; ++b)
            m(i, b) = 2.0 * resonant_quartic_bbm(normal.site(i)[0], J[b], tau, T);
    return m;
}

std::pair<double, double> gpc_constants(int d) {
    if (d < 1) throw std::invalid_argument("gpc_constants: dimension must be >= 1");
    double a = std::pow(3.0 / 8.0, d);
    double b = std::pow(5.0 / 8.0, d) - a;
    return {a, b};
}

Eigen::MatrixXd gpc_twist_matrix(const std::vector<double>& tau, const std::vector<Site>& J) {
    auto [a, b] = gpc_constants(static_cast<int>(tau.size()));
    int n = static_cast<int>(J.size());
    Eigen::MatrixXd m(n, n);
    for (int s = 0; s < n; ++s) {
        for (int t = 0; t < n; ++t) {
            if (s == t) {
                m(s, t) = a;
            } else {
                double r = std::sqrt(gpc_lambda(J[s], tau) / gpc_lambda(J[t], tau));
                m(s, t) = 0.5 * b * (r + 1.0 / r);
            }
        }
    }
    return m;
}

Eigen::MatrixXd gpc_coupling_matrix(const std::vector<double>& tau, const Lattice& normal,
                                    const std::vector<Site>& J) {
    auto [a, b] = gpc_constants(static_cast<int>(tau.size()));
    (void)a;
    int rows = normal.size(), cols = static_cast<int>(J.size());
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        double li = gpc_lambda(normal.site(i), tau);
        for (int t = 0; t < cols; ++t) {
            double r = std::sqrt(li / gpc_lambda(J[t], tau));
            m(i, t) = 0.5 * b * (r + 1.0 / r);
        }
    }
    return m;
}

NormalFormPackage bbm_normal_form(double tau, double T, int radius, const std::vector<int>& J,
                                  const BirkhoffOptions& opt) {
    if (tau <= 0.0 || T <= 0.0)
        throw std::invalid_argument("bbm_normal_form: tau and T must be positive");
    if (radius < 3 || radius > 255)
        throw std::invalid_argument("bbm_normal_form: radius out of range");
    if (J.empty() || J.size() > static_cast<size_t>(kMaxAngles))
        throw std::invalid_argument("bbm_normal_form: need between 1 and 4 tangent modes");
    for (size_t t = 0; t < J.size(); ++t) {
        if (J[t] < 1 || J[t] > radius)
            throw std::invalid_argument("bbm_normal_form: tangent modes must lie in [1, radius]");
        if (t > 0 && J[t] <= J[t - 1])
            throw std::invalid_argument("bbm_normal_form: tangent modes must be strictly increasing");
    }

    NormalFormPackage pkg;
    pkg.equation = "bbm";
    pkg.varpi = 0.0;
    pkg.kappa = 1.0;
    pkg.tau = {tau};
    pkg.T = T;
    pkg.p = opt.p;
    pkg.full = positive_line(radius);
    pkg.normal = positive_line(radius, J);
    for (int j : J) {
        pkg.J.push_back(site1(j));
        pkg.tangent_ids.push_back(pkg.full.id(site1(j)));
    }

    pkg.lambda_full.resize(pkg.full.size());
    for (int i = 0; i < pkg.full.size(); ++i)
        pkg.lambda_full[i] = bbm_normal_frequency(pkg.full.site(i)[0], tau);
    pkg.lambda_tangent.resize(static_cast<int>(J.size()));
    for (size_t t = 0; t < J.size(); ++t)
        pkg.lambda_tangent[static_cast<int>(t)] = bbm_normal_frequency(J[t], tau);
    pkg.lambda_normal.resize(pkg.normal.size());
    for (int i = 0; i < pkg.normal.size(); ++i)
        pkg.lambda_normal[i] = bbm_normal_frequency(pkg.normal.site(i)[0], tau);

    Poly H = bbm_hamiltonian(tau, T, radius);
    Poly h2 = H.filter([](const MonKey& m) { return m.zdeg() == 2; });
    Poly r3 = H.filter([](const MonKey& m) { return m.zdeg() == 3; });

    pkg.f3 = third_order_generator(r3, pkg.lambda_full, opt.divisor_floor, &pkg.cubic_min_divisor);

    Caps caps;
    caps.max_zdeg = opt.max_zdeg;
    OpStats bracket_stats;
    Poly r4 = poisson(r3, pkg.f3, 0, caps, &bracket_stats) * Complex(0.5, 0.0);
    QuarticReduction q =
        fourth_order_reduction(r4, pkg.lambda_full, pkg.full, pkg.tangent_ids, opt.divisor_floor);
    pkg.resonant = q.resonant;
    pkg.hat = q.hat;
    pkg.f4 = q.generator;
    pkg.quartic_min_divisor = q.min_divisor;
    for (const std::string& w : q.witnesses) pkg.notes.push_back("unresolved quartic: " + w);

    pkg.twist = bbm_twist_matrix(tau, T, J);
    pkg.coupling = bbm_coupling_matrix(tau, T, pkg.normal, J);
    pkg.xi_offset = pkg.lambda_tangent;
    finish_twist_data(pkg);

    if (opt.with_remainder) {
        LieResult s3 = lie_transform(H, pkg.f3, 0, caps, opt.lie_order);
        LieResult s4 = lie_transform(s3.value, pkg.f4, 0, caps, opt.lie_order);
        Poly composed = s4.value - h2 - pkg.resonant - pkg.hat;
        // degree <= 4 must cancel up to the witnessed unresolved terms; the
        // leftover is numerical dust and is accounted as dropped mass
        Poly low = composed.filter([](const MonKey& m) { return m.zdeg() <= 4; }) - q.unresolved;
        pkg.remainder =
            composed.filter([](const MonKey& m) { return m.zdeg() >= 5; }) + q.unresolved;
        pkg.dropped_mass = bracket_stats.dropped_abs + s3.stats.dropped_abs +
                           s4.stats.dropped_abs + low.abs_sum();
    }
    return pkg;
}

NormalFormPackage gpc_normal_form(const std::vector<double>& tau, int radius,
                                  const std::vector<Site>& J, double L,
                                  const BirkhoffOptions& opt) {
    int d = static_cast<int>(tau.size());
    if (d < 1 || d > 3) throw std::invalid_argument("gpc_normal_form: dimension must be 1..3");
    if (J.empty() || J.size() > static_cast<size_t>(kMaxAngles))
        throw std::invalid_argument("gpc_normal_form: need between 1 and 4 tangent sites");
    NormalModel nm = gpc_normal_model(tau, radius, J, L, opt.p);

    NormalFormPackage pkg;
    pkg.equation = "gpc";
    pkg.varpi = 1.0;
    pkg.kappa = 2.0;
    pkg.tau = tau;
    pkg.T = 1.0;
    for (double t : tau) pkg.T *= 2.0 * M_PI / t;
    pkg.p = opt.p;
    pkg.full = positive_box(d, radius);
    if (pkg.full.size() > 255) throw std::invalid_argument("gpc_normal_form: lattice too large");
    pkg.normal = nm.lat;
    pkg.J = J;
    for (const Site& j : J) {
        if (!pkg.full.contains(j))
            throw GpcConfigError("gpc: tangent sites must lie inside the truncation box");
        pkg.tangent_ids.push_back(pkg.full.id(j));
    }

    pkg.lambda_full.resize(pkg.full.size());
    for (int i = 0; i < pkg.full.size(); ++i)
        pkg.lambda_full[i] = gpc_frequency(pkg.full.site(i), tau);
    pkg.lambda_tangent.resize(static_cast<int>(J.size()));
    for (size_t t = 0; t < J.size(); ++t)
        pkg.lambda_tangent[static_cast<int>(t)] = gpc_frequency(J[t], tau);
    pkg.lambda_normal = nm.lambda0;

    Poly H = gpc_hamiltonian(tau, pkg.full);
    Poly h2 = H.filter([](const MonKey& m) { return m.zdeg() == 2; });
    Poly g4 = H.filter([](const MonKey& m) { return m.zdeg() == 4; });

    QuarticReduction q =
        fourth_order_reduction(g4, pkg.lambda_full, pkg.full, pkg.tangent_ids, opt.divisor_floor);
    pkg.resonant = q.resonant;
    pkg.hat = q.hat;
    pkg.f4 = q.generator;
    pkg.quartic_min_divisor = q.min_divisor;
    for (const std::string& w : q.witnesses) pkg.notes.push_back("unresolved quartic: " + w);

    pkg.twist = pkg.T * gpc_twist_matrix(tau, J);
    pkg.coupling = pkg.T * gpc_coupling_matrix(tau, pkg.normal, J);
    pkg.xi_offset = Eigen::VectorXd::Zero(static_cast<int>(J.size()));
    finish_twist_data(pkg);

    if (opt.with_remainder) {
        Caps caps;
        caps.max_zdeg = std::max(opt.max_zdeg, 6);  // keep the leading degree-6 remainder
        LieResult s4 = lie_transform(H, pkg.f4, 0, caps, opt.lie_order);
        Poly composed = s4.value - h2 - pkg.resonant - pkg.hat;
        Poly low = composed.filter([](const MonKey& m) { return m.zdeg() <= 4; }) - q.unresolved;
        pkg.remainder =
            composed.filter([](const MonKey& m) { return m.zdeg() >= 5; }) + q.unresolved;
        pkg.dropped_mass = s4.stats.dropped_abs + low.abs_sum();
    }
    return pkg;
}

ActionAngleForm action_angle_reduce(const NormalFormPackage& pkg, const Eigen::VectorXd& zeta,
                                    int y_order, double eps0) {
    int N = static_cast<int>(pkg.J.size());
    if (zeta.size() != N)
        throw std::invalid_argument("action_angle_reduce: zeta size must match the tangent set");
    if (N > kMaxAngles) throw std::invalid_argument("action_angle_reduce: too many angles");
    if (y_order < 1 || eps0 <= 0.0)
        throw std::invalid_argument("action_angle_reduce: bad expansion order or eps0");
    for (int t = 0; t < N; ++t)
        if (!(zeta[t] > 0.0))
            throw std::invalid_argument("action_angle_reduce: actions must be positive");

    ActionAngleForm out;
    out.nangles = N;
    out.normal = pkg.normal;
    double lo = std::sqrt(eps0), hi = 2.0 * std::sqrt(eps0);
    for (int t = 0; t < N; ++t)
        if (zeta[t] < lo || zeta[t] > hi) {
            out.warning = "zeta leaves the annulus [sqrt(eps0), 2 sqrt(eps0)]^N";
            break;
        }

    // full lattice id -> angle index (tangent) or normal lattice id
    std::vector<int> angle_of(static_cast<size_t>(pkg.full.size()), -1);
    std::vector<int> normal_of(static_cast<size_t>(pkg.full.size()), -1);
    for (int t = 0; t < N; ++t) angle_of[static_cast<size_t>(pkg.tangent_ids[t])] = t;
    for (int i = 0; i < pkg.normal.size(); ++i)
        normal_of[static_cast<size_t>(pkg.full.id(pkg.normal.site(i)))] = i;

    Poly h2;
    {
        std::vector<Term> terms;
        for (int i = 0; i < pkg.full.size(); ++i) {
            MonKey m;
            m.add_factor(i, 0);
            m.add_factor(i, 1);
            terms.push_back(Term{m, Complex(pkg.lambda_full[i], 0.0)});
        }
        h2 = Poly(std::move(terms));
    }

    std::vector<Term> acc;
    const Poly* pieces[4] = {&h2, &pkg.resonant, &pkg.hat, &pkg.remainder};
    for (const Poly* piece : pieces) {
        for (const Term& term : piece->terms()) {
            // tangent content and the reindexed base monomial
            MonKey base;
            int zexp[kMaxAngles] = {0, 0, 0, 0}, bexp[kMaxAngles] = {0, 0, 0, 0};
            for (const Slot& s : term.key.slots) {
                if (s.bar == 0xFF) continue;
                int t = angle_of[s.site];
                if (t >= 0) {
                    (s.bar ? bexp[t] : zexp[t]) += s.exp;
                } else {
                    base.add_factor(normal_of[s.site], s.bar, s.exp);
                }
            }
            // per-angle factor expansion of (zeta_t + y_t)^{(a+b)/2}
            struct Part {
                int ypow;
                double coeff;
            };
            std::vector<std::vector<Part>> factors;
            double abs_others = 1.0;  // prod over angles of |zeta_t + eps0|^{power}
            double tail_rel = 0.0;    // sum of per-angle relative cut masses
            for (int t = 0; t < N; ++t) {
                int m = zexp[t] + bexp[t];
                if (m == 0) continue;
                base.k[static_cast<size_t>(t)] =
                    static_cast<int8_t>(base.k[static_cast<size_t>(t)] - (zexp[t] - bexp[t]));
                double power = 0.5 * m;
                std::vector<Part> parts;
                if (m % 2 == 0) {
                    int ip = m / 2;
                    for (int i = 0; i <= ip; ++i)
                        parts.push_back(Part{i, gbinom(ip, i) * std::pow(zeta[t], ip - i)});
                } else {
                    for (int i = 0; i <= y_order; ++i)
                        parts.push_back(Part{i, gbinom(power, i) * std::pow(zeta[t], power - i)});
                    tail_rel += std::abs(gbinom(power, y_order + 1)) *
                                std::pow(zeta[t], power - (y_order + 1)) *
                                std::pow(eps0, y_order + 1) / std::pow(zeta[t] + eps0, power);
                }
                abs_others *= std::pow(zeta[t] + eps0, power);
                factors.push_back(std::move(parts));
            }
            out.sqrt_truncation += std::abs(term.c) * tail_rel * abs_others;
            // cartesian product over the angle factors
            std::vector<std::pair<MonKey, double>> partial{{base, 1.0}};
            size_t fi = 0;
            for (int t = 0; t < N; ++t) {
                int m = zexp[t] + bexp[t];
                if (m == 0) continue;
                const std::vector<Part>& parts = factors[fi++];
                std::vector<std::pair<MonKey, double>> next;
                next.reserve(partial.size() * parts.size());
                for (const auto& [key, coeff] : partial) {
                    for (const Part& part : parts) {
                        if (part.coeff == 0.0) continue;
                        MonKey nk = key;
                        nk.gamma[static_cast<size_t>(t)] =
                            static_cast<uint8_t>(nk.gamma[static_cast<size_t>(t)] + part.ypow);
                        next.emplace_back(nk, coeff * part.coeff);
                    }
                }
                partial = std::move(next);
            }
            for (const auto& [key, coeff] : partial) acc.push_back(Term{key, term.c * coeff});
        }
    }
    Poly total(std::move(acc));

    out.constant = total.coeff(MonKey{}).real();
    out.omega.resize(N);
    std::vector<Term> h0_terms;
    for (int t = 0; t < N; ++t) {
        MonKey m;
        m.gamma[static_cast<size_t>(t)] = 1;
        out.omega[t] = total.coeff(m).real();
        h0_terms.push_back(Term{m, Complex(out.omega[t], 0.0)});
    }
    out.Omega.resize(pkg.normal.size());
    for (int i = 0; i < pkg.normal.size(); ++i) {
        MonKey m;
        m.add_factor(i, 0);
        m.add_factor(i, 1);
        out.Omega[i] = total.coeff(m).real();
        h0_terms.push_back(Term{m, Complex(out.Omega[i], 0.0)});
    }
    out.H0 = Poly(std::move(h0_terms));
    out.R0 = total - out.H0 - Poly::constant(Complex(out.constant, 0.0));
    return out;
}

DirectionalMargin directional_margin(const NormalFormPackage& pkg, int lmax) {
    if (lmax < 1) throw std::invalid_argument("directional_margin: lmax must be >= 1");
    Eigen::MatrixXd dxi =
        pkg.twist.transpose().partialPivLu().solve(pkg.coupling.transpose()).transpose();
    DirectionalMargin out;
    out.measured = std::numeric_limits<double>::infinity();
    for (int t = 0; t < dxi.cols(); ++t) {
        int row = 0;
        double colmax = dxi.col(t).cwiseAbs().maxCoeff(&row);
        double margin = 1.0 - lmax * colmax;
        if (margin < out.measured) {
            out.measured = margin;
            out.site = l1(pkg.normal.site(row), pkg.normal.dim());
        }
    }
    if (pkg.equation == "gpc") {
        auto [a, b] = gpc_constants(static_cast<int>(pkg.tau.size()));
        double n = static_cast<double>(pkg.J.size());
        out.printed_bound = (a + (n - 2.0) * b) / (a + (n - 1.0) * b);
    } else {
        out.printed_bound = std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

NonresonanceReport bbm_nonresonance_scan(double tau, int radius, int Ntilde,
                                         const std::vector<int>& J, double floor) {
    if (radius < 2 || Ntilde < radius)
        throw std::invalid_argument("bbm_nonresonance_scan: need Ntilde >= radius >= 2");
    NonresonanceReport rep;
    rep.floor = floor;
    auto lam = [&](int s) { return bbm_signed_frequency(s, tau); };

    DivisorFamilyScan cubic;
    cubic.what = "cubic divisors on zero-sum triples";
    for (int a = -radius; a <= radius; ++a) {
        if (a == 0) continue;
        for (int b = a; b <= radius; ++b) {
            if (b == 0) continue;
            int c = -(a + b);
            if (c == 0 || c < b || c > radius) continue;
            double v = std::abs(lam(a) + lam(b) + lam(c));
            if (v < cubic.min_abs) {
                cubic.min_abs = v;
                cubic.tuple = {a, b, c, 0};
            }
        }
    }
    rep.families.push_back(cubic);

    std::vector<char> in_j(static_cast<size_t>(radius) + 1, 0);
    for (int j : J) {
        if (j < 1 || j > radius)
            throw std::invalid_argument("bbm_nonresonance_scan: tangent modes must lie in [1, radius]");
        in_j[static_cast<size_t>(j)] = 1;
    }
    DivisorFamilyScan quart;
    quart.what = "quartic divisors on tangent-touching nonresonant zero-sum quadruples";
    for (int a = -radius; a <= radius; ++a) {
        if (a == 0) continue;
        for (int b = a; b <= radius; ++b) {
            if (b == 0) continue;
            for (int c = b; c <= radius; ++c) {
                if (c == 0) continue;
                int e = -(a + b + c);
                if (e == 0 || e < c || e > radius) continue;
                bool touches = in_j[static_cast<size_t>(std::abs(a))] ||
                               in_j[static_cast<size_t>(std::abs(b))] ||
                               in_j[static_cast<size_t>(std::abs(c))] ||
                               in_j[static_cast<size_t>(std::abs(e))];
                if (!touches) continue;
                if (a == -e && b == -c) continue;  // balanced pairs are resonant
                double v = std::abs(lam(a) + lam(b) + lam(c) + lam(e));
                if (v < quart.min_abs) {
                    quart.min_abs = v;
                    quart.tuple = {a, b, c, e};
                }
            }
        }
    }
    rep.families.push_back(quart);

    rep.tail_bound = 0.0;
    int sweep = static_cast<int>(std::ceil(1.0 / tau)) + 2;
    for (int j = Ntilde + 1; j <= Ntilde + sweep; ++j)
        rep.tail_bound = std::max(rep.tail_bound, bbm_normal_frequency(j, tau));

    rep.ok = true;
    for (const DivisorFamilyScan& f : rep.families) rep.ok = rep.ok && f.min_abs > floor;
    return rep;
}

NonresonanceReport gpc_nonresonance_scan(const std::vector<double>& tau, int radius, int Ntilde,
                                         const std::vector<Site>& J, double floor) {
    int d = static_cast<int>(tau.size());
    if (d < 1 || d > 3) throw std::invalid_argument("gpc_nonresonance_scan: dimension must be 1..3");
    if (radius < 2 || Ntilde < radius)
        throw std::invalid_argument("gpc_nonresonance_scan: need Ntilde >= radius >= 2");
    (void)J;  // the first-order families do not single out the tangent set
    NonresonanceReport rep;
    rep.floor = floor;

    Lattice box = positive_box(d, radius);
    int n = box.size();
    std::vector<double> f(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) f[static_cast<size_t>(i)] = gpc_frequency(box.site(i), tau);

    // axiswise m +- n +- l +- k = 0 for some sign choice (support of the coupling)
    auto zero_support = [&](const Site& m, const Site& nn, const Site& l, const Site& k) {
        for (int i = 0; i < d; ++i) {
            bool ok = false;
            for (int s = 0; s < 8 && !ok; ++s)
                ok = (m[i] + (s & 1 ? nn[i] : -nn[i]) + (s & 2 ? l[i] : -l[i]) +
                          (s & 4 ? k[i] : -k[i]) ==
                      0);
            if (!ok) return false;
        }
        return true;
    };

    DivisorFamilyScan paired;
    paired.what = "four modes, two conjugations, no balanced pair";
    DivisorFamilyScan unbalanced;
    unbalanced.what = "four modes, zero or one conjugation";
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k)
                for (int l = 0; l < n; ++l) {
                    if (!zero_support(box.site(i), box.site(j), box.site(k), box.site(l))) continue;
                    double fi = f[static_cast<size_t>(i)], fj = f[static_cast<size_t>(j)];
                    double fk = f[static_cast<size_t>(k)], fl = f[static_cast<size_t>(l)];
                    if (!((i == j && k == l) || (i == l && k == j))) {
                        double v = std::abs(fi - fj + fk - fl);
                        if (v < paired.min_abs) {
                            paired.min_abs = v;
                            paired.tuple = {l1(box.site(i), d), l1(box.site(j), d),
                                            l1(box.site(k), d), l1(box.site(l), d)};
                        }
                    }
                    double v3 = std::min({std::abs(fi + fj + fk - fl), std::abs(fi + fj - fk + fl),
                                          std::abs(fi - fj + fk + fl), std::abs(-fi + fj + fk + fl),
                                          fi + fj + fk + fl});
                    if (v3 < unbalanced.min_abs) {
                        unbalanced.min_abs = v3;
                        unbalanced.tuple = {l1(box.site(i), d), l1(box.site(j), d),
                                            l1(box.site(k), d), l1(box.site(l), d)};
                    }
                }
    rep.families.push_back(paired);
    rep.families.push_back(unbalanced);

    DivisorFamilyScan triples;
    triples.what = "three modes against integers";
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k)
                for (int s = 0; s < 4; ++s) {
                    double v = f[static_cast<size_t>(i)] +
                               (s & 1 ? -1.0 : 1.0) * f[static_cast<size_t>(j)] +
                               (s & 2 ? -1.0 : 1.0) * f[static_cast<size_t>(k)];
                    double dist = std::abs(v - std::round(v));
                    if (dist < triples.min_abs) {
                        triples.min_abs = dist;
                        triples.tuple = {l1(box.site(i), d), l1(box.site(j), d), l1(box.site(k), d),
                                         0};
                        triples.shift = static_cast<int>(-std::round(v));
                    }
                }
    rep.families.push_back(triples);

    DivisorFamilyScan pairs;
    pairs.what = "two modes against integers";
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int s = 0; s < 2; ++s) {
                if (s == 1 && i == j) continue;  // the exact zero f_i - f_i is excluded
                double v = f[static_cast<size_t>(i)] +
                           (s ? -1.0 : 1.0) * f[static_cast<size_t>(j)];
                double dist = std::abs(v - std::round(v));
                if (dist < pairs.min_abs) {
                    pairs.min_abs = dist;
                    pairs.tuple = {l1(box.site(i), d), l1(box.site(j), d), 0, 0};
                    pairs.shift = static_cast<int>(-std::round(v));
                }
            }
    rep.families.push_back(pairs);

    double tmin = *std::min_element(tau.begin(), tau.end());
    double s2 = tmin * tmin * static_cast<double>(Ntilde + 1) * (Ntilde + 1);
    rep.tail_bound = 1.0 - std::sqrt(s2 / (1.0 + s2));

    rep.ok = true;
    for (const DivisorFamilyScan& fam : rep.families) rep.ok = rep.ok && fam.min_abs > floor;
    return rep;
}

}  // namespace kam
