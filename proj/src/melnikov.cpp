#include "kam/melnikov.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace kam {

namespace {

int ball_radius(double K) { return static_cast<int>(std::floor(K + 1e-9)); }

Eigen::VectorXd box_center(const ParameterBox& box) { return 0.5 * (box.lower + box.upper); }

// Evaluates the map once per sample column.
Eigen::MatrixXd sample_table(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                             const ParameterBox& box) {
    Eigen::VectorXd first = f(box.samples.col(0));
    Eigen::MatrixXd out(first.size(), box.count());
    out.col(0) = first;
    for (int s = 1; s < box.count(); ++s) out.col(s) = f(box.samples.col(s));
    return out;
}

Eigen::VectorXd k_vector(const std::array<int, kMaxAngles>& k, int nangles) {
    Eigen::VectorXd v(nangles);
    for (int a = 0; a < nangles; ++a) v[a] = k[a];
    return v;
}

int deduce_nangles(const FrequencyMap& omega, const ParameterBox& box) {
    int nangles = static_cast<int>(omega(box.samples.col(0)).size());
    if (nangles < 1 || nangles > kMaxAngles)
        throw std::invalid_argument("frequency map dimension out of range");
    return nangles;
}

void require_nonempty(const ParameterBox& box) {
    if (box.count() == 0) throw std::invalid_argument("parameter box has no samples");
    if (box.alive.size() != static_cast<size_t>(box.count()))
        throw std::invalid_argument("parameter box mask length mismatch");
}

// Default eigenvalue list for the operator-equation scan: pairwise sums and
// differences of the full normal frequencies over the given site ids.
Eigen::VectorXd pair_eigenvalues(const Eigen::VectorXd& lambda, const std::vector<int>& ids,
                                 std::vector<std::array<int, 3>>* legend) {
    const int n = static_cast<int>(ids.size());
    std::vector<double> mu;
    mu.reserve(static_cast<size_t>(n) * n);
    for (int a = 0; a < n; ++a)
        for (int b = a; b < n; ++b) {
            mu.push_back(lambda[ids[a]] + lambda[ids[b]]);
            if (legend) legend->push_back({ids[a], ids[b], +1});
            if (a != b) {
                mu.push_back(lambda[ids[a]] - lambda[ids[b]]);
                if (legend) legend->push_back({ids[a], ids[b], -1});
            }
        }
    return Eigen::Map<Eigen::VectorXd>(mu.data(), static_cast<Eigen::Index>(mu.size()));
}

double fd_step(const Eigen::VectorXd& x) { return 1e-5 * std::max(1.0, x.norm()); }

}  // namespace

int ParameterBox::alive_count() const {
    int n = 0;
    for (uint8_t a : alive) n += a ? 1 : 0;
    return n;
}

double ParameterBox::surviving_fraction() const {
    return count() ? static_cast<double>(alive_count()) / count() : 0.0;
}

ParameterBox grid_box(const Eigen::VectorXd& lower, const Eigen::VectorXd& upper, int per_axis) {
    const int dim = static_cast<int>(lower.size());
    if (dim < 1 || upper.size() != dim) throw std::invalid_argument("grid_box: bad corners");
    if ((upper - lower).minCoeff() <= 0.0)
        throw std::invalid_argument("grid_box: upper corner must exceed lower corner");
    if (per_axis < 1) throw std::invalid_argument("grid_box: per_axis must be positive");
    double total_d = std::pow(static_cast<double>(per_axis), dim);
    if (total_d > 2e7) throw std::invalid_argument("grid_box: too many samples");
    const int total = static_cast<int>(total_d + 0.5);

    ParameterBox box;
    box.lower = lower;
    box.upper = upper;
    box.samples.resize(dim, total);
    box.alive.assign(total, 1);
    std::vector<int> idx(dim, 0);
    for (int s = 0; s < total; ++s) {
        for (int a = 0; a < dim; ++a)
            box.samples(a, s) = lower[a] + (idx[a] + 0.5) * (upper[a] - lower[a]) / per_axis;
        for (int a = 0; a < dim; ++a) {
            if (++idx[a] < per_axis) break;
            idx[a] = 0;
        }
    }
    return box;
}

Eigen::MatrixXd sobol_points(int dim, int count) {
    if (dim < 1 || dim > 8) throw std::invalid_argument("sobol_points: dimension must be 1..8");
    if (count < 1) throw std::invalid_argument("sobol_points: count must be positive");

    // primitive polynomial degree, interior coefficients, and initial odd
    // direction integers for dimensions 2..8 (dimension 1 is van der Corput)
    struct Row {
        int s;
        uint32_t a;
        std::array<uint32_t, 5> m;
    };
    static const std::array<Row, 7> table{{{1, 0, {1, 0, 0, 0, 0}},
                                           {2, 1, {1, 3, 0, 0, 0}},
                                           {3, 1, {1, 3, 1, 0, 0}},
                                           {3, 2, {1, 1, 1, 0, 0}},
                                           {4, 1, {1, 1, 3, 3, 0}},
                                           {4, 4, {1, 3, 5, 13, 0}},
                                           {5, 2, {1, 1, 5, 5, 17}}}};
    constexpr int kBits = 32;
    std::vector<std::array<uint32_t, kBits>> V(static_cast<size_t>(dim));
    for (int b = 0; b < kBits; ++b) V[0][static_cast<size_t>(b)] = 1u << (31 - b);
    for (int d = 1; d < dim; ++d) {
        const Row& row = table[static_cast<size_t>(d - 1)];
        auto& v = V[static_cast<size_t>(d)];
        for (int b = 0; b < row.s; ++b)
            v[static_cast<size_t>(b)] = row.m[static_cast<size_t>(b)] << (31 - b);
        for (int b = row.s; b < kBits; ++b) {
            uint32_t x = v[static_cast<size_t>(b - row.s)];
            x ^= x >> row.s;
            for (int t = 1; t < row.s; ++t)
                if ((row.a >> (row.s - 1 - t)) & 1u) x ^= v[static_cast<size_t>(b - t)];
            v[static_cast<size_t>(b)] = x;
        }
    }

    Eigen::MatrixXd pts(dim, count);
    std::vector<uint32_t> x(static_cast<size_t>(dim), 0u);
    for (int n = 0; n < count; ++n) {
        // gray-code update: flip the direction indexed by the lowest zero bit of n
        int c = 0;
        for (unsigned nn = static_cast<unsigned>(n); nn & 1u; nn >>= 1) ++c;
        for (int d = 0; d < dim; ++d) {
            x[static_cast<size_t>(d)] ^= V[static_cast<size_t>(d)][static_cast<size_t>(c)];
            pts(d, n) = static_cast<double>(x[static_cast<size_t>(d)]) * 0x1p-32;
        }
    }
    return pts;
}

ParameterBox sobol_box(const Eigen::VectorXd& lower, const Eigen::VectorXd& upper, int count) {
    const int dim = static_cast<int>(lower.size());
    if (dim < 1 || upper.size() != dim) throw std::invalid_argument("sobol_box: bad corners");
    if ((upper - lower).minCoeff() <= 0.0)
        throw std::invalid_argument("sobol_box: upper corner must exceed lower corner");
    ParameterBox box;
    box.lower = lower;
    box.upper = upper;
    box.samples = sobol_points(dim, count);
    for (int s = 0; s < count; ++s)
        box.samples.col(s) = lower.array() + (upper - lower).array() * box.samples.col(s).array();
    box.alive.assign(static_cast<size_t>(count), 1);
    return box;
}

FrequencyMap identity_frequencies() {
    return [](const Eigen::VectorXd& xi) { return xi; };
}

std::vector<std::array<int, kMaxAngles>> k_half_ball(int nangles, double K) {
    if (nangles < 1 || nangles > kMaxAngles)
        throw std::invalid_argument("k_half_ball: bad angle count");
    const int radius = ball_radius(K);
    std::vector<std::array<int, kMaxAngles>> out;
    if (radius < 1) return out;
    std::array<int, kMaxAngles> k{};
    // depth-first over the l1 ball, keeping only the representative whose
    // first nonzero component is positive
    auto rec = [&](auto&& self, int axis, int budget, bool started) -> void {
        if (axis == nangles) {
            if (started) out.push_back(k);
            return;
        }
        int lo = started ? -budget : 0;  // leading zeros force a positive start
        for (int v = lo; v <= budget; ++v) {
            k[static_cast<size_t>(axis)] = v;
            self(self, axis + 1, budget - std::abs(v), started || v != 0);
        }
        k[static_cast<size_t>(axis)] = 0;
    };
    rec(rec, 0, radius, false);
    return out;
}

ExcisionReport excise_tangent(ParameterBox& box, const FrequencyMap& omega, double K, double c21,
                              double varpi, double floor) {
    require_nonempty(box);
    const int nangles = deduce_nangles(omega, box);
    const int M = box.count();
    ExcisionReport rep;
    rep.threshold = std::max(std::pow(K, -c21), floor);

    auto ks = k_half_ball(nangles, K);
    rep.scanned_k = static_cast<int>(ks.size());
    if (ks.empty()) {
        rep.surviving_fraction = box.surviving_fraction();
        return rep;
    }

    Eigen::MatrixXd Om = sample_table(omega, box);
    Eigen::ArrayXd sample_min = Eigen::ArrayXd::Constant(M, std::numeric_limits<double>::infinity());
    std::vector<uint8_t> fresh_kill(static_cast<size_t>(M), 0);

    const int nshift = varpi != 0.0 ? 2 : 1;
    for (const auto& k : ks) {
        Eigen::VectorXd t = Om.transpose() * k_vector(k, nangles);
        for (int u = 0; u < nshift; ++u) {
            const int so = u;  // divisor is (k,omega) - so*varpi up to sign
            for (int s = 0; s < M; ++s) {
                if (!box.alive[static_cast<size_t>(s)]) continue;
                double d = std::abs(t[s] - so * varpi);
                sample_min[s] = std::min(sample_min[s], d);
                if (d < rep.threshold && !fresh_kill[static_cast<size_t>(s)]) {
                    fresh_kill[static_cast<size_t>(s)] = 1;
                    ExcisionWitness w;
                    w.kind = ExcisionWitness::Kind::Tangent;
                    w.sample = s;
                    w.k = k;
                    w.sign_outer = so;
                    w.divisor = d;
                    w.threshold = rep.threshold;
                    rep.witnesses.push_back(w);
                }
            }
        }
    }
    for (int s = 0; s < M; ++s)
        if (fresh_kill[static_cast<size_t>(s)]) {
            box.alive[static_cast<size_t>(s)] = 0;
            ++rep.killed;
        } else if (box.alive[static_cast<size_t>(s)]) {
            rep.min_divisor = std::min(rep.min_divisor, sample_min[s]);
        }
    rep.surviving_fraction = box.surviving_fraction();
    return rep;
}

ExcisionReport excise_first(ParameterBox& box, const NormalModel& model, const FrequencyMap& omega,
                            double K, const ExponentProfile& prof,
                            const SpectrumMap* spectrum_override) {
    require_nonempty(box);
    const int nangles = deduce_nangles(omega, box);
    const int M = box.count();
    SpectrumMap spectrum = spectrum_override ? *spectrum_override : SpectrumMap([&model](const Eigen::VectorXd& xi) { return model.lambda(xi); });

    ExcisionReport rep;
    rep.threshold = std::max(std::pow(K, -prof.c), prof.divisor_floor);

    auto ks = k_half_ball(nangles, K);
    rep.scanned_k = static_cast<int>(ks.size());
    if (ks.empty()) {
        rep.surviving_fraction = box.surviving_fraction();
        return rep;
    }

    const double K2 = prof.K2(K);
    std::vector<int> scan_ids, guard_ids;
    for (int id = 0; id < model.lat.size(); ++id) {
        if (l1(model.lat.site(id), model.lat.dim()) < K2)
            scan_ids.push_back(id);
        else
            guard_ids.push_back(id);
    }

    Eigen::MatrixXd Om = sample_table(omega, box);
    Eigen::MatrixXd Lam = sample_table(spectrum, box);

    // margin check for sites at or beyond the split radius: their deviations
    // must stay below (K^{-c/y}/2)^3 so the tangential bound carries them
    if (!guard_ids.empty()) {
        const double cap = std::pow(0.5 * std::pow(K, -prof.c / prof.y), 3);
        double worst = 0.0;
        Eigen::VectorXd lam_center = spectrum(box_center(box));
        for (int id : guard_ids)
            worst = std::max(worst, std::abs(lam_center[id] - model.varpi));
        if (worst >= cap) {
            std::ostringstream os;
            os << "split-radius margin violated: max deviation " << worst << " >= " << cap << "; ";
            rep.note += os.str();
        }
    }

    Eigen::ArrayXd sample_min = Eigen::ArrayXd::Constant(M, std::numeric_limits<double>::infinity());
    std::vector<uint8_t> fresh_kill(static_cast<size_t>(M), 0);
    const bool shifted = model.varpi != 0.0;

    for (const auto& k : ks) {
        Eigen::VectorXd t = Om.transpose() * k_vector(k, nangles);
        for (int id : scan_ids) {
            for (int so = shifted ? -1 : 0; so <= (shifted ? 1 : 0); so += 2) {
                for (int si = -1; si <= 1; si += 2) {
                    for (int s = 0; s < M; ++s) {
                        if (!box.alive[static_cast<size_t>(s)]) continue;
                        double dev = Lam(id, s) - model.varpi;
                        double d = std::abs(t[s] + so * model.varpi + si * dev);
                        sample_min[s] = std::min(sample_min[s], d);
                        if (d < rep.threshold && !fresh_kill[static_cast<size_t>(s)]) {
                            fresh_kill[static_cast<size_t>(s)] = 1;
                            ExcisionWitness w;
                            w.kind = ExcisionWitness::Kind::First;
                            w.sample = s;
                            w.k = k;
                            w.j = id;
                            w.sign_outer = so;
                            w.sign_inner = si;
                            w.divisor = d;
                            w.threshold = rep.threshold;
                            rep.witnesses.push_back(w);
                        }
                    }
                }
            }
        }
    }
    for (int s = 0; s < M; ++s)
        if (fresh_kill[static_cast<size_t>(s)]) {
            box.alive[static_cast<size_t>(s)] = 0;
            ++rep.killed;
        } else if (box.alive[static_cast<size_t>(s)]) {
            rep.min_divisor = std::min(rep.min_divisor, sample_min[s]);
        }
    rep.surviving_fraction = box.surviving_fraction();
    return rep;
}

ExcisionReport excise_second(ParameterBox& box, const NormalModel& model,
                             const FrequencyMap& omega, double K, const ExponentProfile& prof,
                             double pair_radius, const MuProvider* mu_provider,
                             const SpectrumMap* spectrum_override) {
    require_nonempty(box);
    const int nangles = deduce_nangles(omega, box);
    const int M = box.count();
    SpectrumMap spectrum = spectrum_override ? *spectrum_override : SpectrumMap([&model](const Eigen::VectorXd& xi) { return model.lambda(xi); });

    ExcisionReport rep;
    rep.threshold = std::max(std::pow(K, -prof.c), prof.divisor_floor);

    auto ks = k_half_ball(nangles, K);
    rep.scanned_k = static_cast<int>(ks.size());
    if (ks.empty()) {
        rep.surviving_fraction = box.surviving_fraction();
        return rep;
    }

    // eigenvalue table: one column per sample
    std::vector<std::array<int, 3>> legend;
    Eigen::MatrixXd Mu;
    if (mu_provider) {
        Mu = sample_table(*mu_provider, box);
    } else {
        const double head_radius = std::min(prof.K2(K), pair_radius);
        std::vector<int> head;
        for (int id = 0; id < model.lat.size(); ++id)
            if (l1(model.lat.site(id), model.lat.dim()) <= head_radius) head.push_back(id);
        if (head.empty()) {
            rep.note = "no sites within the pair radius; nothing scanned";
            rep.surviving_fraction = box.surviving_fraction();
            return rep;
        }
        Eigen::MatrixXd Lam = sample_table(spectrum, box);
        Eigen::VectorXd mu0 = pair_eigenvalues(Lam.col(0), head, &legend);
        Mu.resize(mu0.size(), M);
        Mu.col(0) = mu0;
        for (int s = 1; s < M; ++s) Mu.col(s) = pair_eigenvalues(Lam.col(s), head, nullptr);
    }

    // eigenvalue slope estimate at the box center
    {
        Eigen::VectorXd c = box_center(box);
        const double h = fd_step(c);
        auto eval = [&](const Eigen::VectorXd& xi) {
            if (mu_provider) return (*mu_provider)(xi);
            std::vector<int> head;
            const double head_radius = std::min(prof.K2(K), pair_radius);
            for (int id = 0; id < model.lat.size(); ++id)
                if (l1(model.lat.site(id), model.lat.dim()) <= head_radius) head.push_back(id);
            return pair_eigenvalues(spectrum(xi), head, nullptr);
        };
        for (int a = 0; a < box.dim(); ++a) {
            Eigen::VectorXd hi = c, lo = c;
            hi[a] += h;
            lo[a] -= h;
            Eigen::VectorXd slope = (eval(hi) - eval(lo)) / (2.0 * h);
            rep.max_mu_slope = std::max(rep.max_mu_slope, slope.cwiseAbs().maxCoeff());
        }
        rep.mu_slope_flag = rep.max_mu_slope > 0.5;
        if (rep.mu_slope_flag) rep.note += "eigenvalue slope exceeds 0.5; ";
    }

    Eigen::ArrayXd sample_min = Eigen::ArrayXd::Constant(M, std::numeric_limits<double>::infinity());
    std::vector<uint8_t> fresh_kill(static_cast<size_t>(M), 0);
    const int nmu = static_cast<int>(Mu.rows());

    Eigen::MatrixXd Om = sample_table(omega, box);
    for (const auto& k : ks) {
        Eigen::VectorXd t = Om.transpose() * k_vector(k, nangles);
        for (int q = 0; q < nmu; ++q) {
            for (int so = -1; so <= 1; so += 2) {
                for (int s = 0; s < M; ++s) {
                    if (!box.alive[static_cast<size_t>(s)]) continue;
                    double d = std::abs(t[s] + so * Mu(q, s));
                    sample_min[s] = std::min(sample_min[s], d);
                    if (d < rep.threshold && !fresh_kill[static_cast<size_t>(s)]) {
                        fresh_kill[static_cast<size_t>(s)] = 1;
                        ExcisionWitness w;
                        w.kind = ExcisionWitness::Kind::Second;
                        w.sample = s;
                        w.k = k;
                        if (!legend.empty()) {
                            w.i = legend[static_cast<size_t>(q)][0];
                            w.j = legend[static_cast<size_t>(q)][1];
                            w.sign_inner = legend[static_cast<size_t>(q)][2];
                        }
                        w.mu = Mu(q, s);
                        w.sign_outer = so;
                        w.divisor = d;
                        w.threshold = rep.threshold;
                        rep.witnesses.push_back(w);
                    }
                }
            }
        }
    }
    for (int s = 0; s < M; ++s)
        if (fresh_kill[static_cast<size_t>(s)]) {
            box.alive[static_cast<size_t>(s)] = 0;
            ++rep.killed;
        } else if (box.alive[static_cast<size_t>(s)]) {
            rep.min_divisor = std::min(rep.min_divisor, sample_min[s]);
        }
    rep.surviving_fraction = box.surviving_fraction();
    return rep;
}

double recompute_divisor(const ExcisionWitness& w, const ParameterBox& box,
                         const FrequencyMap& omega, const SpectrumMap& spectrum, double varpi) {
    if (w.sample < 0 || w.sample >= box.count())
        throw std::invalid_argument("witness sample index out of range");
    Eigen::VectorXd xi = box.samples.col(w.sample);
    Eigen::VectorXd om = omega(xi);
    double t = 0.0;
    for (int a = 0; a < om.size() && a < kMaxAngles; ++a) t += w.k[static_cast<size_t>(a)] * om[a];
    switch (w.kind) {
        case ExcisionWitness::Kind::Tangent:
            return std::abs(t - w.sign_outer * varpi);
        case ExcisionWitness::Kind::First: {
            double dev = w.j >= 0 ? spectrum(xi)[w.j] - varpi : 0.0;
            return std::abs(t + w.sign_outer * varpi + w.sign_inner * dev);
        }
        case ExcisionWitness::Kind::Second: {
            double mu = w.mu;
            if (w.i >= 0 && w.j >= 0) {
                Eigen::VectorXd lam = spectrum(xi);
                mu = lam[w.i] + w.sign_inner * lam[w.j];
            }
            return std::abs(t + w.sign_outer * mu);
        }
    }
    return 0.0;
}

DerivativeMargin derivative_margins(const NormalModel& model, const FrequencyMap& omega,
                                    const ParameterBox& box, double K,
                                    const SpectrumMap* spectrum_override) {
    SpectrumMap spectrum = spectrum_override ? *spectrum_override : SpectrumMap([&model](const Eigen::VectorXd& xi) { return model.lambda(xi); });
    const int dim = box.dim();
    if (dim > 16) throw std::invalid_argument("derivative_margins: too many box dimensions");
    const int nangles = deduce_nangles(omega, box);
    // the tangential part grows like |k| while the frequency gradients are
    // bounded, so small k realize the minimum; cap the scan accordingly
    auto ks = k_half_ball(nangles, std::min(K, 8.0));

    DerivativeMargin out;
    const int corners = 1 << dim;
    for (int mask = 0; mask < corners; ++mask) {
        Eigen::VectorXd xi(dim);
        for (int a = 0; a < dim; ++a) xi[a] = (mask >> a) & 1 ? box.upper[a] : box.lower[a];
        const double h = fd_step(xi);

        Eigen::MatrixXd Jw(nangles, dim);   // d omega / d xi
        Eigen::MatrixXd Jl(model.lat.size(), dim);  // d lambda / d xi
        for (int a = 0; a < dim; ++a) {
            Eigen::VectorXd hi = xi, lo = xi;
            hi[a] += h;
            lo[a] -= h;
            Jw.col(a) = (omega(hi) - omega(lo)) / (2.0 * h);
            Jl.col(a) = (spectrum(hi) - spectrum(lo)) / (2.0 * h);
        }
        out.max_lambda_slope = std::max(out.max_lambda_slope, Jl.cwiseAbs().maxCoeff());

        if (nangles != dim) continue;  // directional pullback needs a square map
        Eigen::FullPivLU<Eigen::MatrixXd> lu(Jw);
        if (!lu.isInvertible()) continue;
        // frequency-space gradients of the normal frequencies
        Eigen::MatrixXd G = Jl * lu.inverse();

        for (const auto& karr : ks) {
            Eigen::VectorXd kv = k_vector(karr, nangles);
            const double kn = kv.norm();
            Eigen::VectorXd gk = G * kv / kn;  // directional derivative of each lambda
            for (int i = 0; i < model.lat.size(); ++i) {
                out.min_first = std::min(out.min_first, kn - std::abs(gk[i]));
                for (int j = i; j < model.lat.size(); ++j)
                    out.min_second =
                        std::min(out.min_second, kn - std::abs(gk[i]) - std::abs(gk[j]));
            }
        }
    }
    return out;
}

MeasureTable measure_report(const std::vector<ScaleScan>& history) {
    if (history.size() < 2) throw std::invalid_argument("measure_report: need at least two scales");
    MeasureTable table;
    table.rows = history;

    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& row : history) {
        double f = row.killed_fraction();
        if (f <= 0.0 || row.K <= 0.0) continue;
        double x = std::log(row.K), y = std::log(f);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        ++table.fitted_rows;
    }
    if (table.fitted_rows >= 2) {
        double n = table.fitted_rows;
        double denom = n * sxx - sx * sx;
        if (std::abs(denom) > 1e-12) {
            table.killed_slope = (n * sxy - sx * sy) / denom;
            table.killed_intercept = (sy - table.killed_slope * sx) / n;
        }
    }
    table.final_fraction = history.back().surviving_fraction();

    std::ostringstream os;
    os << "K,total,alive_before,alive_after,killed_tangent,killed_first,killed_second,"
          "killed_fraction,surviving_fraction,min_divisor,max_mu_slope\n";
    char line[256];
    for (const auto& r : table.rows) {
        std::snprintf(line, sizeof(line), "%g,%d,%d,%d,%d,%d,%d,%.6g,%.6g,%.6g,%.6g\n", r.K,
                      r.total, r.alive_before, r.alive_after, r.killed_tangent, r.killed_first,
                      r.killed_second, r.killed_fraction(), r.surviving_fraction(), r.min_divisor,
                      r.max_mu_slope);
        os << line;
    }
    table.csv = os.str();
    return table;
}

std::vector<ScaleScan> scan_scales(ParameterBox& box, const NormalModel& model,
                                   const FrequencyMap& omega, const std::vector<double>& scales,
                                   const ExponentProfile& prof, const ScanOptions& opts,
                                   std::vector<ExcisionWitness>* all_witnesses) {
    require_nonempty(box);
    std::vector<ScaleScan> rows;
    std::vector<uint8_t> base_mask = box.alive;

    for (double K : scales) {
        if (opts.fresh_per_scale) box.alive = base_mask;
        ScaleScan row;
        row.K = K;
        row.total = box.count();
        row.alive_before = box.alive_count();

        auto absorb = [&](const ExcisionReport& rep, int* slot) {
            *slot = rep.killed;
            row.min_divisor = std::min(row.min_divisor, rep.min_divisor);
            row.max_mu_slope = std::max(row.max_mu_slope, rep.max_mu_slope);
            if (all_witnesses)
                all_witnesses->insert(all_witnesses->end(), rep.witnesses.begin(),
                                      rep.witnesses.end());
        };

        if (opts.with_tangent) {
            ExcisionReport rep =
                excise_tangent(box, omega, K, prof.c21, opts.varpi, prof.divisor_floor);
            absorb(rep, &row.killed_tangent);
        }
        {
            ExcisionReport rep =
                excise_first(box, model, omega, K, prof, opts.spectrum_override);
            absorb(rep, &row.killed_first);
        }
        if (opts.with_second) {
            ExcisionReport rep = excise_second(box, model, omega, K, prof, opts.pair_radius,
                                               opts.mu_provider, opts.spectrum_override);
            absorb(rep, &row.killed_second);
        }
        row.alive_after = box.alive_count();
        rows.push_back(row);
    }
    return rows;
}

std::string witness_csv(const std::vector<ExcisionWitness>& witnesses) {
    std::ostringstream os;
    os << "kind,sample,k1,k2,k3,k4,i,j,sign_outer,sign_inner,mu,divisor,threshold\n";
    char line[256];
    for (const auto& w : witnesses) {
        const char* kind = w.kind == ExcisionWitness::Kind::Tangent  ? "tangent"
                           : w.kind == ExcisionWitness::Kind::First ? "first"
                                                                    : "second";
        std::snprintf(line, sizeof(line), "%s,%d,%d,%d,%d,%d,%d,%d,%d,%d,%.9g,%.9g,%.9g\n", kind,
                      w.sample, w.k[0], w.k[1], w.k[2], w.k[3], w.i, w.j, w.sign_outer,
                      w.sign_inner, w.mu, w.divisor, w.threshold);
        os << line;
    }
    return os.str();
}

}  // namespace kam
