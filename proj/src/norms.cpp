#include "kam/norms.hpp"

#include <map>

namespace kam {

namespace {

using KVec = std::array<int8_t, kMaxAngles>;

// Fourier coefficient values of a set of component polynomials at one
// (y,z,zbar) point: map k -> component value vector.
void accumulate_fourier(const Poly& comp, int comp_index, const DomainSample& pt,
                        std::map<KVec, Eigen::VectorXcd>& out, int ncomp) {
    for (const Term& t : comp.terms()) {
        Complex v = t.c;
        for (int i = 0; i < kMaxAngles; ++i)
            for (int e = 0; e < t.key.gamma[i]; ++e) v *= pt.y[i];
        for (const Slot& s : t.key.slots) {
            if (s.bar == 0xFF) continue;
            Complex base = (s.bar == 0) ? pt.z[s.site] : pt.zbar[s.site];
            for (int e = 0; e < s.exp; ++e) v *= base;
        }
        auto it = out.find(t.key.k);
        if (it == out.end())
            it = out.emplace(t.key.k, Eigen::VectorXcd::Zero(ncomp)).first;
        it->second[comp_index] += v;
    }
}

double component_norm_sq(const std::vector<Poly>& comps, const DomainSample& pt, double s,
                         const Eigen::VectorXd* wsq) {
    std::map<KVec, Eigen::VectorXcd> four;
    int n = static_cast<int>(comps.size());
    for (int i = 0; i < n; ++i) accumulate_fourier(comps[i], i, pt, four, n);
    double total = 0;
    for (const auto& kv : four) {
        int kl1 = 0;
        for (int8_t e : kv.first) kl1 += std::abs(static_cast<int>(e));
        double w = std::exp(2.0 * kl1 * s);
        double nrm = 0;
        if (wsq) {
            for (int i = 0; i < n; ++i) nrm += std::norm(kv.second[i]) * (*wsq)[i];
        } else {
            nrm = kv.second.squaredNorm();
        }
        total += w * nrm;
    }
    return total;
}

double triple_norm_impl(const VectorFieldPolys& vf, const NormContext& ctx, bool use_majorant) {
    if (!ctx.lattice) throw std::invalid_argument("NormContext.lattice required");
    const Lattice& lat = *ctx.lattice;
    Eigen::VectorXd wq(lat.size());
    for (int j = 0; j < lat.size(); ++j) wq[j] = std::pow(lat.weight(j), 2.0 * ctx.q);

    VectorFieldPolys m;
    const VectorFieldPolys* use = &vf;
    if (use_majorant) {
        auto mj = [](const std::vector<Poly>& v) {
            std::vector<Poly> o;
            o.reserve(v.size());
            for (const Poly& p : v) o.push_back(p.majorant());
            return o;
        };
        m = VectorFieldPolys{mj(vf.X), mj(vf.Y), mj(vf.Z), mj(vf.Zb)};
        use = &m;
    }

    double best = 0;
    for (const DomainSample& pt : boundary_samples(ctx)) {
        double v = component_norm_sq(use->X, pt, ctx.s, nullptr) +
                   component_norm_sq(use->Y, pt, ctx.s, nullptr) +
                   component_norm_sq(use->Z, pt, ctx.s, &wq) +
                   component_norm_sq(use->Zb, pt, ctx.s, &wq);
        best = std::max(best, v);
    }
    return std::sqrt(best);
}

}  // namespace

double hp_norm(const Eigen::VectorXcd& z, const Lattice& lat, double p) {
    double v = 0;
    for (int j = 0; j < lat.size() && j < z.size(); ++j)
        v += std::norm(z[j]) * std::pow(lat.weight(j), 2.0 * p);
    return std::sqrt(v);
}

double op_norm(const Eigen::MatrixXcd& A, const Lattice& rows, double q, const Lattice& cols,
               double p) {
    if (A.rows() != rows.size() || A.cols() != cols.size())
        throw std::invalid_argument("op_norm: dimension mismatch");
    Eigen::MatrixXcd W = A;
    for (int i = 0; i < A.rows(); ++i) W.row(i) *= std::pow(rows.weight(i), q);
    for (int j = 0; j < A.cols(); ++j) W.col(j) *= std::pow(cols.weight(j), -p);
    if (W.rows() == 0 || W.cols() == 0) return 0.0;
    Eigen::JacobiSVD<Eigen::MatrixXcd> svd(W);
    return svd.singularValues()[0];
}

double block_op_norm(const Eigen::MatrixXcd& A, const Lattice& rows, double q, const Lattice& cols,
                     double p, const std::vector<int>& row_ids, const std::vector<int>& col_ids) {
    Eigen::MatrixXcd W(static_cast<Eigen::Index>(row_ids.size()),
                       static_cast<Eigen::Index>(col_ids.size()));
    for (size_t i = 0; i < row_ids.size(); ++i)
        for (size_t j = 0; j < col_ids.size(); ++j)
            W(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                A(row_ids[i], col_ids[j]) * std::pow(rows.weight(row_ids[i]), q) *
                std::pow(cols.weight(col_ids[j]), -p);
    if (W.rows() == 0 || W.cols() == 0) return 0.0;
    Eigen::JacobiSVD<Eigen::MatrixXcd> svd(W);
    return svd.singularValues()[0];
}

VectorFieldPolys hamiltonian_vf(const Poly& H, int nangles, int nsites) {
    VectorFieldPolys vf;
    for (int i = 0; i < nangles; ++i) {
        vf.X.push_back(H.dy(i));
        vf.Y.push_back(H.dx(i) * Complex(-1, 0));
    }
    for (int j = 0; j < nsites; ++j) {
        vf.Z.push_back(H.dz(j, 1) * Complex(0, 1));
        vf.Zb.push_back(H.dz(j, 0) * Complex(0, -1));
    }
    return vf;
}

std::vector<DomainSample> boundary_samples(const NormContext& ctx) {
    const Lattice& lat = *ctx.lattice;
    std::mt19937_64 rng(ctx.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<DomainSample> out;

    auto random_h_ball = [&](double radius, double p) {
        Eigen::VectorXcd z(lat.size());
        for (int j = 0; j < lat.size(); ++j) z[j] = Complex(gauss(rng), gauss(rng));
        double n = hp_norm(z, lat, p);
        if (n > 0) z *= radius / n;
        return z;
    };

    for (int b = 0; b < ctx.boundary_samples; ++b) {
        DomainSample base;
        base.y.resize(kMaxAngles);
        base.y.setZero();
        Eigen::VectorXcd ydir(ctx.nangles);
        for (int i = 0; i < ctx.nangles; ++i) ydir[i] = Complex(gauss(rng), gauss(rng));
        if (ydir.norm() > 0) ydir *= (ctx.r * ctx.r) / ydir.norm();
        for (int i = 0; i < ctx.nangles; ++i) base.y[i] = ydir[i];

        // draw b == 0 puts all z mass on the lightest site, a useful extreme ray
        if (b == 0 && lat.size() > 0) {
            base.z = Eigen::VectorXcd::Zero(lat.size());
            base.zbar = Eigen::VectorXcd::Zero(lat.size());
            int jmin = 0;
            for (int j = 1; j < lat.size(); ++j)
                if (lat.weight(j) < lat.weight(jmin)) jmin = j;
            base.z[jmin] = ctx.r / std::pow(lat.weight(jmin), ctx.p);
            base.zbar[jmin] = base.z[jmin];
        } else {
            base.z = random_h_ball(ctx.r, ctx.p);
            base.zbar = random_h_ball(ctx.r, ctx.p);
        }

        for (int l = 0; l < ctx.phase_samples; ++l) {
            double th = 2.0 * M_PI * l / std::max(1, ctx.phase_samples);
            DomainSample s = base;
            s.z *= Complex(std::cos(th), std::sin(th));
            s.zbar *= Complex(std::cos(th), -std::sin(th));
            out.push_back(std::move(s));
        }
    }
    return out;
}

double vf_triple_norm(const VectorFieldPolys& vf, const NormContext& ctx) {
    return triple_norm_impl(vf, ctx, false);
}

double vf_triple_norm_majorant(const VectorFieldPolys& vf, const NormContext& ctx) {
    return triple_norm_impl(vf, ctx, true);
}

double hamiltonian_vf_norm(const Poly& H, const NormContext& ctx) {
    VectorFieldPolys vf = hamiltonian_vf(H, ctx.nangles, ctx.lattice ? ctx.lattice->size() : 0);
    return vf_triple_norm_majorant(vf, ctx);
}

}  // namespace kam
