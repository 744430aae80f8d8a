#include "kam/poly.hpp"

namespace kam {

namespace {

// Per-(site,bar) index of term positions, used to pair bracket partners.
struct SlotIndex {
    std::vector<std::vector<uint32_t>> lists;  // (site*2 + bar) -> term ids

    explicit SlotIndex(const Poly& p) {
        int maxsite = -1;
        for (const Term& t : p.terms())
            for (const Slot& s : t.key.slots)
                if (s.bar != 0xFF) maxsite = std::max(maxsite, static_cast<int>(s.site));
        lists.resize(static_cast<size_t>(2 * (maxsite + 1)));
        for (uint32_t i = 0; i < p.terms().size(); ++i)
            for (const Slot& s : p.terms()[i].key.slots)
                if (s.bar != 0xFF) lists[2u * s.site + s.bar].push_back(i);
    }

    const std::vector<uint32_t>* list(int site, int bar) const {
        size_t idx = static_cast<size_t>(2 * site + bar);
        if (idx >= lists.size()) return nullptr;
        return &lists[idx];
    }
    int max_site() const { return static_cast<int>(lists.size()) / 2; }
};

// Key product with the (site,bar) exponents of a and b reduced by one
// (the differentiated factor), used by the z-part of the bracket.
bool mul_keys_dz(const MonKey& a, int asite, int abar, const MonKey& b, int bbar, MonKey& out) {
    MonKey da = a;
    for (Slot& s : da.slots)
        if (s.bar == abar && s.site == asite) {
            if (--s.exp == 0) s = Slot{};
        }
    std::sort(da.slots.begin(), da.slots.end());
    MonKey db = b;
    for (Slot& s : db.slots)
        if (s.bar == bbar && s.site == asite) {
            if (--s.exp == 0) s = Slot{};
        }
    std::sort(db.slots.begin(), db.slots.end());
    return mul_keys(da, db, out);
}

}  // namespace

bool mul_keys(const MonKey& a, const MonKey& b, MonKey& out) {
    out = MonKey{};
    for (int i = 0; i < kMaxAngles; ++i) {
        int k = static_cast<int>(a.k[i]) + static_cast<int>(b.k[i]);
        if (k < -127 || k > 127) return false;
        out.k[i] = static_cast<int8_t>(k);
        out.gamma[i] = static_cast<uint8_t>(a.gamma[i] + b.gamma[i]);
    }
    // merge sorted slot lists
    int na = 0, nb = 0, no = 0;
    while (na < kMaxSlots && a.slots[na].bar != 0xFF) ++na;
    while (nb < kMaxSlots && b.slots[nb].bar != 0xFF) ++nb;
    int ia = 0, ib = 0;
    while (ia < na || ib < nb) {
        Slot s;
        if (ia < na && ib < nb && a.slots[ia].bar == b.slots[ib].bar &&
            a.slots[ia].site == b.slots[ib].site) {
            s = a.slots[ia];
            s.exp = static_cast<uint8_t>(s.exp + b.slots[ib].exp);
            ++ia, ++ib;
        } else if (ib >= nb || (ia < na && a.slots[ia] < b.slots[ib])) {
            s = a.slots[ia++];
        } else {
            s = b.slots[ib++];
        }
        if (no >= kMaxSlots) return false;
        out.slots[no++] = s;
    }
    return true;
}

Poly Poly::bar() const {
    std::vector<Term> v;
    v.reserve(t_.size());
    for (const Term& t : t_) {
        MonKey m = t.key;
        for (int i = 0; i < kMaxAngles; ++i) m.k[i] = static_cast<int8_t>(-m.k[i]);
        for (Slot& s : m.slots)
            if (s.bar != 0xFF) s.bar ^= 1;
        std::sort(m.slots.begin(), m.slots.end());
        v.push_back(Term{m, std::conj(t.c)});
    }
    return Poly(std::move(v));
}

Poly Poly::dx(int i) const {
    std::vector<Term> v;
    for (const Term& t : t_) {
        if (t.key.k[i] == 0) continue;
        v.push_back(Term{t.key, t.c * Complex(0, static_cast<double>(t.key.k[i]))});
    }
    return Poly(std::move(v));
}

Poly Poly::dy(int i) const {
    std::vector<Term> v;
    for (const Term& t : t_) {
        if (t.key.gamma[i] == 0) continue;
        MonKey m = t.key;
        double g = m.gamma[i];
        m.gamma[i] -= 1;
        v.push_back(Term{m, t.c * g});
    }
    return Poly(std::move(v));
}

Poly Poly::dz(int site, int bar) const {
    std::vector<Term> v;
    for (const Term& t : t_) {
        int e = t.key.exp_of(site, bar);
        if (e == 0) continue;
        MonKey m = t.key;
        for (Slot& s : m.slots)
            if (s.bar == bar && s.site == site) {
                if (--s.exp == 0) s = Slot{};
            }
        std::sort(m.slots.begin(), m.slots.end());
        v.push_back(Term{m, t.c * static_cast<double>(e)});
    }
    return Poly(std::move(v));
}

double Poly::trim(double floor, const std::function<double(const MonKey&)>& scale) {
    if (floor <= 0) return 0.0;
    double dropped = 0;
    size_t w = 0;
    for (size_t r = 0; r < t_.size(); ++r) {
        double mag = std::abs(t_[r].c) * (scale ? scale(t_[r].key) : 1.0);
        if (mag < floor) {
            dropped += mag;
        } else {
            t_[w++] = t_[r];
        }
    }
    t_.resize(w);
    return dropped;
}

Complex Poly::eval(const Eigen::VectorXd& x, const Eigen::VectorXcd& y, const Eigen::VectorXcd& z,
                   const Eigen::VectorXcd& zbar) const {
    Complex total(0, 0);
    for (const Term& t : t_) {
        double phase = 0;
        for (int i = 0; i < x.size() && i < kMaxAngles; ++i)
            phase += static_cast<double>(t.key.k[i]) * x[i];
        Complex v = t.c * Complex(std::cos(phase), std::sin(phase));
        for (int i = 0; i < y.size() && i < kMaxAngles; ++i)
            for (int e = 0; e < t.key.gamma[i]; ++e) v *= y[i];
        for (const Slot& s : t.key.slots) {
            if (s.bar == 0xFF) continue;
            Complex base = (s.bar == 0) ? z[s.site] : zbar[s.site];
            for (int e = 0; e < s.exp; ++e) v *= base;
        }
        total += v;
    }
    return total;
}

Poly mul(const Poly& a, const Poly& b, const Caps& caps, OpStats* stats) {
    PolyAccum acc(caps);
    MonKey m;
    for (const Term& ta : a.terms())
        for (const Term& tb : b.terms()) {
            acc.stats().pairs++;
            if (!mul_keys(ta.key, tb.key, m)) {
                acc.stats().dropped_abs += std::abs(ta.c * tb.c);
                continue;
            }
            acc.add(m, ta.c * tb.c);
        }
    if (stats) {
        stats->dropped_abs += acc.stats().dropped_abs;
        stats->pairs += acc.stats().pairs;
    }
    return acc.take();
}

Poly poisson(const Poly& a, const Poly& b, int nangles, const Caps& caps, OpStats* stats) {
    PolyAccum acc(caps);
    MonKey m;

    // f_x . g_y - f_y . g_x
    for (int i = 0; i < nangles; ++i) {
        std::vector<uint32_t> by, ay;
        for (uint32_t t = 0; t < b.terms().size(); ++t)
            if (b.terms()[t].key.gamma[i] > 0) by.push_back(t);
        for (uint32_t t = 0; t < a.terms().size(); ++t)
            if (a.terms()[t].key.gamma[i] > 0) ay.push_back(t);

        if (!by.empty())
            for (const Term& ta : a.terms()) {
                if (ta.key.k[i] == 0) continue;
                Complex ca = ta.c * Complex(0, static_cast<double>(ta.key.k[i]));
                for (uint32_t tbidx : by) {
                    const Term& tb = b.terms()[tbidx];
                    acc.stats().pairs++;
                    if (!mul_keys(ta.key, tb.key, m)) {
                        acc.stats().dropped_abs += std::abs(ca * tb.c);
                        continue;
                    }
                    m.gamma[i] -= 1;
                    acc.add(m, ca * tb.c * static_cast<double>(tb.key.gamma[i]));
                }
            }
        if (!ay.empty())
            for (uint32_t taidx : ay) {
                const Term& ta = a.terms()[taidx];
                Complex ca = ta.c * static_cast<double>(ta.key.gamma[i]);
                for (const Term& tb : b.terms()) {
                    if (tb.key.k[i] == 0) continue;
                    acc.stats().pairs++;
                    if (!mul_keys(ta.key, tb.key, m)) {
                        acc.stats().dropped_abs += std::abs(ca * tb.c);
                        continue;
                    }
                    m.gamma[i] -= 1;
                    acc.add(m, -ca * tb.c * Complex(0, static_cast<double>(tb.key.k[i])));
                }
            }
    }

    // i<f_z, g_zbar> - i<f_zbar, g_z>
    SlotIndex bidx(b);
    for (const Term& ta : a.terms()) {
        for (const Slot& s : ta.key.slots) {
            if (s.bar == 0xFF) continue;
            const auto* partners = bidx.list(s.site, 1 - s.bar);
            if (!partners) continue;
            Complex sign = (s.bar == 0) ? Complex(0, 1) : Complex(0, -1);
            Complex ca = ta.c * static_cast<double>(s.exp) * sign;
            for (uint32_t tbi : *partners) {
                const Term& tb = b.terms()[tbi];
                acc.stats().pairs++;
                double eb = tb.key.exp_of(s.site, 1 - s.bar);
                if (!mul_keys_dz(ta.key, s.site, s.bar, tb.key, 1 - s.bar, m)) {
                    acc.stats().dropped_abs += std::abs(ca * tb.c * eb);
                    continue;
                }
                acc.add(m, ca * tb.c * eb);
            }
        }
    }

    if (stats) {
        stats->dropped_abs += acc.stats().dropped_abs;
        stats->pairs += acc.stats().pairs;
    }
    return acc.take();
}

double reality_defect(const Poly& p) {
    Poly diff = p - p.bar();
    return diff.max_abs();
}

LieResult lie_transform(const Poly& H, const Poly& F, int nangles, const Caps& caps,
                        int max_order, double tol) {
    LieResult out;
    out.value = H;
    Poly term = H;  // ad_F^n H, unscaled
    double factorial = 1.0;
    for (int n = 1; n <= max_order; ++n) {
        term = poisson(term, F, nangles, caps, &out.stats);
        if (term.empty()) break;
        factorial *= n;
        Poly scaled = term * Complex(1.0 / factorial, 0.0);
        out.value += scaled;
        out.order_used = n;
        out.last_term_abs = scaled.abs_sum();
        if (tol > 0.0 && out.last_term_abs < tol) break;
    }
    return out;
}

}  // namespace kam
