#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace kam {

using Complex = std::complex<double>;

constexpr int kMaxAngles = 4;  // tangent dimension N supported by the monomial key
constexpr int kMaxSlots = 6;   // distinct (site, conjugation) factors per monomial

/// One z-type factor of a monomial: lattice mode `site`, conjugated iff `bar`,
/// raised to power `exp`. An empty slot is {0xFF, 0xFF, 0}; empty slots sort last.
struct Slot {
    uint8_t bar = 0xFF;
    uint8_t site = 0xFF;
    uint8_t exp = 0;
    auto operator<=>(const Slot&) const = default;
};

/// Monomial key e^{i(k,x)} y^gamma prod z_site^exp zbar_site^exp.
/// Byte-stable (no padding) so it can be hashed as a raw byte string.
struct MonKey {
    std::array<int8_t, kMaxAngles> k{0, 0, 0, 0};
    std::array<uint8_t, kMaxAngles> gamma{0, 0, 0, 0};
    std::array<Slot, kMaxSlots> slots{};

    auto operator<=>(const MonKey&) const = default;

    int kl1() const {
        int v = 0;
        for (int8_t e : k) v += std::abs(static_cast<int>(e));
        return v;
    }
    int ydeg() const {
        int v = 0;
        for (uint8_t e : gamma) v += e;
        return v;
    }
    int zdeg() const {
        int v = 0;
        for (const Slot& s : slots)
            if (s.bar != 0xFF) v += s.exp;
        return v;
    }
    int nslots() const {
        int v = 0;
        for (const Slot& s : slots)
            if (s.bar != 0xFF) ++v;
        return v;
    }
    bool is_constant() const { return kl1() == 0 && ydeg() == 0 && zdeg() == 0; }

    /// Multiply in one more factor z_site (bar=0) or zbar_site (bar=1).
    /// Returns false if the monomial would need more than kMaxSlots distinct slots.
    bool add_factor(int site, int bar, int exp = 1) {
        for (Slot& s : slots) {
            if (s.bar == static_cast<uint8_t>(bar) && s.site == static_cast<uint8_t>(site)) {
                s.exp = static_cast<uint8_t>(s.exp + exp);
                return true;
            }
        }
        for (Slot& s : slots) {
            if (s.bar == 0xFF) {
                s = Slot{static_cast<uint8_t>(bar), static_cast<uint8_t>(site),
                         static_cast<uint8_t>(exp)};
                std::sort(slots.begin(), slots.end());
                return true;
            }
        }
        return false;
    }

    int exp_of(int site, int bar) const {
        for (const Slot& s : slots)
            if (s.bar == bar && s.site == site) return s.exp;
        return 0;
    }
};

static_assert(sizeof(MonKey) == 2 * kMaxAngles + 3 * kMaxSlots, "MonKey must be packed");

struct MonKeyHash {
    size_t operator()(const MonKey& m) const {
        const auto* p = reinterpret_cast<const unsigned char*>(&m);
        uint64_t h = 1469598103934665603ull;
        for (size_t i = 0; i < sizeof(MonKey); ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
        return static_cast<size_t>(h);
    }
};

struct Term {
    MonKey key;
    Complex c;
};

/// Truncation policy for polynomial products and brackets. Terms violating a
/// cap are dropped and their |coefficient| mass is recorded. When kl1_weight
/// is positive, the floor acts on |c| * e^{kl1_weight * kl1}: a term is kept
/// whenever it could still matter under an analyticity weight e^{s |k|_1}
/// with s <= kl1_weight, and the recorded dropped mass is that weighted bound.
struct Caps {
    int max_zdeg = kMaxSlots;
    int max_ydeg = kMaxAngles * 255;
    int max_kl1 = 127;
    double drop_floor = 0.0;
    double kl1_weight = 0.0;

    bool admits(const MonKey& m) const {
        return m.zdeg() <= max_zdeg && m.ydeg() <= max_ydeg && m.kl1() <= max_kl1;
    }
    double weight(const MonKey& m) const {
        if (kl1_weight <= 0.0) return 1.0;
        return std::exp(std::min(kl1_weight * m.kl1(), 300.0));
    }
};

struct OpStats {
    double dropped_abs = 0.0;  // summed |coeff| of cap/floor-dropped terms
    uint64_t pairs = 0;        // term pairs visited
};

/// Polynomial in (x, y, z, zbar): canonical sorted term list, unique keys,
/// exact zeros pruned. Site ids refer to an external Lattice.
class Poly {
public:
    Poly() = default;
    explicit Poly(std::vector<Term> terms) : t_(std::move(terms)) { normalize(); }

    static Poly constant(Complex c) {
        Poly p;
        if (c != 0.0) p.t_.push_back(Term{MonKey{}, c});
        return p;
    }
    static Poly monomial(const MonKey& m, Complex c) {
        Poly p;
        if (c != 0.0) p.t_.push_back(Term{m, c});
        return p;
    }

    const std::vector<Term>& terms() const { return t_; }
    bool empty() const { return t_.empty(); }
    size_t size() const { return t_.size(); }
    void reserve(size_t n) { t_.reserve(n); }

    /// Sum of |coefficients| (majorant evaluated at the unit polydisc scale).
    double abs_sum() const {
        double v = 0;
        for (const Term& t : t_) v += std::abs(t.c);
        return v;
    }
    double max_abs() const {
        double v = 0;
        for (const Term& t : t_) v = std::max(v, std::abs(t.c));
        return v;
    }
    int max_kl1() const {
        int v = 0;
        for (const Term& t : t_) v = std::max(v, t.key.kl1());
        return v;
    }
    int max_zdeg() const {
        int v = 0;
        for (const Term& t : t_) v = std::max(v, t.key.zdeg());
        return v;
    }

    Complex coeff(const MonKey& m) const {
        auto it = std::lower_bound(t_.begin(), t_.end(), m,
                                   [](const Term& a, const MonKey& b) { return a.key < b; });
        if (it != t_.end() && it->key == m) return it->c;
        return Complex(0, 0);
    }

    Poly& operator+=(const Poly& o) {
        std::vector<Term> merged;
        merged.reserve(t_.size() + o.t_.size());
        std::merge(t_.begin(), t_.end(), o.t_.begin(), o.t_.end(), std::back_inserter(merged),
                   [](const Term& a, const Term& b) { return a.key < b.key; });
        t_ = std::move(merged);
        merge_sorted();
        return *this;
    }
    Poly& operator-=(const Poly& o) {
        Poly neg = o;
        neg *= Complex(-1, 0);
        return (*this += neg);
    }
    Poly& operator*=(Complex s) {
        if (s == 0.0) {
            t_.clear();
            return *this;
        }
        for (Term& t : t_) t.c *= s;
        return *this;
    }
    friend Poly operator+(Poly a, const Poly& b) { return a += b; }
    friend Poly operator-(Poly a, const Poly& b) { return a -= b; }
    friend Poly operator*(Poly a, Complex s) { return a *= s; }

    /// Complex conjugate of the function under x,y real, zbar = conj(z):
    /// coefficientwise conj, k -> -k, alpha <-> beta.
    Poly bar() const;

    /// Coefficientwise absolute value.
    Poly majorant() const {
        Poly p = *this;
        for (Term& t : p.t_) t.c = std::abs(t.c);
        return p;
    }

    /// Partial derivatives.
    Poly dx(int i) const;
    Poly dy(int i) const;
    Poly dz(int site, int bar) const;

    /// Keep only terms passing `pred`.
    Poly filter(const std::function<bool(const MonKey&)>& pred) const {
        Poly p;
        for (const Term& t : t_)
            if (pred(t.key)) p.t_.push_back(t);
        return p;
    }

    /// Drop terms whose weighted magnitude |c| * scale(key) is below `floor`;
    /// returns the dropped |c|*scale mass.
    double trim(double floor, const std::function<double(const MonKey&)>& scale);

    /// Evaluate at real angles x, complex y, z, zbar (indexed by site id).
    Complex eval(const Eigen::VectorXd& x, const Eigen::VectorXcd& y, const Eigen::VectorXcd& z,
                 const Eigen::VectorXcd& zbar) const;

    void normalize() {
        std::sort(t_.begin(), t_.end(), [](const Term& a, const Term& b) { return a.key < b.key; });
        merge_sorted();
    }

private:
    void merge_sorted() {
        size_t w = 0;
        for (size_t r = 0; r < t_.size();) {
            MonKey key = t_[r].key;
            Complex c = t_[r].c;
            ++r;
            while (r < t_.size() && t_[r].key == key) {
                c += t_[r].c;
                ++r;
            }
            if (c != 0.0) t_[w++] = Term{key, c};
        }
        t_.resize(w);
    }

    std::vector<Term> t_;
};

/// Accumulator for products/brackets: hash-map based, emitted in canonical order.
class PolyAccum {
public:
    explicit PolyAccum(const Caps& caps) : caps_(caps) { map_.reserve(1 << 12); }

    void add(const MonKey& m, Complex c) {
        if (c == 0.0) return;
        if (!caps_.admits(m)) {
            stats_.dropped_abs += std::abs(c) * caps_.weight(m);
            return;
        }
        map_[m] += c;
    }

    Poly take() {
        std::vector<Term> v;
        v.reserve(map_.size());
        for (auto& kv : map_) {
            if (caps_.drop_floor > 0.0 &&
                std::abs(kv.second) * caps_.weight(kv.first) <= caps_.drop_floor) {
                stats_.dropped_abs += std::abs(kv.second) * caps_.weight(kv.first);
                continue;
            }
            if (kv.second != 0.0) v.push_back(Term{kv.first, kv.second});
        }
        return Poly(std::move(v));
    }

    OpStats& stats() { return stats_; }

private:
    Caps caps_;
    std::unordered_map<MonKey, Complex, MonKeyHash> map_;
    OpStats stats_;
};

/// key product: k adds, gamma adds, slots merge. Returns false on slot overflow
/// or k overflow past int8 range.
bool mul_keys(const MonKey& a, const MonKey& b, MonKey& out);

Poly mul(const Poly& a, const Poly& b, const Caps& caps, OpStats* stats = nullptr);

/// Canonical Poisson bracket with symplectic form dy ^ dx + i dzbar ^ dz:
///   {f,g} = f_x.g_y - f_y.g_x + i<f_z, g_zbar> - i<f_zbar, g_z>,
/// for nangles tangent pairs and all lattice slots.
Poly poisson(const Poly& a, const Poly& b, int nangles, const Caps& caps, OpStats* stats = nullptr);

/// max |conj(c(k,g,a,b)) - c(-k,g,b,a)|: zero iff the function is real for
/// real x, y and zbar = conj z.
double reality_defect(const Poly& p);

/// Truncated Lie series H o X_F^{t=1} = sum_{n<=order} ad_F^n H / n! with
/// ad_F H = {H, F}. Stops early when a series term vanishes under the caps or
/// its |coefficient| mass drops below `tol`; cap-dropped mass accumulates in
/// `stats`.
struct LieResult {
    Poly value;
    int order_used = 0;
    double last_term_abs = 0.0;
    OpStats stats;
};
LieResult lie_transform(const Poly& H, const Poly& F, int nangles, const Caps& caps,
                        int max_order = 6, double tol = 0.0);

}  // namespace kam
