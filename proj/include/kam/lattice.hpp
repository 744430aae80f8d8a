#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace kam {

/// Integer lattice site, up to 3 spatial components. Unused components stay 0.
struct Site {
    std::array<int, 3> c{0, 0, 0};

    int& operator[](int i) { return c[static_cast<size_t>(i)]; }
    int operator[](int i) const { return c[static_cast<size_t>(i)]; }
    bool operator==(const Site&) const = default;
};

inline Site site1(int j) { return Site{{j, 0, 0}}; }
inline Site site2(int j1, int j2) { return Site{{j1, j2, 0}}; }
inline Site site3(int j1, int j2, int j3) { return Site{{j1, j2, j3}}; }

/// l1 size |j| = |j_1|+...+|j_d|.
inline int l1(const Site& s, int dim) {
    int v = 0;
    for (int i = 0; i < dim; ++i) v += std::abs(s[i]);
    return v;
}

/// Weight used by the h_p spaces: |j|, with the convention |0| = 1.
inline double site_weight(const Site& s, int dim) {
    int v = l1(s, dim);
    return v == 0 ? 1.0 : static_cast<double>(v);
}

struct SiteHash {
    size_t operator()(const Site& s) const {
        uint64_t h = 1469598103934665603ull;
        for (int v : s.c) {
            h ^= static_cast<uint64_t>(static_cast<uint32_t>(v));
            h *= 1099511628211ull;
        }
        return static_cast<size_t>(h);
    }
};

/// Finite ordered list of lattice sites with id lookup. Site ids index vectors
/// and operator matrices everywhere else in the library.
class Lattice {
public:
    Lattice() = default;
    Lattice(int dim, std::vector<Site> sites) : dim_(dim), sites_(std::move(sites)) {
        for (size_t i = 0; i < sites_.size(); ++i) index_[sites_[i]] = static_cast<int>(i);
        if (index_.size() != sites_.size()) throw std::invalid_argument("duplicate lattice sites");
    }

    int dim() const { return dim_; }
    int size() const { return static_cast<int>(sites_.size()); }
    const Site& site(int id) const { return sites_[static_cast<size_t>(id)]; }
    const std::vector<Site>& sites() const { return sites_; }

    bool contains(const Site& s) const { return index_.count(s) > 0; }
    int id(const Site& s) const {
        auto it = index_.find(s);
        if (it == index_.end()) throw std::out_of_range("site not in lattice");
        return it->second;
    }

    double weight(int id) const { return site_weight(site(id), dim_); }

    /// Weights |j|^e for all sites, in id order.
    std::vector<double> weights(double e) const {
        std::vector<double> w(sites_.size());
        for (size_t i = 0; i < sites_.size(); ++i)
            w[i] = std::pow(site_weight(sites_[i], dim_), e);
        return w;
    }

private:
    int dim_ = 1;
    std::vector<Site> sites_;
    std::unordered_map<Site, int, SiteHash> index_;
};

/// One dimensional signed lattice {-radius,..,-1,1,..,radius} (zero excluded).
inline Lattice signed_line(int radius) {
    std::vector<Site> s;
    for (int j = -radius; j <= radius; ++j)
        if (j != 0) s.push_back(site1(j));
    return Lattice(1, std::move(s));
}

/// Positive line {1,..,radius} minus the tangent sites in `excl`.
inline Lattice positive_line(int radius, const std::vector<int>& excl = {}) {
    std::vector<Site> s;
    for (int j = 1; j <= radius; ++j) {
        bool skip = false;
        for (int e : excl) skip = skip || (e == j);
        if (!skip) s.push_back(site1(j));
    }
    return Lattice(1, std::move(s));
}

/// d-dimensional box {1,..,radius}^d in Z_+^d, optionally minus excluded sites.
inline Lattice positive_box(int dim, int radius, const std::vector<Site>& excl = {}) {
    std::vector<Site> s;
    std::vector<int> idx(static_cast<size_t>(dim), 1);
    while (true) {
        Site cand;
        for (int i = 0; i < dim; ++i) cand[i] = idx[static_cast<size_t>(i)];
        bool skip = false;
        for (const Site& e : excl) skip = skip || (e == cand);
        if (!skip) s.push_back(cand);
        int i = 0;
        for (; i < dim; ++i) {
            if (++idx[static_cast<size_t>(i)] <= radius) break;
            idx[static_cast<size_t>(i)] = 1;
        }
        if (i == dim) break;
    }
    return Lattice(dim, std::move(s));
}

}  // namespace kam
