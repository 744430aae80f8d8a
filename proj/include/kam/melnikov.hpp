#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kam/homology.hpp"
#include "kam/models.hpp"
#include "kam/poly.hpp"

namespace kam {

// Parameter samples over a rectangular box, with a survival mask. Excision
// operations clear mask entries; they never add samples back.
struct ParameterBox {
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;
    Eigen::MatrixXd samples;      // one column per sample
    std::vector<uint8_t> alive;   // one flag per column

    int dim() const { return static_cast<int>(lower.size()); }
    int count() const { return static_cast<int>(samples.cols()); }
    int alive_count() const;
    double surviving_fraction() const;
};

// Regular grid with per_axis points along every axis (endpoints inset by half
// a cell so no sample sits on the boundary).
ParameterBox grid_box(const Eigen::VectorXd& lower, const Eigen::VectorXd& upper, int per_axis);

// Low-discrepancy samples (Sobol sequence, dimensions up to 8).
ParameterBox sobol_box(const Eigen::VectorXd& lower, const Eigen::VectorXd& upper, int count);

// Raw Sobol points in the unit cube, one column per point.
Eigen::MatrixXd sobol_points(int dim, int count);

// Tangential frequency map xi -> omega(xi); output length is the number of
// angles (at most kMaxAngles).
using FrequencyMap = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

FrequencyMap identity_frequencies();

// Normal frequency map xi -> (lambda_j(xi) : j), ordered like the lattice ids.
using SpectrumMap = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

// Provider of exact head-block eigenvalues for the operator-equation scan,
// replacing the default pairwise sum/difference approximation.
using MuProvider = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

// Half of the punctured l1 ball {0 < |k| <= K}: one representative per +-k
// pair (the first nonzero component is positive).
std::vector<std::array<int, kMaxAngles>> k_half_ball(int nangles, double K);

struct ExcisionWitness {
    enum class Kind : uint8_t { Tangent, First, Second };
    Kind kind = Kind::Tangent;
    int sample = -1;                       // column index into the box
    std::array<int, kMaxAngles> k{};       // tangential index
    int i = -1;                            // lattice ids; -1 when unused
    int j = -1;
    int sign_outer = 0;  // coefficient on varpi (tangent/first) or on mu (second)
    int sign_inner = 0;  // coefficient on the frequency deviation (first)
                         // or on the second pair member inside mu (second)
    double mu = 0.0;     // provider-supplied eigenvalue when i = j = -1
    double divisor = 0.0;
    double threshold = 0.0;
};

struct ExcisionReport {
    int scanned_k = 0;
    int killed = 0;
    double threshold = 0.0;
    double surviving_fraction = 1.0;
    // smallest scanned divisor among surviving samples
    double min_divisor = std::numeric_limits<double>::infinity();
    // operator-equation scan only: largest finite-difference eigenvalue slope
    double max_mu_slope = 0.0;
    bool mu_slope_flag = false;
    std::string note;
    std::vector<ExcisionWitness> witnesses;  // at most one per killed sample
};

// Kills samples with |(k,omega)| < max(K^-c21, floor) for some 0 < |k| <= K;
// when varpi != 0 the shifted divisor |varpi - (k,omega)| is scanned as well.
ExcisionReport excise_tangent(ParameterBox& box, const FrequencyMap& omega, double K, double c21,
                              double varpi = 0.0, double floor = 1e-10);

// First frequency scan. Sites below the split radius K2 are scanned against
// |(k,omega) +- lambda_j| < K^-c (with the four varpi sign combinations when
// varpi != 0) and violators are excised. Sites at or beyond K2 are only
// checked: their deviations must already be too small to break the margin,
// and any violation is reported in the note instead of excised.
ExcisionReport excise_first(ParameterBox& box, const NormalModel& model, const FrequencyMap& omega,
                            double K, const ExponentProfile& prof,
                            const SpectrumMap* spectrum_override = nullptr);

// Second frequency scan against |(k,omega) +- mu| < K^-c. By default mu runs
// over pairwise sums lambda_i + lambda_j (i <= j) and differences
// lambda_i - lambda_j (i < j) of the full normal frequencies over sites with
// |site| <= min(K2, pair_radius); a provider replaces that list with exact
// head-block eigenvalues. The eigenvalue slopes |d mu / d xi| are estimated
// by central differences at the box center and flagged above 0.5.
ExcisionReport excise_second(ParameterBox& box, const NormalModel& model,
                             const FrequencyMap& omega, double K, const ExponentProfile& prof,
                             double pair_radius = 8.0, const MuProvider* mu_provider = nullptr,
                             const SpectrumMap* spectrum_override = nullptr);

// Re-evaluates the divisor recorded in a witness from scratch.
double recompute_divisor(const ExcisionWitness& w, const ParameterBox& box,
                         const FrequencyMap& omega, const SpectrumMap& spectrum, double varpi);

// Directional-derivative margins of the divisors, evaluated by central
// differences at the box corners along the direction k/|k|: the tangential
// part contributes |k| >= 1 and the frequency deviations must not cancel it.
struct DerivativeMargin {
    double min_first = std::numeric_limits<double>::infinity();
    double min_second = std::numeric_limits<double>::infinity();
    double max_lambda_slope = 0.0;
};

DerivativeMargin derivative_margins(const NormalModel& model, const FrequencyMap& omega,
                                    const ParameterBox& box, double K,
                                    const SpectrumMap* spectrum_override = nullptr);

// One row of the measure table: the outcome of the scans at a single scale.
struct ScaleScan {
    double K = 0.0;
    int total = 0;
    int alive_before = 0;
    int alive_after = 0;
    int killed_tangent = 0;
    int killed_first = 0;
    int killed_second = 0;
    double min_divisor = std::numeric_limits<double>::infinity();
    double max_mu_slope = 0.0;

    double killed_fraction() const {
        return total ? static_cast<double>(alive_before - alive_after) / total : 0.0;
    }
    double surviving_fraction() const {
        return total ? static_cast<double>(alive_after) / total : 0.0;
    }
};

struct MeasureTable {
    std::vector<ScaleScan> rows;
    // least-squares slope of log(killed fraction) against log K over the rows
    // with a nonzero kill count; NaN when fewer than two such rows exist
    double killed_slope = std::numeric_limits<double>::quiet_NaN();
    double killed_intercept = 0.0;
    int fitted_rows = 0;
    double final_fraction = 1.0;
    std::string csv;
};

// Requires at least two scales.
MeasureTable measure_report(const std::vector<ScaleScan>& history);

struct ScanOptions {
    bool fresh_per_scale = true;   // trend mode: restart from the full box at each K
    bool with_tangent = true;
    bool with_second = false;
    double pair_radius = 8.0;
    double varpi = 0.0;
    const MuProvider* mu_provider = nullptr;
    const SpectrumMap* spectrum_override = nullptr;
};

// Runs the enabled scans over the given scales and collects the table rows.
// In cumulative mode the box keeps shrinking from scale to scale; the final
// mask is left in place so callers can inspect the survivors.
std::vector<ScaleScan> scan_scales(ParameterBox& box, const NormalModel& model,
                                   const FrequencyMap& omega, const std::vector<double>& scales,
                                   const ExponentProfile& prof, const ScanOptions& opts = {},
                                   std::vector<ExcisionWitness>* all_witnesses = nullptr);

// CSV rendering of witnesses (header + one line each).
std::string witness_csv(const std::vector<ExcisionWitness>& witnesses);

}  // namespace kam
