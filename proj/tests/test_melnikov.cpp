#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kam/melnikov.hpp"

using namespace kam;

namespace {

const double kTau = std::exp(1.0) / 2.0;  // generic period ratio

Eigen::Vector2d v2(double a, double b) { return Eigen::Vector2d(a, b); }

ParameterBox manual_box(const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                        const Eigen::MatrixXd& samples) {
    ParameterBox box;
    box.lower = lower;
    box.upper = upper;
    box.samples = samples;
    box.alive.assign(static_cast<size_t>(samples.cols()), 1);
    return box;
}

SpectrumMap model_spectrum(const NormalModel& model) {
    return [&model](const Eigen::VectorXd& xi) { return model.lambda(xi); };
}

}  // namespace

TEST_CASE("grid and sobol boxes") {
    ParameterBox g = grid_box(v2(1.0, 1.0), v2(2.0, 3.0), 10);
    CHECK(g.count() == 100);
    CHECK(g.alive_count() == 100);
    CHECK(g.surviving_fraction() == 1.0);
    CHECK(g.samples(0, 0) == doctest::Approx(1.05));
    CHECK(g.samples(1, 0) == doctest::Approx(1.10));
    for (int s = 0; s < g.count(); ++s) {
        CHECK(g.samples(0, s) > 1.0);
        CHECK(g.samples(0, s) < 2.0);
        CHECK(g.samples(1, s) > 1.0);
        CHECK(g.samples(1, s) < 3.0);
    }
    CHECK_THROWS_AS(grid_box(v2(1, 1), v2(2, 3), 0), std::invalid_argument);
    CHECK_THROWS_AS(grid_box(v2(2, 1), v2(1, 3), 4), std::invalid_argument);

    ParameterBox s = sobol_box(v2(0.0, 0.0), v2(2.0, 2.0), 33);
    CHECK(s.count() == 33);
    CHECK((s.samples.array() >= 0.0).all());
    CHECK((s.samples.array() <= 2.0).all());
}

TEST_CASE("sobol sequence matches the reference values") {
    // reference points (zero point dropped) from an independent generator
    Eigen::MatrixXd p2 = sobol_points(2, 8);
    const double e2[8][2] = {{0.5, 0.5},     {0.75, 0.25},  {0.25, 0.75},   {0.375, 0.375},
                             {0.875, 0.875}, {0.625, 0.125}, {0.125, 0.625}, {0.1875, 0.3125}};
    for (int n = 0; n < 8; ++n) {
        CHECK(p2(0, n) == e2[n][0]);
        CHECK(p2(1, n) == e2[n][1]);
    }
    Eigen::MatrixXd p4 = sobol_points(4, 4);
    const double e4[4][4] = {{0.5, 0.5, 0.5, 0.5},
                             {0.75, 0.25, 0.25, 0.25},
                             {0.25, 0.75, 0.75, 0.75},
                             {0.375, 0.375, 0.625, 0.875}};
    for (int n = 0; n < 4; ++n)
        for (int d = 0; d < 4; ++d) CHECK(p4(d, n) == e4[n][d]);
    CHECK_THROWS_AS(sobol_points(9, 4), std::invalid_argument);
}

TEST_CASE("half ball holds one representative per opposite pair") {
    auto k1 = k_half_ball(1, 4.7);
    REQUIRE(k1.size() == 4);
    for (int v = 1; v <= 4; ++v) CHECK(k1[static_cast<size_t>(v - 1)][0] == v);

    auto k2 = k_half_ball(2, 2.0);
    CHECK(k2.size() == 6);  // (0,1) (0,2) (1,-1) (1,0) (1,1) (2,0)
    for (const auto& k : k2) {
        int first = k[0] != 0 ? k[0] : k[1];
        CHECK(first > 0);
        CHECK(std::abs(k[0]) + std::abs(k[1]) <= 2);
    }
    // no pair and its negation both present
    for (const auto& a : k2)
        for (const auto& b : k2) CHECK_FALSE((a[0] == -b[0] && a[1] == -b[1]));

    CHECK(k_half_ball(2, 8.0).size() == 72);
    CHECK(k_half_ball(2, 0.5).empty());
}

TEST_CASE("tangent excision kills exact resonances and is idempotent") {
    ParameterBox box = grid_box(v2(1.0, 1.0), v2(2.0, 2.0), 50);
    FrequencyMap omega = identity_frequencies();
    ExcisionReport rep = excise_tangent(box, omega, 8.0, 3.0);
    // exact resonances on this grid: the 50 diagonal samples under k = (1,-1)
    // plus six off-diagonal hits of k = (5,-3) and (3,-5), where
    // 2 * 1.01 = 101 grid steps of 0.02; nothing else comes within 8^-3
    CHECK(rep.killed == 56);
    CHECK(rep.threshold == doctest::Approx(std::pow(8.0, -3.0)));
    CHECK(rep.witnesses.size() == 56);
    for (const auto& w : rep.witnesses) {
        CHECK(w.divisor < w.threshold);
        double again = recompute_divisor(w, box, omega, [](const Eigen::VectorXd& xi) { return xi; },
                                         0.0);
        CHECK(again == doctest::Approx(w.divisor));
    }
    CHECK(rep.min_divisor >= rep.threshold);

    // idempotent at a fixed scale
    ExcisionReport rep2 = excise_tangent(box, omega, 8.0, 3.0);
    CHECK(rep2.killed == 0);
    CHECK(box.alive_count() == 2444);
}

TEST_CASE("tangent excision scans the shifted divisor when the limit is nonzero") {
    Eigen::MatrixXd samples(2, 2);
    samples.col(0) = v2(0.25, 0.25);  // (k,omega) = 0.5 = varpi at k = (1,1)
    samples.col(1) = v2(0.33, 0.19);
    ParameterBox box = manual_box(v2(0.1, 0.1), v2(0.4, 0.4), samples);
    ExcisionReport rep = excise_tangent(box, identity_frequencies(), 4.0, 3.0, 0.5);
    CHECK(rep.killed == 1);
    CHECK(box.alive[0] == 0);
    CHECK(box.alive[1] == 1);
    REQUIRE(rep.witnesses.size() == 1);
    CHECK(rep.witnesses[0].sign_outer == 1);
    CHECK(rep.witnesses[0].divisor == doctest::Approx(0.0));
}

TEST_CASE("first scan excises a constructed resonance with a verifiable witness") {
    NormalModel model = bbm_normal_model(kTau, 8, {});
    const double lam1 = bbm_normal_frequency(1, kTau);
    const double lam3 = bbm_normal_frequency(3, kTau);

    Eigen::MatrixXd samples(1, 2);
    samples(0, 0) = lam3;  // k = 1 meets lambda_3 head on
    samples(0, 1) = 0.77;
    Eigen::VectorXd lo(1), hi(1);
    lo << 0.1;
    hi << 0.9;
    ParameterBox box = manual_box(lo, hi, samples);

    ExponentProfile prof = ExponentProfile::desk(2, 1, 1.0);
    FrequencyMap omega = identity_frequencies();
    ExcisionReport rep = excise_first(box, model, omega, 4.0, prof);

    CHECK(rep.killed == 1);
    CHECK(box.alive[0] == 0);
    CHECK(box.alive[1] == 1);
    REQUIRE(rep.witnesses.size() == 1);
    const auto& w = rep.witnesses[0];
    CHECK(w.kind == ExcisionWitness::Kind::First);
    CHECK(w.k[0] == 1);
    CHECK(w.j == model.lat.id(site1(3)));
    CHECK(w.sign_inner == -1);
    CHECK(w.divisor == doctest::Approx(0.0));
    CHECK(recompute_divisor(w, box, omega, model_spectrum(model), model.varpi) ==
          doctest::Approx(w.divisor));
    // the survivor's closest divisor is |0.77 - lambda_1|
    CHECK(rep.min_divisor == doctest::Approx(0.77 - lam1));
}

TEST_CASE("first scan kills nothing when the scale excludes every mode") {
    NormalModel model = bbm_normal_model(kTau, 6, {});
    ParameterBox box = grid_box(v2(1.0, 1.0), v2(2.0, 2.0), 8);
    ExponentProfile prof = ExponentProfile::desk(2, 1, 1.0);
    ExcisionReport rep = excise_first(box, model, identity_frequencies(), 0.5, prof);
    CHECK(rep.scanned_k == 0);
    CHECK(rep.killed == 0);
    CHECK(box.alive_count() == box.count());
}

TEST_CASE("first scan excised fraction decays with the scale") {
    NormalModel model = bbm_normal_model(kTau, 8, {});
    ParameterBox base = grid_box(v2(1.0, 1.0), v2(2.0, 2.0), 60);
    ExponentProfile prof = ExponentProfile::desk(2, 1, 1.0);
    FrequencyMap omega = identity_frequencies();

    ParameterBox box = base;
    ScanOptions opts;
    opts.fresh_per_scale = true;
    opts.with_tangent = false;
    auto rows = scan_scales(box, model, omega, {4.0, 8.0, 16.0}, prof, opts);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].killed_fraction() > rows[1].killed_fraction());
    CHECK(rows[1].killed_fraction() > 0.0);
    CHECK(rows[1].killed_fraction() >= rows[2].killed_fraction());

    MeasureTable table = measure_report(rows);
    if (table.fitted_rows >= 2) CHECK(table.killed_slope < -0.8);
    CHECK(table.csv.rfind("K,total", 0) == 0);
}

TEST_CASE("second scan with zero coupling reduces to direct frequency sums") {
    NormalModel model = bbm_normal_model(kTau, 6, {});
    Eigen::VectorXd lam = model.lambda();
    const double sum12 = lam[0] + lam[1];
    const double diff16 = lam[0] - lam[5];

    Eigen::MatrixXd samples(1, 3);
    samples(0, 0) = sum12;   // k = 1 meets lambda_1 + lambda_2
    samples(0, 1) = diff16;  // k = 1 meets lambda_1 - lambda_6
    samples(0, 2) = 0.875;   // sits in a gap of the sum/difference spectrum
    Eigen::VectorXd lo(1), hi(1);
    lo << 0.05;
    hi << 0.95;
    ParameterBox box = manual_box(lo, hi, samples);

    ExponentProfile prof = ExponentProfile::desk(2, 1, 1.0);
    FrequencyMap omega = identity_frequencies();
    ExcisionReport rep = excise_second(box, model, omega, 4.0, prof);

    CHECK(rep.killed == 2);
    CHECK(box.alive[2] == 1);
    CHECK(rep.max_mu_slope == 0.0);
    CHECK_FALSE(rep.mu_slope_flag);
    for (const auto& w : rep.witnesses) {
        CHECK(recompute_divisor(w, box, omega, model_spectrum(model), model.varpi) ==
              doctest::Approx(w.divisor));
        CHECK(w.i >= 0);
        CHECK(w.j >= 0);
    }

    // a provider reproducing the pair list reproduces the kills
    ParameterBox box2 = manual_box(lo, hi, samples);
    MuProvider pairs = [&](const Eigen::VectorXd& xi) -> Eigen::VectorXd {
        Eigen::VectorXd l = model.lambda(xi);
        std::vector<double> mu;
        for (int a = 0; a < l.size(); ++a)
            for (int b = a; b < l.size(); ++b) {
                mu.push_back(l[a] + l[b]);
                if (a != b) mu.push_back(l[a] - l[b]);
            }
        return Eigen::Map<Eigen::VectorXd>(mu.data(), static_cast<Eigen::Index>(mu.size()));
    };
    ExcisionReport rep2 = excise_second(box2, model, omega, 4.0, prof, 8.0, &pairs);
    CHECK(rep2.killed == rep.killed);
    CHECK(box2.alive == box.alive);
}

TEST_CASE("second scan survival is continuous in the perturbation size") {
    NormalModel model = bbm_normal_model(kTau, 5, {});
    ExponentProfile prof = ExponentProfile::desk(2, 1, 1.0);
    FrequencyMap omega = identity_frequencies();

    auto perturbed = [&](double eps) {
        return MuProvider([&model, eps](const Eigen::VectorXd& xi) -> Eigen::VectorXd {
            Eigen::VectorXd l = model.lambda(xi);
            std::vector<double> mu;
            for (int a = 0; a < l.size(); ++a)
                for (int b = a; b < l.size(); ++b)
                    mu.push_back(l[a] + l[b] + eps * std::cos(7.0 * xi.sum()));
            return Eigen::Map<Eigen::VectorXd>(mu.data(), static_cast<Eigen::Index>(mu.size()));
        });
    };

    auto survival = [&](double eps) {
        ParameterBox box = grid_box(v2(1.0, 1.0), v2(2.0, 2.0), 30);
        MuProvider mu = perturbed(eps);
        excise_second(box, model, omega, 4.0, prof, 8.0, &mu);
        return box.surviving_fraction();
    };

    double base = survival(0.0);
    CHECK(survival(1e-9) == doctest::Approx(base));
    // a perturbation well below the threshold can only flip samples within
    // its own size of the divisor level set
    CHECK(std::abs(survival(1e-4) - base) <= 0.02);
    CHECK(std::abs(survival(0.05) - base) <= 0.25);
}

TEST_CASE("second scan flags steep eigenvalue slopes") {
    NormalModel model = bbm_normal_model(kTau, 4, {});
    ExponentProfile prof = ExponentProfile::desk(2, 1, 1.0);
    MuProvider steep = [](const Eigen::VectorXd& xi) {
        Eigen::VectorXd mu(1);
        mu[0] = 2.0 * xi[0] + 0.7;
        return mu;
    };
    ParameterBox box = grid_box(v2(1.0, 1.0), v2(2.0, 2.0), 5);
    ExcisionReport rep =
        excise_second(box, model, identity_frequencies(), 4.0, prof, 8.0, &steep);
    CHECK(rep.max_mu_slope == doctest::Approx(2.0).epsilon(1e-6));
    CHECK(rep.mu_slope_flag);
    CHECK(rep.note.find("slope") != std::string::npos);
}

TEST_CASE("cumulative scan is monotone and its witnesses all recompute") {
    NormalModel model = bbm_normal_model(kTau, 8, {});
    ParameterBox box = grid_box(v2(1.0, 1.0), v2(2.0, 2.0), 40);
    ParameterBox pristine = box;
    ExponentProfile prof = ExponentProfile::desk(2, 1, 1.0);
    FrequencyMap omega = identity_frequencies();

    ScanOptions opts;
    opts.fresh_per_scale = false;
    std::vector<ExcisionWitness> witnesses;
    auto rows = scan_scales(box, model, omega, {4.0, 8.0}, prof, opts, &witnesses);

    REQUIRE(rows.size() == 2);
    CHECK(rows[0].alive_after <= rows[0].alive_before);
    CHECK(rows[1].alive_before == rows[0].alive_after);
    CHECK(rows[1].alive_after <= rows[1].alive_before);
    CHECK(static_cast<int>(witnesses.size()) ==
          rows[0].alive_before - rows[1].alive_after);

    SpectrumMap spec = model_spectrum(model);
    for (const auto& w : witnesses) {
        double d = recompute_divisor(w, pristine, omega, spec, model.varpi);
        CHECK(d < w.threshold);
    }
    std::string csv = witness_csv(witnesses);
    CHECK(csv.rfind("kind,sample", 0) == 0);
    CHECK(csv.find("first") != std::string::npos);
}

TEST_CASE("measure report fits the constructed decay") {
    ScaleScan a, b;
    a.K = 10.0;
    a.total = 1000;
    a.alive_before = 1000;
    a.alive_after = 900;
    a.killed_first = 100;
    b.K = 100.0;
    b.total = 1000;
    b.alive_before = 900;
    b.alive_after = 899;
    b.killed_first = 1;
    MeasureTable table = measure_report({a, b});
    CHECK(table.fitted_rows == 2);
    CHECK(table.killed_slope == doctest::Approx(-2.0));
    CHECK(table.final_fraction == doctest::Approx(0.899));

    ScaleScan clean = a;
    clean.alive_after = 1000;
    clean.killed_first = 0;
    MeasureTable quiet = measure_report({clean, clean});
    CHECK(quiet.fitted_rows == 0);
    CHECK(std::isnan(quiet.killed_slope));
    CHECK(quiet.final_fraction == 1.0);

    CHECK_THROWS_AS(measure_report({a}), std::invalid_argument);
}

TEST_CASE("derivative margins at the box corners") {
    NormalModel model = bbm_normal_model(kTau, 6, {});
    ParameterBox box = grid_box(v2(1.0, 1.0), v2(2.0, 2.0), 3);

    DerivativeMargin flat = derivative_margins(model, identity_frequencies(), box, 8.0);
    CHECK(flat.min_first == doctest::Approx(1.0));
    CHECK(flat.min_second == doctest::Approx(1.0));
    CHECK(flat.max_lambda_slope == doctest::Approx(0.0));

    NormalModel sloped = model;
    sloped.lambda_slope = Eigen::MatrixXd::Constant(model.lat.size(), 2, 0.3);
    sloped.xi0 = v2(1.5, 1.5);
    DerivativeMargin tilted = derivative_margins(sloped, identity_frequencies(), box, 8.0);
    CHECK(tilted.max_lambda_slope == doctest::Approx(0.3).epsilon(1e-6));
    CHECK(tilted.min_first < 1.0);
    CHECK(tilted.min_first > 0.0);
}
