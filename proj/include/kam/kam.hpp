#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kam/birkhoff.hpp"
#include "kam/homology.hpp"
#include "kam/melnikov.hpp"
#include "kam/models.hpp"
#include "kam/poly.hpp"

namespace kam {

// ---------------------------------------------------------------------------
// Quadratic KAM iteration around the reduced normal form
//   H = (omega, y) + <(Lambda + B) z, zbar> + R + P,
// R the low-order perturbation (classes 1, y, z, zz, z zbar, zbar zbar and the
// angle-dependent part of the x block), P = O(|y|^2 + |y| ||z|| + ||z||^3).
// Each step solves the seven homological equations for a generator F, absorbs
// the frequency/operator hats into (omega, B) in two stages, and conjugates by
// the time-1 flow of F, driving ||X_R|| from eps_m to eps_m^{1+rho0}.
// ---------------------------------------------------------------------------

// ----------------------------------------------------------------- schedule

struct KamParams {
    double eps0 = 1e-4;
    double rho0 = 0.3;
    double s0 = 1.0;  // initial analyticity width
    double r0 = 0.1;  // initial domain radius: |y| < r^2, ||z||_p < r
};

/// Scales of step m: eps_m = eps0^{(1+rho0)^m}, the domain shrink
/// e_m = (sum_{i<=m} i^-2) / (2 sum_{i>=1} i^-2) (e_0 = 0, e_inf = 1/2),
/// s_m = s0 (1 - e_m), r_m = r0 (1 - e_m), the seven intermediate widths
/// s_m^j = (1 - j/6) s_m + (j/6) s_{m+1}, and the Fourier cutoff
/// K_m = 2 |log eps_m| / (s_m^5 - s_m^6).
struct StepScale {
    int m = 0;
    double eps = 0.0;       // eps_m
    double eps_next = 0.0;  // eps_{m+1}
    double e = 0.0;
    double s = 0.0, s_next = 0.0;
    double r = 0.0, r_next = 0.0;
    double K = 0.0;
    std::array<double, 7> s_bridge{};  // s_m^0 .. s_m^6
    std::array<double, 7> r_bridge{};
};

StepScale schedule(int m, const KamParams& prm);

// ------------------------------------------------------ perturbation split

/// True for monomials of class O(|y|^2 + |y| ||z|| + ||z||^3), i.e.
/// 2 ydeg + zdeg >= 3.
bool high_class(const MonKey& m);

/// R = low + high + gauge: `low` collects the seven low blocks (the x block
/// without its angle average), `gauge` is the dropped average (an energy
/// offset), `high` the rest. low + high + constant(gauge) == R exactly.
struct PerturbationSplit {
    Poly low;
    Poly high;
    Complex gauge{0.0, 0.0};
};
PerturbationSplit split_perturbation(const Poly& R);

/// Angle average of the y block (vector over angles) and of the z zbar block
/// (matrix A with <A z, zbar> = sum A_ij z_j zbar_i), i.e. the hats that feed
/// the frequency and operator updates. imag_defect records |Im yhat(0)|_max,
/// which vanishes for real polynomials.
struct HatUpdate {
    Eigen::VectorXd omega_shift;
    Eigen::MatrixXcd b_shift;
    double imag_defect = 0.0;
};
HatUpdate frequency_and_operator_update(const Poly& low, int nangles, int nsites);

// ------------------------------------------------------ bracket corrections

/// Low blocks of {Ptilde, F^x + <F^z, z> + <F^zbar, zbar>}: the corrections
/// the partial generator feeds back into the homological right-hand sides.
/// The remaining F parts (F^y and the quadratics) cannot reach the low blocks,
/// so low() equals the low split of the bracket against the full generator.
struct BracketCorrections {
    Poly y_block;
    Poly z_block, zbar_block;
    Poly zz_block, zzbar_block, zbarzbar_block;
    Poly high;
    OpStats stats;

    Poly low() const;
};
BracketCorrections bracket_corrections(const Poly& Ptilde, const Poly& Fx, const Poly& Fz,
                                       const Poly& Fzbar, int nangles, const Caps& caps);

// ------------------------------------------------------------- Lie series

/// value = H o X_F^{t=1} = sum_{n <= max_order} ad_F^n H / n!,
/// remainder = value - H - {H, F} (the quadratic-and-beyond part).
/// Stops early once a factorial-weighted term's coefficient mass falls below
/// tol; throws std::runtime_error when two consecutive terms grow instead.
struct LieConjugation {
    Poly value;
    Poly bracket1;
    Poly remainder;
    int order_used = 0;
    double last_term_abs = 0.0;
    OpStats stats;
};
LieConjugation lie_conjugate(const Poly& H, const Poly& F, int nangles, const Caps& caps,
                             int max_order = 6, double tol = 0.0);

// ------------------------------------------------------------------- state

struct KamOptions {
    KamParams scales{};
    int steps = 3;
    Caps caps{5, 2, 127, 0.0};
    int lie_order = 6;
    double lie_tol = 0.0;  // 0: adaptive, 1e-3 * eps_{m+1}
    double drop_weighted = 1e-21;  // weighted product floor (see Caps::kl1_weight)
    // Weighted floor for the strictly high-class bookkeeping brackets (the
    // carried P pile and its products) and for the carried pile itself; those
    // terms re-enter a low class only through later brackets against F, so a
    // floor at delta perturbs a later R by <= delta * ||X_F||.  Every trim is
    // recorded per step (StepTrace::trimmed_mass) together with its bracket
    // amplification factor.
    double tail_trim = 1e-13;
    // Operand guards for the Lie-tail iterates, whose low-class parts feed
    // the next R directly: an absolute floor (terms below
    // rem_guard / (64 * wmax(F)) cannot move any bracket output by more than
    // rem_guard in weighted mass) and a relative floor at rem_rel of the
    // iterate's largest weighted coefficient.
    double rem_guard = 1e-16;
    double rem_rel = 1e-11;
    double divisor_floor = 1e-10;
    bool excise = true;    // run the per-step parameter excisions
    int samples = 256;     // parameter-box sample count
    int y_order = 2;       // action-angle expansion order for the initial state
    bool track_embedding = true;
    int phase_samples = 8;  // norm sampling
    int boundary_samples = 16;
    uint64_t seed = 0x9e3779b97f4a7c15ull;
};

/// Composed torus embedding: the coordinate functions of the original
/// variables pulled back through every step's flow,
///   x = theta + xshift(theta, y, z), y = Y(...), z = Z(...),
/// to be evaluated on the invariant torus y = 0, z = 0 of the final system.
struct TorusEmbedding {
    int nangles = 0;
    Lattice lat;
    std::vector<Poly> xshift;  // per angle
    std::vector<Poly> y;       // per angle
    std::vector<Poly> z;       // per site id
    std::vector<Poly> zbar;
};

struct StepTrace {
    int m = 0;                  // index of the step taken (state m -> m+1)
    double eps = 0.0, K = 0.0;  // schedule values used
    double r_norm_before = 0.0; // ||X_R|| on (s_m, r_m)
    double r_norm_after = 0.0;  // ||X_R'|| on (s_{m+1}, r_{m+1})
    double p_norm_after = 0.0;  // ||X_P'|| (same domain as r_norm_after)
    double f_norm = 0.0;        // ||X_F|| on (s_m, r_m)
    double cm_ratio = 0.0;      // r_norm_before / eps_m
    bool cm_flag = false;       // ratio grew beyond 2^m x (step-0 ratio)
    double homological_defect = 0.0;  // ||Gamma({H0,F}+R_*+R_+*)|| (abs mass)
    double gamma_leftover = 0.0;      // ||(1-Gamma)(same)|| routed into R'
    double omega_update = 0.0, omega_update2 = 0.0;  // stage 1 / stage 2, max abs
    double b_update = 0.0, b_update2 = 0.0;          // spectral norms
    double b_selfadjoint_defect = 0.0;               // ||B' - B'^H||
    double reality_defect_r = 0.0;                   // of the new R
    double hat_imag_defect = 0.0;
    double min_div_tangent = std::numeric_limits<double>::infinity();
    double min_div_first = std::numeric_limits<double>::infinity();
    double min_div_second = std::numeric_limits<double>::infinity();
    double max_first_residual = 0.0;   // worst per-mode solver residual
    double max_second_residual = 0.0;
    double dropped_mass = 0.0;         // caps/floor drops during this step
    double trimmed_mass = 0.0;         // weighted Lie-tail / P-pile trims
    double lie_last_term = 0.0;
    int lie_order_used = 0;
    int killed = 0;                    // samples excised this step
    double surviving_fraction = 1.0;
    std::string note;
};

/// Everything the iteration carries from step to step. The polynomial pipeline
/// runs at the nominal parameter xi (the center of the image of Pi_0); the
/// sampled box tracks which parameters survive the divisor excisions, with the
/// accumulated frequency shifts treated as xi-constant.
struct KamState {
    int m = 0;
    int nangles = 0;
    NormalModel model;          // normal lattice, lambda(xi), varpi, kappa, p, q
    Eigen::VectorXd xi;         // nominal parameter (= initial omega)
    Eigen::VectorXd omega0;     // initial tangential frequencies
    Eigen::VectorXd omega;      // current
    Eigen::VectorXd lambda;     // normal frequencies at the nominal parameter
    Eigen::MatrixXcd B0, B;     // initial / current normal-form correction
    Poly R, P;
    Poly H_initial;             // the full Hamiltonian the run started from
    ParameterBox box;           // samples in xi space
    ExponentProfile profile;
    double energy_const = 0.0;  // accumulated dropped constants
    double dropped_mass = 0.0;  // accumulated caps drops
    double sqrt_truncation = 0.0;
    TorusEmbedding embedding;
    std::vector<StepTrace> trace;
};

/// Debug window into one step (for tests): the generator blocks, the stage
/// right-hand sides and the assembly pieces.
struct StepDebug {
    Poly Fx, Fy, Fz, Fzbar, Fzz, Fzzbar, Fzbarzbar;
    Poly F;          // sum of the blocks
    Poly R_star;     // R2 minus the stage-1 hats
    Poly Ptilde;     // R3 + P
    Poly corrections_low;
    Poly defect;     // {H0tilde, F} + R_* + R_+* (Gamma part + leftover)
    Poly H0_next;    // (omega', y) + <(Lambda + B') z, zbar>
};

/// State from a reduced normal-form package: action-angle reduction at
/// zeta* = 1.5 sqrt(eps0) (center of Pi_0), R/P split of the remainder, B = 0,
/// and a Sobol box over Pi_0 = [sqrt(eps0), 2 sqrt(eps0)]^N mapped to xi.
KamState initial_state(const NormalFormPackage& pkg, const KamOptions& opt);

/// State assembled from explicit data (tests, toy models). R0 is split into
/// R and P; omega doubles as the nominal xi.
KamState make_state(const NormalModel& model, const Eigen::VectorXd& omega, const Poly& R0,
                    const KamOptions& opt);

/// One iteration step: split, stage-1 hats, the seven homological solves with
/// bracket corrections, stage-2 hats, Lie conjugation, new (R, P), domain and
/// cutoff from schedule(state.m). Throws std::runtime_error when the Lie
/// series diverges and std::domain_error when a nominal divisor falls under
/// the floor. Returns the recorded trace (also appended to state.trace).
StepTrace kam_step(KamState& state, const KamOptions& opt, StepDebug* dbg = nullptr);

/// Divisor excision over the support of the current right-hand sides at the
/// scale K: tangent, first and second scans over the sampled box.
struct StepExcision {
    int killed_tangent = 0, killed_first = 0, killed_second = 0;
    double min_tangent = std::numeric_limits<double>::infinity();
    double min_first = std::numeric_limits<double>::infinity();
    double min_second = std::numeric_limits<double>::infinity();
    double surviving_fraction = 1.0;
};
StepExcision step_excision(KamState& state, const std::vector<std::array<int, kMaxAngles>>& modes,
                           double K);

struct KamRunResult {
    KamState state;
    TorusEmbedding torus;
    double omega_drift = 0.0;  // |omega_final - omega0|_max
    double b_drift = 0.0;      // ||B_final - B0||_{h_p -> h_q}
    double final_r_norm = 0.0;
    bool halted = false;       // excision emptied the box
    std::string halt_reason;
};

/// Runs opt.steps iteration steps (stopping early if the parameter box dies)
/// and reports the composed torus and the frequency/operator drifts.
KamRunResult run_kam(KamState state, const KamOptions& opt);

}  // namespace kam
