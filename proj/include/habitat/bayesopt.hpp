#pragma once

#include "habitat/core.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <algorithm>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace habitat {

struct HyperParams {
    double gamma = 1.0;
    int eta = 3;

    friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

struct Bounds {
    double gamma_lo = 0.0;
    double gamma_hi = 1.0;
    int eta_lo = 3;
    int eta_hi = 7;

    void validate() const {
        require(gamma_lo >= 0.0 && gamma_hi <= 1.0 && gamma_lo <= gamma_hi, ErrorCode::invalid_argument,
                "gamma bounds must satisfy 0 <= lo <= hi <= 1");
        require(eta_lo >= 2 && eta_lo <= eta_hi, ErrorCode::invalid_argument, "eta bounds must satisfy 2 <= lo <= hi");
    }

    bool contains(const HyperParams& t) const {
        return t.gamma >= gamma_lo && t.gamma <= gamma_hi && t.eta >= eta_lo && t.eta <= eta_hi;
    }

    friend bool operator==(const Bounds&, const Bounds&) = default;
};

/// Unit-cube coordinates of theta.
inline Eigen::Vector2d to_unit(const HyperParams& t, const Bounds& b) {
    const double gspan = b.gamma_hi - b.gamma_lo;
    const double espan = static_cast<double>(b.eta_hi - b.eta_lo);
    return {gspan > 0.0 ? (t.gamma - b.gamma_lo) / gspan : 0.0, espan > 0.0 ? (t.eta - b.eta_lo) / espan : 0.0};
}

/// Maps unit-cube coordinates back to a feasible theta; eta rounds to the nearest integer.
inline HyperParams from_unit(const Eigen::Vector2d& x, const Bounds& b) {
    HyperParams t;
    t.gamma = std::clamp(b.gamma_lo + std::clamp(x(0), 0.0, 1.0) * (b.gamma_hi - b.gamma_lo), b.gamma_lo, b.gamma_hi);
    const double eta = b.eta_lo + std::clamp(x(1), 0.0, 1.0) * static_cast<double>(b.eta_hi - b.eta_lo);
    t.eta = std::clamp(static_cast<int>(std::lround(eta)), b.eta_lo, b.eta_hi);
    return t;
}

// ---------------------------------------------------------------------------
// Gaussian process with an RBF kernel
// ---------------------------------------------------------------------------

struct GpModel {
    Matrix inputs;         // J x d
    Vector raw_targets;    // J, loss units
    Vector targets;        // J, standardized
    double y_mean = 0.0;
    double y_scale = 1.0;
    double lengthscale = 1.0;
    double signal_variance = 1.0;
    double noise_variance = 1e-6;
    double jitter = 1e-8;
    Eigen::MatrixXd chol_lower;  // of K + (noise + jitter) I
    Vector alpha;
    double log_marginal_likelihood = 0.0;

    double effective_noise() const { return noise_variance + jitter; }

    double kernel(const double* a, const double* b) const {
        double s = 0.0;
        for (Eigen::Index j = 0; j < inputs.cols(); ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
        return signal_variance * std::exp(-s / (2.0 * lengthscale * lengthscale));
    }

    double best_observed() const { return raw_targets.minCoeff(); }
};

struct GpFitOptions {
    std::vector<double> lengthscales{0.05, 0.1, 0.2, 0.4, 0.8, 1.6};
    std::vector<double> noise_variances{1e-6, 1e-4, 1e-2};
    bool standardize_outputs = true;
};

/// Fit with fixed kernel hyper-parameters; jitter starts at 1e-8 and grows tenfold on failure.
inline GpModel gp_fit_fixed(const Matrix& inputs, const Vector& targets, double lengthscale, double noise_variance,
                            bool standardize_outputs = true) {
    const auto j = inputs.rows();
    require(j >= 1 && targets.size() == j, ErrorCode::invalid_argument, "gp_fit needs matching nonempty data");
    require(targets.allFinite() && inputs.allFinite(), ErrorCode::non_finite, "gp_fit: non-finite data");
    require(lengthscale > 0.0 && noise_variance >= 0.0, ErrorCode::invalid_argument, "invalid GP hyper-parameters");
    GpModel gp;
    gp.inputs = inputs;
    gp.raw_targets = targets;
    gp.lengthscale = lengthscale;
    gp.noise_variance = noise_variance;
    if (standardize_outputs) {
        gp.y_mean = targets.mean();
        const double var = (targets.array() - gp.y_mean).square().mean();
        gp.y_scale = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
    gp.targets = (targets.array() - gp.y_mean) / gp.y_scale;

    Eigen::MatrixXd k(j, j);
    for (Eigen::Index a = 0; a < j; ++a)
        for (Eigen::Index b = 0; b < j; ++b) k(a, b) = gp.kernel(inputs.row(a).data(), inputs.row(b).data());
    for (double jitter = 1e-8; jitter <= 1e-2 * 1.0001; jitter *= 10.0) {
        Eigen::MatrixXd kn = k;
        kn.diagonal().array() += noise_variance + jitter;
        Eigen::LLT<Eigen::MatrixXd> llt(kn);
        if (llt.info() != Eigen::Success) continue;
        gp.jitter = jitter;
        gp.chol_lower = llt.matrixL();
        gp.alpha = llt.solve(gp.targets);
        constexpr double log_2pi = 1.8378770664093453;
        gp.log_marginal_likelihood = -0.5 * gp.targets.dot(gp.alpha) -
                                     gp.chol_lower.diagonal().array().log().sum() -
                                     0.5 * static_cast<double>(j) * log_2pi;
        return gp;
    }
    throw Error(ErrorCode::factorization, "GP kernel matrix is not positive definite after jitter escalation");
}

/// Kernel hyper-parameters by grid search over the log marginal likelihood (first maximum wins).
inline GpModel gp_fit(const Matrix& inputs, const Vector& targets, const GpFitOptions& options = {}) {
    std::optional<GpModel> best;
    for (double ell : options.lengthscales) {
        for (double noise : options.noise_variances) {
            try {
                auto gp = gp_fit_fixed(inputs, targets, ell, noise, options.standardize_outputs);
                if (!best || gp.log_marginal_likelihood > best->log_marginal_likelihood) best = std::move(gp);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::factorization) throw;
            }
        }
    }
    require(best.has_value(), ErrorCode::factorization, "no GP hyper-parameter setting could be factorized");
    return *best;
}

struct Posterior {
    double mean = 0.0;
    double sigma = 0.0;
};

/// Posterior of the latent function in loss units.
inline Posterior gp_posterior(const GpModel& gp, const Eigen::VectorXd& x) {
    require(x.size() == gp.inputs.cols(), ErrorCode::invalid_argument, "gp_posterior: dimension mismatch");
    const auto j = gp.inputs.rows();
    Eigen::VectorXd ks(j);
    for (Eigen::Index a = 0; a < j; ++a) ks(a) = gp.kernel(gp.inputs.row(a).data(), x.data());
    const double mean_std = ks.dot(gp.alpha);
    const Eigen::VectorXd v = gp.chol_lower.triangularView<Eigen::Lower>().solve(ks);
    const double var_std = std::max(0.0, gp.signal_variance - v.squaredNorm());
    return {gp.y_mean + gp.y_scale * mean_std, gp.y_scale * std::sqrt(var_std)};
}

inline double normal_pdf(double z) { return 0.3989422804014327 * std::exp(-0.5 * z * z); }
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/// Expected improvement below f_best for a minimization problem.
inline double expected_improvement(double mean, double sigma, double f_best) {
    const double gain = f_best - mean;
    if (!(sigma > 0.0)) return std::max(0.0, gain);
    const double z = gain / sigma;
    return std::max(0.0, gain * normal_cdf(z) + sigma * normal_pdf(z));
}

inline double expected_improvement(const GpModel& gp, const Eigen::VectorXd& x, double f_best) {
    const auto post = gp_posterior(gp, x);
    return expected_improvement(post.mean, post.sigma, f_best);
}

// ---------------------------------------------------------------------------
// Candidate proposals
// ---------------------------------------------------------------------------

inline double radical_inverse(std::uint64_t index, std::uint64_t base) {
    double result = 0.0;
    double f = 1.0 / static_cast<double>(base);
    while (index > 0) {
        result += f * static_cast<double>(index % base);
        index /= base;
        f /= static_cast<double>(base);
    }
    return result;
}

/// Halton (2,3) points with a seeded Cranley-Patterson shift.
inline std::vector<Eigen::Vector2d> halton_points(std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double s0 = unit(rng);
    const double s1 = unit(rng);
    std::vector<Eigen::Vector2d> out;
    out.reserve(count);
    for (std::size_t i = 1; i <= count; ++i) {
        out.emplace_back(std::fmod(radical_inverse(i, 2) + s0, 1.0), std::fmod(radical_inverse(i, 3) + s1, 1.0));
    }
    return out;
}

/// Quasi-random points plus a 51-step gamma lattice on every integer eta, all snapped to
/// integer eta so the surrogate is scored where the objective would be evaluated.
inline std::vector<HyperParams> candidate_set(const Bounds& bounds, std::size_t n_candidates, std::uint64_t seed) {
    std::vector<HyperParams> out;
    for (const auto& x : halton_points(n_candidates, seed)) out.push_back(from_unit(x, bounds));
    for (int eta = bounds.eta_lo; eta <= bounds.eta_hi; ++eta) {
        for (int k = 0; k <= 50; ++k) {
            out.push_back({bounds.gamma_lo + (bounds.gamma_hi - bounds.gamma_lo) * k / 50.0, eta});
        }
    }
    return out;
}

inline HyperParams propose_ei(const GpModel& gp, const Bounds& bounds, std::size_t n_candidates, std::uint64_t seed) {
    const double f_best = gp.best_observed();
    const auto candidates = candidate_set(bounds, n_candidates, seed);
    std::size_t best = 0;
    double best_ei = -1.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const double ei = expected_improvement(gp, to_unit(candidates[i], bounds), f_best);
        if (ei > best_ei) {
            best_ei = ei;
            best = i;
        }
    }
    return candidates[best];
}

inline HyperParams propose_surrogate_optimum(const GpModel& gp, const Bounds& bounds, std::size_t n_candidates,
                                             std::uint64_t seed) {
    const auto candidates = candidate_set(bounds, n_candidates, seed);
    std::size_t best = 0;
    double best_mean = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const double mean = gp_posterior(gp, to_unit(candidates[i], bounds)).mean;
        if (mean < best_mean) {
            best_mean = mean;
            best = i;
        }
    }
    return candidates[best];
}

/// Moves a proposal that was already evaluated to the nearest unevaluated integer eta at the
/// same gamma (lower eta first on ties); if every eta is taken, nudges gamma.
inline HyperParams deduplicate(HyperParams t, const std::vector<HyperParams>& evaluated, const Bounds& bounds) {
    auto taken = [&](const HyperParams& q) { return std::find(evaluated.begin(), evaluated.end(), q) != evaluated.end(); };
    if (!taken(t)) return t;
    for (int delta = 1; delta <= bounds.eta_hi - bounds.eta_lo; ++delta) {
        for (int sign : {-1, 1}) {
            const HyperParams q{t.gamma, t.eta + sign * delta};
            if (q.eta >= bounds.eta_lo && q.eta <= bounds.eta_hi && !taken(q)) return q;
        }
    }
    const double step = 1e-3 * std::max(1e-6, bounds.gamma_hi - bounds.gamma_lo);
    for (int k = 1; k < 1000; ++k) {
        for (int sign : {1, -1}) {
            const HyperParams q{std::clamp(t.gamma + sign * k * step, bounds.gamma_lo, bounds.gamma_hi), t.eta};
            if (!taken(q)) return q;
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// BO loop
// ---------------------------------------------------------------------------

struct ObjectiveValue {
    double L_s = 0.0;
    double L_p = 0.0;  // the significance term entering L
    double L = 0.0;
    double L_p_raw = std::numeric_limits<double>::quiet_NaN();
    double p_value = std::numeric_limits<double>::quiet_NaN();
};

using Objective = std::function<ObjectiveValue(const HyperParams&)>;

enum class StepKind { initial, ei_candidate, surrogate_optimum };

inline std::string to_string(StepKind k) {
    switch (k) {
        case StepKind::initial: return "initial";
        case StepKind::ei_candidate: return "ei_candidate";
        case StepKind::surrogate_optimum: return "surrogate_optimum";
    }
    return "unknown";
}

inline StepKind parse_step_kind(const std::string& s) {
    if (s == "initial") return StepKind::initial;
    if (s == "ei_candidate") return StepKind::ei_candidate;
    if (s == "surrogate_optimum") return StepKind::surrogate_optimum;
    throw Error(ErrorCode::parse_error, "unknown step kind '" + s + "'");
}

struct BoStep {
    int index = 0;
    StepKind kind = StepKind::initial;
    HyperParams theta;
    ObjectiveValue value;
    bool failed = false;
    std::string error;
    double best = std::numeric_limits<double>::infinity();
};

struct GpSnapshot {
    int iteration = 0;
    int n_points = 0;
    double lengthscale = 0.0;
    double noise_variance = 0.0;
    double log_marginal_likelihood = 0.0;
};

struct BoTrace {
    std::vector<BoStep> steps;
    std::vector<GpSnapshot> gp_snapshots;
    int iterations = 0;
    bool converged = false;

    /// Lowest successful evaluation; the first one on ties.
    const BoStep& best_step() const {
        const BoStep* best = nullptr;
        for (const auto& s : steps) {
            if (!s.failed && (!best || s.value.L < best->value.L)) best = &s;
        }
        require(best != nullptr, ErrorCode::degenerate, "no successful BO evaluation");
        return *best;
    }

    HyperParams best_theta() const { return best_step().theta; }
};

struct BoOptions {
    int n_initial = 10;
    int max_steps = 20;  // iterations, two evaluations each
    double epsilon = 1e-3;
    int patience = 5;
    std::size_t n_candidates = 2000;
    double penalty = 2.0;
    std::uint64_t seed = 0;
    GpFitOptions gp;
};

/// Initial quasi-random design, then per iteration an EI candidate followed by the surrogate
/// optimum of a GP refit that includes it. Objective failures are recorded with the penalty loss.
inline BoTrace bo_run(const Objective& objective, const Bounds& bounds, const BoOptions& options) {
    bounds.validate();
    require(options.n_initial >= 2, ErrorCode::invalid_argument, "bo_run needs n_initial >= 2");
    require(options.max_steps >= 0 && options.patience >= 1, ErrorCode::invalid_argument, "invalid BO options");
    BoTrace trace;
    std::vector<HyperParams> evaluated;
    Matrix x(0, 2);
    std::vector<double> y;
    double best = std::numeric_limits<double>::infinity();

    auto evaluate = [&](HyperParams theta, StepKind kind) {
        theta = deduplicate(theta, evaluated, bounds);
        BoStep step;
        step.index = static_cast<int>(trace.steps.size());
        step.kind = kind;
        step.theta = theta;
        try {
            step.value = objective(theta);
            require(std::isfinite(step.value.L), ErrorCode::non_finite, "objective returned a non-finite loss");
        } catch (const std::exception& e) {
            step.failed = true;
            step.error = e.what();
            const double nan = std::numeric_limits<double>::quiet_NaN();
            step.value = ObjectiveValue{nan, nan, options.penalty, nan, nan};
        }
        if (!step.failed) best = std::min(best, step.value.L);
        step.best = best;
        evaluated.push_back(theta);
        x.conservativeResize(x.rows() + 1, 2);
        x.row(x.rows() - 1) = to_unit(theta, bounds).transpose();
        y.push_back(step.value.L);
        trace.steps.push_back(std::move(step));
    };
    auto fit = [&](int iteration) {
        const Vector targets = Eigen::Map<const Vector>(y.data(), static_cast<Eigen::Index>(y.size()));
        auto gp = gp_fit(x, targets, options.gp);
        trace.gp_snapshots.push_back({iteration, static_cast<int>(y.size()), gp.lengthscale, gp.noise_variance,
                                      gp.log_marginal_likelihood});
        return gp;
    };

    const auto design = halton_points(static_cast<std::size_t>(options.n_initial), derive_seed(options.seed, 0));
    for (const auto& p : design) evaluate(from_unit(p, bounds), StepKind::initial);

    double previous_best = best;
    int stale = 0;
    for (int it = 1; it <= options.max_steps; ++it) {
        const auto gp = fit(it);
        evaluate(propose_ei(gp, bounds, options.n_candidates, derive_seed(options.seed, 2 * it)), StepKind::ei_candidate);
        const auto refit = fit(it);
        evaluate(propose_surrogate_optimum(refit, bounds, options.n_candidates, derive_seed(options.seed, 2 * it + 1)),
                 StepKind::surrogate_optimum);
        trace.iterations = it;
        const double improvement = previous_best - best;
        stale = (std::isfinite(best) && !(improvement >= options.epsilon)) ? stale + 1 : 0;
        previous_best = best;
        if (stale >= options.patience) {
            trace.converged = true;
            break;
        }
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Trace CSV
// ---------------------------------------------------------------------------

inline void write_trace_csv(const BoTrace& trace, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
    out << "step,kind,gamma,eta,L_s,L_p,L,best\n";
    for (const auto& s : trace.steps) {
        out << s.index << ',' << to_string(s.kind) << ',' << format_real(s.theta.gamma) << ',' << s.theta.eta << ','
            << format_real(s.value.L_s) << ',' << format_real(s.value.L_p) << ',' << format_real(s.value.L) << ','
            << format_real(s.best) << '\n';
    }
}

/// Extra per-step columns that do not fit the fixed trace header.
inline void write_trace_detail_csv(const BoTrace& trace, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
    out << "step,p_value,L_p_raw,failed,error\n";
    for (const auto& s : trace.steps) {
        std::string error = s.error;
        std::replace(error.begin(), error.end(), ',', ';');
        std::replace(error.begin(), error.end(), '\n', ' ');
        out << s.index << ',' << format_real(s.value.p_value) << ',' << format_real(s.value.L_p_raw) << ','
            << (s.failed ? 1 : 0) << ',' << error << '\n';
    }
}

inline BoTrace read_trace_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    require(line == "step,kind,gamma,eta,L_s,L_p,L,best", ErrorCode::parse_error,
            path.string() + ": unexpected trace header");
    BoTrace trace;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        require(f.size() == 8, ErrorCode::parse_error, path.string() + ":" + std::to_string(line_no) + ": expected 8 fields");
        BoStep s;
        s.index = std::stoi(f[0]);
        s.kind = parse_step_kind(f[1]);
        s.theta = {std::strtod(f[2].c_str(), nullptr), std::stoi(f[3])};
        s.value.L_s = std::strtod(f[4].c_str(), nullptr);
        s.value.L_p = std::strtod(f[5].c_str(), nullptr);
        s.value.L = std::strtod(f[6].c_str(), nullptr);
        s.best = std::strtod(f[7].c_str(), nullptr);
        s.failed = std::isnan(s.value.L_s);
        trace.steps.push_back(s);
    }
    return trace;
}

}  // namespace habitat
