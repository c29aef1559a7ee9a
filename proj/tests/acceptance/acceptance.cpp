// Acceptance checks, one PASS/FAIL line per criterion. Exit status is nonzero if any fails.
#include "habitat/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace habitat;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kLossTol = 1e-9;
constexpr double kGpTol = 1e-8;
constexpr double kEiTol = 1e-3;
constexpr double kChiTol = 1e-3;
constexpr double kAlgebraTol = 1e-12;

struct Verdict {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Verdict()>& check) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
        v = check();
    } catch (const std::exception& e) {
        v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!v.pass) ++failures;
    std::printf("CRITERION %2d %s: %s [%s] (%.1fs)\n", id, v.pass ? "PASS" : "FAIL", name.c_str(), v.detail.c_str(), secs);
    std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c);
    return buf;
}

Cohort planted(int n, std::uint64_t seed, const std::string& prefix = "P") {
    auto spec = SynthSpec::planted(n, 4, seed);
    spec.image_dims = {16, 16};
    spec.id_prefix = prefix;
    return generate_synthetic(spec).cohort;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// ---------------------------------------------------------------------------

Verdict gradients() {
    double worst = 0.0;
    int checks = 0;
    for (auto kind : all_variants) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            FaeConfig c;
            c.n_modalities = 3;
            c.seed = seed;
            const auto model = build_variant(kind, c);
            std::mt19937_64 rng(seed + 1000);
            std::normal_distribution<double> n;
            Matrix batch(8, 3);
            for (Eigen::Index r = 0; r < 8; ++r)
                for (Eigen::Index j = 0; j < 3; ++j) batch(r, j) = n(rng);
            for (auto loss : {LossKind::pairwise, LossKind::global}) {
                worst = std::max(worst, gradient_check(model, batch, loss));
                ++checks;
            }
        }
    }
    return {worst < kGradTol, fmt("%.0f checks, max rel err %.2e", checks, worst)};
}

std::size_t brute_mismatches(const std::vector<int>& a, const std::vector<int>& b, int eta) {
    std::vector<int> perm(static_cast<std::size_t>(eta));
    std::iota(perm.begin(), perm.end(), 0);
    std::size_t best = a.size();
    do {
        std::size_t miss = 0;
        for (std::size_t i = 0; i < a.size(); ++i) miss += perm[static_cast<std::size_t>(b[i])] != a[i];
        best = std::min(best, miss);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

// Points at (10a, 10b): model A's centroids on the x axis predict a, model B's on the y axis predict b.
Verdict stability_oracle() {
    std::mt19937_64 rng(20240);
    std::uniform_int_distribution<int> eta_d(2, 6), n_d(1, 12);
    int exact = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const int eta = eta_d(rng);
        const int n = n_d(rng);
        std::uniform_int_distribution<int> lab(0, eta - 1);
        std::vector<int> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
        Matrix pts(n, 2);
        for (int i = 0; i < n; ++i) {
            a[static_cast<std::size_t>(i)] = lab(rng);
            b[static_cast<std::size_t>(i)] = lab(rng);
            pts.row(i) << 10.0 * a[static_cast<std::size_t>(i)], 10.0 * b[static_cast<std::size_t>(i)];
        }
        ClusterModel ma, mb;
        ma.eta = mb.eta = eta;
        ma.centroids = Matrix::Zero(eta, 2);
        mb.centroids = Matrix::Zero(eta, 2);
        for (int k = 0; k < eta; ++k) {
            ma.centroids(k, 0) = 10.0 * k;
            mb.centroids(k, 1) = 10.0 * k;
        }
        const double expected = static_cast<double>(brute_mismatches(a, b, eta)) / n;
        exact += stability_distance(ma, mb, pts) == expected;
    }
    return {exact == 500, fmt("%.0f/500 exact", exact)};
}

Verdict significance() {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> lp(-12.0, 0.0), t(0.001, 0.5);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const double p = std::min(std::pow(10.0, lp(rng)), 0.999999);
        const double tau = t(rng);
        const double expected = p <= tau ? (std::log(tau) - std::log(p)) / (1.0 - tau) : std::log(p) / std::log(tau) - 1.0;
        worst = std::max(worst, std::abs(significance_loss(p, tau).raw - expected));
    }
    double jump = 0.0;
    for (double tau : {0.01, 0.05, 0.1, 0.3}) {
        const double lo = significance_loss(tau * (1 - 1e-12), tau).raw;
        const double hi = significance_loss(tau * (1 + 1e-12), tau).raw;
        jump = std::max({jump, std::abs(lo - hi), std::abs(significance_loss(tau, tau).raw)});
    }
    return {worst < kLossTol && jump < kLossTol, fmt("max err %.2e, jump at tau %.2e", worst, jump)};
}

std::vector<double> dense_solve(std::vector<std::vector<double>> a, std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        std::swap(a[col], a[piv]);
        std::swap(b[col], b[piv]);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a[r][col] / a[col][col];
            for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n);
    for (std::size_t i = n; i-- > 0;) {
        double s = b[i];
        for (std::size_t c = i + 1; c < n; ++c) s -= a[i][c] * x[c];
        x[i] = s / a[i][i];
    }
    return x;
}

Verdict gp_oracles() {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u;
    double worst_mean = 0.0, worst_var = 0.0;
    for (int inst = 0; inst < 100; ++inst) {
        const int j = 1 + inst % 20;
        Matrix x(j, 2);
        Vector y(j);
        for (int r = 0; r < j; ++r) {
            x.row(r) << u(rng), u(rng);
            y(r) = std::sin(4 * x(r, 0)) + x(r, 1) * x(r, 1) + 0.05 * u(rng);
        }
        const auto gp = gp_fit(x, y);
        const double ell = gp.lengthscale, s2 = gp.effective_noise();
        auto k = [&](const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
            return std::exp(-(p - q).squaredNorm() / (2 * ell * ell));
        };
        std::vector<std::vector<double>> kk(static_cast<std::size_t>(j), std::vector<double>(static_cast<std::size_t>(j)));
        std::vector<double> yt(static_cast<std::size_t>(j));
        for (int a = 0; a < j; ++a) {
            yt[static_cast<std::size_t>(a)] = (y(a) - gp.y_mean) / gp.y_scale;
            for (int b = 0; b < j; ++b)
                kk[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] =
                    k(x.row(a).transpose(), x.row(b).transpose()) + (a == b ? s2 : 0.0);
        }
        const auto alpha = dense_solve(kk, yt);
        for (int q = 0; q < 3; ++q) {
            const Eigen::VectorXd p = Eigen::Vector2d(u(rng), u(rng));
            std::vector<double> ks(static_cast<std::size_t>(j));
            double mean = 0.0;
            for (int a = 0; a < j; ++a) {
                ks[static_cast<std::size_t>(a)] = k(x.row(a).transpose(), p);
                mean += ks[static_cast<std::size_t>(a)] * alpha[static_cast<std::size_t>(a)];
            }
            const auto w = dense_solve(kk, ks);
            double reduce = 0.0;
            for (std::size_t a = 0; a < ks.size(); ++a) reduce += ks[a] * w[a];
            const double var = std::max(0.0, 1.0 - reduce) * gp.y_scale * gp.y_scale;
            const auto post = gp_posterior(gp, p);
            worst_mean = std::max(worst_mean, std::abs(post.mean - (gp.y_mean + gp.y_scale * mean)) / (1.0 + std::abs(post.mean)));
            worst_var = std::max(worst_var, std::abs(post.sigma * post.sigma - var) / (gp.y_scale * gp.y_scale));
        }
    }
    const double ei0 = expected_improvement(0.0, 1.0, 0.0);
    const double ei1 = expected_improvement(0.0, 1.0, 1.0);
    const bool ok = worst_mean < kGpTol && worst_var < kGpTol && std::abs(ei0 - 0.39894) < kEiTol &&
                    std::abs(ei1 - 1.0833) < kEiTol;
    std::ostringstream s;
    s << "mean err " << fmt("%.2e", worst_mean) << ", var err " << fmt("%.2e", worst_var) << ", EI "
      << fmt("%.5f / %.4f", ei0, ei1);
    return {ok, s.str()};
}

Verdict bo_quadratic() {
    auto objective = [](const HyperParams& t) {
        const double v = (t.gamma - 0.3) * (t.gamma - 0.3) + 0.1 * (t.eta - 5) * (t.eta - 5);
        return ObjectiveValue{v, 0.0, v};
    };
    int hits = 0;
    bool monotone = true;
    int max_iter = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        BoOptions o;
        o.max_steps = 15;
        o.seed = seed;
        const auto trace = bo_run(objective, Bounds{}, o);
        const auto best = trace.best_theta();
        hits += std::abs(best.gamma - 0.3) < 0.05 && best.eta == 5 && trace.iterations <= 15;
        max_iter = std::max(max_iter, trace.iterations);
        for (std::size_t i = 1; i < trace.steps.size(); ++i) monotone &= trace.steps[i].best <= trace.steps[i - 1].best;
    }
    return {hits == 10 && monotone,
            fmt("%.0f/10 seeds converged, max iterations %.0f, best-so-far monotone %.0f", hits, max_iter, monotone)};
}

Verdict survival_stats() {
    auto recs = [](const std::vector<double>& t, const std::vector<bool>& e, const std::string& pre) {
        std::vector<SurvivalRecord> out;
        for (std::size_t i = 0; i < t.size(); ++i) out.push_back({pre + std::to_string(i), t[i], e[i]});
        return out;
    };
    const auto all = km_fit(recs({1, 2, 3}, {true, true, true}, "a"));
    bool ok = all.survival_probs == std::vector<double>{2.0 / 3.0, 1.0 / 3.0, 0.0};
    const auto cens = km_fit(recs({1, 2, 3}, {true, false, true}, "b"));
    ok &= cens.event_times == std::vector<double>{1, 3} && cens.survival_probs == std::vector<double>{2.0 / 3.0, 0.0};
    const auto ties = km_fit(recs({1, 2, 2, 4}, {true, true, false, true}, "c"));
    ok &= ties.at(2.0) == 0.75 * (2.0 / 3.0);
    const auto g = recs({3, 5, 7, 9, 11}, {true, false, true, true, false}, "g");
    auto h = g;
    for (auto& r : h) r.patient_id += "x";
    const double p_same = logrank_test(g, h).p_value;
    ok &= p_same == 1.0;
    const double p_tab = chi_square_sf(3.841, 1.0);
    ok &= std::abs(p_tab - 0.050) < kChiTol;
    return {ok, fmt("KM cases exact %.0f, identical-group p %.3f, chi2(3.841,1) p %.5f", ok, p_same, p_tab)};
}

// Default config: 100 epochs, 20000 training pixels, K = 10, 10 k-means restarts.
Verdict variant_direction() {
    PipelineConfig cfg;
    const std::vector<int> etas{3, 4, 5, 6};
    std::vector<double> s_fae(4, 0), s_base(4, 0), ch_fae(4, 0), ch_base(4, 0);
    const int seeds = 5;
    for (int s = 0; s < seeds; ++s) {
        cfg.seed = static_cast<std::uint64_t>(s);
        cfg.variant_etas = etas;
        const auto rows = variant_table(planted(60, 7000 + s), 0.95, cfg, {VariantKind::baseline, VariantKind::fae});
        for (const auto& r : rows) {
            const auto k = static_cast<std::size_t>(std::find(etas.begin(), etas.end(), r.eta) - etas.begin());
            (r.variant == VariantKind::fae ? s_fae : s_base)[k] += r.stability_mean / seeds;
            (r.variant == VariantKind::fae ? ch_fae : ch_base)[k] += r.ch_mean / seeds;
        }
    }
    bool ok = true;
    std::ostringstream s;
    for (std::size_t k = 0; k < etas.size(); ++k) {
        ok &= s_fae[k] >= s_base[k] && ch_fae[k] >= ch_base[k];
        s << "eta " << etas[k] << " stab " << fmt("%.3f/%.3f", s_fae[k], s_base[k]) << " CH "
          << fmt("%.0f/%.0f", ch_fae[k], ch_base[k]) << (k + 1 < etas.size() ? "; " : " (fae/baseline)");
    }
    return {ok, s.str()};
}

Verdict end_to_end() {
    PipelineConfig cfg;
    cfg.fae.epochs = 30;
    cfg.max_train_pixels = 4000;
    cfg.kmeans.n_init = 3;
    cfg.bo.n_initial = 6;
    cfg.bo.max_steps = 4;
    cfg.compute_variants = false;
    int train = 0, test = 0;
    for (int s = 0; s < 10; ++s) {
        cfg.seed = static_cast<std::uint64_t>(s);
        const Cohort tr = planted(60, 5000 + s);
        const Cohort ho = planted(40, 9000 + s, "T");
        const auto r = run_experiment(tr, cfg, &ho);
        train += r.final_fit.grouping.logrank.p_value < 0.05;
        test += r.holdout->logrank.p_value < 0.05;
    }
    return {train >= 8 && test >= 7, fmt("train p<0.05 in %.0f/10, holdout p<0.05 in %.0f/10", train, test)};
}

Verdict loss_algebra() {
    PipelineConfig cfg;
    cfg.fae.epochs = 15;
    cfg.max_train_pixels = 2500;
    cfg.kmeans.n_init = 3;
    cfg.k_trials = 5;
    cfg.bo.n_initial = 4;
    cfg.bo.max_steps = 2;
    cfg.compute_variants = false;
    const Cohort c = planted(30, 4242);
    double worst = 0.0, overlap0 = 0.0, overlap1 = 0.0;
    int steps = 0;
    for (double alpha : {0.0, 0.5, 1.0}) {
        cfg.alpha = alpha;
        BoOptions bo = cfg.bo;
        bo.seed = cfg.bo_seed();
        const auto trace = bo_run(make_objective(c, cfg), cfg.bounds, bo);
        for (const auto& st : trace.steps) {
            if (st.failed) return {false, "evaluation failed: " + st.error};
            worst = std::max(worst, std::abs(st.value.L - (alpha * st.value.L_s + (1 - alpha) * st.value.L_p)));
            if (alpha == 0.0) overlap0 = std::max(overlap0, std::abs(st.value.L - st.value.L_p));
            if (alpha == 1.0) overlap1 = std::max(overlap1, std::abs(st.value.L - st.value.L_s));
            ++steps;
        }
    }
    return {worst <= kAlgebraTol && overlap0 == 0.0 && overlap1 == 0.0,
            fmt("%.0f steps, max residual %.2e, alpha=0 |L-L_p| %.2e", steps, worst, overlap0) +
                fmt(", alpha=1 |L-L_s| %.2e", overlap1)};
}

int sh(const std::string& args) {
    const std::string cmd = std::string(HABITAT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Default config end to end, once per thread count.
Verdict determinism() {
    const auto dir = fs::temp_directory_path() / "habitat_acceptance_determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    if (sh("synth --out " + (dir / "cohort").string() + " --patients 30 --dims 16x16 --seed 3") != 0)
        return {false, "synth failed"};
    std::vector<std::string> files{"trace.csv", "bundle/bundle.json", "bundle/transformer.txt"};
    const std::vector<int> threads{1, 1, 3};
    for (std::size_t i = 0; i < threads.size(); ++i) {
        const auto out = dir / ("run" + std::to_string(i));
        if (sh("run --cohort " + (dir / "cohort").string() + " --out " + out.string() + " --seed 11 --threads " +
               std::to_string(threads[i])) != 0)
            return {false, "run failed"};
    }
    int identical = 0, compared = 0;
    for (std::size_t i = 1; i < threads.size(); ++i) {
        for (const auto& f : files) {
            const auto a = slurp(dir / "run0" / f);
            identical += !a.empty() && a == slurp(dir / ("run" + std::to_string(i)) / f);
            ++compared;
        }
    }
    return {identical == compared, fmt("%.0f/%.0f files byte-identical across runs with threads 1,1,3", identical, compared)};
}

}  // namespace

int main() {
    report(1, "FAE analytic gradients vs central differences", gradients);
    report(2, "stability distance vs exhaustive permutation", stability_oracle);
    report(3, "significance loss formula and continuity", significance);
    report(4, "GP posterior vs dense solve, EI reference values", gp_oracles);
    report(5, "BO convergence on quadratic objective", bo_quadratic);
    report(6, "Kaplan-Meier, log-rank and chi-square", survival_stats);
    report(7, "FAE vs baseline stability and CH on planted cohort", variant_direction);
    report(8, "end-to-end train and holdout significance", end_to_end);
    report(9, "joint loss algebra on recorded traces", loss_algebra);
    report(10, "byte-identical runs independent of thread count", determinism);
    std::printf("%d of 10 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
