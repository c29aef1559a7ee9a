#pragma once

#include "habitat/pipeline.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace habitat::cli {

enum ExitCode : int { ok = 0, runtime_failure = 1, usage = 2 };

inline int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::invalid_argument:
        case ErrorCode::empty_input:
        case ErrorCode::malformed_manifest:
        case ErrorCode::missing_patient_file:
        case ErrorCode::modality_mismatch:
        case ErrorCode::parse_error:
            return usage;
        default:
            return runtime_failure;
    }
}

inline ImageDims parse_dims(const std::string& text) {
    int h = 0, w = 0;
    char x = 0, extra = 0;
    const int n = std::sscanf(text.c_str(), "%d%c%d%c", &h, &x, &w, &extra);
    require(n == 3 && (x == 'x' || x == 'X') && h > 0 && w > 0, ErrorCode::invalid_argument,
            "--dims must look like HxW, got '" + text + "'");
    return {h, w};
}

struct SynthFlags {
    int patients = 20;
    int regions = 4;
    int modalities = 3;
    std::string dims = "20x20";
    std::uint64_t seed = 0;
    std::string out;
};

struct RunFlags {
    std::string cohort;
    std::string config;
    std::string out;
    std::string test;
    std::optional<double> alpha;
    std::optional<double> tau;
    std::optional<int> k_trials;
    std::optional<std::string> variant;
    std::optional<std::uint64_t> seed;
    std::optional<int> max_steps;
};

struct EvalFlags {
    std::string bundle;
    std::string cohort;
    std::string out;
};

struct ReportFlags {
    std::vector<std::string> runs;
    std::string out;
};

inline int cmd_synth(const SynthFlags& f, std::ostream& out) {
    require(f.patients >= 1, ErrorCode::invalid_argument, "--patients must be at least 1");
    require(f.regions >= 2, ErrorCode::invalid_argument, "--regions must be at least 2");
    require(f.modalities >= 2, ErrorCode::invalid_argument, "--modalities must be at least 2");
    auto spec = SynthSpec::planted(f.patients, f.regions, f.seed, f.modalities);
    spec.image_dims = parse_dims(f.dims);
    spec.validate();
    const auto synth = generate_synthetic(spec);
    write_cohort(synth.cohort, f.out);
    out << "wrote " << synth.cohort.n_patients() << " patients, " << synth.cohort.n_pixels() << " pixels, "
        << synth.cohort.n_modalities() << " modalities to " << f.out << '\n';
    return ok;
}

inline int cmd_run(const RunFlags& f, std::ostream& out) {
    require(std::filesystem::exists(f.cohort), ErrorCode::invalid_argument, "cohort path does not exist: " + f.cohort);
    require(f.test.empty() || std::filesystem::exists(f.test), ErrorCode::invalid_argument,
            "test cohort path does not exist: " + f.test);
    PipelineConfig config;
    if (!f.config.empty()) {
        require(std::filesystem::exists(f.config), ErrorCode::invalid_argument, "config file does not exist: " + f.config);
        config = read_config(f.config);
    }
    if (f.alpha) config.alpha = *f.alpha;
    if (f.tau) config.tau = *f.tau;
    if (f.k_trials) config.k_trials = *f.k_trials;
    if (f.variant) config.variant = parse_variant(*f.variant);
    if (f.seed) config.seed = *f.seed;
    if (f.max_steps) config.bo.max_steps = *f.max_steps;
    config.validate();

    const Cohort cohort = read_cohort(f.cohort);
    std::optional<Cohort> holdout;
    if (!f.test.empty()) {
        holdout = read_cohort(f.test);
        require(holdout->modality_names == cohort.modality_names, ErrorCode::modality_mismatch,
                "test cohort modalities do not match the training cohort");
    }
    const auto result = run_experiment(cohort, config, holdout ? &*holdout : nullptr);
    write_run(result, cohort, config, f.out, holdout ? &*holdout : nullptr);
    const auto& best = result.trace.best_step();
    out << "best gamma=" << format_real(best.theta.gamma) << " eta=" << best.theta.eta
        << " L=" << format_real(best.value.L) << '\n';
    out << "train chi_square=" << format_real(result.final_fit.grouping.logrank.chi_square)
        << " p_value=" << format_real(result.final_fit.grouping.logrank.p_value) << '\n';
    if (result.holdout) {
        out << "test chi_square=" << format_real(result.holdout->logrank.chi_square)
            << " p_value=" << format_real(result.holdout->logrank.p_value) << '\n';
    }
    return ok;
}

inline int cmd_eval(const EvalFlags& f, std::ostream& out) {
    require(std::filesystem::exists(f.bundle), ErrorCode::invalid_argument, "bundle path does not exist: " + f.bundle);
    require(std::filesystem::exists(f.cohort), ErrorCode::invalid_argument, "cohort path does not exist: " + f.cohort);
    const auto bundle = read_bundle(f.bundle);
    const auto cohort = read_cohort(f.cohort);
    const auto applied = apply_bundle(bundle, cohort);
    std::filesystem::create_directories(f.out);
    write_km_csv(cohort.survival, applied.risk_labels, applied.logrank, std::filesystem::path(f.out) / "km_test.csv");
    write_risk_labels(cohort.survival, applied.risk_labels, std::filesystem::path(f.out) / "risk_test.csv");
    out << "chi_square=" << format_real(applied.logrank.chi_square) << " p_value=" << format_real(applied.logrank.p_value)
        << '\n';
    return ok;
}

inline int cmd_report(const ReportFlags& f, std::ostream& out) {
    std::vector<std::filesystem::path> runs(f.runs.begin(), f.runs.end());
    write_report(runs, f.out);
    out << "wrote bo_trace.svg and km_curves.svg to " << f.out << '\n';
    return ok;
}

/// Parses argv and dispatches; never throws.
inline int main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Adaptive habitat clustering with Bayesian-optimized hyper-parameters"};
    app.require_subcommand(1);
    std::size_t threads = 0;
    app.add_option("--threads", threads, "worker threads (default: HABITAT_THREADS or hardware)");

    SynthFlags synth;
    auto* sc = app.add_subcommand("synth", "write a planted synthetic cohort");
    sc->add_option("--patients", synth.patients, "number of patients");
    sc->add_option("--regions", synth.regions, "number of planted regions");
    sc->add_option("--modalities", synth.modalities, "number of modalities");
    sc->add_option("--dims", synth.dims, "image size HxW");
    sc->add_option("--seed", synth.seed, "generator seed");
    sc->add_option("--out", synth.out, "output directory")->required();

    RunFlags run;
    auto* rc = app.add_subcommand("run", "optimize hyper-parameters and fit the final models");
    rc->add_option("--cohort", run.cohort, "training cohort directory or manifest")->required();
    rc->add_option("--config", run.config, "pipeline config JSON");
    rc->add_option("--out", run.out, "run directory")->required();
    rc->add_option("--test", run.test, "holdout cohort to evaluate with the final bundle");
    rc->add_option("--alpha", run.alpha, "joint loss weight on stability");
    rc->add_option("--tau", run.tau, "significance threshold");
    rc->add_option("--k-trials", run.k_trials, "stability trials per evaluation");
    rc->add_option("--variant", run.variant, "baseline | standard_ae | ensemble_ae | fae");
    rc->add_option("--seed", run.seed, "master seed");
    rc->add_option("--max-steps", run.max_steps, "BO iterations after the initial design");
    rc->add_option("--threads", threads, "worker threads");

    EvalFlags eval;
    auto* ec = app.add_subcommand("eval", "apply a stored bundle to a holdout cohort");
    ec->add_option("--bundle", eval.bundle, "bundle directory")->required();
    ec->add_option("--cohort", eval.cohort, "holdout cohort directory or manifest")->required();
    ec->add_option("--out", eval.out, "output directory")->required();
    ec->add_option("--threads", threads, "worker threads");

    ReportFlags report;
    auto* pc = app.add_subcommand("report", "render SVG plots from run directories");
    pc->add_option("--run", report.runs, "run directory (repeatable)")->required();
    pc->add_option("--out", report.out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        app.exit(e, out, err);
        return ok;
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return usage;
    }

    try {
        if (threads > 0) set_thread_count(threads);
        if (sc->parsed()) return cmd_synth(synth, out);
        if (rc->parsed()) return cmd_run(run, out);
        if (ec->parsed()) return cmd_eval(eval, out);
        if (pc->parsed()) return cmd_report(report, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return runtime_failure;
    }
    return usage;
}

}  // namespace habitat::cli
