#pragma once

#include "habitat/bayesopt.hpp"
#include "habitat/clustering.hpp"
#include "habitat/cohort.hpp"
#include "habitat/core.hpp"
#include "habitat/fae.hpp"
#include "habitat/report.hpp"
#include "habitat/survival.hpp"
#include "habitat/texture.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace habitat {

struct PipelineConfig {
    double alpha = 0.5;
    double tau = 0.05;
    int k_trials = 10;
    VariantKind variant = VariantKind::fae;
    FaeConfig fae;  // n_modalities and seed are taken from the cohort and master seed
    KMeansOptions kmeans;
    double split_fraction = 57.0 / 82.0;
    Bounds bounds;
    BoOptions bo;  // bo.seed is derived from the master seed
    std::uint64_t seed = 0;
    bool retrain_per_split = false;
    int max_train_pixels = 20000;  // 0 trains on every pixel
    std::vector<int> variant_etas{3, 4, 5, 6};
    bool compute_variants = true;

    void validate() const {
        require(alpha >= 0.0 && alpha <= 1.0, ErrorCode::invalid_argument, "alpha must lie in [0,1]");
        require(tau > 0.0 && tau < 1.0, ErrorCode::invalid_argument, "tau must lie in (0,1)");
        require(k_trials >= 1, ErrorCode::invalid_argument, "k_trials must be at least 1");
        require(split_fraction > 0.0 && split_fraction < 1.0, ErrorCode::invalid_argument,
                "split_fraction must lie in (0,1)");
        require(kmeans.n_init >= 1 && kmeans.max_iter >= 1, ErrorCode::invalid_argument, "invalid k-means options");
        require(max_train_pixels >= 0, ErrorCode::invalid_argument, "max_train_pixels must be >= 0");
        require(bo.n_initial >= 2 && bo.max_steps >= 0 && bo.patience >= 1 && bo.n_candidates >= 1,
                ErrorCode::invalid_argument, "invalid BO settings");
        for (int eta : variant_etas) require(eta >= 2, ErrorCode::invalid_argument, "variant_etas must be >= 2");
        bounds.validate();
        auto f = fae;
        f.n_modalities = std::max(2, f.n_modalities);
        f.latent_dim = std::min(f.latent_dim, f.n_modalities);
        f.validate();
    }

    std::uint64_t fae_seed() const { return derive_seed(seed, 1); }
    std::uint64_t stability_seed() const { return derive_seed(seed, 2); }
    std::uint64_t cluster_seed() const { return derive_seed(seed, 3); }
    std::uint64_t medoid_seed() const { return derive_seed(seed, 4); }
    std::uint64_t bo_seed() const { return derive_seed(seed, 5); }
    std::uint64_t subsample_seed() const { return derive_seed(seed, 6); }
};

// ---------------------------------------------------------------------------
// Config JSON
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json config_to_json(const PipelineConfig& c) {
    nlohmann::ordered_json j;
    j["alpha"] = c.alpha;
    j["tau"] = c.tau;
    j["k_trials"] = c.k_trials;
    j["variant"] = to_string(c.variant);
    j["fae"] = {{"hidden_width", c.fae.hidden_width},   {"latent_dim", c.fae.latent_dim},
                {"learning_rate", c.fae.learning_rate}, {"beta1", c.fae.beta1},
                {"beta2", c.fae.beta2},                 {"adam_epsilon", c.fae.adam_epsilon},
                {"epochs", c.fae.epochs},               {"batch_size", c.fae.batch_size}};
    j["kmeans"] = {{"n_init", c.kmeans.n_init}, {"max_iter", c.kmeans.max_iter}};
    j["split_fraction"] = c.split_fraction;
    j["bounds"] = {{"gamma_lo", c.bounds.gamma_lo},
                   {"gamma_hi", c.bounds.gamma_hi},
                   {"eta_lo", c.bounds.eta_lo},
                   {"eta_hi", c.bounds.eta_hi}};
    j["bo"] = {{"n_initial", c.bo.n_initial}, {"max_steps", c.bo.max_steps},       {"epsilon", c.bo.epsilon},
               {"patience", c.bo.patience},   {"n_candidates", c.bo.n_candidates}, {"penalty", c.bo.penalty}};
    j["seed"] = c.seed;
    j["retrain_per_split"] = c.retrain_per_split;
    j["max_train_pixels"] = c.max_train_pixels;
    j["variant_etas"] = c.variant_etas;
    j["compute_variants"] = c.compute_variants;
    return j;
}

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out, std::set<std::string>& seen) {
    seen.insert(key);
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& seen, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        require(seen.count(it.key()) > 0, ErrorCode::invalid_argument, "unknown config key '" + where + it.key() + "'");
    }
}

}  // namespace detail

/// Missing keys keep their defaults; unknown keys are rejected.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
    PipelineConfig c;
    try {
        require(j.is_object(), ErrorCode::invalid_argument, "config must be a JSON object");
        std::set<std::string> seen;
        detail::read_field(j, "alpha", c.alpha, seen);
        detail::read_field(j, "tau", c.tau, seen);
        detail::read_field(j, "k_trials", c.k_trials, seen);
        std::string variant = to_string(c.variant);
        detail::read_field(j, "variant", variant, seen);
        c.variant = parse_variant(variant);
        seen.insert("fae");
        if (j.contains("fae")) {
            const auto& f = j.at("fae");
            std::set<std::string> s;
            detail::read_field(f, "hidden_width", c.fae.hidden_width, s);
            detail::read_field(f, "latent_dim", c.fae.latent_dim, s);
            detail::read_field(f, "learning_rate", c.fae.learning_rate, s);
            detail::read_field(f, "beta1", c.fae.beta1, s);
            detail::read_field(f, "beta2", c.fae.beta2, s);
            detail::read_field(f, "adam_epsilon", c.fae.adam_epsilon, s);
            detail::read_field(f, "epochs", c.fae.epochs, s);
            detail::read_field(f, "batch_size", c.fae.batch_size, s);
            detail::reject_unknown(f, s, "fae.");
        }
        seen.insert("kmeans");
        if (j.contains("kmeans")) {
            const auto& k = j.at("kmeans");
            std::set<std::string> s;
            detail::read_field(k, "n_init", c.kmeans.n_init, s);
            detail::read_field(k, "max_iter", c.kmeans.max_iter, s);
            detail::reject_unknown(k, s, "kmeans.");
        }
        detail::read_field(j, "split_fraction", c.split_fraction, seen);
        seen.insert("bounds");
        if (j.contains("bounds")) {
            const auto& b = j.at("bounds");
            std::set<std::string> s;
            detail::read_field(b, "gamma_lo", c.bounds.gamma_lo, s);
            detail::read_field(b, "gamma_hi", c.bounds.gamma_hi, s);
            detail::read_field(b, "eta_lo", c.bounds.eta_lo, s);
            detail::read_field(b, "eta_hi", c.bounds.eta_hi, s);
            detail::reject_unknown(b, s, "bounds.");
        }
        seen.insert("bo");
        if (j.contains("bo")) {
            const auto& b = j.at("bo");
            std::set<std::string> s;
            detail::read_field(b, "n_initial", c.bo.n_initial, s);
            detail::read_field(b, "max_steps", c.bo.max_steps, s);
            detail::read_field(b, "epsilon", c.bo.epsilon, s);
            detail::read_field(b, "patience", c.bo.patience, s);
            detail::read_field(b, "n_candidates", c.bo.n_candidates, s);
            detail::read_field(b, "penalty", c.bo.penalty, s);
            detail::reject_unknown(b, s, "bo.");
        }
        detail::read_field(j, "seed", c.seed, seen);
        detail::read_field(j, "retrain_per_split", c.retrain_per_split, seen);
        detail::read_field(j, "max_train_pixels", c.max_train_pixels, seen);
        detail::read_field(j, "variant_etas", c.variant_etas, seen);
        detail::read_field(j, "compute_variants", c.compute_variants, seen);
        detail::reject_unknown(j, seen, "");
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::invalid_argument, std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline PipelineConfig read_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::parse_error, path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Per-theta evaluation
// ---------------------------------------------------------------------------

struct LossBreakdown {
    double L_s = 0.0;
    double L_p_raw = 0.0;
    double L_p_oriented = 0.0;
    double p_value = 1.0;
    double chi_square = 0.0;
    double L = 0.0;

    friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

/// p is kept inside the open unit interval so the log transform stays finite.
inline LossBreakdown combine_losses(double stability, double p_value, double chi_square, double alpha, double tau) {
    LossBreakdown out;
    out.L_s = stability;
    out.p_value = p_value;
    out.chi_square = chi_square;
    const double p = std::clamp(p_value, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
    const auto sig = significance_loss(p, tau);
    out.L_p_raw = sig.raw;
    out.L_p_oriented = sig.oriented;
    out.L = alpha * out.L_s + (1.0 - alpha) * out.L_p_oriented;
    return out;
}

/// Everything produced while scoring one theta; the final bundle is cut from it.
struct ThetaEvaluation {
    HyperParams theta;
    ClipBounds clip;
    ModalityStats stats;
    FeatureTransformer transformer;
    StabilityResult stability;
    ClusterModel cluster;
    std::vector<LabelMap> label_maps;
    std::vector<PatientFeatureVector> features;
    RiskGroupingResult grouping;
    LossBreakdown loss;
};

namespace detail {

template <typename Fn>
auto stage(const char* name, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const Error& e) {
        throw Error(e.code(), std::string("stage ") + name + ": " + e.what());
    } catch (const std::exception& e) {
        throw Error(ErrorCode::invalid_argument, std::string("stage ") + name + ": " + e.what());
    }
}

/// Seeded row sample without replacement, kept in original order.
inline Matrix subsample_rows(const Matrix& pixels, int max_rows, std::uint64_t seed) {
    if (max_rows <= 0 || pixels.rows() <= max_rows) return pixels;
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(pixels.rows()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(max_rows));
    std::sort(idx.begin(), idx.end());
    Matrix out(max_rows, pixels.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = pixels.row(idx[k]);
    return out;
}

inline FeatureTransformer train_transformer(VariantKind kind, const PipelineConfig& config, int n_modalities,
                                            const Matrix& pixels, std::uint64_t seed) {
    FaeConfig fc = config.fae;
    fc.n_modalities = n_modalities;
    fc.seed = seed;
    auto model = build_variant(kind, fc);
    model.train(subsample_rows(pixels, config.max_train_pixels, derive_seed(seed, 7)));
    return model;
}

/// Latent pixels per patient id.
inline std::unordered_map<std::string, Matrix> encode_patients(const FeatureTransformer& model, const Cohort& cohort) {
    const Matrix latent = model.encode(pool_pixels(cohort));
    std::unordered_map<std::string, Matrix> out;
    Eigen::Index row = 0;
    for (const auto& scan : cohort.scans) {
        out[scan.patient_id] = latent.middleRows(row, scan.pixel_values.rows());
        row += scan.pixel_values.rows();
    }
    return out;
}

inline Matrix gather(const std::unordered_map<std::string, Matrix>& latents, const Cohort& part) {
    Eigen::Index rows = 0, cols = 0;
    for (const auto& scan : part.scans) {
        const auto& m = latents.at(scan.patient_id);
        rows += m.rows();
        cols = m.cols();
    }
    Matrix out(rows, cols);
    Eigen::Index row = 0;
    for (const auto& scan : part.scans) {
        const auto& m = latents.at(scan.patient_id);
        out.middleRows(row, m.rows()) = m;
        row += m.rows();
    }
    return out;
}

inline LatentProvider make_provider(VariantKind kind, const PipelineConfig& config, const FeatureTransformer& shared,
                                    const Cohort& prepared) {
    if (!config.retrain_per_split) {
        auto latents = std::make_shared<std::unordered_map<std::string, Matrix>>(encode_patients(shared, prepared));
        return [latents](const Cohort& train, const Cohort& val, std::uint64_t) {
            return LatentPair{gather(*latents, train), gather(*latents, val)};
        };
    }
    const int m = static_cast<int>(prepared.n_modalities());
    return [kind, config, m](const Cohort& train, const Cohort& val, std::uint64_t trial_seed) {
        const auto model = train_transformer(kind, config, m, pool_pixels(train), derive_seed(trial_seed, 3));
        return LatentPair{model.encode(pool_pixels(train)), model.encode(pool_pixels(val))};
    };
}

inline std::vector<LabelMap> label_patients(const FeatureTransformer& model, const ClusterModel& cluster,
                                            const Cohort& prepared) {
    std::vector<LabelMap> maps(prepared.scans.size());
    parallel_for(prepared.scans.size(), [&](std::size_t i) {
        const auto& scan = prepared.scans[i];
        maps[i].patient_id = scan.patient_id;
        maps[i].coords = scan.pixel_coords;
        maps[i].eta = cluster.eta;
        maps[i].labels = kmeans_predict(cluster, model.encode(scan.pixel_values));
    });
    return maps;
}

inline std::vector<PatientFeatureVector> patient_features(const std::vector<LabelMap>& maps, const Cohort& cohort,
                                                          int eta) {
    std::vector<PatientFeatureVector> out(maps.size());
    parallel_for(maps.size(), [&](std::size_t i) {
        out[i] = extract_features(maps[i], cohort.scans[i].image_dims, eta);
    });
    return out;
}

}  // namespace detail

/// Full per-theta workflow: filter, standardize, train the transformer, K-trial stability, final
/// clustering, texture features, risk grouping, and the joint loss. The input cohort is not modified.
inline ThetaEvaluation evaluate_theta_full(const Cohort& cohort, const HyperParams& theta,
                                           const PipelineConfig& config) {
    config.validate();
    require(config.bounds.contains(theta), ErrorCode::invalid_argument, "theta outside bounds");
    cohort.validate();
    ThetaEvaluation ev;
    ev.theta = theta;
    const Cohort filtered = detail::stage("quantile_filter", [&] {
        ev.clip = quantile_bounds(cohort, theta.gamma);
        return apply_clip(cohort, ev.clip);
    });
    const Cohort prepared = detail::stage("standardize", [&] {
        ev.stats = modality_stats(filtered);
        return apply_standardization(filtered, ev.stats);
    });
    const int m = static_cast<int>(cohort.n_modalities());
    ev.transformer = detail::stage("train_transformer", [&] {
        return detail::train_transformer(config.variant, config, m, pool_pixels(prepared), config.fae_seed());
    });
    ev.stability = detail::stage("stability", [&] {
        const auto provider = detail::make_provider(config.variant, config, ev.transformer, prepared);
        return stability_loss(provider, prepared, theta.eta, config.k_trials, config.split_fraction,
                              config.stability_seed(), config.kmeans);
    });
    ev.cluster = detail::stage("final_clustering", [&] {
        return kmeans_fit(ev.transformer.encode(pool_pixels(prepared)), theta.eta, config.cluster_seed(),
                          config.kmeans);
    });
    ev.label_maps = detail::stage("label_maps", [&] { return detail::label_patients(ev.transformer, ev.cluster, prepared); });
    ev.features = detail::stage("features", [&] { return detail::patient_features(ev.label_maps, prepared, theta.eta); });
    ev.grouping = detail::stage("risk_grouping", [&] {
        return risk_grouping(ev.features, cohort.survival, config.medoid_seed());
    });
    ev.loss = detail::stage("joint_loss", [&] {
        return combine_losses(ev.stability.loss, ev.grouping.logrank.p_value, ev.grouping.logrank.chi_square,
                              config.alpha, config.tau);
    });
    return ev;
}

inline LossBreakdown evaluate_theta(const Cohort& cohort, const HyperParams& theta, const PipelineConfig& config) {
    return evaluate_theta_full(cohort, theta, config).loss;
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

struct ModelBundle {
    HyperParams theta;
    std::vector<std::string> modality_names;
    ClipBounds clip;
    ModalityStats stats;
    FeatureTransformer transformer;
    ClusterModel cluster;
    FeatureStats feature_stats;
    Matrix medoid_features;  // 2 x D, standardized
    std::vector<RiskGroup> medoid_groups;

    void validate() const {
        const auto m = modality_names.size();
        require(clip.lower.size() == m && clip.upper.size() == m && stats.mean.size() == m &&
                    stats.stddev.size() == m && static_cast<std::size_t>(transformer.n_modalities()) == m,
                ErrorCode::invalid_argument, "bundle modality dimensions disagree");
        require(cluster.eta == theta.eta && cluster.centroids.rows() == theta.eta &&
                    cluster.centroids.cols() == transformer.latent_dim(),
                ErrorCode::invalid_argument, "bundle cluster model disagrees with theta or latent size");
        const auto d = static_cast<Eigen::Index>(5 + theta.eta);
        require(medoid_features.rows() == 2 && medoid_features.cols() == d && medoid_groups.size() == 2 &&
                    feature_stats.mean.size() == static_cast<std::size_t>(d) &&
                    feature_stats.stddev.size() == static_cast<std::size_t>(d),
                ErrorCode::invalid_argument, "bundle risk model dimensions disagree");
    }

    friend bool operator==(const ModelBundle& a, const ModelBundle& b) {
        return a.theta == b.theta && a.modality_names == b.modality_names && a.clip == b.clip &&
               a.stats.mean == b.stats.mean && a.stats.stddev == b.stats.stddev && a.transformer == b.transformer &&
               a.cluster == b.cluster && a.feature_stats == b.feature_stats &&
               a.medoid_features.rows() == b.medoid_features.rows() &&
               a.medoid_features.cols() == b.medoid_features.cols() && a.medoid_features == b.medoid_features &&
               a.medoid_groups == b.medoid_groups;
    }
};

inline ModelBundle make_bundle(const ThetaEvaluation& ev, const Cohort& cohort) {
    ModelBundle b;
    b.theta = ev.theta;
    b.modality_names = cohort.modality_names;
    b.clip = ev.clip;
    b.stats = ev.stats;
    b.transformer = ev.transformer;
    b.cluster = ev.cluster;
    b.feature_stats = ev.grouping.stats;
    b.medoid_features = ev.grouping.medoid_features;
    b.medoid_groups = ev.grouping.medoid_groups;
    b.validate();
    return b;
}

inline ModelBundle fit_final(const Cohort& cohort, const HyperParams& theta, const PipelineConfig& config) {
    return make_bundle(evaluate_theta_full(cohort, theta, config), cohort);
}

namespace detail {

inline nlohmann::ordered_json matrix_json(const Matrix& m) {
    auto rows = nlohmann::ordered_json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        auto row = nlohmann::ordered_json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(row);
    }
    return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j, Eigen::Index cols) {
    Matrix m(static_cast<Eigen::Index>(j.size()), cols);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const auto& row = j.at(static_cast<std::size_t>(r));
        require(static_cast<Eigen::Index>(row.size()) == cols, ErrorCode::malformed_manifest, "ragged matrix in bundle");
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
    }
    return m;
}

}  // namespace detail

/// bundle.json plus transformer.txt. JSON numbers are written in shortest round-trip form.
inline void write_bundle(const ModelBundle& b, const std::filesystem::path& dir) {
    b.validate();
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json j;
    j["format"] = "habitat-bundle";
    j["version"] = 1;
    j["theta"] = {{"gamma", b.theta.gamma}, {"eta", b.theta.eta}};
    j["variant"] = to_string(b.transformer.kind());
    j["modality_names"] = b.modality_names;
    j["clip"] = {{"lower", b.clip.lower}, {"upper", b.clip.upper}};
    j["standardization"] = {{"mean", b.stats.mean}, {"stddev", b.stats.stddev}};
    j["cluster"] = {{"eta", b.cluster.eta}, {"inertia", b.cluster.inertia}, {"centroids", detail::matrix_json(b.cluster.centroids)}};
    j["feature_stats"] = {{"mean", b.feature_stats.mean}, {"stddev", b.feature_stats.stddev}};
    j["medoid_features"] = detail::matrix_json(b.medoid_features);
    auto groups = nlohmann::ordered_json::array();
    for (auto g : b.medoid_groups) groups.push_back(to_string(g));
    j["medoid_groups"] = groups;
    j["transformer_file"] = "transformer.txt";
    write_text(dir / "bundle.json", j.dump(2) + "\n");
    b.transformer.save(dir / "transformer.txt");
}

inline ModelBundle read_bundle(const std::filesystem::path& dir) {
    const auto path = dir / "bundle.json";
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path.string());
    ModelBundle b;
    try {
        const auto j = nlohmann::json::parse(in);
        require(j.at("format").get<std::string>() == "habitat-bundle" && j.at("version").get<int>() == 1,
                ErrorCode::malformed_manifest, path.string() + ": not a version 1 bundle");
        b.theta = {j.at("theta").at("gamma").get<double>(), j.at("theta").at("eta").get<int>()};
        b.modality_names = j.at("modality_names").get<std::vector<std::string>>();
        b.clip = {j.at("clip").at("lower").get<std::vector<double>>(), j.at("clip").at("upper").get<std::vector<double>>()};
        b.stats.mean = j.at("standardization").at("mean").get<std::vector<double>>();
        b.stats.stddev = j.at("standardization").at("stddev").get<std::vector<double>>();
        b.transformer = FeatureTransformer::load(dir / j.at("transformer_file").get<std::string>());
        b.cluster.eta = j.at("cluster").at("eta").get<int>();
        b.cluster.inertia = j.at("cluster").at("inertia").get<double>();
        b.cluster.centroids = detail::matrix_from_json(j.at("cluster").at("centroids"), b.transformer.latent_dim());
        b.feature_stats.mean = j.at("feature_stats").at("mean").get<std::vector<double>>();
        b.feature_stats.stddev = j.at("feature_stats").at("stddev").get<std::vector<double>>();
        b.medoid_features =
            detail::matrix_from_json(j.at("medoid_features"), static_cast<Eigen::Index>(b.feature_stats.mean.size()));
        for (const auto& g : j.at("medoid_groups")) {
            const auto s = g.get<std::string>();
            require(s == "high" || s == "low", ErrorCode::malformed_manifest, "unknown risk group '" + s + "'");
            b.medoid_groups.push_back(s == "high" ? RiskGroup::high : RiskGroup::low);
        }
        require(to_string(b.transformer.kind()) == j.at("variant").get<std::string>(), ErrorCode::malformed_manifest,
                "bundle variant disagrees with transformer file");
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::malformed_manifest, path.string() + ": " + e.what());
    }
    b.validate();
    return b;
}

// ---------------------------------------------------------------------------
// Holdout application
// ---------------------------------------------------------------------------

struct BundleApplication {
    std::vector<LabelMap> label_maps;
    std::vector<PatientFeatureVector> features;
    std::vector<RiskGroup> risk_labels;
    LogRankResult logrank;
};

/// Stored statistics and models only; nothing is refit on the holdout.
inline BundleApplication apply_bundle(const ModelBundle& bundle, const Cohort& holdout) {
    bundle.validate();
    holdout.validate();
    require(holdout.modality_names == bundle.modality_names, ErrorCode::modality_mismatch,
            "holdout modalities do not match the bundle");
    const Cohort prepared = apply_standardization(apply_clip(holdout, bundle.clip), bundle.stats);
    BundleApplication out;
    out.label_maps = detail::label_patients(bundle.transformer, bundle.cluster, prepared);
    out.features = detail::patient_features(out.label_maps, prepared, bundle.theta.eta);
    Matrix x(static_cast<Eigen::Index>(out.features.size()), bundle.medoid_features.cols());
    for (std::size_t i = 0; i < out.features.size(); ++i) {
        const auto z = bundle.feature_stats.apply(out.features[i].as_vector());
        for (std::size_t j = 0; j < z.size(); ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = z[j];
    }
    for (int m : nearest_medoid(x, bundle.medoid_features)) {
        out.risk_labels.push_back(bundle.medoid_groups[static_cast<std::size_t>(m)]);
    }
    out.logrank = logrank_by_group(holdout.survival, out.risk_labels);
    return out;
}

inline void write_risk_labels(const std::vector<SurvivalRecord>& records, const std::vector<RiskGroup>& labels,
                              const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
    out << "patient_id,group\n";
    for (std::size_t i = 0; i < labels.size(); ++i) out << records[i].patient_id << ',' << to_string(labels[i]) << '\n';
}

// ---------------------------------------------------------------------------
// Variant comparison
// ---------------------------------------------------------------------------

struct VariantRow {
    VariantKind variant = VariantKind::fae;
    int eta = 0;
    double stability_mean = 0.0;
    double stability_sd = 0.0;
    double ch_mean = 0.0;
    double ch_sd = 0.0;
};

namespace detail {

/// Mean and sample standard deviation over finite values.
inline std::pair<double, double> mean_sd(const std::vector<double>& values) {
    std::vector<double> v;
    for (double x : values)
        if (std::isfinite(x)) v.push_back(x);
    if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace detail

/// Stability score and CH per variant and eta at a fixed gamma, K trials each.
inline std::vector<VariantRow> variant_table(const Cohort& cohort, double gamma, const PipelineConfig& config,
                                             const std::vector<VariantKind>& variants = {std::begin(all_variants),
                                                                                         std::end(all_variants)}) {
    config.validate();
    const Cohort prepared = standardize(quantile_filter(cohort, gamma)).first;
    const int m = static_cast<int>(cohort.n_modalities());
    std::vector<VariantRow> rows;
    for (auto kind : variants) {
        const auto model = detail::train_transformer(kind, config, m, pool_pixels(prepared), config.fae_seed());
        const auto provider = detail::make_provider(kind, config, model, prepared);
        for (int eta : config.variant_etas) {
            const auto result = stability_loss(provider, prepared, eta, config.k_trials, config.split_fraction,
                                               config.stability_seed(), config.kmeans);
            std::vector<double> scores, ch;
            for (const auto& t : result.trials) {
                scores.push_back(stability_score(t.distance));
                ch.push_back(t.ch_train);
            }
            VariantRow row;
            row.variant = kind;
            row.eta = eta;
            std::tie(row.stability_mean, row.stability_sd) = detail::mean_sd(scores);
            std::tie(row.ch_mean, row.ch_sd) = detail::mean_sd(ch);
            rows.push_back(row);
        }
    }
    return rows;
}

inline void write_variants_csv(const std::vector<VariantRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
    out << "variant,eta,stability_mean,stability_sd,ch_mean,ch_sd\n";
    for (const auto& r : rows) {
        out << to_string(r.variant) << ',' << r.eta << ',' << format_real(r.stability_mean) << ','
            << format_real(r.stability_sd) << ',' << format_real(r.ch_mean) << ',' << format_real(r.ch_sd) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

struct ExperimentResult {
    BoTrace trace;
    ModelBundle bundle;
    ThetaEvaluation final_fit;
    std::vector<VariantRow> variants;
    std::optional<BundleApplication> holdout;
};

inline Objective make_objective(const Cohort& cohort, const PipelineConfig& config) {
    return [&cohort, config](const HyperParams& theta) {
        const auto loss = evaluate_theta(cohort, theta, config);
        return ObjectiveValue{loss.L_s, loss.L_p_oriented, loss.L, loss.L_p_raw, loss.p_value};
    };
}

/// BO over theta, final fit at the best theta, optional holdout application, variant table.
inline ExperimentResult run_experiment(const Cohort& cohort, const PipelineConfig& config,
                                       const Cohort* holdout = nullptr) {
    config.validate();
    cohort.validate();
    ExperimentResult out;
    BoOptions bo = config.bo;
    bo.seed = config.bo_seed();
    out.trace = bo_run(make_objective(cohort, config), config.bounds, bo);
    const auto theta = out.trace.best_theta();
    out.final_fit = evaluate_theta_full(cohort, theta, config);
    out.bundle = make_bundle(out.final_fit, cohort);
    if (holdout != nullptr) out.holdout = apply_bundle(out.bundle, *holdout);
    if (config.compute_variants) out.variants = variant_table(cohort, theta.gamma, config);
    return out;
}

/// Run directory: config.json, trace.csv, trace_detail.csv, bundle/, km_train.csv, km_test.csv,
/// risk_train.csv, risk_test.csv, features.csv, labels/, labels_test/, variants.csv, report.svg.
inline void write_run(const ExperimentResult& result, const Cohort& cohort, const PipelineConfig& config,
                      const std::filesystem::path& dir, const Cohort* holdout = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_text(dir / "config.json", config_to_json(config).dump(2) + "\n");
    write_trace_csv(result.trace, dir / "trace.csv");
    write_trace_detail_csv(result.trace, dir / "trace_detail.csv");
    write_bundle(result.bundle, dir / "bundle");
    const auto& fit = result.final_fit;
    write_km_csv(cohort.survival, fit.grouping.labels, fit.grouping.logrank, dir / "km_train.csv");
    write_risk_labels(cohort.survival, fit.grouping.labels, dir / "risk_train.csv");
    write_feature_table(fit.features, fit.theta.eta, dir / "features.csv");
    fs::create_directories(dir / "labels");
    for (const auto& map : fit.label_maps) write_label_map(map, dir / "labels" / (detail::safe_file_stem(map.patient_id) + ".csv"));
    if (result.holdout && holdout != nullptr) {
        write_km_csv(holdout->survival, result.holdout->risk_labels, result.holdout->logrank, dir / "km_test.csv");
        write_risk_labels(holdout->survival, result.holdout->risk_labels, dir / "risk_test.csv");
        fs::create_directories(dir / "labels_test");
        for (const auto& map : result.holdout->label_maps)
            write_label_map(map, dir / "labels_test" / (detail::safe_file_stem(map.patient_id) + ".csv"));
    }
    write_variants_csv(result.variants, dir / "variants.csv");
    const auto artifacts = collect_run_artifacts({dir});
    write_text(dir / "report.svg", render_combined_svg(artifacts.traces, artifacts.km));
}

}  // namespace habitat
