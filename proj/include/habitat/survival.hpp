#pragma once

#include "habitat/clustering.hpp"
#include "habitat/cohort.hpp"
#include "habitat/core.hpp"
#include "habitat/texture.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace habitat {

// ---------------------------------------------------------------------------
// Kaplan-Meier
// ---------------------------------------------------------------------------

struct KmCurve {
    std::vector<double> event_times;
    std::vector<double> survival_probs;
    std::vector<int> at_risk;
    int n_subjects = 0;

    /// First event time with S(t) <= 0.5, if the curve gets there.
    std::optional<double> median() const {
        for (std::size_t i = 0; i < event_times.size(); ++i) {
            if (survival_probs[i] <= 0.5) return event_times[i];
        }
        return std::nullopt;
    }

    /// Step-function value at time t.
    double at(double t) const {
        double s = 1.0;
        for (std::size_t i = 0; i < event_times.size() && event_times[i] <= t; ++i) s = survival_probs[i];
        return s;
    }
};

/// Product-limit estimator. Subjects censored at an event time are still at risk at that time.
inline KmCurve km_fit(const std::vector<SurvivalRecord>& records) {
    require(!records.empty(), ErrorCode::empty_input, "km_fit on empty input");
    std::vector<SurvivalRecord> sorted = records;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const SurvivalRecord& a, const SurvivalRecord& b) { return a.time < b.time; });
    KmCurve curve;
    curve.n_subjects = static_cast<int>(sorted.size());
    double s = 1.0;
    std::size_t i = 0;
    int at_risk = curve.n_subjects;
    while (i < sorted.size()) {
        const double t = sorted[i].time;
        int deaths = 0;
        int leaving = 0;
        while (i < sorted.size() && sorted[i].time == t) {
            deaths += sorted[i].event ? 1 : 0;
            ++leaving;
            ++i;
        }
        if (deaths > 0) {
            s *= static_cast<double>(at_risk - deaths) / static_cast<double>(at_risk);
            curve.event_times.push_back(t);
            curve.survival_probs.push_back(s);
            curve.at_risk.push_back(at_risk);
        }
        at_risk -= leaving;
    }
    return curve;
}

// ---------------------------------------------------------------------------
// Chi-square tail via the regularized incomplete gamma function
// ---------------------------------------------------------------------------

/// Regularized upper incomplete gamma Q(a, x): power series for x < a + 1, Lentz continued
/// fraction otherwise; both iterate to relative precision 1e-16.
inline double regularized_gamma_q(double a, double x) {
    require(a > 0.0 && x >= 0.0, ErrorCode::invalid_argument, "regularized_gamma_q needs a > 0, x >= 0");
    if (x == 0.0) return 1.0;
    const double log_prefactor = -x + a * std::log(x) - std::lgamma(a);
    constexpr double eps = 1e-16;
    if (x < a + 1.0) {
        double term = 1.0 / a;
        double sum = term;
        for (int n = 1; n < 10000; ++n) {
            term *= x / (a + n);
            sum += term;
            if (std::abs(term) < std::abs(sum) * eps) break;
        }
        return 1.0 - sum * std::exp(log_prefactor);
    }
    constexpr double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int n = 1; n < 10000; ++n) {
        const double an = -n * (n - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < eps) break;
    }
    return std::exp(log_prefactor) * h;
}

inline double chi_square_sf(double statistic, double dof) {
    return regularized_gamma_q(dof / 2.0, std::max(0.0, statistic) / 2.0);
}

// ---------------------------------------------------------------------------
// Log-rank
// ---------------------------------------------------------------------------

struct LogRankResult {
    double chi_square = 0.0;
    double p_value = 1.0;
    double observed_minus_expected = 0.0;  // for group a
    double variance = 0.0;
};

inline LogRankResult logrank_test(const std::vector<SurvivalRecord>& group_a, const std::vector<SurvivalRecord>& group_b) {
    require(!group_a.empty() && !group_b.empty(), ErrorCode::empty_input, "log-rank needs two nonempty groups");
    struct Tagged {
        double time;
        bool event;
        bool in_a;
    };
    std::vector<Tagged> all;
    for (const auto& r : group_a) all.push_back({r.time, r.event, true});
    for (const auto& r : group_b) all.push_back({r.time, r.event, false});
    std::stable_sort(all.begin(), all.end(), [](const Tagged& x, const Tagged& y) { return x.time < y.time; });

    double n_a = static_cast<double>(group_a.size());
    double n = static_cast<double>(all.size());
    double o_minus_e = 0.0;
    double variance = 0.0;
    std::size_t i = 0;
    while (i < all.size()) {
        const double t = all[i].time;
        double d = 0.0, d_a = 0.0, leave = 0.0, leave_a = 0.0;
        while (i < all.size() && all[i].time == t) {
            if (all[i].event) {
                d += 1.0;
                if (all[i].in_a) d_a += 1.0;
            }
            leave += 1.0;
            if (all[i].in_a) leave_a += 1.0;
            ++i;
        }
        if (d > 0.0) {
            o_minus_e += d_a - d * n_a / n;
            if (n > 1.0) {
                variance += d * (n_a / n) * ((n - n_a) / n) * (n - d) / (n - 1.0);
            }
        }
        n -= leave;
        n_a -= leave_a;
    }
    require(variance > 0.0, ErrorCode::degenerate, "degenerate log-rank: zero variance");
    LogRankResult out;
    out.observed_minus_expected = o_minus_e;
    out.variance = variance;
    out.chi_square = o_minus_e * o_minus_e / variance;
    out.p_value = chi_square_sf(out.chi_square, 1.0);
    return out;
}

// ---------------------------------------------------------------------------
// Significance loss
// ---------------------------------------------------------------------------

struct SignificanceLoss {
    double raw = 0.0;       // printed formula: positive reward for p <= tau
    double oriented = 0.0;  // -raw: increasing in p, minimized by small p
};

/// Piecewise log transform of a p-value against threshold tau.
///   p <= tau:  raw = ln(tau/p) / (1 - tau)
///   p >  tau:  raw = -log_tau(tau/p)
inline SignificanceLoss significance_loss(double p, double tau) {
    require(p > 0.0 && p < 1.0, ErrorCode::invalid_argument, "significance_loss needs 0 < p < 1");
    require(tau > 0.0 && tau < 1.0, ErrorCode::invalid_argument, "significance_loss needs 0 < tau < 1");
    SignificanceLoss out;
    if (p <= tau) {
        out.raw = std::log(tau / p) / (1.0 - tau);
    } else {
        out.raw = -std::log(tau / p) / std::log(tau);
    }
    out.oriented = -out.raw;
    return out;
}

// ---------------------------------------------------------------------------
// Risk grouping
// ---------------------------------------------------------------------------

enum class RiskGroup { high, low };

inline std::string to_string(RiskGroup g) { return g == RiskGroup::high ? "high" : "low"; }

struct FeatureStats {
    std::vector<double> mean;
    std::vector<double> stddev;  // zero-variance columns keep stddev 1 so they map to 0

    std::vector<double> apply(const std::vector<double>& v) const {
        std::vector<double> out(v.size());
        for (std::size_t j = 0; j < v.size(); ++j) out[j] = (v[j] - mean[j]) / stddev[j];
        return out;
    }

    friend bool operator==(const FeatureStats&, const FeatureStats&) = default;
};

inline FeatureStats feature_stats(const std::vector<std::vector<double>>& rows) {
    require(!rows.empty(), ErrorCode::empty_input, "feature_stats on empty input");
    const std::size_t d = rows.front().size();
    FeatureStats s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    for (const auto& r : rows) {
        require(r.size() == d, ErrorCode::invalid_argument, "feature rows differ in length");
        for (std::size_t j = 0; j < d; ++j) s.mean[j] += r[j];
    }
    for (auto& m : s.mean) m /= static_cast<double>(rows.size());
    for (const auto& r : rows)
        for (std::size_t j = 0; j < d; ++j) s.stddev[j] += (r[j] - s.mean[j]) * (r[j] - s.mean[j]);
    for (auto& v : s.stddev) {
        v = std::sqrt(v / static_cast<double>(rows.size()));
        if (!(v > 1e-12)) v = 1.0;
    }
    return s;
}

struct RiskGroupingResult {
    std::vector<RiskGroup> labels;
    LogRankResult logrank;
    FeatureStats stats;
    Matrix medoid_features;                // 2 x D, standardized
    std::vector<RiskGroup> medoid_groups;  // risk group of each medoid row
    std::vector<std::size_t> medoid_indices;
};

namespace detail {

inline std::vector<SurvivalRecord> select(const std::vector<SurvivalRecord>& records,
                                          const std::vector<RiskGroup>& labels, RiskGroup g) {
    std::vector<SurvivalRecord> out;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (labels[i] == g) out.push_back(records[i]);
    return out;
}

/// True when group a has the worse survival: lower KM median (a missing median counts as
/// longer), then lower mean observed time.
inline bool worse_survival(const std::vector<SurvivalRecord>& a, const std::vector<SurvivalRecord>& b) {
    const auto ma = km_fit(a).median();
    const auto mb = km_fit(b).median();
    const double inf = std::numeric_limits<double>::infinity();
    const double va = ma.value_or(inf);
    const double vb = mb.value_or(inf);
    if (va != vb) return va < vb;
    auto mean_time = [](const std::vector<SurvivalRecord>& g) {
        double s = 0.0;
        for (const auto& r : g) s += r.time;
        return s / static_cast<double>(g.size());
    };
    return mean_time(a) < mean_time(b);
}

}  // namespace detail

/// Assigns every standardized feature row to the nearest medoid row (ties to the first).
inline std::vector<int> nearest_medoid(const Matrix& standardized, const Matrix& medoids) {
    ClusterModel m;
    m.centroids = medoids;
    m.eta = static_cast<int>(medoids.rows());
    return kmeans_predict(m, standardized);
}

inline LogRankResult logrank_by_group(const std::vector<SurvivalRecord>& records, const std::vector<RiskGroup>& labels) {
    const auto high = detail::select(records, labels, RiskGroup::high);
    const auto low = detail::select(records, labels, RiskGroup::low);
    require(!high.empty() && !low.empty(), ErrorCode::degenerate, "risk grouping produced a single group");
    return logrank_test(high, low);
}

/// Standardize feature columns, split patients with 2-medoids PAM, name the group with the
/// lower median survival high-risk, and test the two groups with log-rank.
inline RiskGroupingResult risk_grouping(const std::vector<PatientFeatureVector>& features,
                                        const std::vector<SurvivalRecord>& records, std::uint64_t seed = 0) {
    require(features.size() >= 4, ErrorCode::invalid_argument, "risk grouping needs at least 4 patients");
    require(features.size() == records.size(), ErrorCode::invalid_argument,
            "risk grouping needs one survival record per feature vector");
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < features.size(); ++i) {
        require(features[i].patient_id == records[i].patient_id, ErrorCode::invalid_argument,
                "feature and survival records out of order at " + features[i].patient_id);
        rows.push_back(features[i].as_vector());
    }
    RiskGroupingResult out;
    out.stats = feature_stats(rows);
    Matrix x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto z = out.stats.apply(rows[i]);
        for (std::size_t j = 0; j < z.size(); ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = z[j];
    }
    const auto pam = kmedoids_fit(x, 2, seed);
    out.medoid_indices = pam.medoids;
    out.medoid_features.resize(2, x.cols());
    for (int s = 0; s < 2; ++s) out.medoid_features.row(s) = x.row(static_cast<Eigen::Index>(pam.medoids[s]));

    // Same assignment rule as holdout application, so reapplying reproduces these labels.
    const auto assigned = nearest_medoid(x, out.medoid_features);
    std::vector<SurvivalRecord> group0, group1;
    for (std::size_t i = 0; i < records.size(); ++i) (assigned[i] == 0 ? group0 : group1).push_back(records[i]);
    require(!group0.empty() && !group1.empty(), ErrorCode::degenerate, "risk grouping produced a single group");
    const bool first_high = detail::worse_survival(group0, group1);
    out.medoid_groups = {first_high ? RiskGroup::high : RiskGroup::low, first_high ? RiskGroup::low : RiskGroup::high};
    for (int l : assigned) out.labels.push_back(out.medoid_groups[static_cast<std::size_t>(l)]);
    out.logrank = logrank_by_group(records, out.labels);
    return out;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// `time,survival,at_risk,group` rows per group, each starting at (0, 1, n). The first line is a
/// comment carrying the log-rank statistics.
inline void write_km_csv(const std::vector<SurvivalRecord>& records, const std::vector<RiskGroup>& labels,
                         const LogRankResult& logrank, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
    out << "# chi_square=" << format_real(logrank.chi_square) << " p_value=" << format_real(logrank.p_value) << '\n';
    out << "time,survival,at_risk,group\n";
    for (const auto g : {RiskGroup::high, RiskGroup::low}) {
        const auto members = detail::select(records, labels, g);
        if (members.empty()) continue;
        const auto curve = km_fit(members);
        out << "0,1," << members.size() << ',' << to_string(g) << '\n';
        for (std::size_t i = 0; i < curve.event_times.size(); ++i) {
            out << format_real(curve.event_times[i]) << ',' << format_real(curve.survival_probs[i]) << ','
                << curve.at_risk[i] << ',' << to_string(g) << '\n';
        }
    }
}

}  // namespace habitat
