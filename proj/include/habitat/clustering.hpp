#pragma once

#include "habitat/cohort.hpp"
#include "habitat/core.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace habitat {

struct ClusterModel {
    Matrix centroids;  // eta x d
    int eta = 0;
    double inertia = 0.0;

    int dim() const { return static_cast<int>(centroids.cols()); }

    friend bool operator==(const ClusterModel& a, const ClusterModel& b) {
        return a.eta == b.eta && a.inertia == b.inertia && a.centroids.rows() == b.centroids.rows() &&
               a.centroids.cols() == b.centroids.cols() && a.centroids == b.centroids;
    }
};

/// Per-pixel sub-region labels of one patient, aligned with its pixel coordinates.
struct LabelMap {
    std::string patient_id;
    std::vector<PixelCoord> coords;
    std::vector<int> labels;
    int eta = 0;

    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

struct KMeansOptions {
    int n_init = 10;
    int max_iter = 300;
};

namespace detail {

inline double squared_distance(const double* a, const double* b, Eigen::Index d) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
        const double t = a[j] - b[j];
        s += t * t;
    }
    return s;
}

/// Nearest centroid with ties to the lowest index; returns squared distance.
inline int nearest(const Matrix& centroids, const double* point, double& best_distance) {
    const Eigen::Index d = centroids.cols();
    int best = 0;
    best_distance = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
        const double dist = squared_distance(centroids.row(c).data(), point, d);
        if (dist < best_distance) {
            best_distance = dist;
            best = static_cast<int>(c);
        }
    }
    return best;
}

inline bool has_at_least_distinct(const Matrix& points, int needed) {
    std::set<std::vector<double>> seen;
    for (Eigen::Index r = 0; r < points.rows(); ++r) {
        seen.emplace(points.row(r).data(), points.row(r).data() + points.cols());
        if (static_cast<int>(seen.size()) >= needed) {
            return true;
        }
    }
    return false;
}

}  // namespace detail

inline std::vector<int> kmeans_predict(const ClusterModel& model, const Matrix& points) {
    require(points.cols() == model.centroids.cols(), ErrorCode::invalid_argument,
            "kmeans_predict: point dimension " + std::to_string(points.cols()) + " does not match model dimension " +
                std::to_string(model.centroids.cols()));
    std::vector<int> labels(static_cast<std::size_t>(points.rows()));
    double unused = 0.0;
    for (Eigen::Index r = 0; r < points.rows(); ++r) {
        labels[static_cast<std::size_t>(r)] = detail::nearest(model.centroids, points.row(r).data(), unused);
    }
    return labels;
}

struct LloydResult {
    Matrix centroids;
    std::vector<int> labels;
    double inertia = 0.0;
    std::vector<double> inertia_history;  // after every assignment step
    int iterations = 0;
};

/// Lloyd iterations from given centroids until the assignment stops changing or max_iter.
/// An emptied cluster is re-seeded at the point farthest from its current centroid.
inline LloydResult lloyd(const Matrix& points, Matrix centroids, int max_iter) {
    const Eigen::Index n = points.rows();
    const Eigen::Index d = points.cols();
    const auto eta = centroids.rows();
    LloydResult out;
    out.labels.assign(static_cast<std::size_t>(n), -1);
    std::vector<double> dist(static_cast<std::size_t>(n));
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(eta));

    auto assign = [&]() {
        bool changed = false;
        double inertia = 0.0;
        for (Eigen::Index r = 0; r < n; ++r) {
            const auto k = static_cast<std::size_t>(r);
            const int label = detail::nearest(centroids, points.row(r).data(), dist[k]);
            changed |= label != out.labels[k];
            out.labels[k] = label;
            inertia += dist[k];
        }
        out.inertia_history.push_back(inertia);
        return changed;
    };

    bool changed = assign();
    for (int iter = 0; iter < max_iter && changed; ++iter) {
        out.iterations = iter + 1;
        centroids.setZero();
        std::fill(counts.begin(), counts.end(), 0);
        for (Eigen::Index r = 0; r < n; ++r) {
            const auto c = out.labels[static_cast<std::size_t>(r)];
            centroids.row(c) += points.row(r);
            ++counts[static_cast<std::size_t>(c)];
        }
        for (Eigen::Index c = 0; c < eta; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                centroids.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
                continue;
            }
            Eigen::Index far = 0;
            for (Eigen::Index r = 1; r < n; ++r) {
                if (dist[static_cast<std::size_t>(r)] > dist[static_cast<std::size_t>(far)]) far = r;
            }
            centroids.row(c) = points.row(far);
            dist[static_cast<std::size_t>(far)] = 0.0;
        }
        changed = assign();
    }
    out.inertia = out.inertia_history.back();
    out.centroids = std::move(centroids);
    (void)d;
    return out;
}

/// k-means++ seeding.
inline Matrix kmeans_plus_plus(const Matrix& points, int eta, std::mt19937_64& rng) {
    const Eigen::Index n = points.rows();
    Matrix centroids(eta, points.cols());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto first = static_cast<Eigen::Index>(unit(rng) * static_cast<double>(n));
    first = std::min(first, n - 1);
    centroids.row(0) = points.row(first);
    std::vector<double> d2(static_cast<std::size_t>(n));
    for (Eigen::Index r = 0; r < n; ++r) {
        d2[static_cast<std::size_t>(r)] =
            detail::squared_distance(points.row(r).data(), centroids.row(0).data(), points.cols());
    }
    for (int c = 1; c < eta; ++c) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        require(total > 0.0, ErrorCode::degenerate, "k-means++: fewer distinct points than clusters");
        const double target = unit(rng) * total;
        double running = 0.0;
        Eigen::Index pick = -1;
        for (Eigen::Index r = 0; r < n; ++r) {
            running += d2[static_cast<std::size_t>(r)];
            if (running > target && d2[static_cast<std::size_t>(r)] > 0.0) {
                pick = r;
                break;
            }
        }
        if (pick < 0) {
            for (Eigen::Index r = n - 1; r >= 0; --r) {
                if (d2[static_cast<std::size_t>(r)] > 0.0) {
                    pick = r;
                    break;
                }
            }
        }
        centroids.row(c) = points.row(pick);
        for (Eigen::Index r = 0; r < n; ++r) {
            auto& v = d2[static_cast<std::size_t>(r)];
            v = std::min(v, detail::squared_distance(points.row(r).data(), centroids.row(c).data(), points.cols()));
        }
    }
    return centroids;
}

/// Best of n_init k-means++/Lloyd runs by inertia; deterministic given seed.
inline ClusterModel kmeans_fit(const Matrix& points, int eta, std::uint64_t seed, const KMeansOptions& options = {}) {
    require(eta >= 1, ErrorCode::invalid_argument, "eta must be positive");
    require(points.rows() >= eta, ErrorCode::invalid_argument,
            "k-means needs at least eta points (" + std::to_string(points.rows()) + " < " + std::to_string(eta) + ")");
    require(points.allFinite(), ErrorCode::non_finite, "k-means input is not finite");
    require(detail::has_at_least_distinct(points, eta), ErrorCode::degenerate,
            "k-means: fewer than eta distinct points");
    require(options.n_init >= 1 && options.max_iter >= 1, ErrorCode::invalid_argument, "invalid k-means options");
    ClusterModel best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (int restart = 0; restart < options.n_init; ++restart) {
        std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(restart)));
        auto run = lloyd(points, kmeans_plus_plus(points, eta, rng), options.max_iter);
        if (run.inertia < best.inertia) {
            best.centroids = std::move(run.centroids);
            best.inertia = run.inertia;
            best.eta = eta;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Label alignment
// ---------------------------------------------------------------------------

/// Minimum-cost perfect assignment on a square cost matrix (shortest augmenting paths, O(n^3)).
/// Returns row_to_col.
inline std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
    const std::size_t n = cost.size();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> row_to_col(n);
    for (std::size_t j = 1; j <= n; ++j) {
        row_to_col[p[j] - 1] = static_cast<int>(j - 1);
    }
    return row_to_col;
}

struct Alignment {
    std::vector<int> permutation;  // permutation[label in b] = matching label in a
    std::size_t mismatches = 0;
};

/// Relabeling of b that agrees with a on the most positions.
inline Alignment align_labels(const std::vector<int>& a, const std::vector<int>& b, int eta) {
    require(a.size() == b.size(), ErrorCode::invalid_argument, "align_labels: label vectors differ in length");
    const auto k = static_cast<std::size_t>(eta);
    std::vector<std::vector<double>> agreement(k, std::vector<double>(k, 0.0));
    for (std::size_t i = 0; i < a.size(); ++i) {
        require(a[i] >= 0 && a[i] < eta && b[i] >= 0 && b[i] < eta, ErrorCode::invalid_argument,
                "align_labels: label out of range");
        agreement[static_cast<std::size_t>(b[i])][static_cast<std::size_t>(a[i])] += 1.0;
    }
    std::vector<std::vector<double>> cost(k, std::vector<double>(k));
    for (std::size_t r = 0; r < k; ++r) {
        for (std::size_t c = 0; c < k; ++c) cost[r][c] = -agreement[r][c];
    }
    Alignment out;
    out.permutation = hungarian(cost);
    std::size_t agree = 0;
    for (std::size_t r = 0; r < k; ++r) {
        agree += static_cast<std::size_t>(agreement[r][static_cast<std::size_t>(out.permutation[r])]);
    }
    out.mismatches = a.size() - agree;
    return out;
}

/// Fraction of validation points on which the two models disagree after the best relabeling.
inline double stability_distance(const ClusterModel& c, const ClusterModel& c_prime, const Matrix& val_points) {
    require(val_points.rows() > 0, ErrorCode::empty_input, "stability distance on empty validation set");
    require(c.eta == c_prime.eta, ErrorCode::invalid_argument, "stability distance needs equal eta");
    const auto a = kmeans_predict(c, val_points);
    const auto b = kmeans_predict(c_prime, val_points);
    return static_cast<double>(align_labels(a, b, c.eta).mismatches) / static_cast<double>(val_points.rows());
}

inline double stability_score(double stability_loss) { return 1.0 - stability_loss; }

// ---------------------------------------------------------------------------
// Calinski-Harabasz
// ---------------------------------------------------------------------------

inline double calinski_harabasz(const Matrix& points, const std::vector<int>& labels) {
    require(static_cast<std::size_t>(points.rows()) == labels.size(), ErrorCode::invalid_argument,
            "calinski_harabasz: label count mismatch");
    require(!labels.empty(), ErrorCode::empty_input, "calinski_harabasz on empty input");
    const int eta = *std::max_element(labels.begin(), labels.end()) + 1;
    const auto n = points.rows();
    require(eta >= 2, ErrorCode::degenerate, "degenerate CH: single cluster");
    require(eta < n, ErrorCode::degenerate, "degenerate CH: as many clusters as points");
    Matrix means = Matrix::Zero(eta, points.cols());
    std::vector<double> counts(static_cast<std::size_t>(eta), 0.0);
    for (Eigen::Index r = 0; r < n; ++r) {
        const int l = labels[static_cast<std::size_t>(r)];
        require(l >= 0, ErrorCode::invalid_argument, "calinski_harabasz: negative label");
        means.row(l) += points.row(r);
        counts[static_cast<std::size_t>(l)] += 1.0;
    }
    const Eigen::RowVectorXd grand = points.colwise().mean();
    double between = 0.0;
    for (int c = 0; c < eta; ++c) {
        require(counts[static_cast<std::size_t>(c)] > 0.0, ErrorCode::degenerate, "degenerate CH: empty cluster");
        means.row(c) /= counts[static_cast<std::size_t>(c)];
        between += counts[static_cast<std::size_t>(c)] * (means.row(c) - grand).squaredNorm();
    }
    double within = 0.0;
    for (Eigen::Index r = 0; r < n; ++r) {
        within += (points.row(r) - means.row(labels[static_cast<std::size_t>(r)])).squaredNorm();
    }
    require(within > 0.0, ErrorCode::degenerate, "degenerate CH: zero within-cluster dispersion");
    return (between / (eta - 1)) / (within / static_cast<double>(n - eta));
}

// ---------------------------------------------------------------------------
// Stability loss over K patient-level resamplings
// ---------------------------------------------------------------------------

struct LatentPair {
    Matrix train;
    Matrix val;
};

/// Produces latent pixels for a (train, validation) patient split of one trial.
using LatentProvider = std::function<LatentPair(const Cohort& train, const Cohort& val, std::uint64_t trial_seed)>;

struct StabilityTrial {
    double distance = 0.0;
    double ch_train = 0.0;  // CH of model C on its training latents; NaN when degenerate
};

struct StabilityResult {
    double loss = 0.0;
    std::vector<StabilityTrial> trials;

    double score() const { return stability_score(loss); }
};

/// Mean over K trials of the distance between C (fit on the train part) and C' (fit on the
/// validation part), both evaluated on validation latents. Trials run in parallel; the mean is
/// reduced in trial order.
inline StabilityResult stability_loss(const LatentProvider& provider, const Cohort& cohort, int eta, int k_trials,
                                      double fraction, std::uint64_t seed, const KMeansOptions& options = {}) {
    require(k_trials >= 1, ErrorCode::invalid_argument, "K must be at least 1");
    StabilityResult out;
    out.trials.resize(static_cast<std::size_t>(k_trials));
    parallel_for(static_cast<std::size_t>(k_trials), [&](std::size_t k) {
        const auto trial_seed = derive_seed(seed, k);
        const auto [train, val] = split_cohort(cohort, fraction, trial_seed);
        const auto latents = provider(train, val, trial_seed);
        const auto c = kmeans_fit(latents.train, eta, derive_seed(trial_seed, 1), options);
        const auto c_prime = kmeans_fit(latents.val, eta, derive_seed(trial_seed, 2), options);
        StabilityTrial trial;
        trial.distance = stability_distance(c, c_prime, latents.val);
        try {
            trial.ch_train = calinski_harabasz(latents.train, kmeans_predict(c, latents.train));
        } catch (const Error&) {
            trial.ch_train = std::numeric_limits<double>::quiet_NaN();
        }
        out.trials[k] = trial;
    });
    double total = 0.0;
    for (const auto& t : out.trials) {
        total += t.distance;
    }
    out.loss = total / static_cast<double>(k_trials);
    return out;
}

// ---------------------------------------------------------------------------
// k-medoids (PAM)
// ---------------------------------------------------------------------------

struct KMedoidsResult {
    std::vector<std::size_t> medoids;  // indices into the input rows
    std::vector<int> labels;           // position in `medoids`
    double cost = 0.0;
    std::vector<double> cost_history;  // after BUILD, then after every accepted swap
};

/// PAM: greedy BUILD then best-improvement SWAP under Euclidean distance. Both phases are
/// deterministic (ties resolve to the lowest index), so the seed does not change the result.
inline KMedoidsResult kmedoids_fit(const Matrix& points, int k, [[maybe_unused]] std::uint64_t seed = 0) {
    const auto n = static_cast<std::size_t>(points.rows());
    require(k >= 1, ErrorCode::invalid_argument, "k must be positive");
    require(n >= static_cast<std::size_t>(k), ErrorCode::invalid_argument, "k-medoids needs at least k points");
    std::vector<double> dist(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            dist[i * n + j] = std::sqrt(detail::squared_distance(points.row(static_cast<Eigen::Index>(i)).data(),
                                                                 points.row(static_cast<Eigen::Index>(j)).data(),
                                                                 points.cols()));
        }
    }
    auto total_cost = [&](const std::vector<std::size_t>& medoids) {
        double cost = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (auto m : medoids) best = std::min(best, dist[i * n + m]);
            cost += best;
        }
        return cost;
    };

    KMedoidsResult out;
    std::vector<char> is_medoid(n, 0);
    for (int c = 0; c < k; ++c) {
        double best_cost = std::numeric_limits<double>::infinity();
        std::size_t best = 0;
        for (std::size_t cand = 0; cand < n; ++cand) {
            if (is_medoid[cand]) continue;
            out.medoids.push_back(cand);
            const double cost = total_cost(out.medoids);
            out.medoids.pop_back();
            if (cost < best_cost) {
                best_cost = cost;
                best = cand;
            }
        }
        out.medoids.push_back(best);
        is_medoid[best] = 1;
    }
    out.cost = total_cost(out.medoids);
    out.cost_history.push_back(out.cost);

    while (true) {
        double best_cost = out.cost;
        std::size_t best_slot = 0, best_cand = 0;
        bool improved = false;
        for (std::size_t slot = 0; slot < out.medoids.size(); ++slot) {
            for (std::size_t cand = 0; cand < n; ++cand) {
                if (is_medoid[cand]) continue;
                auto trial = out.medoids;
                trial[slot] = cand;
                const double cost = total_cost(trial);
                if (cost < best_cost - 1e-12 * std::max(1.0, std::abs(best_cost))) {
                    best_cost = cost;
                    best_slot = slot;
                    best_cand = cand;
                    improved = true;
                }
            }
        }
        if (!improved) break;
        is_medoid[out.medoids[best_slot]] = 0;
        is_medoid[best_cand] = 1;
        out.medoids[best_slot] = best_cand;
        out.cost = best_cost;
        out.cost_history.push_back(out.cost);
    }

    out.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < out.medoids.size(); ++s) {
            if (dist[i * n + out.medoids[s]] < best) {
                best = dist[i * n + out.medoids[s]];
                out.labels[i] = static_cast<int>(s);
            }
        }
    }
    return out;
}

}  // namespace habitat
