#include "habitat/clustering.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

using namespace habitat;

namespace {

Matrix column(const std::vector<double>& v) {
    Matrix m(static_cast<Eigen::Index>(v.size()), 1);
    for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = v[i];
    return m;
}

ClusterModel model_1d(const std::vector<double>& centroids) {
    ClusterModel m;
    m.centroids = column(centroids);
    m.eta = static_cast<int>(centroids.size());
    return m;
}

std::size_t brute_force_mismatches(const std::vector<int>& a, const std::vector<int>& b, int eta) {
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

std::vector<int> random_labels(std::mt19937_64& rng, std::size_t n, int eta) {
    std::uniform_int_distribution<int> d(0, eta - 1);
    std::vector<int> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

Matrix blobs(int per_blob, const std::vector<std::vector<double>>& centers, double sigma, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sigma);
    const auto d = static_cast<Eigen::Index>(centers.front().size());
    Matrix m(per_blob * static_cast<Eigen::Index>(centers.size()), d);
    Eigen::Index r = 0;
    for (const auto& c : centers)
        for (int k = 0; k < per_blob; ++k, ++r)
            for (Eigen::Index j = 0; j < d; ++j) m(r, j) = c[static_cast<std::size_t>(j)] + n(rng);
    return m;
}

}  // namespace

TEST(KMeans, FourPointsTwoClusters) {
    const auto model = kmeans_fit(column({-1, 0, 10, 11}), 2, 1);
    std::vector<double> c{model.centroids(0, 0), model.centroids(1, 0)};
    std::sort(c.begin(), c.end());
    EXPECT_DOUBLE_EQ(c[0], -0.5);
    EXPECT_DOUBLE_EQ(c[1], 10.5);
    EXPECT_DOUBLE_EQ(model.inertia, 1.0);
    const auto labels = kmeans_predict(model, column({-1, 0, 10, 11}));
    EXPECT_EQ(labels[0], labels[1]);
    EXPECT_EQ(labels[2], labels[3]);
    EXPECT_NE(labels[0], labels[2]);
}

// Exhaustive 2-partitions of small 1D sets.
TEST(KMeans, MatchesBruteForceTwoPartitions) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-5, 5);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> v(7);
        for (auto& x : v) x = u(rng);
        double best = std::numeric_limits<double>::infinity();
        for (unsigned mask = 1; mask + 1 < (1u << v.size()); ++mask) {
            double s[2] = {0, 0}, ss[2] = {0, 0};
            int n[2] = {0, 0};
            for (std::size_t i = 0; i < v.size(); ++i) {
                const int g = (mask >> i) & 1u;
                s[g] += v[i];
                ss[g] += v[i] * v[i];
                ++n[g];
            }
            best = std::min(best, ss[0] - s[0] * s[0] / n[0] + ss[1] - s[1] * s[1] / n[1]);
        }
        EXPECT_NEAR(kmeans_fit(column(v), 2, static_cast<std::uint64_t>(trial)).inertia, best, 1e-9);
    }
}

TEST(KMeans, EtaEqualsNGivesZeroInertia) {
    const auto model = kmeans_fit(column({3, 1, 4, 1.5, 9}), 5, 0);
    EXPECT_EQ(model.inertia, 0.0);
}

TEST(KMeans, DuplicatingPointsKeepsCentroids) {
    const Matrix x = blobs(30, {{0, 0}, {8, 8}, {0, 8}}, 1.0, 4);
    Matrix twice(2 * x.rows(), x.cols());
    twice << x, x;
    auto a = kmeans_fit(x, 3, 7);
    auto b = kmeans_fit(twice, 3, 7);
    auto sorted_rows = [](const Matrix& m) {
        std::vector<std::vector<double>> rows;
        for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back({m(r, 0), m(r, 1)});
        std::sort(rows.begin(), rows.end());
        return rows;
    };
    const auto ra = sorted_rows(a.centroids), rb = sorted_rows(b.centroids);
    for (std::size_t k = 0; k < ra.size(); ++k)
        for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(ra[k][j], rb[k][j], 1e-9);
    EXPECT_NEAR(b.inertia, 2.0 * a.inertia, 1e-8);
}

TEST(KMeans, DeterministicGivenSeed) {
    const Matrix x = blobs(40, {{0, 0}, {3, 3}}, 2.0, 1);
    EXPECT_EQ(kmeans_fit(x, 4, 11), kmeans_fit(x, 4, 11));
}

TEST(KMeans, Errors) {
    EXPECT_THROW(kmeans_fit(column({1, 2}), 3, 0), Error);
    EXPECT_THROW(kmeans_fit(column({1, 1, 1, 2}), 3, 0), Error);
}

TEST(KMeans, InertiaNonIncreasingAcrossLloyd) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Matrix x = blobs(50, {{0, 0}, {2, 1}, {1, 3}}, 1.5, seed);
        std::mt19937_64 rng(seed);
        const auto run = lloyd(x, kmeans_plus_plus(x, 4, rng), 300);
        for (std::size_t k = 1; k < run.inertia_history.size(); ++k)
            EXPECT_LE(run.inertia_history[k], run.inertia_history[k - 1] + 1e-9);
    }
}

TEST(KMeansPredict, ReproducesFitAssignment) {
    const Matrix x = blobs(40, {{0, 0}, {5, 0}, {0, 5}}, 1.0, 2);
    const auto model = kmeans_fit(x, 3, 5);
    const auto run = lloyd(x, model.centroids, 300);
    EXPECT_EQ(kmeans_predict(model, x), run.labels);
}

TEST(KMeansPredict, TiesGoToLowestIndex) {
    EXPECT_EQ(kmeans_predict(model_1d({0, 2}), column({1}))[0], 0);
    EXPECT_EQ(kmeans_predict(model_1d({2, 0}), column({1}))[0], 0);
}

TEST(KMeansPredict, CentroidGetsOwnLabel) {
    EXPECT_EQ(kmeans_predict(model_1d({0, 5, 9}), column({0, 5, 9})), (std::vector<int>{0, 1, 2}));
}

TEST(KMeansPredict, DimensionMismatch) {
    EXPECT_THROW(kmeans_predict(model_1d({0, 1}), Matrix::Zero(2, 2)), Error);
}

TEST(AlignLabels, PureRelabeling) {
    const auto a = align_labels({0, 0, 1, 1}, {1, 1, 0, 0}, 2);
    EXPECT_EQ(a.mismatches, 0u);
    EXPECT_EQ(a.permutation, (std::vector<int>{1, 0}));
}

TEST(AlignLabels, OneMismatchIdentity) {
    const auto a = align_labels({0, 0, 1, 1}, {0, 1, 1, 1}, 2);
    EXPECT_EQ(a.mismatches, 1u);
    EXPECT_EQ(a.permutation, (std::vector<int>{0, 1}));
}

TEST(AlignLabels, EqualVectors) {
    const std::vector<int> v{2, 0, 1, 1, 2};
    const auto a = align_labels(v, v, 3);
    EXPECT_EQ(a.mismatches, 0u);
    EXPECT_EQ(a.permutation, (std::vector<int>{0, 1, 2}));
}

TEST(AlignLabels, MatchesExhaustiveSearch) {
    std::mt19937_64 rng(42);
    std::uniform_int_distribution<int> eta_d(2, 6), n_d(1, 12);
    for (int trial = 0; trial < 500; ++trial) {
        const int eta = eta_d(rng);
        const auto n = static_cast<std::size_t>(n_d(rng));
        const auto a = random_labels(rng, n, eta);
        const auto b = random_labels(rng, n, eta);
        const auto got = align_labels(a, b, eta);
        ASSERT_EQ(got.mismatches, brute_force_mismatches(a, b, eta)) << "trial " << trial;
        std::size_t miss = 0;
        for (std::size_t i = 0; i < n; ++i) miss += got.permutation[static_cast<std::size_t>(b[i])] != a[i];
        EXPECT_EQ(miss, got.mismatches);
    }
}

TEST(Hungarian, SmallCostMatrix) {
    const std::vector<std::vector<double>> cost{{4, 1, 3}, {2, 0, 5}, {3, 2, 2}};
    const auto assign = hungarian(cost);
    double total = 0;
    for (std::size_t r = 0; r < 3; ++r) total += cost[r][static_cast<std::size_t>(assign[r])];
    EXPECT_EQ(total, 5.0);
}

TEST(StabilityDistance, IdenticalModels) {
    const auto m = model_1d({0, 4, 9});
    EXPECT_EQ(stability_distance(m, m, column({0, 1, 5, 8, 10})), 0.0);
}

TEST(StabilityDistance, PermutedCentroids) {
    EXPECT_EQ(stability_distance(model_1d({0, 4, 9}), model_1d({9, 0, 4}), column({0, 1, 5, 8, 10})), 0.0);
}

TEST(StabilityDistance, HalfDisagreement) {
    EXPECT_DOUBLE_EQ(stability_distance(model_1d({0, 10}), model_1d({0, 4}), column({1, 2, 3, 5})), 0.5);
}

TEST(StabilityDistance, EmptyValidationFails) {
    EXPECT_THROW(stability_distance(model_1d({0, 1}), model_1d({0, 1}), Matrix(0, 1)), Error);
}

TEST(StabilityDistance, PseudometricOnLabelVectors) {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> eta_d(2, 4), n_d(1, 12);
    auto dist = [](const std::vector<int>& a, const std::vector<int>& b, int eta) {
        return static_cast<double>(brute_force_mismatches(a, b, eta)) / static_cast<double>(a.size());
    };
    for (int trial = 0; trial < 300; ++trial) {
        const int eta = eta_d(rng);
        const auto n = static_cast<std::size_t>(n_d(rng));
        const auto a = random_labels(rng, n, eta), b = random_labels(rng, n, eta), c = random_labels(rng, n, eta);
        const double ab = static_cast<double>(align_labels(a, b, eta).mismatches) / static_cast<double>(n);
        const double ba = static_cast<double>(align_labels(b, a, eta).mismatches) / static_cast<double>(n);
        const double bc = static_cast<double>(align_labels(b, c, eta).mismatches) / static_cast<double>(n);
        const double ac = static_cast<double>(align_labels(a, c, eta).mismatches) / static_cast<double>(n);
        EXPECT_EQ(ab, ba);
        EXPECT_EQ(ab, dist(a, b, eta));
        EXPECT_LE(ac, ab + bc + 1e-12);
        std::vector<int> relabeled(a);
        for (auto& x : relabeled) x = (x + 1) % eta;
        EXPECT_EQ(align_labels(a, relabeled, eta).mismatches, 0u);
    }
}

TEST(StabilityScore, Complement) {
    EXPECT_EQ(stability_score(0.0), 1.0);
    EXPECT_EQ(stability_score(1.0), 0.0);
    EXPECT_NEAR(stability_score(0.077), 0.923, 1e-12);
}

TEST(CalinskiHarabasz, HandValue) {
    EXPECT_DOUBLE_EQ(calinski_harabasz(column({0, 1, 10, 11}), {0, 0, 1, 1}), 200.0);
}

TEST(CalinskiHarabasz, Degenerate) {
    EXPECT_THROW(calinski_harabasz(column({0, 1}), {0, 1}), Error);
    EXPECT_THROW(calinski_harabasz(column({0, 1, 2}), {0, 0, 0}), Error);
    EXPECT_THROW(calinski_harabasz(column({0, 0, 5, 5}), {0, 0, 1, 1}), Error);
}

TEST(CalinskiHarabasz, AffineInvariant) {
    const Matrix x = blobs(20, {{0, 0}, {4, 1}, {1, 5}}, 1.0, 3);
    const auto labels = kmeans_predict(kmeans_fit(x, 3, 1), x);
    const double base = calinski_harabasz(x, labels);
    const Matrix moved = (x * 3.5).array() - 7.0;
    EXPECT_NEAR(calinski_harabasz(moved, labels), base, 1e-9 * base);
}

TEST(StabilityLoss, SeparatedBlobsAreStable) {
    // Patients whose pixels come from four blobs 20 sigma apart.
    Cohort c;
    c.modality_names = {"x", "y"};
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 0.5);
    const double centers[4][2] = {{0, 0}, {10, 0}, {0, 10}, {10, 10}};
    for (int p = 0; p < 12; ++p) {
        PatientScan s;
        s.patient_id = "p" + std::to_string(p);
        s.image_dims = {8, 8};
        s.pixel_values.resize(40, 2);
        for (int k = 0; k < 40; ++k) {
            s.pixel_coords.push_back({k / 8, k % 8});
            for (int j = 0; j < 2; ++j) s.pixel_values(k, j) = centers[k % 4][j] + n(rng);
        }
        c.scans.push_back(s);
        c.survival.push_back({s.patient_id, 1.0, true});
    }
    const LatentProvider identity = [](const Cohort& a, const Cohort& b, std::uint64_t) {
        return LatentPair{pool_pixels(a), pool_pixels(b)};
    };
    const auto r = stability_loss(identity, c, 4, 10, 0.6, 3);
    EXPECT_LT(r.loss, 0.05);
    EXPECT_EQ(r.trials.size(), 10u);
    EXPECT_EQ(stability_loss(identity, c, 4, 10, 0.6, 3).loss, r.loss);
    const auto before = thread_count();
    set_thread_count(3);
    const auto threaded = stability_loss(identity, c, 5, 4, 0.6, 9);
    set_thread_count(1);
    const auto serial = stability_loss(identity, c, 5, 4, 0.6, 9);
    set_thread_count(before);
    EXPECT_EQ(threaded.loss, serial.loss);
    for (const auto& t : threaded.trials) {
        EXPECT_GE(t.distance, 0.0);
        EXPECT_LE(t.distance, 1.0);
    }
    EXPECT_THROW(stability_loss(identity, c, 4, 0, 0.6, 3), Error);
}

TEST(KMedoids, FourPoints) {
    const auto r = kmedoids_fit(column({0, 1, 2, 10}), 2, 0);
    std::vector<std::size_t> medoids = r.medoids;
    std::sort(medoids.begin(), medoids.end());
    EXPECT_EQ(medoids, (std::vector<std::size_t>{1, 3}));
    EXPECT_DOUBLE_EQ(r.cost, 2.0);
}

TEST(KMedoids, SwapLocalOptimumAboveGlobal) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n;
    auto cost_of = [](const Matrix& x, const std::vector<Eigen::Index>& med) {
        double cost = 0;
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            double best = std::numeric_limits<double>::infinity();
            for (auto m : med) best = std::min(best, (x.row(r) - x.row(m)).norm());
            cost += best;
        }
        return cost;
    };
    for (int trial = 0; trial < 20; ++trial) {
        Matrix x(9, 2);
        for (Eigen::Index r = 0; r < x.rows(); ++r) x.row(r) << n(rng), n(rng);
        double global = std::numeric_limits<double>::infinity();
        for (Eigen::Index a = 0; a < 9; ++a)
            for (Eigen::Index b = a + 1; b < 9; ++b) global = std::min(global, cost_of(x, {a, b}));
        const auto r = kmedoids_fit(x, 2, 0);
        std::vector<Eigen::Index> med(r.medoids.begin(), r.medoids.end());
        EXPECT_NEAR(cost_of(x, med), r.cost, 1e-9);
        EXPECT_GE(r.cost, global - 1e-9);
        for (std::size_t slot = 0; slot < med.size(); ++slot)
            for (Eigen::Index c = 0; c < 9; ++c) {
                if (std::find(med.begin(), med.end(), c) != med.end()) continue;
                auto swapped = med;
                swapped[slot] = c;
                EXPECT_GE(cost_of(x, swapped), r.cost - 1e-9) << "trial " << trial;
            }
    }
}

TEST(KMedoids, SeparatedBlobsAndMembership) {
    const Matrix x = blobs(15, {{0, 0}, {20, 20}}, 1.0, 2);
    const auto r = kmedoids_fit(x, 2, 0);
    for (int k = 1; k < 15; ++k) EXPECT_EQ(r.labels[static_cast<std::size_t>(k)], r.labels[0]);
    for (int k = 16; k < 30; ++k) EXPECT_EQ(r.labels[static_cast<std::size_t>(k)], r.labels[15]);
    EXPECT_NE(r.labels[0], r.labels[15]);
    for (auto m : r.medoids) EXPECT_LT(m, 30u);
}

TEST(KMedoids, CostNeverIncreases) {
    const Matrix x = blobs(20, {{0, 0}, {3, 3}, {0, 4}}, 1.5, 9);
    const auto r = kmedoids_fit(x, 3, 0);
    for (std::size_t k = 1; k < r.cost_history.size(); ++k) EXPECT_LE(r.cost_history[k], r.cost_history[k - 1]);
}

TEST(KMedoids, TooFewPoints) {
    EXPECT_THROW(kmedoids_fit(column({1}), 2, 0), Error);
}
