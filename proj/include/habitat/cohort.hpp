#pragma once

#include "habitat/core.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace habitat {

struct PixelCoord {
    int row = 0;
    int col = 0;

    friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

struct ImageDims {
    int height = 0;
    int width = 0;

    friend bool operator==(const ImageDims&, const ImageDims&) = default;
};

/// In-mask pixels of one patient; rows of pixel_values line up with pixel_coords.
struct PatientScan {
    std::string patient_id;
    Matrix pixel_values;
    std::vector<PixelCoord> pixel_coords;
    ImageDims image_dims;

    std::size_t n_pixels() const { return pixel_coords.size(); }

    friend bool operator==(const PatientScan& a, const PatientScan& b) {
        return a.patient_id == b.patient_id && a.image_dims == b.image_dims && a.pixel_coords == b.pixel_coords &&
               a.pixel_values.rows() == b.pixel_values.rows() && a.pixel_values.cols() == b.pixel_values.cols() &&
               a.pixel_values == b.pixel_values;
    }
};

struct SurvivalRecord {
    std::string patient_id;
    double time = 0.0;  // days
    bool event = false;  // true = death observed

    friend bool operator==(const SurvivalRecord&, const SurvivalRecord&) = default;
};

struct Cohort {
    std::vector<PatientScan> scans;
    std::vector<SurvivalRecord> survival;
    std::vector<std::string> modality_names;

    std::size_t n_patients() const { return scans.size(); }
    std::size_t n_modalities() const { return modality_names.size(); }

    std::size_t n_pixels() const {
        std::size_t total = 0;
        for (const auto& s : scans) {
            total += s.n_pixels();
        }
        return total;
    }

    /// Throws on any broken invariant; survival[i] must belong to scans[i].
    void validate() const {
        require(!modality_names.empty(), ErrorCode::invalid_argument, "cohort has no modalities");
        require(scans.size() == survival.size(), ErrorCode::invalid_argument,
                "cohort needs one survival record per scan");
        const auto m = static_cast<Eigen::Index>(modality_names.size());
        for (std::size_t i = 0; i < scans.size(); ++i) {
            const auto& scan = scans[i];
            require(survival[i].patient_id == scan.patient_id, ErrorCode::invalid_argument,
                    "survival record " + survival[i].patient_id + " does not match scan " + scan.patient_id);
            require(survival[i].time > 0.0 && std::isfinite(survival[i].time), ErrorCode::invalid_argument,
                    "survival time must be positive for " + scan.patient_id);
            require(scan.pixel_values.cols() == m, ErrorCode::modality_mismatch,
                    "scan " + scan.patient_id + " has " + std::to_string(scan.pixel_values.cols()) +
                        " modalities, expected " + std::to_string(m));
            require(static_cast<std::size_t>(scan.pixel_values.rows()) == scan.pixel_coords.size(),
                    ErrorCode::invalid_argument, "pixel rows and coordinates differ for " + scan.patient_id);
            require(scan.pixel_values.allFinite(), ErrorCode::non_finite,
                    "non-finite intensity in scan " + scan.patient_id);
            for (const auto& c : scan.pixel_coords) {
                require(c.row >= 0 && c.col >= 0 && c.row < scan.image_dims.height && c.col < scan.image_dims.width,
                        ErrorCode::invalid_argument, "pixel coordinate outside image for " + scan.patient_id);
            }
        }
    }

    friend bool operator==(const Cohort&, const Cohort&) = default;
};

/// All pixels of all patients stacked in scan order.
inline Matrix pool_pixels(const Cohort& cohort) {
    Matrix pooled(static_cast<Eigen::Index>(cohort.n_pixels()), static_cast<Eigen::Index>(cohort.n_modalities()));
    Eigen::Index row = 0;
    for (const auto& scan : cohort.scans) {
        pooled.middleRows(row, scan.pixel_values.rows()) = scan.pixel_values;
        row += scan.pixel_values.rows();
    }
    return pooled;
}

// ---------------------------------------------------------------------------
// Quantile filtering
// ---------------------------------------------------------------------------

/// Linear-interpolation quantile on an ascending sample (h = (n-1)p).
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
    require(!sorted.empty(), ErrorCode::empty_input, "quantile of empty sample");
    const double h = static_cast<double>(sorted.size() - 1) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= sorted.size()) {
        return sorted.back();
    }
    const double frac = h - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

struct ClipBounds {
    std::vector<double> lower;
    std::vector<double> upper;

    friend bool operator==(const ClipBounds&, const ClipBounds&) = default;
};

/// Per-modality pooled bounds keeping the central gamma mass.
inline ClipBounds quantile_bounds(const Cohort& cohort, double gamma) {
    require(gamma >= 0.0 && gamma <= 1.0, ErrorCode::invalid_argument, "gamma must lie in [0,1]");
    require(cohort.n_pixels() > 0, ErrorCode::empty_input, "quantile filter on empty cohort");
    const std::size_t m = cohort.n_modalities();
    ClipBounds bounds;
    bounds.lower.resize(m);
    bounds.upper.resize(m);
    std::vector<double> column;
    column.reserve(cohort.n_pixels());
    for (std::size_t j = 0; j < m; ++j) {
        column.clear();
        for (const auto& scan : cohort.scans) {
            for (Eigen::Index r = 0; r < scan.pixel_values.rows(); ++r) {
                column.push_back(scan.pixel_values(r, static_cast<Eigen::Index>(j)));
            }
        }
        std::sort(column.begin(), column.end());
        bounds.lower[j] = quantile_sorted(column, (1.0 - gamma) / 2.0);
        bounds.upper[j] = quantile_sorted(column, (1.0 + gamma) / 2.0);
    }
    return bounds;
}

inline Cohort apply_clip(const Cohort& cohort, const ClipBounds& bounds) {
    require(bounds.lower.size() == cohort.n_modalities(), ErrorCode::modality_mismatch,
            "clip bounds do not match cohort modalities");
    Cohort out = cohort;
    for (auto& scan : out.scans) {
        for (Eigen::Index j = 0; j < scan.pixel_values.cols(); ++j) {
            const double lo = bounds.lower[static_cast<std::size_t>(j)];
            const double hi = bounds.upper[static_cast<std::size_t>(j)];
            for (Eigen::Index r = 0; r < scan.pixel_values.rows(); ++r) {
                double& v = scan.pixel_values(r, j);
                v = std::clamp(v, lo, hi);
            }
        }
    }
    return out;
}

/// Winsorizes every modality into its pooled central-gamma quantile interval.
inline Cohort quantile_filter(const Cohort& cohort, double gamma) {
    return apply_clip(cohort, quantile_bounds(cohort, gamma));
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

struct ModalityStats {
    std::vector<double> mean;
    std::vector<double> stddev;

    friend bool operator==(const ModalityStats&, const ModalityStats&) = default;
};

inline ModalityStats modality_stats(const Cohort& cohort) {
    require(cohort.n_pixels() > 0, ErrorCode::empty_input, "standardize on empty cohort");
    const std::size_t m = cohort.n_modalities();
    ModalityStats stats{std::vector<double>(m, 0.0), std::vector<double>(m, 0.0)};
    const auto n = static_cast<double>(cohort.n_pixels());
    for (const auto& scan : cohort.scans) {
        for (Eigen::Index r = 0; r < scan.pixel_values.rows(); ++r) {
            for (std::size_t j = 0; j < m; ++j) {
                stats.mean[j] += scan.pixel_values(r, static_cast<Eigen::Index>(j));
            }
        }
    }
    for (auto& v : stats.mean) {
        v /= n;
    }
    for (const auto& scan : cohort.scans) {
        for (Eigen::Index r = 0; r < scan.pixel_values.rows(); ++r) {
            for (std::size_t j = 0; j < m; ++j) {
                const double d = scan.pixel_values(r, static_cast<Eigen::Index>(j)) - stats.mean[j];
                stats.stddev[j] += d * d;
            }
        }
    }
    for (std::size_t j = 0; j < m; ++j) {
        stats.stddev[j] = std::sqrt(stats.stddev[j] / n);
        require(stats.stddev[j] > 0.0, ErrorCode::zero_variance,
                "modality '" + cohort.modality_names[j] + "' has zero variance");
    }
    return stats;
}

inline Cohort apply_standardization(const Cohort& cohort, const ModalityStats& stats) {
    require(stats.mean.size() == cohort.n_modalities(), ErrorCode::modality_mismatch,
            "standardization stats do not match cohort modalities");
    Cohort out = cohort;
    for (auto& scan : out.scans) {
        for (Eigen::Index j = 0; j < scan.pixel_values.cols(); ++j) {
            const auto k = static_cast<std::size_t>(j);
            for (Eigen::Index r = 0; r < scan.pixel_values.rows(); ++r) {
                scan.pixel_values(r, j) = (scan.pixel_values(r, j) - stats.mean[k]) / stats.stddev[k];
            }
        }
    }
    return out;
}

/// Pooled zero-mean, unit (population) variance per modality.
inline std::pair<Cohort, ModalityStats> standardize(const Cohort& cohort) {
    auto stats = modality_stats(cohort);
    return {apply_standardization(cohort, stats), std::move(stats)};
}

// ---------------------------------------------------------------------------
// Synthetic cohorts
// ---------------------------------------------------------------------------

struct SynthSpec {
    int n_patients = 20;
    int n_regions_true = 4;
    ImageDims image_dims{20, 20};
    Matrix region_means;    // n_regions_true x M
    Matrix region_stddevs;  // n_regions_true x M
    std::vector<double> hazard_weights;
    double censoring_rate = 0.1;
    std::uint64_t seed = 0;

    // Knobs beyond the core contract.
    double hazard_intercept = -1.0;
    double dirichlet_concentration = 1.0;
    // When lead_share_beta[0] > 0, region 0 takes a Beta(a, b) share and the other regions split
    // the rest by Dirichlet; the survival-driving region then dominates between-patient variation.
    std::array<double, 2> lead_share_beta{0.0, 0.0};
    double patient_offset_stddev = 0.0;  // per-patient additive bias on every modality
    double time_scale = 365.0;
    std::string id_prefix = "P";

    int n_modalities() const { return static_cast<int>(region_means.cols()); }

    void validate() const {
        require(n_patients >= 1, ErrorCode::invalid_argument, "n_patients must be at least 1");
        require(n_regions_true >= 2, ErrorCode::invalid_argument, "n_regions_true must be at least 2");
        require(image_dims.height >= 4 && image_dims.width >= 4, ErrorCode::invalid_argument,
                "image dims must be at least 4x4");
        require(region_means.rows() == n_regions_true && region_means.cols() >= 1, ErrorCode::invalid_argument,
                "region_means must have n_regions_true rows");
        require(region_stddevs.rows() == region_means.rows() && region_stddevs.cols() == region_means.cols(),
                ErrorCode::invalid_argument, "region_stddevs shape must match region_means");
        require((region_stddevs.array() > 0.0).all(), ErrorCode::invalid_argument, "region stddevs must be > 0");
        require(hazard_weights.size() == static_cast<std::size_t>(n_regions_true), ErrorCode::invalid_argument,
                "hazard_weights needs one weight per region");
        require(censoring_rate >= 0.0 && censoring_rate < 1.0, ErrorCode::invalid_argument,
                "censoring_rate must lie in [0,1)");
        require(dirichlet_concentration > 0.0 && time_scale > 0.0 && patient_offset_stddev >= 0.0,
                ErrorCode::invalid_argument, "invalid generator knobs");
        require(lead_share_beta[0] == 0.0 || (lead_share_beta[0] > 0.0 && lead_share_beta[1] > 0.0),
                ErrorCode::invalid_argument, "lead_share_beta needs two positive parameters");
    }

    /// Well-separated regions (>= 10 sigma between means) on M modalities; survival driven by region 0.
    static SynthSpec planted(int n_patients, int n_regions, std::uint64_t seed, int n_modalities = 3) {
        SynthSpec spec;
        spec.n_patients = n_patients;
        spec.n_regions_true = n_regions;
        spec.seed = seed;
        spec.region_means = Matrix::Zero(n_regions, n_modalities);
        spec.region_stddevs = Matrix::Constant(n_regions, n_modalities, 1.0);
        // Cube corners ordered by popcount: origin, unit axes, then pairs.
        std::vector<unsigned> corners;
        for (unsigned code = 0; code < (1u << n_modalities); ++code) {
            corners.push_back(code);
        }
        std::stable_sort(corners.begin(), corners.end(), [](unsigned a, unsigned b) {
            return std::popcount(a) < std::popcount(b);
        });
        require(static_cast<std::size_t>(n_regions) <= corners.size(), ErrorCode::invalid_argument,
                "too many planted regions for the modality count");
        for (int r = 0; r < n_regions; ++r) {
            for (int j = 0; j < n_modalities; ++j) {
                spec.region_means(r, j) = ((corners[static_cast<std::size_t>(r)] >> j) & 1u) ? 12.0 : 0.0;
            }
        }
        spec.hazard_weights.assign(static_cast<std::size_t>(n_regions), 0.0);
        spec.hazard_weights[0] = 8.0;
        spec.lead_share_beta = {1.0, 1.0};
        spec.dirichlet_concentration = 4.0;
        return spec;
    }
};

struct SyntheticCohort {
    Cohort cohort;
    std::vector<std::vector<int>> labels;  // ground-truth region per pixel, per patient
};

namespace detail {

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

inline std::string patient_id(const std::string& prefix, int index) {
    char buffer[16];
    std::snprintf(buffer, sizeof(buffer), "%03d", index);
    return prefix + buffer;
}

}  // namespace detail

/// Blob-shaped masks cut into angular sectors (one contiguous region each), Gaussian
/// intensities per region, exponential survival with softplus hazard of region proportions.
inline SyntheticCohort generate_synthetic(const SynthSpec& spec) {
    spec.validate();
    const int m = spec.n_modalities();
    const int regions = spec.n_regions_true;
    const int h = spec.image_dims.height;
    const int w = spec.image_dims.width;
    constexpr double two_pi = 6.283185307179586;

    SyntheticCohort out;
    for (int j = 0; j < m; ++j) {
        out.cohort.modality_names.push_back("m" + std::to_string(j));
    }
    out.cohort.scans.resize(static_cast<std::size_t>(spec.n_patients));
    out.cohort.survival.resize(static_cast<std::size_t>(spec.n_patients));
    out.labels.resize(static_cast<std::size_t>(spec.n_patients));

    parallel_for(static_cast<std::size_t>(spec.n_patients), [&](std::size_t i) {
        std::mt19937_64 rng(derive_seed(spec.seed, i));
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::normal_distribution<double> normal(0.0, 1.0);

        const double cy = (h - 1) / 2.0 + (unit(rng) - 0.5) * 0.1 * h;
        const double cx = (w - 1) / 2.0 + (unit(rng) - 0.5) * 0.1 * w;
        const double radius = (0.30 + 0.12 * unit(rng)) * std::min(h, w);
        const double wobble = 0.05 + 0.15 * unit(rng);
        const int lobes = 2 + static_cast<int>(unit(rng) * 3.0);
        const double phase = two_pi * unit(rng);
        const double rotation = two_pi * unit(rng);

        std::vector<double> props(static_cast<std::size_t>(regions));
        std::gamma_distribution<double> gamma_draw(spec.dirichlet_concentration, 1.0);
        const bool lead = spec.lead_share_beta[0] > 0.0;
        double props_total = 0.0;
        for (std::size_t r = lead ? 1 : 0; r < props.size(); ++r) {
            props[r] = gamma_draw(rng) + 1e-12;
            props_total += props[r];
        }
        double rest = 1.0;
        if (lead) {
            std::gamma_distribution<double> ga(spec.lead_share_beta[0], 1.0), gb(spec.lead_share_beta[1], 1.0);
            const double x = ga(rng), y = gb(rng);
            props[0] = x / (x + y);
            rest = 1.0 - props[0];
        }
        for (std::size_t r = lead ? 1 : 0; r < props.size(); ++r) {
            props[r] = rest * props[r] / props_total;
        }
        std::vector<double> offsets(static_cast<std::size_t>(m));
        for (auto& o : offsets) {
            o = spec.patient_offset_stddev * normal(rng);
        }

        struct MaskPixel {
            PixelCoord coord;
            double angle;
        };
        std::vector<MaskPixel> mask;
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                const double dy = r - cy;
                const double dx = c - cx;
                const double phi = std::atan2(dy, dx);
                const double limit = radius * (1.0 + wobble * std::sin(lobes * phi + phase));
                if (std::hypot(dy, dx) <= limit) {
                    double a = std::fmod(phi - rotation + 2.0 * two_pi, two_pi);
                    mask.push_back({{r, c}, a});
                }
            }
        }
        require(static_cast<int>(mask.size()) >= regions, ErrorCode::invalid_argument,
                "image too small for the requested number of regions");
        std::stable_sort(mask.begin(), mask.end(),
                         [](const MaskPixel& a, const MaskPixel& b) { return a.angle < b.angle; });

        const auto n = mask.size();
        std::vector<int> labels(n);
        std::vector<double> realized(static_cast<std::size_t>(regions), 0.0);
        double cumulative = 0.0;
        std::size_t start = 0;
        for (int r = 0; r < regions; ++r) {
            cumulative += props[static_cast<std::size_t>(r)];
            std::size_t stop = (r == regions - 1) ? n : static_cast<std::size_t>(std::llround(cumulative * n));
            stop = std::clamp(stop, start, n);
            for (std::size_t k = start; k < stop; ++k) {
                labels[k] = r;
            }
            realized[static_cast<std::size_t>(r)] = static_cast<double>(stop - start) / static_cast<double>(n);
            start = stop;
        }

        PatientScan scan;
        scan.patient_id = detail::patient_id(spec.id_prefix, static_cast<int>(i));
        scan.image_dims = spec.image_dims;
        scan.pixel_values.resize(static_cast<Eigen::Index>(n), m);
        scan.pixel_coords.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            scan.pixel_coords[k] = mask[k].coord;
            const int region = labels[k];
            for (int j = 0; j < m; ++j) {
                scan.pixel_values(static_cast<Eigen::Index>(k), j) =
                    spec.region_means(region, j) + offsets[static_cast<std::size_t>(j)] +
                    spec.region_stddevs(region, j) * normal(rng);
            }
        }

        double linear = spec.hazard_intercept;
        for (int r = 0; r < regions; ++r) {
            linear += spec.hazard_weights[static_cast<std::size_t>(r)] * realized[static_cast<std::size_t>(r)];
        }
        const double rate = detail::softplus(linear);
        double time = -std::log(1.0 - unit(rng)) / rate * spec.time_scale;
        bool event = true;
        const double censor_draw = unit(rng);
        const double censor_fraction = 0.05 + 0.95 * unit(rng);
        if (censor_draw < spec.censoring_rate) {
            event = false;
            time *= censor_fraction;
        }
        time = std::max(time, 1e-6);

        out.cohort.survival[i] = SurvivalRecord{scan.patient_id, time, event};
        out.cohort.scans[i] = std::move(scan);
        out.labels[i] = std::move(labels);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Patient-level split
// ---------------------------------------------------------------------------

inline Cohort subset(const Cohort& cohort, const std::vector<std::size_t>& indices) {
    Cohort out;
    out.modality_names = cohort.modality_names;
    out.scans.reserve(indices.size());
    out.survival.reserve(indices.size());
    for (auto i : indices) {
        out.scans.push_back(cohort.scans[i]);
        out.survival.push_back(cohort.survival[i]);
    }
    return out;
}

/// Seeded patient permutation; the first part has round(fraction * N) patients.
inline std::vector<std::size_t> split_indices(std::size_t n, double fraction, std::uint64_t seed) {
    require(fraction > 0.0 && fraction < 1.0, ErrorCode::invalid_argument, "split fraction must lie in (0,1)");
    require(n >= 2, ErrorCode::invalid_argument, "split needs at least 2 patients");
    const auto first = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    require(first > 0 && first < n, ErrorCode::invalid_argument, "split would produce an empty part");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

inline std::pair<Cohort, Cohort> split_cohort(const Cohort& cohort, double fraction, std::uint64_t seed) {
    const auto order = split_indices(cohort.n_patients(), fraction, seed);
    const auto first = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(order.size())));
    const std::vector<std::size_t> a(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(first));
    const std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(first), order.end());
    return {subset(cohort, a), subset(cohort, b)};
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.json + pixels/<id>.csv (row,col,<modalities...>)
// ---------------------------------------------------------------------------

namespace detail {

inline double parse_real(std::string_view field, const std::string& where) {
    double value = 0.0;
    const char* begin = field.data();
    const char* end = field.data() + field.size();
    while (begin < end && *begin == ' ') {
        ++begin;
    }
    const auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end || begin == end) {
        throw Error(ErrorCode::parse_error, where + ": cannot parse '" + std::string(field) + "' as a number");
    }
    return value;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

inline std::string safe_file_stem(const std::string& id) {
    std::string stem = id;
    for (auto& ch : stem) {
        if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.')) {
            ch = '_';
        }
    }
    return stem;
}

}  // namespace detail

inline void write_pixel_csv(const PatientScan& scan, const std::vector<std::string>& modality_names,
                            const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
    out << "row,col";
    for (const auto& name : modality_names) {
        out << ',' << name;
    }
    out << '\n';
    for (std::size_t k = 0; k < scan.pixel_coords.size(); ++k) {
        out << scan.pixel_coords[k].row << ',' << scan.pixel_coords[k].col;
        for (Eigen::Index j = 0; j < scan.pixel_values.cols(); ++j) {
            out << ',' << format_real(scan.pixel_values(static_cast<Eigen::Index>(k), j));
        }
        out << '\n';
    }
}

inline void write_cohort(const Cohort& cohort, const std::filesystem::path& dir) {
    cohort.validate();
    std::filesystem::create_directories(dir / "pixels");
    nlohmann::ordered_json manifest;
    manifest["format"] = "habitat-cohort";
    manifest["version"] = 1;
    manifest["modality_names"] = cohort.modality_names;
    auto patients = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < cohort.scans.size(); ++i) {
        const auto& scan = cohort.scans[i];
        const std::string rel = "pixels/" + detail::safe_file_stem(scan.patient_id) + ".csv";
        write_pixel_csv(scan, cohort.modality_names, dir / rel);
        nlohmann::ordered_json p;
        p["id"] = scan.patient_id;
        p["pixel_file"] = rel;
        p["height"] = scan.image_dims.height;
        p["width"] = scan.image_dims.width;
        p["time"] = cohort.survival[i].time;
        p["event"] = cohort.survival[i].event;
        patients.push_back(std::move(p));
    }
    manifest["patients"] = std::move(patients);
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write manifest in " + dir.string());
    out << manifest.dump(2) << '\n';
}

inline PatientScan read_pixel_csv(const std::filesystem::path& path, const std::string& patient_id, ImageDims dims,
                                  const std::vector<std::string>& modality_names) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::missing_patient_file, "missing patient file " + path.string());
    const std::string file = path.string();
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::parse_error, file + ":1: empty pixel file");
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    const auto header = detail::split_csv(line);
    require(header.size() == modality_names.size() + 2, ErrorCode::modality_mismatch,
            file + ": header has " + std::to_string(header.size() > 2 ? header.size() - 2 : 0) +
                " modality columns, manifest lists " + std::to_string(modality_names.size()));
    require(header[0] == "row" && header[1] == "col", ErrorCode::parse_error,
            file + ":1: header must start with row,col");
    for (std::size_t j = 0; j < modality_names.size(); ++j) {
        require(header[j + 2] == modality_names[j], ErrorCode::modality_mismatch,
                file + ": column '" + std::string(header[j + 2]) + "' does not match modality '" +
                    modality_names[j] + "'");
    }

    PatientScan scan;
    scan.patient_id = patient_id;
    scan.image_dims = dims;
    std::vector<double> values;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const std::string where = file + ":" + std::to_string(line_no);
        const auto fields = detail::split_csv(line);
        require(fields.size() == modality_names.size() + 2, ErrorCode::parse_error,
                where + ": expected " + std::to_string(modality_names.size() + 2) + " fields");
        const double row = detail::parse_real(fields[0], where);
        const double col = detail::parse_real(fields[1], where);
        require(row == std::floor(row) && col == std::floor(col), ErrorCode::parse_error,
                where + ": pixel coordinates must be integers");
        scan.pixel_coords.push_back({static_cast<int>(row), static_cast<int>(col)});
        for (std::size_t j = 0; j < modality_names.size(); ++j) {
            values.push_back(detail::parse_real(fields[j + 2], where));
        }
    }
    const auto n = static_cast<Eigen::Index>(scan.pixel_coords.size());
    const auto m = static_cast<Eigen::Index>(modality_names.size());
    scan.pixel_values = Eigen::Map<const Matrix>(values.data(), n, m);
    return scan;
}

/// Reads a cohort from a directory holding manifest.json, or from the manifest path itself.
inline Cohort read_cohort(const std::filesystem::path& path) {
    const auto manifest_path = std::filesystem::is_directory(path) ? path / "manifest.json" : path;
    const auto root = manifest_path.parent_path();
    std::ifstream in(manifest_path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::malformed_manifest, "cannot open manifest " + manifest_path.string());

    Cohort cohort;
    try {
        const auto manifest = nlohmann::json::parse(in);
        cohort.modality_names = manifest.at("modality_names").get<std::vector<std::string>>();
        for (const auto& p : manifest.at("patients")) {
            const auto id = p.at("id").get<std::string>();
            const ImageDims dims{p.at("height").get<int>(), p.at("width").get<int>()};
            const auto file = root / p.at("pixel_file").get<std::string>();
            if (!std::filesystem::exists(file)) {
                throw Error(ErrorCode::missing_patient_file, "missing patient file " + file.string());
            }
            cohort.scans.push_back(read_pixel_csv(file, id, dims, cohort.modality_names));
            cohort.survival.push_back({id, p.at("time").get<double>(), p.at("event").get<bool>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::malformed_manifest, "malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    require(!cohort.modality_names.empty(), ErrorCode::malformed_manifest, "manifest lists no modalities");
    cohort.validate();
    return cohort;
}

}  // namespace habitat
