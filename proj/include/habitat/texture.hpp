#pragma once

#include "habitat/clustering.hpp"
#include "habitat/core.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace habitat {

/// Label image: cell value label+1 inside the mask, 0 for background.
struct LabelGrid {
    int height = 0;
    int width = 0;
    std::vector<int> cells;

    LabelGrid() = default;
    LabelGrid(int h, int w) : height(h), width(w), cells(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), 0) {}

    int at(int r, int c) const { return cells[static_cast<std::size_t>(r) * static_cast<std::size_t>(width) + c]; }
    int& at(int r, int c) { return cells[static_cast<std::size_t>(r) * static_cast<std::size_t>(width) + c]; }
    bool inside(int r, int c) const { return r >= 0 && c >= 0 && r < height && c < width; }
};

inline LabelGrid rasterize(const LabelMap& map, ImageDims dims) {
    require(map.coords.size() == map.labels.size(), ErrorCode::invalid_argument,
            "label map has mismatched coordinates and labels");
    LabelGrid grid(dims.height, dims.width);
    for (std::size_t k = 0; k < map.labels.size(); ++k) {
        const auto& c = map.coords[k];
        require(grid.inside(c.row, c.col), ErrorCode::invalid_argument, "label map coordinate outside image");
        require(map.labels[k] >= 0, ErrorCode::invalid_argument, "negative label");
        grid.at(c.row, c.col) = map.labels[k] + 1;
    }
    return grid;
}

/// Inverse of rasterize over the in-mask cells, row-major.
inline LabelMap flatten(const LabelGrid& grid, const std::string& patient_id, int eta) {
    LabelMap map;
    map.patient_id = patient_id;
    map.eta = eta;
    for (int r = 0; r < grid.height; ++r) {
        for (int c = 0; c < grid.width; ++c) {
            if (grid.at(r, c) > 0) {
                map.coords.push_back({r, c});
                map.labels.push_back(grid.at(r, c) - 1);
            }
        }
    }
    return map;
}

struct Offset {
    int dr;
    int dc;
};

inline const std::vector<Offset>& default_glcm_offsets() {
    static const std::vector<Offset> offsets{{0, 1}, {1, 0}, {1, 1}, {1, -1}};
    return offsets;
}

/// Symmetric co-occurrence of in-mask levels over the given offsets, normalized to sum 1.
inline Matrix glcm(const LabelGrid& grid, int n_levels, const std::vector<Offset>& offsets = default_glcm_offsets()) {
    Matrix p = Matrix::Zero(n_levels, n_levels);
    double total = 0.0;
    for (int r = 0; r < grid.height; ++r) {
        for (int c = 0; c < grid.width; ++c) {
            const int a = grid.at(r, c);
            if (a == 0) continue;
            for (const auto& o : offsets) {
                const int r2 = r + o.dr;
                const int c2 = c + o.dc;
                if (!grid.inside(r2, c2)) continue;
                const int b = grid.at(r2, c2);
                if (b == 0) continue;
                require(a <= n_levels && b <= n_levels, ErrorCode::invalid_argument, "glcm: level exceeds n_levels");
                p(a - 1, b - 1) += 1.0;
                p(b - 1, a - 1) += 1.0;
                total += 2.0;
            }
        }
    }
    require(total > 0.0, ErrorCode::degenerate, "glcm: no co-occurring in-mask pairs");
    return p / total;
}

enum class RunDirection { horizontal, vertical };

/// Counts of maximal runs: entry (level-1, length-1). Runs stop at background and level changes.
inline Matrix glrlm(const LabelGrid& grid, int n_levels,
                    const std::vector<RunDirection>& directions = {RunDirection::horizontal, RunDirection::vertical}) {
    require(grid.height > 0 && grid.width > 0, ErrorCode::empty_input, "glrlm on empty grid");
    const int max_len = std::max(grid.height, grid.width);
    Matrix runs = Matrix::Zero(n_levels, max_len);
    auto scan_line = [&](int count, auto&& cell) {
        int level = 0;
        int length = 0;
        for (int k = 0; k <= count; ++k) {
            const int v = k < count ? cell(k) : 0;
            if (v == level && v != 0) {
                ++length;
                continue;
            }
            if (level != 0) {
                require(level <= n_levels, ErrorCode::invalid_argument, "glrlm: level exceeds n_levels");
                runs(level - 1, length - 1) += 1.0;
            }
            level = v;
            length = v != 0 ? 1 : 0;
        }
    };
    for (const auto dir : directions) {
        if (dir == RunDirection::horizontal) {
            for (int r = 0; r < grid.height; ++r) scan_line(grid.width, [&](int c) { return grid.at(r, c); });
        } else {
            for (int c = 0; c < grid.width; ++c) scan_line(grid.height, [&](int r) { return grid.at(r, c); });
        }
    }
    return runs;
}

namespace detail {

inline double run_total(const Matrix& runs) {
    const double n = runs.sum();
    require(n >= 1.0, ErrorCode::degenerate, "run-length features need at least one run");
    return n;
}

}  // namespace detail

/// Long run emphasis: sum P(i,j) j^2 / N_r.
inline double feature_lre(const Matrix& runs) {
    const double nr = detail::run_total(runs);
    double s = 0.0;
    for (Eigen::Index i = 0; i < runs.rows(); ++i)
        for (Eigen::Index j = 0; j < runs.cols(); ++j) s += runs(i, j) * static_cast<double>((j + 1) * (j + 1));
    return s / nr;
}

/// Run variance of run length under p = P / N_r.
inline double feature_rv(const Matrix& runs) {
    const double nr = detail::run_total(runs);
    double mu = 0.0;
    for (Eigen::Index i = 0; i < runs.rows(); ++i)
        for (Eigen::Index j = 0; j < runs.cols(); ++j) mu += runs(i, j) / nr * static_cast<double>(j + 1);
    double var = 0.0;
    for (Eigen::Index i = 0; i < runs.rows(); ++i)
        for (Eigen::Index j = 0; j < runs.cols(); ++j) {
            const double d = static_cast<double>(j + 1) - mu;
            var += runs(i, j) / nr * d * d;
        }
    return var;
}

/// Run length non-uniformity: sum_j (sum_i P(i,j))^2 / N_r.
inline double feature_rln(const Matrix& runs) {
    const double nr = detail::run_total(runs);
    double s = 0.0;
    for (Eigen::Index j = 0; j < runs.cols(); ++j) {
        const double col = runs.col(j).sum();
        s += col * col;
    }
    return s / nr;
}

inline double feature_joint_energy(const Matrix& p) { return p.array().square().sum(); }

/// Mutual information of the GLCM divided by its joint entropy (natural log); 0 when the entropy is 0.
inline double feature_rmi(const Matrix& p) {
    const Vector rows = p.rowwise().sum();
    const Eigen::RowVectorXd cols = p.colwise().sum();
    double joint_entropy = 0.0;
    double mutual = 0.0;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        for (Eigen::Index j = 0; j < p.cols(); ++j) {
            const double v = p(i, j);
            if (v <= 0.0) continue;
            joint_entropy -= v * std::log(v);
            mutual += v * std::log(v / (rows(i) * cols(j)));
        }
    }
    if (joint_entropy <= 0.0) {
        return 0.0;
    }
    return std::clamp(mutual / joint_entropy, 0.0, 1.0);
}

struct PatientFeatureVector {
    std::string patient_id;
    double lre = 0.0;
    double rmi = 0.0;
    double joint_energy = 0.0;
    double run_variance = 0.0;
    double run_length_nonuniformity = 0.0;
    std::vector<double> region_proportions;

    /// Texture features followed by proportions; the layout used for risk grouping.
    std::vector<double> as_vector() const {
        std::vector<double> v{lre, rmi, joint_energy, run_variance, run_length_nonuniformity};
        v.insert(v.end(), region_proportions.begin(), region_proportions.end());
        return v;
    }

    friend bool operator==(const PatientFeatureVector&, const PatientFeatureVector&) = default;
};

inline PatientFeatureVector extract_features(const LabelMap& map, ImageDims dims, int eta) {
    require(!map.labels.empty(), ErrorCode::empty_input, "extract_features on empty label map " + map.patient_id);
    const auto grid = rasterize(map, dims);
    PatientFeatureVector f;
    f.patient_id = map.patient_id;
    f.region_proportions.assign(static_cast<std::size_t>(eta), 0.0);
    for (int l : map.labels) {
        require(l < eta, ErrorCode::invalid_argument, "label exceeds eta");
        f.region_proportions[static_cast<std::size_t>(l)] += 1.0;
    }
    for (auto& p : f.region_proportions) {
        p /= static_cast<double>(map.labels.size());
    }
    const auto runs = glrlm(grid, eta);
    f.lre = feature_lre(runs);
    f.run_variance = feature_rv(runs);
    f.run_length_nonuniformity = feature_rln(runs);
    // A single isolated pixel has no neighbours; treat it as a one-entry co-occurrence.
    Matrix co;
    try {
        co = glcm(grid, eta);
    } catch (const Error&) {
        co = Matrix::Zero(eta, eta);
        co(map.labels.front(), map.labels.front()) = 1.0;
    }
    f.joint_energy = feature_joint_energy(co);
    f.rmi = feature_rmi(co);
    return f;
}

inline void write_feature_table(const std::vector<PatientFeatureVector>& features, int eta,
                                const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
    out << "patient_id,lre,rmi,joint_energy,run_variance,rln";
    for (int k = 0; k < eta; ++k) out << ",prop_" << k;
    out << '\n';
    for (const auto& f : features) {
        out << f.patient_id << ',' << format_real(f.lre) << ',' << format_real(f.rmi) << ','
            << format_real(f.joint_energy) << ',' << format_real(f.run_variance) << ','
            << format_real(f.run_length_nonuniformity);
        for (double p : f.region_proportions) out << ',' << format_real(p);
        out << '\n';
    }
}

inline void write_label_map(const LabelMap& map, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
    out << "row,col,label\n";
    for (std::size_t k = 0; k < map.labels.size(); ++k) {
        out << map.coords[k].row << ',' << map.coords[k].col << ',' << map.labels[k] << '\n';
    }
}

}  // namespace habitat
