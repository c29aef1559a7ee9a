#pragma once

#include "habitat/bayesopt.hpp"
#include "habitat/core.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace habitat {

struct KmSeries {
    std::string group;
    std::vector<double> times;
    std::vector<double> survival;
};

struct KmFile {
    double chi_square = 0.0;
    double p_value = 1.0;
    std::vector<KmSeries> series;
};

inline KmFile read_km_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path.string());
    KmFile out;
    std::string line;
    std::getline(in, line);
    require(std::sscanf(line.c_str(), "# chi_square=%lf p_value=%lf", &out.chi_square, &out.p_value) == 2,
            ErrorCode::parse_error, path.string() + ": missing log-rank comment line");
    std::getline(in, line);
    require(line == "time,survival,at_risk,group", ErrorCode::parse_error, path.string() + ": unexpected header");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string t, s, n, g;
        std::getline(ss, t, ',');
        std::getline(ss, s, ',');
        std::getline(ss, n, ',');
        std::getline(ss, g, ',');
        require(!g.empty(), ErrorCode::parse_error, path.string() + ": short row");
        if (out.series.empty() || out.series.back().group != g) out.series.push_back({g, {}, {}});
        out.series.back().times.push_back(std::strtod(t.c_str(), nullptr));
        out.series.back().survival.push_back(std::strtod(s.c_str(), nullptr));
    }
    return out;
}

namespace detail {

inline std::string fixed(double v) {
    char buffer[32];
    std::snprintf(buffer, sizeof(buffer), "%.2f", v);
    return buffer;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

constexpr double panel_w = 440.0;
constexpr double panel_h = 280.0;
constexpr double margin_l = 56.0;
constexpr double margin_r = 16.0;
constexpr double margin_t = 30.0;
constexpr double margin_b = 40.0;

struct Frame {
    double x0, y0;  // panel origin
    double xmin, xmax, ymin, ymax;

    double px(double x) const {
        const double span = xmax > xmin ? xmax - xmin : 1.0;
        return x0 + margin_l + (x - xmin) / span * (panel_w - margin_l - margin_r);
    }
    double py(double y) const {
        const double span = ymax > ymin ? ymax - ymin : 1.0;
        return y0 + panel_h - margin_b - (y - ymin) / span * (panel_h - margin_t - margin_b);
    }
};

inline void axes(std::ostringstream& svg, const Frame& f, const std::string& title, const std::string& xlabel) {
    svg << "<g>\n";
    svg << "<text x=\"" << fixed(f.x0 + panel_w / 2) << "\" y=\"" << fixed(f.y0 + 18)
        << "\" text-anchor=\"middle\" font-size=\"13\">" << xml_escape(title) << "</text>\n";
    svg << "<rect x=\"" << fixed(f.x0 + margin_l) << "\" y=\"" << fixed(f.y0 + margin_t) << "\" width=\""
        << fixed(panel_w - margin_l - margin_r) << "\" height=\"" << fixed(panel_h - margin_t - margin_b)
        << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double yv = f.ymin + (f.ymax - f.ymin) * k / 4.0;
        svg << "<text x=\"" << fixed(f.x0 + margin_l - 4) << "\" y=\"" << fixed(f.py(yv) + 4)
            << "\" text-anchor=\"end\" font-size=\"10\">" << fixed(yv) << "</text>\n";
        const double xv = f.xmin + (f.xmax - f.xmin) * k / 4.0;
        svg << "<text x=\"" << fixed(f.px(xv)) << "\" y=\"" << fixed(f.y0 + panel_h - margin_b + 14)
            << "\" text-anchor=\"middle\" font-size=\"10\">" << fixed(xv) << "</text>\n";
    }
    svg << "<text x=\"" << fixed(f.x0 + panel_w / 2) << "\" y=\"" << fixed(f.y0 + panel_h - 6)
        << "\" text-anchor=\"middle\" font-size=\"11\">" << xml_escape(xlabel) << "</text>\n";
    svg << "</g>\n";
}

/// Polyline through finite points; NaN values break the line.
inline void polyline(std::ostringstream& svg, const Frame& f, const std::vector<double>& xs,
                     const std::vector<double>& ys, const std::string& color, bool dashed) {
    std::vector<std::string> segments(1);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (!std::isfinite(ys[i])) {
            if (!segments.back().empty()) segments.emplace_back();
            continue;
        }
        segments.back() += fixed(f.px(xs[i])) + "," + fixed(f.py(ys[i])) + " ";
    }
    for (const auto& s : segments) {
        if (s.empty()) continue;
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\""
            << (dashed ? " stroke-dasharray=\"4,3\"" : "") << " points=\"" << s << "\"/>\n";
    }
}

inline void legend(std::ostringstream& svg, const Frame& f, const std::vector<std::pair<std::string, std::string>>& items) {
    double y = f.y0 + margin_t + 12;
    for (const auto& [label, color] : items) {
        const double x = f.x0 + panel_w - margin_r - 92;
        svg << "<line x1=\"" << fixed(x) << "\" y1=\"" << fixed(y - 4) << "\" x2=\"" << fixed(x + 16) << "\" y2=\""
            << fixed(y - 4) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        svg << "<text x=\"" << fixed(x + 20) << "\" y=\"" << fixed(y) << "\" font-size=\"10\">" << xml_escape(label)
            << "</text>\n";
        y += 13;
    }
}

inline std::string svg_document(double width, double height, const std::string& body) {
    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed(width) << "\" height=\"" << fixed(height)
        << "\" viewBox=\"0 0 " << fixed(width) << ' ' << fixed(height) << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << body;
    svg << "</svg>\n";
    return svg.str();
}

inline std::string bo_panels(const std::vector<std::pair<std::string, BoTrace>>& runs, double y0) {
    std::ostringstream svg;
    for (std::size_t r = 0; r < runs.size(); ++r) {
        const auto& steps = runs[r].second.steps;
        std::vector<double> x, ls, lp, l, best;
        for (const auto& s : steps) {
            x.push_back(s.index);
            ls.push_back(s.value.L_s);
            lp.push_back(s.value.L_p);
            l.push_back(s.failed ? std::numeric_limits<double>::quiet_NaN() : s.value.L);
            best.push_back(s.best);
        }
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (const auto* v : {&ls, &lp, &l, &best})
            for (double y : *v)
                if (std::isfinite(y)) {
                    lo = std::min(lo, y);
                    hi = std::max(hi, y);
                }
        if (!std::isfinite(lo)) {
            lo = 0.0;
            hi = 1.0;
        }
        if (hi - lo < 1e-9) hi = lo + 1.0;
        const Frame f{static_cast<double>(r) * panel_w, y0, 0.0, std::max(1.0, x.empty() ? 1.0 : x.back()), lo, hi};
        axes(svg, f, runs[r].first, "BO step");
        polyline(svg, f, x, ls, "#1f77b4", false);
        polyline(svg, f, x, lp, "#ff7f0e", false);
        polyline(svg, f, x, l, "#2ca02c", false);
        polyline(svg, f, x, best, "#000000", true);
        legend(svg, f, {{"L_s", "#1f77b4"}, {"L_p", "#ff7f0e"}, {"L", "#2ca02c"}, {"best", "#000000"}});
    }
    return svg.str();
}

inline std::string km_panels(const std::vector<std::pair<std::string, KmFile>>& files, double y0) {
    std::ostringstream svg;
    for (std::size_t k = 0; k < files.size(); ++k) {
        const auto& km = files[k].second;
        double tmax = 1.0;
        for (const auto& s : km.series)
            for (double t : s.times) tmax = std::max(tmax, t);
        const Frame f{static_cast<double>(k) * panel_w, y0, 0.0, tmax, 0.0, 1.0};
        char title[160];
        std::snprintf(title, sizeof(title), "%s (p = %.4g)", files[k].first.c_str(), km.p_value);
        axes(svg, f, title, "time");
        std::vector<std::pair<std::string, std::string>> items;
        for (const auto& s : km.series) {
            const std::string color = s.group == "high" ? "#d62728" : "#1f77b4";
            // Step function: horizontal then vertical.
            std::vector<double> xs, ys;
            for (std::size_t i = 0; i < s.times.size(); ++i) {
                if (i > 0) {
                    xs.push_back(s.times[i]);
                    ys.push_back(s.survival[i - 1]);
                }
                xs.push_back(s.times[i]);
                ys.push_back(s.survival[i]);
            }
            polyline(svg, f, xs, ys, color, false);
            items.emplace_back(s.group + " risk", color);
        }
        legend(svg, f, items);
    }
    return svg.str();
}

}  // namespace detail

inline std::string render_bo_svg(const std::vector<std::pair<std::string, BoTrace>>& runs) {
    const double w = std::max<std::size_t>(1, runs.size()) * detail::panel_w;
    return detail::svg_document(w, detail::panel_h, detail::bo_panels(runs, 0.0));
}

inline std::string render_km_svg(const std::vector<std::pair<std::string, KmFile>>& files) {
    const double w = std::max<std::size_t>(1, files.size()) * detail::panel_w;
    return detail::svg_document(w, detail::panel_h, detail::km_panels(files, 0.0));
}

/// BO trace row above the KM row.
inline std::string render_combined_svg(const std::vector<std::pair<std::string, BoTrace>>& runs,
                                       const std::vector<std::pair<std::string, KmFile>>& files) {
    const double w = std::max<std::size_t>({1, runs.size(), files.size()}) * detail::panel_w;
    return detail::svg_document(w, 2 * detail::panel_h,
                                detail::bo_panels(runs, 0.0) + detail::km_panels(files, detail::panel_h));
}

struct RunArtifacts {
    std::vector<std::pair<std::string, BoTrace>> traces;
    std::vector<std::pair<std::string, KmFile>> km;
};

/// Collects trace.csv and km_*.csv from run directories; titles carry alpha from config.json.
inline RunArtifacts collect_run_artifacts(const std::vector<std::filesystem::path>& run_dirs) {
    RunArtifacts out;
    for (const auto& dir : run_dirs) {
        require(std::filesystem::exists(dir / "trace.csv"), ErrorCode::invalid_argument,
                "no trace.csv in " + dir.string());
        std::string label = dir.filename().string();
        if (label.empty()) label = dir.parent_path().filename().string();
        if (std::ifstream cfg(dir / "config.json"); cfg) {
            try {
                const auto j = nlohmann::json::parse(cfg);
                if (j.contains("alpha")) {
                    char buffer[64];
                    std::snprintf(buffer, sizeof(buffer), "alpha = %g", j.at("alpha").get<double>());
                    label = buffer;
                }
            } catch (const nlohmann::json::exception& e) {
                throw Error(ErrorCode::parse_error, (dir / "config.json").string() + ": " + e.what());
            }
        }
        out.traces.emplace_back(label, read_trace_csv(dir / "trace.csv"));
        for (const char* part : {"train", "test"}) {
            const auto path = dir / (std::string("km_") + part + ".csv");
            if (std::filesystem::exists(path)) out.km.emplace_back(label + ", " + part, read_km_csv(path));
        }
    }
    return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
    out << text;
}

/// Writes bo_trace.svg and km_curves.svg into out_dir.
inline void write_report(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out_dir) {
    require(!run_dirs.empty(), ErrorCode::invalid_argument, "report needs at least one run directory");
    const auto artifacts = collect_run_artifacts(run_dirs);
    std::filesystem::create_directories(out_dir);
    write_text(out_dir / "bo_trace.svg", render_bo_svg(artifacts.traces));
    write_text(out_dir / "km_curves.svg", render_km_svg(artifacts.km));
}

}  // namespace habitat
