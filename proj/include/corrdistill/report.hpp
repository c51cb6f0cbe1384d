#ifndef CORRDISTILL_REPORT_HPP
#define CORRDISTILL_REPORT_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "corrdistill/binary_io.hpp"
#include "corrdistill/error.hpp"
#include "corrdistill/pipeline.hpp"

namespace corrdistill {

// Concatenates rows from several sweep CSVs, sorted by
// (method, probe, dim, seed, split). Exact duplicates are dropped.
inline std::vector<MetricsRow> merge_metrics(const std::vector<fs::path>& csvs) {
    std::vector<MetricsRow> rows;
    for (const auto& p : csvs) {
        auto r = read_metrics_csv(p);
        rows.insert(rows.end(), r.begin(), r.end());
    }
    const auto key = [](const MetricsRow& r) {
        return std::tie(r.method, r.probe, r.representation_dim, r.seed, r.split, r.accuracy, r.miou);
    };
    std::sort(rows.begin(), rows.end(), [&](const MetricsRow& a, const MetricsRow& b) { return key(a) < key(b); });
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    return rows;
}

struct VarianceCurve {
    std::string name;
    std::vector<double> cumulative;  // cumulative ratio per component
};

inline VarianceCurve read_variance_csv(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError(FormatErrorKind::io, "cannot open variance CSV '" + path.string() + "'");
    std::string line;
    if (!std::getline(is, line) || line != "component_index,ratio,cumulative_ratio") {
        throw FormatError(FormatErrorKind::parse, "variance CSV '" + path.string() + "': bad header");
    }
    VarianceCurve c{path.stem().string(), {}};
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto last = line.rfind(',');
        if (last == std::string::npos) throw FormatError(FormatErrorKind::parse, "variance CSV: bad line '" + line + "'");
        try {
            c.cumulative.push_back(std::stod(line.substr(last + 1)));
        } catch (const std::exception&) {
            throw FormatError(FormatErrorKind::parse, "variance CSV: bad number in '" + line + "'");
        }
    }
    if (c.cumulative.empty()) throw FormatError(FormatErrorKind::parse, "variance CSV '" + path.string() + "' is empty");
    return c;
}

namespace svg {

struct Series {
    std::string label;
    std::vector<std::pair<double, double>> points;
};

inline const char* color(std::size_t i) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
    return palette[i % 8];
}

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

// Plain line chart. With log_x the x axis is log2-scaled and ticks sit on data x values.
inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series, bool log_x) {
    const double W = 640, H = 420, L = 70, R = 160, T = 40, B = 60;
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    std::set<double> xs;
    const auto tx = [&](double x) { return log_x ? std::log2(x) : x; };
    for (const auto& s : series) {
        for (auto [x, y] : s.points) {
            xs.insert(x);
            x0 = std::min(x0, tx(x));
            x1 = std::max(x1, tx(x));
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    }
    if (xs.empty()) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
    y0 = std::min(y0, 0.0);
    y1 = std::max(y1, y0 + 1e-6);
    const double pad = 0.05 * (y1 - y0);
    y1 += pad;
    const auto px = [&](double x) { return L + (tx(x) - x0) / (x1 - x0) * (W - L - R); };
    const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" + num(H) + "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<text x=\"" + num(W / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" + title + "</text>\n";
    out += "<line x1=\"" + num(L) + "\" y1=\"" + num(H - B) + "\" x2=\"" + num(W - R) + "\" y2=\"" + num(H - B) +
           "\" stroke=\"black\"/>\n";
    out += "<line x1=\"" + num(L) + "\" y1=\"" + num(T) + "\" x2=\"" + num(L) + "\" y2=\"" + num(H - B) +
           "\" stroke=\"black\"/>\n";
    if (log_x) {
        for (double x : xs) {
            out += "<text x=\"" + num(px(x)) + "\" y=\"" + num(H - B + 18) + "\" text-anchor=\"middle\" font-size=\"11\">" +
                   tick(x) + "</text>\n";
        }
    } else {
        for (int i = 0; i <= 4; ++i) {
            const double x = x0 + (x1 - x0) * i / 4.0;
            out += "<text x=\"" + num(px(x)) + "\" y=\"" + num(H - B + 18) + "\" text-anchor=\"middle\" font-size=\"11\">" +
                   tick(x) + "</text>\n";
        }
    }
    for (int i = 0; i <= 4; ++i) {
        const double y = y0 + (y1 - y0) * i / 4.0;
        out += "<text x=\"" + num(L - 6) + "\" y=\"" + num(py(y) + 4) + "\" text-anchor=\"end\" font-size=\"11\">" +
               num(y) + "</text>\n";
    }
    out += "<text x=\"" + num((L + W - R) / 2) + "\" y=\"" + num(H - 15) + "\" text-anchor=\"middle\" font-size=\"13\">" +
           xlabel + "</text>\n";
    out += "<text x=\"18\" y=\"" + num((T + H - B) / 2) + "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 " +
           num((T + H - B) / 2) + ")\">" + ylabel + "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto& s = series[i];
        std::string pts;
        for (auto [x, y] : s.points) pts += num(px(x)) + "," + num(py(y)) + " ";
        if (!pts.empty()) pts.pop_back();
        out += "<polyline fill=\"none\" stroke=\"" + std::string(color(i)) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
        for (auto [x, y] : s.points) {
            out += "<circle cx=\"" + num(px(x)) + "\" cy=\"" + num(py(y)) + "\" r=\"3\" fill=\"" + color(i) + "\"/>\n";
        }
        const double ly = T + 10 + 18.0 * static_cast<double>(i);
        out += "<line x1=\"" + num(W - R + 12) + "\" y1=\"" + num(ly) + "\" x2=\"" + num(W - R + 32) + "\" y2=\"" + num(ly) +
               "\" stroke=\"" + color(i) + "\" stroke-width=\"2\"/>\n";
        out += "<text x=\"" + num(W - R + 38) + "\" y=\"" + num(ly + 4) + "\" font-size=\"12\">" + s.label + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

inline void write(const fs::path& path, const std::string& text) {
    auto os = binio::open_out(path);
    os << text;
    binio::finish(os, path);
}

}  // namespace svg

// Writes <out>/<probe>_<metric>.svg for every probe present (metric is
// accuracy or miou), one line per method, averaged over seeds.
inline std::vector<fs::path> write_sweep_plots(const fs::path& out_dir, const std::vector<MetricsRow>& rows) {
    std::map<std::string, std::map<std::string, std::map<long long, std::pair<double, double>>>> sums;
    std::map<std::string, std::map<std::string, std::map<long long, int>>> counts;
    for (const auto& r : rows) {
        auto& s = sums[r.probe][r.method][r.representation_dim];
        s.first += r.accuracy;
        s.second += r.miou;
        ++counts[r.probe][r.method][r.representation_dim];
    }
    std::vector<fs::path> written;
    for (const auto& [probe, methods] : sums) {
        for (const bool is_miou : {false, true}) {
            std::vector<svg::Series> series;
            for (const auto& [method, dims] : methods) {
                svg::Series s{method, {}};
                for (const auto& [d, v] : dims) {
                    const double n = counts[probe][method][d];
                    s.points.emplace_back(static_cast<double>(d), (is_miou ? v.second : v.first) / n);
                }
                series.push_back(std::move(s));
            }
            const std::string metric = is_miou ? "miou" : "accuracy";
            const fs::path p = out_dir / (probe + "_" + metric + ".svg");
            svg::write(p, svg::line_chart(probe + " probe " + (is_miou ? "mIoU" : "accuracy") + " vs. dimension",
                                          "embedding dimension (log scale)", is_miou ? "mIoU" : "accuracy", series, true));
            written.push_back(p);
        }
    }
    return written;
}

// Cumulative explained variance against component index / D.
inline fs::path write_variance_plot(const fs::path& path, const std::vector<VarianceCurve>& curves) {
    std::vector<svg::Series> series;
    for (const auto& c : curves) {
        svg::Series s{c.name, {{0.0, 0.0}}};
        const double n = static_cast<double>(c.cumulative.size());
        for (std::size_t k = 0; k < c.cumulative.size(); ++k) s.points.emplace_back((k + 1) / n, c.cumulative[k]);
        series.push_back(std::move(s));
    }
    svg::write(path, svg::line_chart("cumulative explained variance", "component index / D", "cumulative ratio", series, false));
    return path;
}

}  // namespace corrdistill

#endif  // CORRDISTILL_REPORT_HPP
