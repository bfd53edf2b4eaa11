#pragma once

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include "cstf/tensor.hpp"

namespace cstf::harness {

/// Minimal SVG line chart: one polyline with axes and tick labels. Enough
/// for PR curves, loss traces, and sweep summaries without a plotting
/// dependency.
inline void write_svg_chart(const std::string& path, const std::string& title,
                            const std::string& x_label, const std::string& y_label,
                            const std::vector<std::pair<double, double>>& points) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write plot '" + path + "'");

    const int width = 480, height = 360, margin = 56;
    double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
    if (!points.empty()) {
        x_min = x_max = points[0].first;
        y_min = y_max = points[0].second;
        for (const auto& [x, y] : points) {
            x_min = std::min(x_min, x);
            x_max = std::max(x_max, x);
            y_min = std::min(y_min, y);
            y_max = std::max(y_max, y);
        }
        if (x_max == x_min) x_max = x_min + 1;
        if (y_max == y_min) y_max = y_min + 1;
    }
    auto px = [&](double x) {
        return margin + (x - x_min) / (x_max - x_min) * (width - 2 * margin);
    };
    auto py = [&](double y) {
        return height - margin - (y - y_min) / (y_max - y_min) * (height - 2 * margin);
    };

    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
        << "'>\n";
    out << "<rect width='100%' height='100%' fill='white'/>\n";
    out << "<text x='" << width / 2 << "' y='20' text-anchor='middle' font-size='14'>" << title
        << "</text>\n";
    out << "<line x1='" << margin << "' y1='" << height - margin << "' x2='" << width - margin
        << "' y2='" << height - margin << "' stroke='black'/>\n";
    out << "<line x1='" << margin << "' y1='" << margin << "' x2='" << margin << "' y2='"
        << height - margin << "' stroke='black'/>\n";
    out << "<text x='" << width / 2 << "' y='" << height - 12
        << "' text-anchor='middle' font-size='12'>" << x_label << "</text>\n";
    out << "<text x='14' y='" << height / 2 << "' font-size='12' transform='rotate(-90 14 "
        << height / 2 << ")' text-anchor='middle'>" << y_label << "</text>\n";
    for (int t = 0; t <= 4; ++t) {
        const double fx = x_min + (x_max - x_min) * t / 4.0;
        const double fy = y_min + (y_max - y_min) * t / 4.0;
        out << "<text x='" << px(fx) << "' y='" << height - margin + 16
            << "' text-anchor='middle' font-size='10'>" << fx << "</text>\n";
        out << "<text x='" << margin - 6 << "' y='" << py(fy) + 4
            << "' text-anchor='end' font-size='10'>" << fy << "</text>\n";
    }
    if (!points.empty()) {
        out << "<polyline fill='none' stroke='steelblue' stroke-width='1.5' points='";
        for (const auto& [x, y] : points) out << px(x) << "," << py(y) << " ";
        out << "'/>\n";
        for (const auto& [x, y] : points) {
            out << "<circle cx='" << px(x) << "' cy='" << py(y) << "' r='2.4' fill='steelblue'/>\n";
        }
    }
    out << "</svg>\n";
}

}  // namespace cstf::harness
