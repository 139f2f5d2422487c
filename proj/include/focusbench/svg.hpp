#pragma once

// Minimal line-chart SVG writer. Output is a pure function of the input
// series; each series is repeated as a `<!-- data ... -->` comment so the
// numbers can be scraped back without parsing paths.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "focusbench/focus_metrics.hpp"

namespace focusbench {

struct SvgSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

struct SvgChart {
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<SvgSeries> series;
    int width = 720;
    int height = 440;
};

namespace detail {

inline std::string xml_escape(const std::string& s)
{
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

inline std::string fixed2(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline const char* palette(std::size_t i)
{
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                   "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    return colors[i % (sizeof colors / sizeof *colors)];
}

}  // namespace detail

inline std::string render_svg(const SvgChart& chart)
{
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : chart.series) {
        if (s.x.size() != s.y.size())
            throw Error("svg: series '" + s.label + "' has mismatched x/y lengths");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]))
                continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    if (!(x0 <= x1)) {
        x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;
    }
    if (x1 == x0)
        x1 = x0 + 1.0;
    if (y1 == y0)
        y1 = y0 + 1.0;
    y0 = std::min(y0, 0.0);

    const double left = 70, right = 160, top = 40, bottom = 50;
    const double pw = chart.width - left - right, ph = chart.height - top - bottom;
    auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };
    using detail::fixed2;

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << chart.width << "\" height=\"" << chart.height
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    for (const auto& s : chart.series) {
        o << "<!-- data " << detail::xml_escape(s.label) << " x,y:";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            o << ' ' << format_g9(s.x[i]) << ',' << format_g9(s.y[i]);
        o << " -->\n";
    }
    o << "<rect x=\"0\" y=\"0\" width=\"" << chart.width << "\" height=\"" << chart.height << "\" fill=\"white\"/>\n";
    o << "<text x=\"" << fixed2(left) << "\" y=\"24\" font-size=\"14\">" << detail::xml_escape(chart.title)
      << "</text>\n";
    o << "<rect x=\"" << fixed2(left) << "\" y=\"" << fixed2(top) << "\" width=\"" << fixed2(pw) << "\" height=\""
      << fixed2(ph) << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double xv = x0 + (x1 - x0) * t / 4.0, yv = y0 + (y1 - y0) * t / 4.0;
        o << "<text x=\"" << fixed2(px(xv)) << "\" y=\"" << fixed2(top + ph + 16)
          << "\" text-anchor=\"middle\">" << format_g9(std::round(xv * 1000) / 1000) << "</text>\n";
        o << "<text x=\"" << fixed2(left - 6) << "\" y=\"" << fixed2(py(yv) + 4) << "\" text-anchor=\"end\">"
          << format_g9(std::round(yv * 1000) / 1000) << "</text>\n";
    }
    o << "<text x=\"" << fixed2(left + pw / 2) << "\" y=\"" << fixed2(chart.height - 10.0)
      << "\" text-anchor=\"middle\">" << detail::xml_escape(chart.x_label) << "</text>\n";
    o << "<text transform=\"translate(16," << fixed2(top + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
      << detail::xml_escape(chart.y_label) << "</text>\n";

    for (std::size_t k = 0; k < chart.series.size(); ++k) {
        const auto& s = chart.series[k];
        o << "<polyline fill=\"none\" stroke=\"" << detail::palette(k) << "\" stroke-width=\"1.5\" points=\"";
        bool first = true;
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]))
                continue;
            o << (first ? "" : " ") << fixed2(px(s.x[i])) << ',' << fixed2(py(s.y[i]));
            first = false;
        }
        o << "\"/>\n";
        const double ly = top + 14.0 + 18.0 * static_cast<double>(k);
        o << "<line x1=\"" << fixed2(left + pw + 10) << "\" y1=\"" << fixed2(ly - 4) << "\" x2=\""
          << fixed2(left + pw + 30) << "\" y2=\"" << fixed2(ly - 4) << "\" stroke=\"" << detail::palette(k)
          << "\" stroke-width=\"2\"/>\n";
        o << "<text x=\"" << fixed2(left + pw + 36) << "\" y=\"" << fixed2(ly) << "\">" << detail::xml_escape(s.label)
          << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

}  // namespace focusbench
