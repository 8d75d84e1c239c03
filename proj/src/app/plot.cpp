#include "flowforge/app/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "flowforge/errors.hpp"

namespace flowforge::app {

namespace {

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

std::string num(double v) { return fmt("%.2f", v); }

// Dark blue to yellow ramp.
std::string shade(double t) {
    t = std::clamp(t, 0.0, 1.0);
    const int r = int(std::lround(20 + t * (250 - 20)));
    const int g = int(std::lround(30 + t * (220 - 30)));
    const int b = int(std::lround(90 + t * (60 - 90)));
    char buf[16];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
    return buf;
}

std::string path_of(const Polyline& line, double s, double height_px) {
    std::string d;
    for (std::size_t i = 0; i < line.points.size(); ++i) {
        const double x = (line.points[i][0] + 0.5) * s;
        const double y = height_px - (line.points[i][1] + 0.5) * s;
        d += (i == 0 ? "M" : " L") + num(x) + "," + num(y);
    }
    return d;
}

}  // namespace

std::string render_svg(const VectorField& field, const std::vector<Polyline>& inputs,
                       const std::vector<Polyline>& traced, const PlotOptions& opts) {
    const int w = field.width(), h = field.height();
    const double s = opts.cell_px;
    const double wp = w * s, hp = h * s;
    const int stride = opts.arrow_stride > 0 ? opts.arrow_stride : std::max(1, std::max(w, h) / 32);

    double vmax = 0.0;
    for (std::size_t i = 0; i < field.cells(); ++i) vmax = std::max(vmax, std::hypot(field.u()[i], field.v()[i]));

    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(wp) + "\" height=\"" + num(hp) +
           "\" viewBox=\"0 0 " + num(wp) + " " + num(hp) + "\">\n";
    if (!opts.title.empty()) out += "<title>" + opts.title + "</title>\n";
    out += "<g shape-rendering=\"crispEdges\">\n";
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const Vec2 v = field.at(x, y);
            const double t = vmax > 0.0 ? std::hypot(v[0], v[1]) / vmax : 0.0;
            out += "<rect x=\"" + num(x * s) + "\" y=\"" + num(hp - (y + 1) * s) + "\" width=\"" + num(s) +
                   "\" height=\"" + num(s) + "\" fill=\"" + shade(t) + "\"/>\n";
        }
    }
    out += "</g>\n<g stroke=\"#dddddd\" stroke-width=\"1\" fill=\"none\">\n";
    const double arrow_len = 0.45 * s * stride;
    for (int y = 0; y < h; y += stride) {
        for (int x = 0; x < w; x += stride) {
            const Vec2 v = field.at(x, y);
            const double m = std::hypot(v[0], v[1]);
            if (vmax <= 0.0 || m < 1e-3 * vmax) continue;
            const double len = arrow_len * m / vmax;
            const double dx = v[0] / m, dy = -v[1] / m;
            const double cx = (x + 0.5) * s, cy = hp - (y + 0.5) * s;
            const double x0 = cx - 0.5 * len * dx, y0 = cy - 0.5 * len * dy;
            const double x1 = cx + 0.5 * len * dx, y1 = cy + 0.5 * len * dy;
            const double hl = 0.35 * len;
            const double lx = x1 - hl * (dx * 0.866 - dy * 0.5), ly = y1 - hl * (dy * 0.866 + dx * 0.5);
            const double rx = x1 - hl * (dx * 0.866 + dy * 0.5), ry = y1 - hl * (dy * 0.866 - dx * 0.5);
            out += "<path d=\"M" + num(x0) + "," + num(y0) + " L" + num(x1) + "," + num(y1) + " M" + num(lx) + "," +
                   num(ly) + " L" + num(x1) + "," + num(y1) + " L" + num(rx) + "," + num(ry) + "\"/>\n";
        }
    }
    out += "</g>\n<g stroke=\"#ffffff\" stroke-width=\"1.2\" fill=\"none\">\n";
    for (const auto& l : traced) out += "<path d=\"" + path_of(l, s, hp) + "\"/>\n";
    out += "</g>\n<g stroke=\"#000000\" stroke-width=\"3\" fill=\"none\" stroke-linecap=\"round\">\n";
    for (const auto& l : inputs) out += "<path d=\"" + path_of(l, s, hp) + "\"/>\n";
    out += "</g>\n</svg>\n";
    return out;
}

void write_svg(const std::filesystem::path& path, const VectorField& field, const std::vector<Polyline>& inputs,
               const std::vector<Polyline>& traced, const PlotOptions& opts) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << render_svg(field, inputs, traced, opts);
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace flowforge::app
