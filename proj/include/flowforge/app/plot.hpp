#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "flowforge/field.hpp"
#include "flowforge/streamline.hpp"

namespace flowforge::app {

struct PlotOptions {
    double cell_px = 16.0;  // pixels per grid cell
    int arrow_stride = 1;   // draw an arrow every n-th node (0 picks one from the grid size)
    std::string title;
};

/// SVG with a magnitude-shaded background, arrow glyphs, the traced output
/// streamlines (thin, white) and the input streamlines (bold, black).
std::string render_svg(const VectorField& field, const std::vector<Polyline>& inputs,
                       const std::vector<Polyline>& traced, const PlotOptions& opts = {});

void write_svg(const std::filesystem::path& path, const VectorField& field, const std::vector<Polyline>& inputs,
               const std::vector<Polyline>& traced, const PlotOptions& opts = {});

}  // namespace flowforge::app
