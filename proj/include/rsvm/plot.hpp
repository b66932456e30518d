#pragma once

#include <filesystem>
#include <vector>

namespace rsvm {

// Renders the training loss (red) and train top-1 accuracy (blue) curves to
// a PNG. Minimal raster output; the numbers live in metrics.csv.
void render_curves_png(const std::filesystem::path& file, const std::vector<double>& loss,
                       const std::vector<double>& accuracy);

}  // namespace rsvm
