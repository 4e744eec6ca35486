#pragma once

// Diagnostic loss histogram (clean vs poisoned series) rendered to PNG.

#include "trustcore/png.hpp"

#include <filesystem>
#include <vector>

namespace trustcore {

struct HistogramCounts {
    std::vector<int> clean, poison;
    Real lo = 0, hi = 1;
};

HistogramCounts histogram_counts(const VecX& losses, const std::vector<std::uint8_t>& flags,
                                 int bins);

void plot_loss_histogram(const VecX& losses, const std::vector<std::uint8_t>& flags,
                         const std::filesystem::path& path, int bins = 50);

}  // namespace trustcore
