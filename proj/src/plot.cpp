#include "trustcore/plot.hpp"

#include <algorithm>
#include <cmath>

namespace trustcore {

HistogramCounts histogram_counts(const VecX& losses, const std::vector<std::uint8_t>& flags,
                                 int bins) {
    if (losses.size() == 0) throw ParamError("histogram over empty losses");
    if (flags.size() != static_cast<std::size_t>(losses.size()))
        throw ShapeError("flag count does not match losses");
    if (bins < 1) throw ParamError("histogram needs at least one bin");
    HistogramCounts h;
    h.lo = losses.minCoeff();
    h.hi = losses.maxCoeff();
    if (h.hi <= h.lo) h.hi = h.lo + Real(1e-6);
    h.clean.assign(static_cast<std::size_t>(bins), 0);
    h.poison.assign(static_cast<std::size_t>(bins), 0);
    for (Eigen::Index i = 0; i < losses.size(); ++i) {
        int b = static_cast<int>((losses(i) - h.lo) / (h.hi - h.lo) * static_cast<Real>(bins));
        b = std::clamp(b, 0, bins - 1);
        auto& series = flags[static_cast<std::size_t>(i)] ? h.poison : h.clean;
        ++series[static_cast<std::size_t>(b)];
    }
    return h;
}

void plot_loss_histogram(const VecX& losses, const std::vector<std::uint8_t>& flags,
                         const std::filesystem::path& path, int bins) {
    const HistogramCounts h = histogram_counts(losses, flags, bins);
    const bool has_poison =
        std::any_of(h.poison.begin(), h.poison.end(), [](int c) { return c > 0; });

    const int w = 640, hgt = 400, ml = 50, mr = 20, mt = 20, mb = 40;
    RgbImage img(w, hgt);
    int peak = 1;
    for (std::size_t i = 0; i < h.clean.size(); ++i)
        peak = std::max({peak, h.clean[i], h.poison[i]});

    const int plot_w = w - ml - mr, plot_h = hgt - mt - mb;
    const double bw = static_cast<double>(plot_w) / bins;
    for (int b = 0; b < bins; ++b) {
        const int x0 = ml + static_cast<int>(b * bw);
        const int x1 = ml + static_cast<int>((b + 1) * bw) - 1;
        const int ch = h.clean[static_cast<std::size_t>(b)] * plot_h / peak;
        img.fill_rect(x0, mt + plot_h - ch, x1, mt + plot_h, 90, 130, 210);
        if (has_poison) {
            const int ph = h.poison[static_cast<std::size_t>(b)] * plot_h / peak;
            const int xm = (x0 + x1) / 2 - (x1 - x0) / 4;
            img.fill_rect(xm, mt + plot_h - ph, xm + std::max(1, (x1 - x0) / 2), mt + plot_h,
                          210, 70, 60);
        }
    }
    img.hline(ml, w - mr, mt + plot_h, 0, 0, 0);
    img.vline(ml, mt, mt + plot_h, 0, 0, 0);
    write_png(path, img);
}

}  // namespace trustcore
