#include "cropmap/synthetic.hpp"

#include "cropmap/errors.hpp"
#include "cropmap/random.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace cropmap {

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::uint16_t to_dn(double reflectance) {
    return static_cast<std::uint16_t>(std::clamp(std::lround(reflectance * 10000.0), 1L, 65535L));
}

} // namespace

double cropland_ndvi(double week) {
    return 0.2 + 0.6 * logistic((week - 16.0) / 1.8) * logistic((38.0 - week) / 1.8);
}

double non_cropland_ndvi(double week) { return 0.45 + 0.03 * std::sin(week / 53.0 * 6.283185307179586); }

SyntheticTile make_synthetic_tile(const SyntheticSpec& spec) {
    if (spec.height < 1 || spec.width < 1 || spec.block_px < 1)
        throw ConfigError("synthetic tile needs positive sizes");
    const int h = spec.height, w = spec.width;
    const std::size_t n = static_cast<std::size_t>(h) * w;
    Rng rng(spec.seed);

    SyntheticTile tile;
    const int brows = (h + spec.block_px - 1) / spec.block_px;
    const int bcols = (w + spec.block_px - 1) / spec.block_px;
    std::vector<std::uint8_t> block_cls(static_cast<std::size_t>(brows) * bcols);
    for (auto& c : block_cls)
        c = static_cast<std::uint8_t>(rng.below(2));
    // both classes always present
    block_cls[0] = 1;
    block_cls[block_cls.size() - 1] = 0;

    tile.truth.resize(n);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            tile.truth[static_cast<std::size_t>(r) * w + c] =
                block_cls[static_cast<std::size_t>(r / spec.block_px) * bcols + c / spec.block_px];

    // label polygons: inset squares inside a random subset of blocks
    for (int br = 0; br < brows; ++br)
        for (int bc = 0; bc < bcols; ++bc) {
            const bool train = rng.uniform() < spec.label_fraction;
            const int r0 = br * spec.block_px + spec.polygon_inset_px;
            const int c0 = bc * spec.block_px + spec.polygon_inset_px;
            const int r1 = std::min(h, (br + 1) * spec.block_px) - spec.polygon_inset_px;
            const int c1 = std::min(w, (bc + 1) * spec.block_px) - spec.polygon_inset_px;
            if (r1 <= r0 || c1 <= c0)
                continue;
            const MapPoint a = spec.georef.to_map(r0, c0), b = spec.georef.to_map(r0, c1);
            const MapPoint d = spec.georef.to_map(r1, c1), e = spec.georef.to_map(r1, c0);
            LabeledPolygon poly;
            poly.id = "b" + std::to_string(br) + "_" + std::to_string(bc);
            poly.cls = block_cls[static_cast<std::size_t>(br) * bcols + bc];
            poly.parts.push_back({Ring{a, b, d, e, a}});
            (train ? tile.polygons : tile.test_polygons).push_back(std::move(poly));
        }

    std::set<int> dropped(spec.drop_weeks.begin(), spec.drop_weeks.end());
    TimeAxis times;
    times.kind = TimeAxis::Kind::dates;
    std::vector<int> weeks;
    const std::int32_t jan1 = days_from_date(spec.year, 1, 1);
    for (int wk = 0; wk < 53; ++wk) {
        const std::int32_t day = jan1 + 7 * wk + 2;
        if (year_of(day) != spec.year || dropped.count(wk))
            continue;
        times.values.push_back(day);
        weeks.push_back(wk);
    }

    std::vector<std::uint8_t> always_cloudy(n, 0);
    for (auto [r, c] : spec.removed_pixels)
        if (r >= 0 && r < h && c >= 0 && c < w)
            always_cloudy[static_cast<std::size_t>(r) * w + c] = 1;

    // per-pixel brightness and phase
    std::vector<double> bright(n), phase(n);
    for (std::size_t p = 0; p < n; ++p) {
        bright[p] = 0.35 + 0.05 * rng.normal();
        phase[p] = 1.0 * rng.normal();
    }

    tile.raw = BandStack(spec.georef, {Band::B02, Band::B03, Band::B04, Band::B08, Band::SCL}, times, h, w);
    for (std::size_t t = 0; t < weeks.size(); ++t) {
        const double wk = weeks[t];
        auto b02 = tile.raw.plane(t, 0), b03 = tile.raw.plane(t, 1), b04 = tile.raw.plane(t, 2);
        auto b08 = tile.raw.plane(t, 3), scl = tile.raw.plane(t, 4);
        for (std::size_t p = 0; p < n; ++p) {
            const bool crop = tile.truth[p] == 1;
            double v = crop ? cropland_ndvi(wk + phase[p]) + 0.03 * rng.normal()
                            : non_cropland_ndvi(wk) + 0.08 * rng.normal();
            v = std::clamp(v, -0.95, 0.95);
            const double s = bright[p] * (1.0 + 0.03 * rng.normal());
            const double nir = s * (1.0 + v) / 2.0, red = s * (1.0 - v) / 2.0;
            const bool cloud = always_cloudy[p] || rng.uniform() < spec.cloud_fraction;
            if (cloud) {
                const double c = 0.6 + 0.2 * rng.uniform();
                b02[p] = to_dn(c);
                b03[p] = to_dn(c * 0.98);
                b04[p] = to_dn(c * 0.97);
                b08[p] = to_dn(c * 0.99);
                scl[p] = 9;
            } else {
                b02[p] = to_dn(0.6 * red + 0.01 * rng.uniform());
                b03[p] = to_dn(0.8 * red + 0.1 * nir * 0.2);
                b04[p] = to_dn(red);
                b08[p] = to_dn(nir);
                scl[p] = crop || v > 0.3 ? 4 : 5;
            }
        }
    }
    return tile;
}

} // namespace cropmap
