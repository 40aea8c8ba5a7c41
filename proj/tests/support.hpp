#pragma once

#include "cropmap/raster_io.hpp"
#include "cropmap/random.hpp"
#include "cropmap/features.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace testsupport {

/// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        const auto base = std::filesystem::temp_directory_path();
        path_ = base / ("cropmap_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Random dated stack with spectral bands and valid SCL codes.
inline cropmap::BandStack random_stack(std::uint64_t seed, int t, int h, int w) {
    using namespace cropmap;
    Rng rng(seed);
    TimeAxis times;
    times.kind = TimeAxis::Kind::dates;
    std::int32_t d = days_from_date(2020, 1, 1);
    for (int i = 0; i < t; ++i) {
        d += 1 + static_cast<std::int32_t>(rng.below(6));
        times.values.push_back(d);
    }
    BandStack s(GeoRef{{1000.0, 10.0, 0.0, 2000.0, 0.0, -10.0}, "EPSG:32633"},
                {Band::B02, Band::B03, Band::B04, Band::B08, Band::SCL}, times, h, w);
    for (std::size_t ti = 0; ti < s.time_count(); ++ti)
        for (std::size_t b = 0; b < s.band_count(); ++b)
            for (auto& v : s.plane(ti, b))
                v = b == 4 ? static_cast<std::uint16_t>(rng.below(12)) : static_cast<std::uint16_t>(rng.below(65536));
    return s;
}

inline cropmap::LabeledPolygon square_polygon(const std::string& id, std::uint8_t cls, double x0, double y0, double x1,
                                              double y1) {
    cropmap::LabeledPolygon p;
    p.id = id;
    p.cls = cls;
    p.parts.push_back({{{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}, {x0, y0}}});
    return p;
}

/// Non-overlapping axis-aligned polygons on a raster; some are two-part multipolygons.
struct PolygonLayout {
    cropmap::GeoRef georef;
    int height = 0;
    int width = 0;
    std::vector<cropmap::LabeledPolygon> polys;
};

inline PolygonLayout random_layout(std::uint64_t seed, int cells = 10, int cell_px = 6) {
    using namespace cropmap;
    Rng rng(seed);
    PolygonLayout L;
    L.height = L.width = cells * cell_px;
    const double px = 10.0;
    L.georef = GeoRef{{1000.0, px, 0.0, 1000.0 + L.height * px, 0.0, -px}, "X"};
    const double keep = 0.3 + 0.6 * rng.uniform();
    for (int cr = 0; cr < cells; ++cr)
        for (int cc = 0; cc < cells; ++cc) {
            if (rng.uniform() > keep)
                continue;
            const double x0 = 1000.0 + cc * cell_px * px, y0 = 1000.0 + cr * cell_px * px;
            const std::uint8_t cls = static_cast<std::uint8_t>(rng.below(2));
            const std::string id = "p" + std::to_string(L.polys.size());
            if (rng.below(4) == 0) {
                // two parts, left and right halves of the cell
                const double h = 1 + rng.below(cell_px - 1);
                auto a = square_polygon(id, cls, x0, y0, x0 + 2 * px, y0 + h * px);
                auto b = square_polygon(id, cls, x0 + 3 * px, y0, x0 + 5 * px, y0 + 2 * px);
                a.parts.push_back(b.parts[0]);
                L.polys.push_back(a);
            } else {
                const double w = 1 + rng.below(cell_px - 1), h = 1 + rng.below(cell_px - 1);
                const double ox = rng.below(static_cast<std::uint64_t>(cell_px - w)),
                             oy = rng.below(static_cast<std::uint64_t>(cell_px - h));
                L.polys.push_back(square_polygon(id, cls, x0 + ox * px, y0 + oy * px, x0 + (ox + w) * px,
                                                 y0 + (oy + h) * px));
            }
        }
    return L;
}

/// Label-less matrix whose rows are the labeled pixels of `lr`, in raster order.
inline cropmap::FeatureMatrix pixel_rows(const cropmap::LabelRaster& lr, std::int32_t tile = 0) {
    cropmap::FeatureMatrix fm;
    for (int r = 0; r < lr.height; ++r)
        for (int c = 0; c < lr.width; ++c)
            if (lr.values[lr.index(r, c)] != cropmap::LabelRaster::unlabeled) {
                fm.pixels.push_back({tile, r, c});
                fm.labels.push_back(lr.values[lr.index(r, c)]);
            }
    fm.rows = fm.pixels.size();
    return fm;
}

} // namespace testsupport
