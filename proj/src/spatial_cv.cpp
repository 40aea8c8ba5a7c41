#include "cropmap/spatial_cv.hpp"

#include "cropmap/errors.hpp"
#include "cropmap/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <unordered_map>

namespace cropmap {

namespace {

/// Cell index along one axis; exact interior edges resolve to the lower cell.
int axis_cell(double coord, double origin, double size, int count, const char* axis) {
    const double f = (coord - origin) / size;
    if (!(f >= 0.0) || f > count)
        throw GeometryError(std::string("point outside block grid along ") + axis);
    double fl = std::floor(f);
    int i = static_cast<int>(fl);
    if (fl == f && i > 0)
        --i;
    return std::min(i, count - 1);
}

} // namespace

std::size_t BlockGrid::block_of(MapPoint p) const {
    int c = axis_cell(p.x, origin_x, block_size, cols, "x");
    int r = axis_cell(p.y, origin_y, block_size, rows, "y");
    return static_cast<std::size_t>(r) * cols + c;
}

BlockGrid build_block_grid(const BoundingBox& extent, double block_size, int k, std::uint64_t seed) {
    if (!(block_size > 0.0))
        throw ConfigError("block_size must be positive");
    if (k < 2)
        throw ConfigError("k must be at least 2");
    if (!std::isfinite(extent.width()) || !std::isfinite(extent.height()) || !(extent.width() > 0.0) ||
        !(extent.height() > 0.0))
        throw GeometryError("degenerate extent for block grid");

    BlockGrid g;
    g.origin_x = extent.min_x;
    g.origin_y = extent.min_y;
    g.block_size = block_size;
    g.cols = std::max(1, static_cast<int>(std::ceil(extent.width() / block_size)));
    g.rows = std::max(1, static_cast<int>(std::ceil(extent.height() / block_size)));
    g.k = k;
    g.seed = seed;
    Rng rng(seed);
    g.block_to_fold.resize(static_cast<std::size_t>(g.cols) * g.rows);
    for (auto& f : g.block_to_fold)
        f = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    return g;
}

std::vector<std::size_t> FoldAssignment::fold_sizes() const {
    std::vector<std::size_t> sizes(static_cast<std::size_t>(k), 0);
    for (int f : polygon_fold)
        ++sizes[static_cast<std::size_t>(f)];
    return sizes;
}

FoldAssignment assign_folds(std::span<const LabeledPolygon> polys, const BlockGrid& grid) {
    FoldAssignment a;
    a.k = grid.k;
    a.excluded.assign(static_cast<std::size_t>(grid.k), {});
    a.polygon_fold.reserve(polys.size());
    a.centroids.reserve(polys.size());
    for (const auto& p : polys) {
        MapPoint c = area_centroid(p.parts);
        try {
            a.polygon_fold.push_back(grid.fold_of(c));
        } catch (const GeometryError&) {
            throw GeometryError("centroid of polygon '" + p.id + "' lies outside the block grid");
        }
        a.centroids.push_back(c);
    }
    return a;
}

FoldAssignment apply_dead_zone(const FoldAssignment& assign, std::span<const LabeledPolygon> polys, double radius) {
    if (radius < 0.0)
        throw ConfigError("dead zone radius must be >= 0");
    if (polys.size() != assign.polygon_fold.size())
        throw InvariantError("polygon list does not match the fold assignment");
    FoldAssignment out = assign;
    out.dead_zone_radius = radius;
    out.excluded.assign(static_cast<std::size_t>(assign.k), {});
    if (radius == 0.0 || polys.empty())
        return out;

    // Spatial hash with cell size = radius; candidate pairs come from the 3x3 cells.
    const double r2 = radius * radius;
    auto cell_of = [&](MapPoint p) {
        return std::pair<long long, long long>{static_cast<long long>(std::floor(p.x / radius)),
                                               static_cast<long long>(std::floor(p.y / radius))};
    };
    std::map<std::pair<long long, long long>, std::vector<std::size_t>> cells;
    for (std::size_t i = 0; i < assign.centroids.size(); ++i)
        cells[cell_of(assign.centroids[i])].push_back(i);

    std::vector<std::vector<std::uint8_t>> flag(static_cast<std::size_t>(assign.k),
                                                std::vector<std::uint8_t>(polys.size(), 0));
    for (std::size_t i = 0; i < assign.centroids.size(); ++i) {
        const MapPoint ci = assign.centroids[i];
        auto [cx, cy] = cell_of(ci);
        for (long long dx = -1; dx <= 1; ++dx)
            for (long long dy = -1; dy <= 1; ++dy) {
                auto it = cells.find({cx + dx, cy + dy});
                if (it == cells.end())
                    continue;
                for (std::size_t j : it->second) {
                    int fj = assign.polygon_fold[j];
                    if (fj == assign.polygon_fold[i])
                        continue;
                    double ddx = assign.centroids[j].x - ci.x;
                    double ddy = assign.centroids[j].y - ci.y;
                    if (ddx * ddx + ddy * ddy <= r2)
                        flag[static_cast<std::size_t>(fj)][i] = 1;   // i trains while fj validates
                }
            }
    }
    for (std::size_t f = 0; f < flag.size(); ++f)
        for (std::size_t i = 0; i < polys.size(); ++i)
            if (flag[f][i])
                out.excluded[f].push_back(i);
    return out;
}

std::vector<CvSplit> cv_splits(const FoldAssignment& assign, std::span<const LabelRaster> rasters,
                               const FeatureMatrix& fm) {
    const std::size_t k = static_cast<std::size_t>(assign.k);
    std::vector<std::vector<std::uint8_t>> excluded(k, std::vector<std::uint8_t>(assign.polygon_fold.size(), 0));
    for (std::size_t f = 0; f < k && f < assign.excluded.size(); ++f)
        for (std::size_t p : assign.excluded[f])
            excluded[f][p] = 1;

    std::vector<CvSplit> splits(k);
    for (std::size_t i = 0; i < fm.rows; ++i) {
        const PixelIndex& px = fm.pixels[i];
        if (px.tile < 0 || static_cast<std::size_t>(px.tile) >= rasters.size())
            throw InvariantError("feature row refers to an unknown tile");
        const LabelRaster& lr = rasters[static_cast<std::size_t>(px.tile)];
        if (px.row < 0 || px.row >= lr.height || px.col < 0 || px.col >= lr.width)
            throw InvariantError("feature row outside its label raster");
        std::int32_t poly = lr.polygon[lr.index(px.row, px.col)];
        if (poly < 0)
            continue;
        if (static_cast<std::size_t>(poly) >= assign.polygon_fold.size())
            throw InvariantError("label raster refers to a polygon without a fold");
        const std::size_t fold = static_cast<std::size_t>(assign.polygon_fold[static_cast<std::size_t>(poly)]);
        splits[fold].validation.push_back(i);
        for (std::size_t g = 0; g < k; ++g)
            if (g != fold && !excluded[g][static_cast<std::size_t>(poly)])
                splits[g].train.push_back(i);
    }
    for (std::size_t f = 0; f < k; ++f)
        if (splits[f].validation.empty() || splits[f].train.empty())
            throw FoldError("fold " + std::to_string(f) + " has an empty " +
                            (splits[f].validation.empty() ? "validation" : "training") + " set");
    return splits;
}

std::vector<CvSplit> cv_splits(const FoldAssignment& assign, const LabelRaster& raster, const FeatureMatrix& fm) {
    return cv_splits(assign, std::span<const LabelRaster>(&raster, 1), fm);
}

BoundingBox polygons_extent(std::span<const LabeledPolygon> polys) {
    if (polys.empty())
        throw GeometryError("no polygons");
    BoundingBox box = bounding_box(polys.front().parts);
    for (const auto& p : polys.subspan(1))
        box.extend(bounding_box(p.parts));
    return box;
}

SpatialFolds make_spatial_folds(std::span<const LabeledPolygon> polys, double block_size, int k, std::uint64_t seed,
                                double dead_zone_radius, int max_attempts) {
    const BoundingBox extent = polygons_extent(polys);
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        const std::uint64_t s = seed + static_cast<std::uint64_t>(attempt);
        BlockGrid grid = build_block_grid(extent, block_size, k, s);
        FoldAssignment a = assign_folds(polys, grid);
        auto sizes = a.fold_sizes();
        if (std::any_of(sizes.begin(), sizes.end(), [](std::size_t n) { return n == 0; }))
            continue;
        a = apply_dead_zone(a, polys, dead_zone_radius);
        return {std::move(grid), std::move(a), s};
    }
    throw FoldError("no seed in [" + std::to_string(seed) + ", " + std::to_string(seed + max_attempts) +
                    ") populates all " + std::to_string(k) + " folds");
}

void write_folds_csv(const FoldAssignment& assign, std::span<const LabeledPolygon> polys,
                     const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    out << "polygon_id,fold\n";
    for (std::size_t i = 0; i < polys.size(); ++i)
        out << polys[i].id << ',' << assign.polygon_fold[i] << '\n';
    if (!out)
        throw IoError("write failed: " + path.string());
}

BandStack fold_raster(const FoldAssignment& assign, const LabelRaster& labels) {
    BandStack s(labels.georef, {Band::MASK}, TimeAxis::weeks(1), labels.height, labels.width);
    auto plane = s.plane(0, 0);
    for (std::size_t i = 0; i < plane.size(); ++i) {
        std::int32_t p = labels.polygon[i];
        plane[i] = p < 0 ? 0 : static_cast<std::uint16_t>(assign.polygon_fold[static_cast<std::size_t>(p)] + 1);
    }
    return s;
}

} // namespace cropmap
