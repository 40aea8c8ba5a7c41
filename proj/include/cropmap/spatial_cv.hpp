#pragma once

#include "cropmap/features.hpp"
#include "cropmap/geometry.hpp"
#include "cropmap/raster_io.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cropmap {

/// Square blocks tiling an extent, each assigned to one of k folds.
struct BlockGrid {
    double origin_x = 0.0;       // min x of the extent
    double origin_y = 0.0;       // min y of the extent
    double block_size = 0.0;     // meters
    int cols = 0;
    int rows = 0;
    int k = 0;
    std::uint64_t seed = 0;
    std::vector<int> block_to_fold;   // row-major, row 0 at origin_y

    std::size_t block_count() const { return block_to_fold.size(); }
    /// Block index (row * cols + col) containing p. Points on a shared edge go to
    /// the block with the smaller (row, col). Throws GeometryError outside the grid.
    std::size_t block_of(MapPoint p) const;
    int fold_of(MapPoint p) const { return block_to_fold[block_of(p)]; }
};

/// Throws GeometryError for a degenerate extent, ConfigError for block_size <= 0 or k < 2.
BlockGrid build_block_grid(const BoundingBox& extent, double block_size, int k, std::uint64_t seed);

struct FoldAssignment {
    int k = 0;
    std::vector<int> polygon_fold;                      // by polygon index
    std::vector<MapPoint> centroids;                    // by polygon index
    double dead_zone_radius = 0.0;
    std::vector<std::vector<std::size_t>> excluded;     // per validation fold, sorted polygon indices

    /// Number of polygons per fold.
    std::vector<std::size_t> fold_sizes() const;
};

/// Fold of each polygon = fold of the block containing its area-weighted centroid.
FoldAssignment assign_folds(std::span<const LabeledPolygon> polys, const BlockGrid& grid);

/// For every validation fold f, excludes training polygons whose centroid lies
/// within `radius` of a fold-f centroid. Radius 0 excludes nothing.
FoldAssignment apply_dead_zone(const FoldAssignment& assign, std::span<const LabeledPolygon> polys, double radius);

struct CvSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

/// Row indices of `fm` per fold; rows trace to polygons through the label raster
/// of their tile (`rasters[pixel.tile]`). Throws FoldError if any split is empty.
std::vector<CvSplit> cv_splits(const FoldAssignment& assign, std::span<const LabelRaster> rasters,
                               const FeatureMatrix& fm);
std::vector<CvSplit> cv_splits(const FoldAssignment& assign, const LabelRaster& raster, const FeatureMatrix& fm);

struct SpatialFolds {
    BlockGrid grid;
    FoldAssignment assignment;
    std::uint64_t seed_used = 0;
};

/// Grid over the polygons' extent plus assignment and dead zone. If a seed leaves a
/// fold without polygons, retries seed+1, seed+2, ... up to max_attempts, then FoldError.
SpatialFolds make_spatial_folds(std::span<const LabeledPolygon> polys, double block_size, int k, std::uint64_t seed,
                                double dead_zone_radius = 0.0, int max_attempts = 1000);

BoundingBox polygons_extent(std::span<const LabeledPolygon> polys);

/// "polygon_id,fold" rows in polygon order.
void write_folds_csv(const FoldAssignment& assign, std::span<const LabeledPolygon> polys,
                     const std::filesystem::path& path);

/// Single-band MASK stack with fold + 1 on labeled pixels, 0 elsewhere.
BandStack fold_raster(const FoldAssignment& assign, const LabelRaster& labels);

} // namespace cropmap
