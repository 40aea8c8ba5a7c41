#pragma once

#include "cropmap/raster_io.hpp"

#include <cstdint>
#include <utility>
#include <vector>

namespace cropmap {

/// Two-class test tile: square blocks of cropland / non-cropland, one
/// acquisition per week with B02, B03, B04, B08 and SCL.
struct SyntheticSpec {
    int height = 128;
    int width = 128;
    int year = 2020;
    int block_px = 16;
    double cloud_fraction = 0.2;       // per pixel and date
    double label_fraction = 0.7;       // blocks that get a label polygon
    int polygon_inset_px = 2;
    std::uint64_t seed = 1;
    std::vector<int> drop_weeks;                      // acquisitions left out
    std::vector<std::pair<int, int>> removed_pixels;  // (row, col) clouded on every date
    GeoRef georef{{500000.0, 10.0, 0.0, 4500000.0, 0.0, -10.0}, "EPSG:32631"};
};

struct SyntheticTile {
    BandStack raw;
    std::vector<std::uint8_t> truth;       // H x W class per pixel
    std::vector<LabeledPolygon> polygons;        // training labels
    std::vector<LabeledPolygon> test_polygons;   // the remaining blocks
};

/// Cropland NDVI: ~0.2 in winter, spring rise to a ~0.8 plateau, autumn drop.
double cropland_ndvi(double week);
/// Non-cropland NDVI: flat around 0.45.
double non_cropland_ndvi(double week);

SyntheticTile make_synthetic_tile(const SyntheticSpec& spec);

} // namespace cropmap
