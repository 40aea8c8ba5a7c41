#pragma once

#include <span>
#include <vector>

namespace cropmap {

struct MapPoint {
    double x = 0;
    double y = 0;
    friend bool operator==(const MapPoint&, const MapPoint&) = default;
};

/// Closed vertex ring: first vertex repeated as the last one.
using Ring = std::vector<MapPoint>;

/// One polygon: exterior ring followed by zero or more holes.
using PolygonRings = std::vector<Ring>;

struct BoundingBox {
    double min_x = 0, min_y = 0, max_x = 0, max_y = 0;

    double width() const { return max_x - min_x; }
    double height() const { return max_y - min_y; }
    void extend(const BoundingBox& other);
};

/// Signed shoelace area; positive for counter-clockwise rings.
double signed_area(const Ring& ring);

/// Even-odd containment over every ring of every part.
bool contains_even_odd(std::span<const PolygonRings> parts, MapPoint p);

/// Area-weighted centroid of a (multi)polygon. Holes subtract. Falls back to the
/// vertex mean when the total area is zero.
MapPoint area_centroid(std::span<const PolygonRings> parts);

BoundingBox bounding_box(std::span<const PolygonRings> parts);

} // namespace cropmap
