#include "cropmap/geometry.hpp"

#include <algorithm>
#include <limits>

namespace cropmap {

void BoundingBox::extend(const BoundingBox& o) {
    min_x = std::min(min_x, o.min_x);
    min_y = std::min(min_y, o.min_y);
    max_x = std::max(max_x, o.max_x);
    max_y = std::max(max_y, o.max_y);
}

double signed_area(const Ring& ring) {
    double twice = 0.0;
    for (std::size_t i = 0; i + 1 < ring.size(); ++i)
        twice += ring[i].x * ring[i + 1].y - ring[i + 1].x * ring[i].y;
    return 0.5 * twice;
}

bool contains_even_odd(std::span<const PolygonRings> parts, MapPoint p) {
    bool inside = false;
    for (const auto& rings : parts) {
        for (const auto& ring : rings) {
            // PNPOLY; the closing vertex makes the (last, first) edge degenerate.
            for (std::size_t i = 0, j = ring.size() - 1; i < ring.size(); j = i++) {
                const MapPoint& a = ring[i];
                const MapPoint& b = ring[j];
                if ((a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x)
                    inside = !inside;
            }
        }
    }
    return inside;
}

MapPoint area_centroid(std::span<const PolygonRings> parts) {
    // Shift to the first vertex to keep the shoelace sums well conditioned for
    // projected coordinates in the 1e5..1e6 range.
    MapPoint origin{};
    bool have_origin = false;
    for (const auto& rings : parts)
        for (const auto& ring : rings)
            if (!ring.empty() && !have_origin) {
                origin = ring.front();
                have_origin = true;
            }

    double area_sum = 0.0, cx = 0.0, cy = 0.0;
    double vx = 0.0, vy = 0.0;
    std::size_t vcount = 0;
    for (const auto& rings : parts) {
        for (std::size_t r = 0; r < rings.size(); ++r) {
            const Ring& ring = rings[r];
            double a2 = 0.0, sx = 0.0, sy = 0.0;
            for (std::size_t i = 0; i + 1 < ring.size(); ++i) {
                double x0 = ring[i].x - origin.x, y0 = ring[i].y - origin.y;
                double x1 = ring[i + 1].x - origin.x, y1 = ring[i + 1].y - origin.y;
                double cross = x0 * y1 - x1 * y0;
                a2 += cross;
                sx += (x0 + x1) * cross;
                sy += (y0 + y1) * cross;
                vx += x0;
                vy += y0;
                ++vcount;
            }
            // Exterior rings add, holes subtract, whatever their winding.
            double sign = (a2 < 0) ? -1.0 : 1.0;
            if (r > 0)
                sign = -sign;
            area_sum += sign * a2 / 2.0;
            cx += sign * sx / 6.0;
            cy += sign * sy / 6.0;
        }
    }
    if (area_sum == 0.0) {
        if (vcount == 0)
            return origin;
        return {origin.x + vx / vcount, origin.y + vy / vcount};
    }
    return {origin.x + cx / area_sum, origin.y + cy / area_sum};
}

BoundingBox bounding_box(std::span<const PolygonRings> parts) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    BoundingBox box{inf, inf, -inf, -inf};
    for (const auto& rings : parts)
        for (const auto& ring : rings)
            for (const auto& p : ring) {
                box.min_x = std::min(box.min_x, p.x);
                box.min_y = std::min(box.min_y, p.y);
                box.max_x = std::max(box.max_x, p.x);
                box.max_y = std::max(box.max_y, p.y);
            }
    return box;
}

} // namespace cropmap
