#pragma once

#include "cropmap/geometry.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cropmap {

/// Affine pixel -> map transform, GDAL coefficient order:
///   x = t[0] + col * t[1] + row * t[2]
///   y = t[3] + col * t[4] + row * t[5]
/// (row, col) = (0, 0) is the upper-left corner of the first pixel.
struct GeoRef {
    std::array<double, 6> transform{0.0, 10.0, 0.0, 0.0, 0.0, -10.0};
    std::string crs;

    /// Throws InvariantError unless pixel width/height are nonzero and the
    /// linear part is invertible.
    void validate() const;

    MapPoint to_map(double row, double col) const;
    MapPoint pixel_center(int row, int col) const { return to_map(row + 0.5, col + 0.5); }

    /// Inverse transform; returns {col, row} in fractional pixel units.
    MapPoint to_pixel(MapPoint p) const;

    /// Georef of a window starting at (row0, col0).
    GeoRef shifted(int row0, int col0) const;

    friend bool operator==(const GeoRef&, const GeoRef&) = default;
};

enum class Band : std::uint8_t { B02, B03, B04, B08, SCL, NDVI, MASK };

std::string_view band_name(Band b);
/// Throws SchemaError for names outside the known band set.
Band parse_band(std::string_view name);

/// Calendar day as days since 1970-01-01.
std::int32_t days_from_date(int year, unsigned month, unsigned day);
std::int32_t parse_date(std::string_view iso);   // "YYYY-MM-DD"
std::string format_date(std::int32_t days);
int year_of(std::int32_t days);
/// 1-based day of the year.
int day_of_year(std::int32_t days);

/// Time axis of a stack: either acquisition dates or composite week indices.
struct TimeAxis {
    enum class Kind : std::uint8_t { dates, weeks };
    Kind kind = Kind::weeks;
    std::vector<std::int32_t> values;

    static TimeAxis weeks(int count);
    std::size_t size() const { return values.size(); }
    friend bool operator==(const TimeAxis&, const TimeAxis&) = default;
};

/// T x B x H x W grid of unsigned 16-bit digital numbers.
class BandStack {
public:
    static constexpr std::uint16_t nodata = 0;

    BandStack() = default;
    BandStack(GeoRef georef, std::vector<Band> bands, TimeAxis times, int height, int width);

    const GeoRef& georef() const { return georef_; }
    const std::vector<Band>& bands() const { return bands_; }
    const TimeAxis& times() const { return times_; }
    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t plane_size() const { return static_cast<std::size_t>(height_) * width_; }
    std::size_t time_count() const { return times_.size(); }
    std::size_t band_count() const { return bands_.size(); }

    std::optional<std::size_t> band_index(Band b) const;
    std::size_t require_band(Band b) const;

    std::span<std::uint16_t> plane(std::size_t t, std::size_t b);
    std::span<const std::uint16_t> plane(std::size_t t, std::size_t b) const;

    std::uint16_t at(std::size_t t, std::size_t b, int row, int col) const {
        return pixels_[((t * bands_.size() + b) * height_ + row) * static_cast<std::size_t>(width_) + col];
    }
    std::uint16_t& at(std::size_t t, std::size_t b, int row, int col) {
        return pixels_[((t * bands_.size() + b) * height_ + row) * static_cast<std::size_t>(width_) + col];
    }

    std::vector<std::uint16_t>& pixels() { return pixels_; }
    const std::vector<std::uint16_t>& pixels() const { return pixels_; }

    /// Throws InvariantError on any violated structural invariant.
    void validate() const;

    friend bool operator==(const BandStack&, const BandStack&) = default;

private:
    GeoRef georef_;
    std::vector<Band> bands_;
    TimeAxis times_;
    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint16_t> pixels_;
};

struct BandStackHeader {
    GeoRef georef;
    std::vector<Band> bands;
    TimeAxis times;
    int height = 0;
    int width = 0;
    std::uint64_t payload_offset = 0;
};

/// BSTK container:
///   "BSTK1\n" | u32 LE header length L | L bytes of JSON | T*B*H*W u16 LE
/// JSON keys, in order: width, height, bands, times, dtype ("u16"), nodata (0),
/// transform, crs. Times are integers (week index) or "YYYY-MM-DD" strings.
BandStack read_bandstack(const std::filesystem::path& path);
BandStackHeader read_bandstack_header(const std::filesystem::path& path);
/// Reads rows [row_begin, row_end) of every plane; the georef is shifted to the window.
BandStack read_bandstack_rows(const std::filesystem::path& path, int row_begin, int row_end);
void write_bandstack(const BandStack& stack, const std::filesystem::path& path);

BandStack decode_bandstack(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_bandstack(const BandStack& stack);

struct LabeledPolygon {
    std::string id;
    std::vector<PolygonRings> parts;   // one entry for Polygon, several for MultiPolygon
    std::uint8_t cls = 0;              // 1 = cropland, 0 = non-cropland
};

/// Parses a GeoJSON FeatureCollection whose features carry Polygon or
/// MultiPolygon geometry and properties {"id": string, "class": 0|1}.
std::vector<LabeledPolygon> parse_label_polygons(std::string_view text);
std::vector<LabeledPolygon> read_label_polygons(const std::filesystem::path& path);

struct LabelRaster {
    static constexpr std::uint8_t unlabeled = 255;

    GeoRef georef;
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> values;      // 0, 1 or unlabeled
    std::vector<std::int32_t> polygon;     // index into the polygon list, -1 when unlabeled

    std::size_t index(int row, int col) const { return static_cast<std::size_t>(row) * width + col; }
    /// {non-cropland, cropland} pixel counts.
    std::array<std::size_t, 2> class_counts() const;
    std::size_t labeled_count() const;
};

/// FeatureCollection with properties {id, class}; inverse of parse_label_polygons.
std::string label_polygons_to_geojson(std::span<const LabeledPolygon> polys);
void write_label_polygons(std::span<const LabeledPolygon> polys, const std::filesystem::path& path);

/// A pixel is labeled iff its center falls inside a polygon (even-odd rule).
/// Throws ConflictError when polygons of different classes share a pixel center.
LabelRaster rasterize_labels(std::span<const LabeledPolygon> polys, const GeoRef& georef, int height, int width);

/// Cropland mask cell values.
namespace mask {
inline constexpr std::uint8_t non_cropland = 0;
inline constexpr std::uint8_t cropland = 1;
inline constexpr std::uint8_t nodata = 255;
}

/// Writes a binary PGM (0 -> 0, 1 -> 255, nodata -> 128) and a
/// "<stem>.georef.json" sidecar next to it.
void write_mask(std::span<const std::uint8_t> values, int height, int width, const GeoRef& georef,
                const std::filesystem::path& path);

struct MaskRaster {
    GeoRef georef;
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> values;
};

MaskRaster read_mask(const std::filesystem::path& path);
std::filesystem::path georef_sidecar_path(const std::filesystem::path& path);

/// Single-band (MASK), single-time BandStack form: nodata -> 0, non-cropland -> 1, cropland -> 2.
BandStack mask_to_bandstack(const MaskRaster& m);
MaskRaster mask_from_bandstack(const BandStack& s);

void write_georef_json(const GeoRef& georef, int height, int width, const std::filesystem::path& path);

} // namespace cropmap
