#include "cropmap/raster_io.hpp"

#include "cropmap/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

namespace cropmap {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[6] = {'B', 'S', 'T', 'K', '1', '\n'};
constexpr std::size_t kPrefixSize = 10;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw IoError("write failed: " + path.string());
}

ordered_json header_json(const GeoRef& georef, const std::vector<Band>& bands, const TimeAxis& times, int height,
                         int width) {
    ordered_json h;
    h["width"] = width;
    h["height"] = height;
    auto& b = h["bands"] = ordered_json::array();
    for (Band band : bands)
        b.push_back(std::string(band_name(band)));
    auto& t = h["times"] = ordered_json::array();
    for (std::int32_t v : times.values) {
        if (times.kind == TimeAxis::Kind::weeks)
            t.push_back(v);
        else
            t.push_back(format_date(v));
    }
    h["dtype"] = "u16";
    h["nodata"] = 0;
    auto& tr = h["transform"] = ordered_json::array();
    for (double v : georef.transform)
        tr.push_back(v);
    h["crs"] = georef.crs;
    return h;
}

BandStackHeader parse_header(std::string_view text) {
    ordered_json h;
    try {
        h = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("BSTK header is not valid JSON: ") + e.what());
    }
    BandStackHeader out;
    try {
        if (h.at("dtype").get<std::string>() != "u16")
            throw FormatError("BSTK dtype must be \"u16\"");
        if (h.at("nodata").get<long long>() != 0)
            throw FormatError("BSTK nodata must be 0");
        long long w = h.at("width").get<long long>();
        long long hh = h.at("height").get<long long>();
        if (w <= 0 || hh <= 0 || w > (1 << 24) || hh > (1 << 24))
            throw FormatError("BSTK width/height out of range");
        out.width = static_cast<int>(w);
        out.height = static_cast<int>(hh);
        for (const auto& b : h.at("bands"))
            out.bands.push_back(parse_band(b.get<std::string>()));
        const auto& times = h.at("times");
        if (!times.is_array())
            throw FormatError("BSTK times must be an array");
        bool strings = !times.empty() && times.front().is_string();
        out.times.kind = strings ? TimeAxis::Kind::dates : TimeAxis::Kind::weeks;
        for (const auto& t : times) {
            if (strings != t.is_string())
                throw FormatError("BSTK times mix dates and week indices");
            out.times.values.push_back(strings ? parse_date(t.get<std::string>()) : t.get<std::int32_t>());
        }
        const auto& tr = h.at("transform");
        if (!tr.is_array() || tr.size() != 6)
            throw FormatError("BSTK transform must have 6 terms");
        for (std::size_t i = 0; i < 6; ++i)
            out.georef.transform[i] = tr[i].get<double>();
        out.georef.crs = h.at("crs").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed BSTK header: ") + e.what());
    }
    return out;
}

void check_scl_range(const BandStack& s) {
    auto scl = s.band_index(Band::SCL);
    if (!scl)
        return;
    for (std::size_t t = 0; t < s.time_count(); ++t)
        for (std::uint16_t v : s.plane(t, *scl))
            if (v > 11)
                throw SchemaError("SCL value " + std::to_string(v) + " outside 0..11");
}

std::uint64_t payload_values(const BandStackHeader& h) {
    return static_cast<std::uint64_t>(h.times.size()) * h.bands.size() * h.height * h.width;
}

BandStackHeader decode_prefix(std::span<const std::uint8_t> bytes, std::uint64_t file_size) {
    if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
        throw FormatError("missing BSTK1 magic");
    if (bytes.size() < kPrefixSize)
        throw TruncationError("BSTK prefix truncated");
    std::uint32_t len = get_u32(bytes.data() + 6);
    if (kPrefixSize + static_cast<std::uint64_t>(len) > file_size || kPrefixSize + len > bytes.size())
        throw TruncationError("BSTK header length exceeds file size");
    std::string_view text(reinterpret_cast<const char*>(bytes.data() + kPrefixSize), len);
    BandStackHeader h = parse_header(text);
    h.payload_offset = kPrefixSize + len;
    if (file_size - h.payload_offset != payload_values(h) * 2)
        throw TruncationError("BSTK payload holds " + std::to_string(file_size - h.payload_offset) +
                              " bytes, header implies " + std::to_string(payload_values(h) * 2));
    return h;
}

} // namespace

// ---------------------------------------------------------------- GeoRef

void GeoRef::validate() const {
    const auto& t = transform;
    if (t[1] == 0.0 || t[5] == 0.0)
        throw InvariantError("georef pixel width and height must be nonzero");
    double det = t[1] * t[5] - t[2] * t[4];
    if (det == 0.0 || !std::isfinite(det))
        throw InvariantError("georef transform is not invertible");
}

MapPoint GeoRef::to_map(double row, double col) const {
    const auto& t = transform;
    return {t[0] + col * t[1] + row * t[2], t[3] + col * t[4] + row * t[5]};
}

MapPoint GeoRef::to_pixel(MapPoint p) const {
    const auto& t = transform;
    double det = t[1] * t[5] - t[2] * t[4];
    double dx = p.x - t[0];
    double dy = p.y - t[3];
    double col = (t[5] * dx - t[2] * dy) / det;
    double row = (-t[4] * dx + t[1] * dy) / det;
    return {col, row};
}

GeoRef GeoRef::shifted(int row0, int col0) const {
    GeoRef g = *this;
    MapPoint o = to_map(row0, col0);
    g.transform[0] = o.x;
    g.transform[3] = o.y;
    return g;
}

// ---------------------------------------------------------------- bands & dates

std::string_view band_name(Band b) {
    switch (b) {
    case Band::B02: return "B02";
    case Band::B03: return "B03";
    case Band::B04: return "B04";
    case Band::B08: return "B08";
    case Band::SCL: return "SCL";
    case Band::NDVI: return "NDVI";
    case Band::MASK: return "MASK";
    }
    return "?";
}

Band parse_band(std::string_view name) {
    for (Band b : {Band::B02, Band::B03, Band::B04, Band::B08, Band::SCL, Band::NDVI, Band::MASK})
        if (band_name(b) == name)
            return b;
    throw SchemaError("unknown band name '" + std::string(name) + "'");
}

std::int32_t days_from_date(int year, unsigned month, unsigned day) {
    using namespace std::chrono;
    year_month_day ymd{std::chrono::year(year), std::chrono::month(month), std::chrono::day(day)};
    if (!ymd.ok())
        throw FormatError("invalid calendar date");
    return static_cast<std::int32_t>(sys_days(ymd).time_since_epoch().count());
}

std::int32_t parse_date(std::string_view iso) {
    int y = 0;
    unsigned m = 0, d = 0;
    char tail = 0;
    std::string s(iso);
    if (s.size() != 10 || std::sscanf(s.c_str(), "%4d-%2u-%2u%c", &y, &m, &d, &tail) != 3)
        throw FormatError("invalid date '" + s + "', expected YYYY-MM-DD");
    return days_from_date(y, m, d);
}

std::string format_date(std::int32_t days) {
    using namespace std::chrono;
    year_month_day ymd{sys_days{std::chrono::days{days}}};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", int(ymd.year()), unsigned(ymd.month()), unsigned(ymd.day()));
    return buf;
}

int year_of(std::int32_t days) {
    using namespace std::chrono;
    return int(year_month_day{sys_days{std::chrono::days{days}}}.year());
}

int day_of_year(std::int32_t days) {
    return days - days_from_date(year_of(days), 1, 1) + 1;
}

TimeAxis TimeAxis::weeks(int count) {
    TimeAxis t;
    t.kind = Kind::weeks;
    for (int i = 0; i < count; ++i)
        t.values.push_back(i);
    return t;
}

// ---------------------------------------------------------------- BandStack

BandStack::BandStack(GeoRef georef, std::vector<Band> bands, TimeAxis times, int height, int width)
    : georef_(std::move(georef)), bands_(std::move(bands)), times_(std::move(times)), height_(height), width_(width),
      pixels_(times_.size() * bands_.size() * static_cast<std::size_t>(height) * width, nodata) {}

std::optional<std::size_t> BandStack::band_index(Band b) const {
    auto it = std::find(bands_.begin(), bands_.end(), b);
    if (it == bands_.end())
        return std::nullopt;
    return static_cast<std::size_t>(it - bands_.begin());
}

std::size_t BandStack::require_band(Band b) const {
    auto i = band_index(b);
    if (!i)
        throw SchemaError("stack lacks band " + std::string(band_name(b)));
    return *i;
}

std::span<std::uint16_t> BandStack::plane(std::size_t t, std::size_t b) {
    return {pixels_.data() + (t * bands_.size() + b) * plane_size(), plane_size()};
}

std::span<const std::uint16_t> BandStack::plane(std::size_t t, std::size_t b) const {
    return {pixels_.data() + (t * bands_.size() + b) * plane_size(), plane_size()};
}

void BandStack::validate() const {
    georef_.validate();
    if (height_ <= 0 || width_ <= 0)
        throw InvariantError("stack height and width must be positive");
    std::set<Band> seen(bands_.begin(), bands_.end());
    if (seen.size() != bands_.size())
        throw InvariantError("duplicate band names");
    for (std::size_t i = 1; i < times_.values.size(); ++i)
        if (times_.values[i] <= times_.values[i - 1])
            throw InvariantError("time axis must be strictly increasing");
    if (pixels_.size() != times_.size() * bands_.size() * plane_size())
        throw InvariantError("pixel buffer does not match T x B x H x W");
    if (auto scl = band_index(Band::SCL))
        for (std::size_t t = 0; t < time_count(); ++t)
            for (std::uint16_t v : plane(t, *scl))
                if (v > 11)
                    throw InvariantError("SCL value outside 0..11");
}

// ---------------------------------------------------------------- BSTK codec

std::vector<std::uint8_t> encode_bandstack(const BandStack& s) {
    s.validate();
    std::string header = header_json(s.georef(), s.bands(), s.times(), s.height(), s.width()).dump();
    std::vector<std::uint8_t> out;
    out.reserve(kPrefixSize + header.size() + s.pixels().size() * 2);
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    put_u32(out, static_cast<std::uint32_t>(header.size()));
    out.insert(out.end(), header.begin(), header.end());
    for (std::uint16_t v : s.pixels()) {
        out.push_back(static_cast<std::uint8_t>(v & 0xFF));
        out.push_back(static_cast<std::uint8_t>(v >> 8));
    }
    return out;
}

BandStack decode_bandstack(std::span<const std::uint8_t> bytes) {
    BandStackHeader h = decode_prefix(bytes, bytes.size());
    BandStack s(h.georef, h.bands, h.times, h.height, h.width);
    const std::uint8_t* p = bytes.data() + h.payload_offset;
    for (auto& v : s.pixels()) {
        v = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
        p += 2;
    }
    check_scl_range(s);
    try {
        s.validate();
    } catch (const InvariantError& e) {
        throw FormatError(std::string("BSTK content violates stack invariants: ") + e.what());
    }
    return s;
}

BandStack read_bandstack(const std::filesystem::path& path) {
    auto bytes = read_file_bytes(path);
    return decode_bandstack(bytes);
}

BandStackHeader read_bandstack_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    std::uint64_t size = std::filesystem::file_size(path);
    std::vector<std::uint8_t> prefix(kPrefixSize, 0);
    in.read(reinterpret_cast<char*>(prefix.data()), kPrefixSize);
    prefix.resize(static_cast<std::size_t>(in.gcount()));
    if (prefix.size() < sizeof(kMagic) || std::memcmp(prefix.data(), kMagic, sizeof(kMagic)) != 0)
        throw FormatError("missing BSTK1 magic in " + path.string());
    if (prefix.size() < kPrefixSize)
        throw TruncationError("BSTK prefix truncated in " + path.string());
    std::uint32_t len = get_u32(prefix.data() + 6);
    if (kPrefixSize + static_cast<std::uint64_t>(len) > size)
        throw TruncationError("BSTK header length exceeds file size in " + path.string());
    prefix.resize(kPrefixSize + len);
    in.read(reinterpret_cast<char*>(prefix.data() + kPrefixSize), len);
    return decode_prefix(prefix, size);
}

BandStack read_bandstack_rows(const std::filesystem::path& path, int row_begin, int row_end) {
    BandStackHeader h = read_bandstack_header(path);
    row_begin = std::max(0, row_begin);
    row_end = std::min(h.height, row_end);
    if (row_end <= row_begin)
        throw InvariantError("empty row window");
    int rows = row_end - row_begin;
    BandStack s(h.georef.shifted(row_begin, 0), h.bands, h.times, rows, h.width);

    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(rows) * h.width * 2);
    const std::uint64_t full_plane = static_cast<std::uint64_t>(h.height) * h.width;
    for (std::size_t t = 0; t < h.times.size(); ++t) {
        for (std::size_t b = 0; b < h.bands.size(); ++b) {
            std::uint64_t offset =
                h.payload_offset + ((t * h.bands.size() + b) * full_plane + std::uint64_t(row_begin) * h.width) * 2;
            in.seekg(static_cast<std::streamoff>(offset));
            in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
            if (!in)
                throw TruncationError("short read in " + path.string());
            auto plane = s.plane(t, b);
            for (std::size_t i = 0; i < plane.size(); ++i)
                plane[i] = static_cast<std::uint16_t>(buf[2 * i] | (buf[2 * i + 1] << 8));
        }
    }
    check_scl_range(s);
    return s;
}

void write_bandstack(const BandStack& stack, const std::filesystem::path& path) {
    auto bytes = encode_bandstack(stack);
    write_file_bytes(path, bytes);
}

// ---------------------------------------------------------------- label polygons

namespace {

Ring parse_ring(const nlohmann::json& coords, const std::string& id) {
    if (!coords.is_array())
        throw SchemaError("feature '" + id + "': ring is not an array");
    Ring ring;
    for (const auto& c : coords) {
        if (!c.is_array() || c.size() < 2 || !c[0].is_number() || !c[1].is_number())
            throw SchemaError("feature '" + id + "': malformed coordinate");
        ring.push_back({c[0].get<double>(), c[1].get<double>()});
    }
    if (ring.size() < 4)
        throw GeometryError("feature '" + id + "': ring needs at least 3 distinct vertices");
    if (!(ring.front() == ring.back()))
        throw GeometryError("feature '" + id + "': ring is not closed");
    return ring;
}

PolygonRings parse_polygon(const nlohmann::json& coords, const std::string& id) {
    if (!coords.is_array() || coords.empty())
        throw SchemaError("feature '" + id + "': polygon has no rings");
    PolygonRings rings;
    for (const auto& r : coords)
        rings.push_back(parse_ring(r, id));
    return rings;
}

} // namespace

std::vector<LabeledPolygon> parse_label_polygons(std::string_view text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("label file is not valid JSON: ") + e.what());
    }
    if (!doc.is_object() || doc.value("type", "") != "FeatureCollection" || !doc.contains("features") ||
        !doc["features"].is_array())
        throw SchemaError("label file must be a GeoJSON FeatureCollection");

    std::vector<LabeledPolygon> out;
    std::size_t n = 0;
    for (const auto& f : doc["features"]) {
        LabeledPolygon poly;
        const auto props = f.value("properties", nlohmann::json::object());
        if (props.contains("id") && props["id"].is_string())
            poly.id = props["id"].get<std::string>();
        else if (props.contains("id") && props["id"].is_number_integer())
            poly.id = std::to_string(props["id"].get<long long>());
        else
            poly.id = "feature-" + std::to_string(n);
        ++n;

        if (!props.contains("class"))
            throw SchemaError("feature '" + poly.id + "' lacks a \"class\" property");
        const auto& cls = props["class"];
        if (!cls.is_number_integer() || (cls.get<long long>() != 0 && cls.get<long long>() != 1))
            throw SchemaError("feature '" + poly.id + "': class must be 0 or 1");
        poly.cls = static_cast<std::uint8_t>(cls.get<long long>());

        if (!f.contains("geometry") || !f["geometry"].is_object())
            throw SchemaError("feature '" + poly.id + "' has no geometry");
        const auto& g = f["geometry"];
        std::string type = g.value("type", "");
        if (!g.contains("coordinates"))
            throw SchemaError("feature '" + poly.id + "' geometry has no coordinates");
        const auto& coords = g["coordinates"];
        if (type == "Polygon") {
            poly.parts.push_back(parse_polygon(coords, poly.id));
        } else if (type == "MultiPolygon") {
            if (!coords.is_array() || coords.empty())
                throw SchemaError("feature '" + poly.id + "': empty MultiPolygon");
            for (const auto& p : coords)
                poly.parts.push_back(parse_polygon(p, poly.id));
        } else {
            throw SchemaError("feature '" + poly.id + "': unsupported geometry type '" + type + "'");
        }
        out.push_back(std::move(poly));
    }
    return out;
}

std::vector<LabeledPolygon> read_label_polygons(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_label_polygons(ss.str());
}

std::string label_polygons_to_geojson(std::span<const LabeledPolygon> polys) {
    nlohmann::ordered_json doc;
    doc["type"] = "FeatureCollection";
    auto features = nlohmann::ordered_json::array();
    for (const auto& p : polys) {
        auto rings_json = [](const PolygonRings& rings) {
            auto r = nlohmann::ordered_json::array();
            for (const auto& ring : rings) {
                auto pts = nlohmann::ordered_json::array();
                for (const auto& pt : ring)
                    pts.push_back({pt.x, pt.y});
                r.push_back(std::move(pts));
            }
            return r;
        };
        nlohmann::ordered_json f;
        f["type"] = "Feature";
        f["properties"] = {{"id", p.id}, {"class", p.cls}};
        if (p.parts.size() == 1) {
            f["geometry"] = {{"type", "Polygon"}, {"coordinates", rings_json(p.parts[0])}};
        } else {
            auto parts = nlohmann::ordered_json::array();
            for (const auto& part : p.parts)
                parts.push_back(rings_json(part));
            f["geometry"] = {{"type", "MultiPolygon"}, {"coordinates", std::move(parts)}};
        }
        features.push_back(std::move(f));
    }
    doc["features"] = std::move(features);
    return doc.dump();
}

void write_label_polygons(std::span<const LabeledPolygon> polys, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    out << label_polygons_to_geojson(polys) << '\n';
    if (!out)
        throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------- rasterization

std::array<std::size_t, 2> LabelRaster::class_counts() const {
    std::array<std::size_t, 2> counts{0, 0};
    for (std::uint8_t v : values)
        if (v != unlabeled)
            ++counts[v];
    return counts;
}

std::size_t LabelRaster::labeled_count() const {
    auto c = class_counts();
    return c[0] + c[1];
}

LabelRaster rasterize_labels(std::span<const LabeledPolygon> polys, const GeoRef& georef, int height, int width) {
    georef.validate();
    LabelRaster out;
    out.georef = georef;
    out.height = height;
    out.width = width;
    out.values.assign(static_cast<std::size_t>(height) * width, LabelRaster::unlabeled);
    out.polygon.assign(out.values.size(), -1);

    std::vector<double> crossings;
    for (std::size_t p = 0; p < polys.size(); ++p) {
        const LabeledPolygon& poly = polys[p];

        // Pixel-space rings; even-odd membership is invariant under the affine map.
        std::vector<Ring> rings;
        double min_row = std::numeric_limits<double>::infinity();
        double max_row = -min_row;
        for (const auto& part : poly.parts)
            for (const auto& ring : part) {
                Ring pr;
                pr.reserve(ring.size());
                for (const auto& v : ring) {
                    MapPoint q = georef.to_pixel(v);
                    pr.push_back(q);
                    min_row = std::min(min_row, q.y);
                    max_row = std::max(max_row, q.y);
                }
                rings.push_back(std::move(pr));
            }
        if (rings.empty())
            continue;

        if (max_row < 0.0 || min_row > height)
            continue;
        int r0 = static_cast<int>(std::max(0.0, std::floor(min_row - 0.5)));
        int r1 = static_cast<int>(std::min<double>(height - 1, std::ceil(max_row - 0.5)));
        for (int r = r0; r <= r1; ++r) {
            const double py = r + 0.5;
            crossings.clear();
            for (const auto& ring : rings)
                for (std::size_t i = 0, j = ring.size() - 1; i < ring.size(); j = i++) {
                    const MapPoint& a = ring[i];
                    const MapPoint& b = ring[j];
                    if ((a.y > py) != (b.y > py))
                        crossings.push_back((b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x);
                }
            std::sort(crossings.begin(), crossings.end());
            // Center cx is inside iff crossings[2k] <= cx < crossings[2k+1].
            for (std::size_t k = 0; k + 1 < crossings.size(); k += 2) {
                double lo = crossings[k];
                double hi = crossings[k + 1];
                if (hi <= 0.0 || lo >= width)
                    continue;
                lo = std::max(lo, -1.0);
                int c0 = static_cast<int>(std::ceil(lo - 0.5));
                while (c0 + 0.5 < lo)
                    ++c0;
                while (c0 - 0.5 >= lo)
                    --c0;
                c0 = std::max(c0, 0);
                for (int c = c0; c < width && c + 0.5 < hi; ++c) {
                    std::size_t idx = out.index(r, c);
                    if (out.values[idx] == LabelRaster::unlabeled) {
                        out.values[idx] = poly.cls;
                        out.polygon[idx] = static_cast<std::int32_t>(p);
                    } else if (out.values[idx] != poly.cls) {
                        const auto& other = polys[static_cast<std::size_t>(out.polygon[idx])];
                        throw ConflictError("pixel (row " + std::to_string(r) + ", col " + std::to_string(c) +
                                            ") is covered by polygon '" + other.id + "' (class " +
                                            std::to_string(other.cls) + ") and polygon '" + poly.id + "' (class " +
                                            std::to_string(poly.cls) + ")");
                    }
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------- masks

std::filesystem::path georef_sidecar_path(const std::filesystem::path& path) {
    auto p = path;
    p.replace_extension(".georef.json");
    return p;
}

void write_georef_json(const GeoRef& georef, int height, int width, const std::filesystem::path& path) {
    ordered_json j;
    j["width"] = width;
    j["height"] = height;
    j["transform"] = georef.transform;
    j["crs"] = georef.crs;
    std::string text = j.dump(2) + "\n";
    write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

void write_mask(std::span<const std::uint8_t> values, int height, int width, const GeoRef& georef,
                const std::filesystem::path& path) {
    if (values.size() != static_cast<std::size_t>(height) * width)
        throw InvariantError("mask size does not match its shape");
    georef.validate();
    std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.reserve(bytes.size() + values.size());
    for (std::uint8_t v : values) {
        switch (v) {
        case mask::non_cropland: bytes.push_back(0); break;
        case mask::cropland: bytes.push_back(255); break;
        case mask::nodata: bytes.push_back(128); break;
        default: throw InvariantError("mask value outside {0, 1, nodata}");
        }
    }
    write_file_bytes(path, bytes);
    write_georef_json(georef, height, width, georef_sidecar_path(path));
}

MaskRaster read_mask(const std::filesystem::path& path) {
    auto bytes = read_file_bytes(path);
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size() && std::isspace(bytes[pos]))
            ++pos;
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos]))
            t.push_back(static_cast<char>(bytes[pos++]));
        return t;
    };
    if (token() != "P5")
        throw FormatError("not a binary PGM: " + path.string());
    MaskRaster m;
    try {
        m.width = std::stoi(token());
        m.height = std::stoi(token());
        if (std::stoi(token()) != 255)
            throw FormatError("PGM maxval must be 255");
    } catch (const std::logic_error&) {
        throw FormatError("malformed PGM header: " + path.string());
    }
    ++pos;
    std::size_t n = static_cast<std::size_t>(m.width) * m.height;
    if (bytes.size() - pos != n)
        throw TruncationError("PGM payload size mismatch: " + path.string());
    m.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        switch (bytes[pos + i]) {
        case 0: m.values[i] = mask::non_cropland; break;
        case 255: m.values[i] = mask::cropland; break;
        case 128: m.values[i] = mask::nodata; break;
        default: throw FormatError("unexpected mask byte in " + path.string());
        }
    }
    auto sidecar = georef_sidecar_path(path);
    std::ifstream in(sidecar);
    if (!in)
        throw IoError("missing georef sidecar " + sidecar.string());
    try {
        auto j = nlohmann::json::parse(in);
        m.georef.transform = j.at("transform").get<std::array<double, 6>>();
        m.georef.crs = j.at("crs").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed georef sidecar: ") + e.what());
    }
    return m;
}

BandStack mask_to_bandstack(const MaskRaster& m) {
    BandStack s(m.georef, {Band::MASK}, TimeAxis::weeks(1), m.height, m.width);
    auto plane = s.plane(0, 0);
    for (std::size_t i = 0; i < m.values.size(); ++i)
        plane[i] = m.values[i] == mask::nodata ? 0 : static_cast<std::uint16_t>(m.values[i] + 1);
    return s;
}

MaskRaster mask_from_bandstack(const BandStack& s) {
    std::size_t b = s.require_band(Band::MASK);
    if (s.time_count() != 1)
        throw SchemaError("mask stack must have a single time step");
    MaskRaster m{s.georef(), s.height(), s.width(), {}};
    m.values.reserve(s.plane_size());
    for (std::uint16_t v : s.plane(0, b)) {
        if (v > 2)
            throw SchemaError("mask stack value outside 0..2");
        m.values.push_back(v == 0 ? mask::nodata : static_cast<std::uint8_t>(v - 1));
    }
    return m;
}

} // namespace cropmap
