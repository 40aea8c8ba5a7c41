#include "cropmap/features.hpp"

#include "cropmap/errors.hpp"
#include "cropmap/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

namespace cropmap {

namespace {

constexpr std::size_t kBands = kFeatureBands.size();
constexpr std::size_t kWeeks = kWeeksPerYear;

std::string two_digits(int v) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%02d", v);
    return buf;
}

std::array<std::size_t, kBands> feature_band_slots(const CompositeStack& stack) {
    std::array<std::size_t, kBands> slots{};
    for (std::size_t k = 0; k < kBands; ++k)
        slots[k] = stack.band_index(kFeatureBands[k]);
    return slots;
}

} // namespace

FeatureSpec FeatureSpec::no_spatial() {
    FeatureSpec s;
    s.spatial = false;
    s.spatial_scope = SpatialScope::none;
    return s;
}

FeatureSpec FeatureSpec::ndvi_spatial() {
    FeatureSpec s;
    s.spatial_scope = SpatialScope::ndvi;
    return s;
}

void FeatureSpec::validate() const {
    if (!temporal && !statistical && !differential && !spatial)
        throw ConfigError("feature spec selects no feature group");
    if (spatial != (spatial_scope != SpatialScope::none))
        throw ConfigError("spatial_scope must be 'none' exactly when the spatial group is off");
}

std::size_t FeatureSpec::dimension() const {
    std::size_t d = 0;
    if (temporal)
        d += kTemporalWindows * kBands;
    if (statistical)
        d += 3 * kBands;
    if (differential)
        d += kWeeks - 1;
    if (spatial)
        d += kWeeks * 2 * (spatial_scope == SpatialScope::all ? kBands : 1);
    return d;
}

SpatialScope parse_spatial_scope(std::string_view s) {
    if (s == "all")
        return SpatialScope::all;
    if (s == "ndvi")
        return SpatialScope::ndvi;
    if (s == "none")
        return SpatialScope::none;
    throw ConfigError("unknown spatial_scope '" + std::string(s) + "'");
}

std::string_view spatial_scope_name(SpatialScope s) {
    switch (s) {
    case SpatialScope::all: return "all";
    case SpatialScope::ndvi: return "ndvi";
    case SpatialScope::none: return "none";
    }
    return "?";
}

std::vector<std::string> feature_names(const FeatureSpec& spec) {
    spec.validate();
    std::vector<std::string> names;
    names.reserve(spec.dimension());
    if (spec.temporal) {
        const char* kind = spec.temporal_mode == TemporalMode::window_max ? "_max_wk" : "_at_wk";
        for (int w = 0; w < kTemporalWindows; ++w)
            for (Band b : kFeatureBands)
                names.push_back(std::string(band_name(b)) + kind + two_digits(w * kTemporalWindow));
    }
    if (spec.statistical)
        for (Band b : kFeatureBands)
            for (const char* stat : {"_mean", "_max", "_std"})
                names.push_back(std::string(band_name(b)) + stat);
    if (spec.differential)
        for (int w = 0; w + 1 < kWeeksPerYear; ++w)
            names.push_back("NDVI_diff_wk" + two_digits(w));
    if (spec.spatial) {
        for (int w = 0; w < kWeeksPerYear; ++w)
            for (Band b : kFeatureBands) {
                if (spec.spatial_scope == SpatialScope::ndvi && b != Band::NDVI)
                    continue;
                names.push_back(std::string(band_name(b)) + "_nbr_mean_wk" + two_digits(w));
                names.push_back(std::string(band_name(b)) + "_nbr_std_wk" + two_digits(w));
            }
    }
    return names;
}

double ndvi(double nir, double red) {
    double sum = nir + red;
    if (sum == 0.0)
        return 0.0;
    return (nir - red) / sum;
}

CompositeStack append_ndvi(const CompositeStack& stack) {
    if (std::find(stack.bands.begin(), stack.bands.end(), Band::NDVI) != stack.bands.end())
        return stack;
    const std::size_t nir = stack.band_index(Band::B08);
    const std::size_t red = stack.band_index(Band::B04);
    const std::size_t nb = stack.band_count();
    const std::size_t n = stack.plane_size();

    CompositeStack out = stack;
    out.bands.push_back(Band::NDVI);
    out.values.assign(static_cast<std::size_t>(stack.weeks) * (nb + 1) * n, 0.0);
    for (std::size_t w = 0; w < static_cast<std::size_t>(stack.weeks); ++w) {
        for (std::size_t b = 0; b < nb; ++b)
            std::copy_n(stack.values.begin() + static_cast<std::ptrdiff_t>(stack.value_index(w, b, 0)), n,
                        out.values.begin() + static_cast<std::ptrdiff_t>(out.value_index(w, b, 0)));
        double* dst = out.values.data() + out.value_index(w, nb, 0);
        for (std::size_t p = 0; p < n; ++p)
            dst[p] = stack.removed[p] ? 0.0 : ndvi(stack.value(w, nir, p), stack.value(w, red, p));
    }
    return out;
}

std::vector<double> temporal_features(std::span<const double> series, TemporalMode mode) {
    std::vector<double> out;
    out.reserve(kTemporalWindows * kBands);
    for (int win = 0; win < kTemporalWindows; ++win) {
        const std::size_t begin = static_cast<std::size_t>(win) * kTemporalWindow;
        const std::size_t end = std::min<std::size_t>(begin + kTemporalWindow, kWeeks);
        for (std::size_t b = 0; b < kBands; ++b) {
            const double* s = series.data() + b * kWeeks;
            if (mode == TemporalMode::point_sample) {
                out.push_back(s[begin]);
            } else {
                double m = s[begin];
                for (std::size_t w = begin + 1; w < end; ++w)
                    m = std::max(m, s[w]);
                out.push_back(m);
            }
        }
    }
    return out;
}

std::vector<double> statistical_features(std::span<const double> series) {
    std::vector<double> out;
    out.reserve(3 * kBands);
    for (std::size_t b = 0; b < kBands; ++b) {
        const double* s = series.data() + b * kWeeks;
        double sum = 0.0, mx = s[0];
        for (std::size_t w = 0; w < kWeeks; ++w) {
            sum += s[w];
            mx = std::max(mx, s[w]);
        }
        const double mean = sum / kWeeks;
        double ss = 0.0;
        for (std::size_t w = 0; w < kWeeks; ++w)
            ss += (s[w] - mean) * (s[w] - mean);
        out.push_back(mean);
        out.push_back(mx);
        out.push_back(std::sqrt(ss / kWeeks));
    }
    return out;
}

std::vector<double> differential_features(std::span<const double> ndvi_series) {
    std::vector<double> out(ndvi_series.size() - 1);
    for (std::size_t w = 0; w + 1 < ndvi_series.size(); ++w)
        out[w] = ndvi_series[w + 1] - ndvi_series[w];
    return out;
}

namespace {

void spatial_into(const CompositeStack& stack, const std::array<std::size_t, kBands>& slots, int row, int col,
                  SpatialScope scope, std::vector<double>& out) {
    std::array<std::size_t, 8> neighbours{};
    std::size_t count = 0;
    for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
            if (dr == 0 && dc == 0)
                continue;
            int r = row + dr, c = col + dc;
            if (r < 0 || c < 0 || r >= stack.height || c >= stack.width)
                continue;
            std::size_t p = static_cast<std::size_t>(r) * stack.width + c;
            if (stack.removed[p])
                continue;
            neighbours[count++] = p;
        }
    const std::size_t self = static_cast<std::size_t>(row) * stack.width + col;
    const std::size_t first_band = scope == SpatialScope::ndvi ? kBands - 1 : 0;

    for (std::size_t w = 0; w < kWeeks; ++w)
        for (std::size_t b = first_band; b < kBands; ++b) {
            const double* plane = stack.values.data() + stack.value_index(w, slots[b], 0);
            if (count == 0) {
                out.push_back(plane[self]);
                out.push_back(0.0);
                continue;
            }
            double sum = 0.0;
            for (std::size_t k = 0; k < count; ++k)
                sum += plane[neighbours[k]];
            const double mean = sum / static_cast<double>(count);
            double ss = 0.0;
            for (std::size_t k = 0; k < count; ++k) {
                double d = plane[neighbours[k]] - mean;
                ss += d * d;
            }
            out.push_back(mean);
            out.push_back(std::sqrt(ss / static_cast<double>(count)));
        }
}

void pixel_features(const CompositeStack& stack, const std::array<std::size_t, kBands>& slots, const FeatureSpec& spec,
                    int row, int col, std::vector<double>& series, std::vector<double>& out) {
    const std::size_t p = static_cast<std::size_t>(row) * stack.width + col;
    for (std::size_t b = 0; b < kBands; ++b)
        for (std::size_t w = 0; w < kWeeks; ++w)
            series[b * kWeeks + w] = stack.value(w, slots[b], p);

    out.clear();
    if (spec.temporal) {
        auto t = temporal_features(series, spec.temporal_mode);
        out.insert(out.end(), t.begin(), t.end());
    }
    if (spec.statistical) {
        auto s = statistical_features(series);
        out.insert(out.end(), s.begin(), s.end());
    }
    if (spec.differential) {
        auto d = differential_features(std::span<const double>(series).subspan((kBands - 1) * kWeeks, kWeeks));
        out.insert(out.end(), d.begin(), d.end());
    }
    if (spec.spatial)
        spatial_into(stack, slots, row, col, spec.spatial_scope, out);
}

} // namespace

std::vector<double> spatial_features(const CompositeStack& stack, int row, int col, SpatialScope scope) {
    std::vector<double> out;
    if (scope == SpatialScope::none)
        return out;
    out.reserve(kWeeks * 2 * kBands);
    spatial_into(stack, feature_band_slots(stack), row, col, scope, out);
    return out;
}

FeatureMatrix featurize_rows(const CompositeStack& stack, const FeatureSpec& spec, int row_begin, int row_end,
                             std::int32_t tile, int row_offset) {
    spec.validate();
    if (stack.weeks != kWeeksPerYear)
        throw SchemaError("featurize needs a 53-week composite");
    const auto slots = feature_band_slots(stack);

    FeatureMatrix fm;
    fm.names = feature_names(spec);
    fm.cols = fm.names.size();

    // Pixel list first, so that the parallel fill writes to fixed rows.
    for (int r = row_begin; r < row_end; ++r)
        for (int c = 0; c < stack.width; ++c)
            if (!stack.removed[static_cast<std::size_t>(r) * stack.width + c])
                fm.pixels.push_back({tile, r + row_offset, c});
    fm.rows = fm.pixels.size();
    fm.values.assign(fm.rows * fm.cols, 0.0);

    constexpr std::size_t chunk = 256;
    const std::size_t chunks = (fm.rows + chunk - 1) / chunk;
    parallel_for(chunks, [&](std::size_t ci) {
        std::vector<double> series(kBands * kWeeks);
        std::vector<double> out;
        out.reserve(fm.cols);
        const std::size_t end = std::min(fm.rows, (ci + 1) * chunk);
        for (std::size_t i = ci * chunk; i < end; ++i) {
            const auto& px = fm.pixels[i];
            pixel_features(stack, slots, spec, px.row - row_offset, px.col, series, out);
            std::copy(out.begin(), out.end(), fm.values.begin() + static_cast<std::ptrdiff_t>(i * fm.cols));
        }
    });
    return fm;
}

FeatureMatrix featurize(const CompositeStack& stack, const FeatureSpec& spec, std::int32_t tile) {
    return featurize_rows(stack, spec, 0, stack.height, tile, 0);
}

FeatureMatrix FeatureMatrix::select_rows(std::span<const std::size_t> index) const {
    FeatureMatrix out;
    out.cols = cols;
    out.names = names;
    out.rows = index.size();
    out.values.resize(out.rows * cols);
    out.pixels.reserve(out.rows);
    if (has_labels())
        out.labels.reserve(out.rows);
    for (std::size_t k = 0; k < index.size(); ++k) {
        std::size_t i = index[k];
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(i * cols), cols,
                    out.values.begin() + static_cast<std::ptrdiff_t>(k * cols));
        out.pixels.push_back(pixels[i]);
        if (has_labels())
            out.labels.push_back(labels[i]);
    }
    return out;
}

void FeatureMatrix::append(const FeatureMatrix& other) {
    if (rows == 0 && names.empty()) {
        *this = other;
        return;
    }
    if (other.names != names)
        throw SchemaError("cannot append feature matrices with different columns");
    if (has_labels() != other.has_labels() && rows > 0 && other.rows > 0)
        throw SchemaError("cannot append labeled and unlabeled feature matrices");
    values.insert(values.end(), other.values.begin(), other.values.end());
    pixels.insert(pixels.end(), other.pixels.begin(), other.pixels.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
    rows += other.rows;
}

FeatureMatrix select_labeled(const FeatureMatrix& fm, const LabelRaster& labels) {
    std::vector<std::size_t> keep;
    std::vector<std::uint8_t> cls;
    for (std::size_t i = 0; i < fm.rows; ++i) {
        const auto& px = fm.pixels[i];
        if (px.row < 0 || px.row >= labels.height || px.col < 0 || px.col >= labels.width)
            continue;
        std::uint8_t v = labels.values[labels.index(px.row, px.col)];
        if (v == LabelRaster::unlabeled)
            continue;
        keep.push_back(i);
        cls.push_back(v);
    }
    FeatureMatrix out = fm.select_rows(keep);
    out.labels = std::move(cls);
    return out;
}

ColumnScaler ColumnScaler::fit(const FeatureMatrix& fm, NormalizationMethod method) {
    if (method != NormalizationMethod::standardize && method != NormalizationMethod::normalize)
        throw ConfigError(std::string(normalization_name(method)) + " is a pointwise method for composites");
    ColumnScaler s;
    s.method = method;
    s.offset.assign(fm.cols, 0.0);
    s.factor.assign(fm.cols, 0.0);
    if (fm.rows == 0)
        return s;
    for (std::size_t j = 0; j < fm.cols; ++j) {
        if (method == NormalizationMethod::standardize) {
            double lo = fm.at(0, j), hi = lo;
            for (std::size_t i = 1; i < fm.rows; ++i) {
                lo = std::min(lo, fm.at(i, j));
                hi = std::max(hi, fm.at(i, j));
            }
            s.offset[j] = lo;
            s.factor[j] = hi > lo ? 1.0 / (hi - lo) : 0.0;
        } else {
            double sum = 0.0;
            for (std::size_t i = 0; i < fm.rows; ++i)
                sum += fm.at(i, j);
            const double mean = sum / static_cast<double>(fm.rows);
            double ss = 0.0;
            for (std::size_t i = 0; i < fm.rows; ++i)
                ss += (fm.at(i, j) - mean) * (fm.at(i, j) - mean);
            const double sd = std::sqrt(ss / static_cast<double>(fm.rows));
            s.offset[j] = mean;
            s.factor[j] = sd > 0.0 ? 1.0 / sd : 0.0;
        }
    }
    return s;
}

void ColumnScaler::apply(FeatureMatrix& fm) const {
    if (offset.size() != fm.cols)
        throw SchemaError("scaler width does not match the feature matrix");
    for (std::size_t i = 0; i < fm.rows; ++i) {
        auto r = fm.row(i);
        for (std::size_t j = 0; j < fm.cols; ++j)
            r[j] = (r[j] - offset[j]) * factor[j];
    }
}

FeatureMatrix normalize(const FeatureMatrix& fm, NormalizationMethod method) {
    FeatureMatrix out = fm;
    ColumnScaler::fit(fm, method).apply(out);
    return out;
}

void write_feature_csv(const FeatureMatrix& fm, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    for (std::size_t j = 0; j < fm.cols; ++j)
        out << (j ? "," : "") << fm.names[j];
    out << '\n';
    char buf[32];
    for (std::size_t i = 0; i < fm.rows; ++i) {
        for (std::size_t j = 0; j < fm.cols; ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", fm.at(i, j));
            out << (j ? "," : "") << buf;
        }
        out << '\n';
    }
    if (!out)
        throw IoError("write failed: " + path.string());
}

void write_feature_matrix(const FeatureMatrix& fm, const std::filesystem::path& base) {
    auto bin_path = base;
    bin_path += ".f64";
    auto json_path = base;
    json_path += ".json";

    std::vector<char> bytes(fm.values.size() * 8);
    for (std::size_t i = 0; i < fm.values.size(); ++i) {
        auto u = std::bit_cast<std::uint64_t>(fm.values[i]);
        for (int k = 0; k < 8; ++k)
            bytes[i * 8 + k] = static_cast<char>((u >> (8 * k)) & 0xFF);
    }
    std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
    if (!bin)
        throw IoError("cannot open " + bin_path.string() + " for writing");
    bin.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!bin)
        throw IoError("write failed: " + bin_path.string());

    nlohmann::ordered_json j;
    j["rows"] = fm.rows;
    j["cols"] = fm.cols;
    j["dtype"] = "f64le";
    j["names"] = fm.names;
    auto& px = j["pixels"] = nlohmann::ordered_json::array();
    for (const auto& p : fm.pixels)
        px.push_back({p.tile, p.row, p.col});
    j["labels"] = fm.labels;
    std::ofstream js(json_path, std::ios::trunc);
    if (!js)
        throw IoError("cannot open " + json_path.string() + " for writing");
    js << j.dump() << '\n';
}

FeatureMatrix read_feature_matrix(const std::filesystem::path& base) {
    auto bin_path = base;
    bin_path += ".f64";
    auto json_path = base;
    json_path += ".json";

    FeatureMatrix fm;
    std::ifstream js(json_path);
    if (!js)
        throw IoError("cannot open " + json_path.string());
    try {
        auto j = nlohmann::json::parse(js);
        fm.rows = j.at("rows").get<std::size_t>();
        fm.cols = j.at("cols").get<std::size_t>();
        fm.names = j.at("names").get<std::vector<std::string>>();
        for (const auto& p : j.at("pixels"))
            fm.pixels.push_back({p.at(0).get<std::int32_t>(), p.at(1).get<std::int32_t>(), p.at(2).get<std::int32_t>()});
        fm.labels = j.at("labels").get<std::vector<std::uint8_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed feature sidecar: ") + e.what());
    }
    if (fm.names.size() != fm.cols || fm.pixels.size() != fm.rows || (!fm.labels.empty() && fm.labels.size() != fm.rows))
        throw SchemaError("feature sidecar is inconsistent");

    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin)
        throw IoError("cannot open " + bin_path.string());
    std::vector<char> bytes{std::istreambuf_iterator<char>(bin), std::istreambuf_iterator<char>()};
    if (bytes.size() != fm.rows * fm.cols * 8)
        throw TruncationError("feature block size does not match its sidecar");
    fm.values.resize(fm.rows * fm.cols);
    for (std::size_t i = 0; i < fm.values.size(); ++i) {
        std::uint64_t u = 0;
        for (int k = 0; k < 8; ++k)
            u |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i * 8 + k])) << (8 * k);
        fm.values[i] = std::bit_cast<double>(u);
    }
    return fm;
}

} // namespace cropmap
