#include "cropmap/preprocess.hpp"

#include "cropmap/errors.hpp"
#include "cropmap/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace cropmap {

CloudMaskPolicy CloudMaskPolicy::sentinel2_default() {
    static constexpr int codes[] = {0, 1, 3, 7, 8, 9, 10};
    return from_codes(codes);
}

CloudMaskPolicy CloudMaskPolicy::from_codes(std::span<const int> codes) {
    CloudMaskPolicy p;
    for (int c : codes) {
        if (c < 0 || c > 11)
            throw ConfigError("SCL code " + std::to_string(c) + " outside 0..11");
        p.masked.set(static_cast<std::size_t>(c));
    }
    return p;
}

std::vector<int> CloudMaskPolicy::codes() const {
    std::vector<int> out;
    for (int c = 0; c < 12; ++c)
        if (masked.test(static_cast<std::size_t>(c)))
            out.push_back(c);
    return out;
}

std::vector<std::uint8_t> cloud_mask(std::span<const std::uint16_t> scl_plane, const CloudMaskPolicy& policy) {
    std::vector<std::uint8_t> usable(scl_plane.size());
    for (std::size_t i = 0; i < scl_plane.size(); ++i) {
        std::uint16_t code = scl_plane[i];
        usable[i] = (code < 12 && policy.masked.test(code)) ? 0 : 1;
    }
    return usable;
}

std::size_t CompositeStack::band_index(Band b) const {
    auto it = std::find(bands.begin(), bands.end(), b);
    if (it == bands.end())
        throw SchemaError("composite lacks band " + std::string(band_name(b)));
    return static_cast<std::size_t>(it - bands.begin());
}

std::vector<Observation> observations_from_stack(const BandStack& raw, const CloudMaskPolicy& policy,
                                                 std::vector<Band>* spectral_bands) {
    if (raw.times().kind != TimeAxis::Kind::dates)
        throw SchemaError("raw stack must carry acquisition dates");
    std::size_t scl = raw.require_band(Band::SCL);
    std::vector<std::size_t> spectral;
    std::vector<Band> names;
    for (std::size_t b = 0; b < raw.band_count(); ++b) {
        Band band = raw.bands()[b];
        if (band == Band::B02 || band == Band::B03 || band == Band::B04 || band == Band::B08) {
            spectral.push_back(b);
            names.push_back(band);
        }
    }
    if (spectral.empty())
        throw SchemaError("raw stack has no spectral bands");
    if (spectral_bands)
        *spectral_bands = names;

    std::vector<Observation> out;
    out.reserve(raw.time_count());
    const std::size_t n = raw.plane_size();
    for (std::size_t t = 0; t < raw.time_count(); ++t) {
        Observation obs;
        obs.date = raw.times().values[t];
        obs.values.resize(spectral.size() * n);
        for (std::size_t k = 0; k < spectral.size(); ++k) {
            auto plane = raw.plane(t, spectral[k]);
            std::copy(plane.begin(), plane.end(), obs.values.begin() + static_cast<std::ptrdiff_t>(k * n));
        }
        obs.usable = cloud_mask(raw.plane(t, scl), policy);
        out.push_back(std::move(obs));
    }
    return out;
}

CompositeStack weekly_composite(std::span<const Observation> observations, const std::vector<Band>& bands,
                                const GeoRef& georef, int height, int width, int year) {
    CompositeStack c;
    c.georef = georef;
    c.bands = bands;
    c.height = height;
    c.width = width;
    const std::size_t n = c.plane_size();
    const std::size_t nb = bands.size();
    c.values.assign(kWeeksPerYear * nb * n, 0.0);
    c.validity.assign(kWeeksPerYear * n, 0);
    c.removed.assign(n, 1);

    std::vector<std::size_t> order(observations.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return observations[a].date < observations[b].date; });

    for (std::size_t idx : order) {
        const Observation& obs = observations[idx];
        if (year_of(obs.date) != year)
            throw DomainError("observation dated " + format_date(obs.date) + " is outside year " +
                              std::to_string(year));
        if (obs.values.size() != nb * n || obs.usable.size() != n)
            throw InvariantError("observation grid does not match the composite shape");
        const std::size_t week = std::min<std::size_t>((day_of_year(obs.date) - 1) / 7, kWeeksPerYear - 1);
        std::uint8_t* valid = c.validity.data() + week * n;
        for (std::size_t p = 0; p < n; ++p) {
            if (valid[p] || !obs.usable[p])
                continue;
            bool has_data = true;
            for (std::size_t b = 0; b < nb; ++b)
                if (obs.values[b * n + p] == BandStack::nodata) {
                    has_data = false;
                    break;
                }
            if (!has_data)
                continue;
            for (std::size_t b = 0; b < nb; ++b)
                c.values[c.value_index(week, b, p)] = obs.values[b * n + p];
            valid[p] = 1;
            c.removed[p] = 0;
        }
    }
    return c;
}

ImputationMethod parse_imputation(std::string_view s) {
    if (s == "linear")
        return ImputationMethod::linear;
    if (s == "ffill")
        return ImputationMethod::ffill;
    throw ConfigError("unknown imputation method '" + std::string(s) + "'");
}

std::string_view imputation_name(ImputationMethod m) {
    return m == ImputationMethod::linear ? "linear" : "ffill";
}

NormalizationMethod parse_normalization(std::string_view s) {
    if (s == "as_float")
        return NormalizationMethod::as_float;
    if (s == "as_reflectance")
        return NormalizationMethod::as_reflectance;
    if (s == "standardize")
        return NormalizationMethod::standardize;
    if (s == "normalize")
        return NormalizationMethod::normalize;
    throw ConfigError("unknown normalization method '" + std::string(s) + "'");
}

std::string_view normalization_name(NormalizationMethod m) {
    switch (m) {
    case NormalizationMethod::as_float: return "as_float";
    case NormalizationMethod::as_reflectance: return "as_reflectance";
    case NormalizationMethod::standardize: return "standardize";
    case NormalizationMethod::normalize: return "normalize";
    }
    return "?";
}

void impute_series(std::span<double> series, std::span<const std::uint8_t> valid, ImputationMethod method) {
    const std::size_t len = series.size();
    std::size_t first = len;
    for (std::size_t w = 0; w < len; ++w)
        if (valid[w]) {
            first = w;
            break;
        }
    if (first == len)
        return;

    for (std::size_t w = 0; w < first; ++w)
        series[w] = series[first];

    std::size_t prev = first;
    for (std::size_t w = first + 1; w < len; ++w) {
        if (!valid[w])
            continue;
        if (w > prev + 1) {
            const double a = series[prev];
            const double b = series[w];
            const double span = static_cast<double>(w - prev);
            for (std::size_t g = prev + 1; g < w; ++g)
                series[g] = method == ImputationMethod::linear
                                ? a + (b - a) * (static_cast<double>(g - prev) / span)
                                : a;
        }
        prev = w;
    }
    for (std::size_t w = prev + 1; w < len; ++w)
        series[w] = series[prev];
}

CompositeStack impute(const CompositeStack& stack, ImputationMethod method) {
    CompositeStack out = stack;
    const std::size_t n = out.plane_size();
    const std::size_t nb = out.band_count();
    const std::size_t weeks = static_cast<std::size_t>(out.weeks);

    parallel_for(static_cast<std::size_t>(out.height), [&](std::size_t row) {
        std::vector<double> series(weeks);
        std::vector<std::uint8_t> valid(weeks);
        for (std::size_t p = row * out.width; p < (row + 1) * out.width; ++p) {
            if (out.removed[p])
                continue;
            for (std::size_t w = 0; w < weeks; ++w)
                valid[w] = out.validity[w * n + p];
            for (std::size_t b = 0; b < nb; ++b) {
                for (std::size_t w = 0; w < weeks; ++w)
                    series[w] = out.values[out.value_index(w, b, p)];
                impute_series(series, valid, method);
                for (std::size_t w = 0; w < weeks; ++w)
                    out.values[out.value_index(w, b, p)] = series[w];
            }
        }
    });
    return out;
}

CompositeStack normalize(const CompositeStack& stack, NormalizationMethod method) {
    double scale = 0.0;
    switch (method) {
    case NormalizationMethod::as_float: scale = 65535.0; break;
    case NormalizationMethod::as_reflectance: scale = 10000.0; break;
    default:
        throw ConfigError(std::string(normalization_name(method)) +
                          " is a per-feature method and applies to feature matrices only");
    }
    CompositeStack out = stack;
    for (std::size_t w = 0; w < static_cast<std::size_t>(out.weeks); ++w)
        for (std::size_t b = 0; b < out.band_count(); ++b) {
            if (out.bands[b] == Band::NDVI)
                continue;
            double* v = out.values.data() + out.value_index(w, b, 0);
            for (std::size_t p = 0; p < out.plane_size(); ++p)
                v[p] /= scale;
        }
    return out;
}

BandStack composite_to_bandstack(const CompositeStack& c) {
    std::vector<Band> bands;
    std::vector<std::size_t> src;
    for (std::size_t b = 0; b < c.band_count(); ++b) {
        if (c.bands[b] == Band::NDVI || c.bands[b] == Band::MASK || c.bands[b] == Band::SCL)
            continue;
        bands.push_back(c.bands[b]);
        src.push_back(b);
    }
    bands.push_back(Band::MASK);
    BandStack s(c.georef, bands, TimeAxis::weeks(c.weeks), c.height, c.width);
    const std::size_t n = c.plane_size();
    for (std::size_t w = 0; w < static_cast<std::size_t>(c.weeks); ++w) {
        for (std::size_t k = 0; k < src.size(); ++k) {
            auto plane = s.plane(w, k);
            for (std::size_t p = 0; p < n; ++p) {
                double v = c.removed[p] ? 0.0 : std::round(c.value(w, src[k], p));
                plane[p] = static_cast<std::uint16_t>(std::clamp(v, 0.0, 65535.0));
            }
        }
        auto mask_plane = s.plane(w, src.size());
        for (std::size_t p = 0; p < n; ++p)
            mask_plane[p] = c.validity[w * n + p] ? 1 : 0;
    }
    return s;
}

CompositeStack composite_from_bandstack(const BandStack& s) {
    if (s.times().kind != TimeAxis::Kind::weeks || s.time_count() != static_cast<std::size_t>(kWeeksPerYear))
        throw SchemaError("composite stack must have 53 week steps");
    std::size_t mask_band = s.require_band(Band::MASK);
    CompositeStack c;
    c.georef = s.georef();
    c.height = s.height();
    c.width = s.width();
    c.weeks = kWeeksPerYear;
    std::vector<std::size_t> src;
    for (std::size_t b = 0; b < s.band_count(); ++b)
        if (b != mask_band) {
            c.bands.push_back(s.bands()[b]);
            src.push_back(b);
        }
    const std::size_t n = c.plane_size();
    c.values.assign(kWeeksPerYear * c.bands.size() * n, 0.0);
    c.validity.assign(kWeeksPerYear * n, 0);
    c.removed.assign(n, 1);
    for (std::size_t w = 0; w < static_cast<std::size_t>(kWeeksPerYear); ++w) {
        for (std::size_t k = 0; k < src.size(); ++k) {
            auto plane = s.plane(w, src[k]);
            double* dst = c.values.data() + c.value_index(w, k, 0);
            for (std::size_t p = 0; p < n; ++p)
                dst[p] = plane[p];
        }
        auto m = s.plane(w, mask_band);
        for (std::size_t p = 0; p < n; ++p)
            if (m[p]) {
                c.validity[w * n + p] = 1;
                c.removed[p] = 0;
            }
    }
    return c;
}

} // namespace cropmap
