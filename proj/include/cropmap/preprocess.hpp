#pragma once

#include "cropmap/raster_io.hpp"

#include <bitset>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace cropmap {

/// Number of weekly composite steps in a calendar year (52 full weeks + remainder).
inline constexpr int kWeeksPerYear = 53;

/// SCL classes treated as unusable.
struct CloudMaskPolicy {
    std::bitset<12> masked;

    /// {0 nodata, 1 saturated/defective, 3 cloud shadow, 7 unclassified (low-probability
    /// cloud stand-in), 8 cloud medium, 9 cloud high, 10 thin cirrus}.
    static CloudMaskPolicy sentinel2_default();
    /// Throws ConfigError for codes outside 0..11.
    static CloudMaskPolicy from_codes(std::span<const int> codes);
    std::vector<int> codes() const;
};

/// True where the pixel is usable.
std::vector<std::uint8_t> cloud_mask(std::span<const std::uint16_t> scl_plane, const CloudMaskPolicy& policy);

/// One acquisition: spectral planes (band-major, H*W each) plus a usability mask.
struct Observation {
    std::int32_t date = 0;                   // days since epoch
    std::vector<std::uint16_t> values;       // bands x H x W
    std::vector<std::uint8_t> usable;        // H x W
};

/// Real-valued weekly composite carrier.
struct CompositeStack {
    GeoRef georef;
    std::vector<Band> bands;
    int weeks = kWeeksPerYear;
    int height = 0;
    int width = 0;
    std::vector<double> values;              // weeks x bands x H x W
    std::vector<std::uint8_t> validity;      // weeks x H x W: observed before imputation
    std::vector<std::uint8_t> removed;       // H x W: no observation all year

    std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
    std::size_t band_count() const { return bands.size(); }
    std::size_t value_index(std::size_t w, std::size_t b, std::size_t pixel) const {
        return (w * bands.size() + b) * plane_size() + pixel;
    }
    double value(std::size_t w, std::size_t b, std::size_t pixel) const { return values[value_index(w, b, pixel)]; }
    bool valid(std::size_t w, std::size_t pixel) const { return validity[w * plane_size() + pixel] != 0; }
    std::size_t band_index(Band b) const;

    friend bool operator==(const CompositeStack&, const CompositeStack&) = default;
};

/// Splits a dated stack (spectral bands + SCL) into observations, masking by SCL.
std::vector<Observation> observations_from_stack(const BandStack& raw, const CloudMaskPolicy& policy,
                                                 std::vector<Band>* spectral_bands = nullptr);

/// Per pixel and 7-day bin from Jan 1 (the 53rd bin holds the 1-2 remainder days),
/// keeps the earliest usable, non-nodata observation. Throws DomainError when an
/// observation falls outside `year`.
CompositeStack weekly_composite(std::span<const Observation> observations, const std::vector<Band>& bands,
                                const GeoRef& georef, int height, int width, int year);

enum class ImputationMethod { linear, ffill };
enum class NormalizationMethod { as_float, as_reflectance, standardize, normalize };

ImputationMethod parse_imputation(std::string_view s);
std::string_view imputation_name(ImputationMethod m);
NormalizationMethod parse_normalization(std::string_view s);
std::string_view normalization_name(NormalizationMethod m);

/// Fills invalid weeks of every non-removed pixel. Validity is left untouched
/// so the gap record survives.
CompositeStack impute(const CompositeStack& stack, ImputationMethod method);

/// Imputes one series in place given its validity; no-op if nothing is valid.
void impute_series(std::span<double> series, std::span<const std::uint8_t> valid, ImputationMethod method);

/// Pointwise normalization of a composite (as_float, as_reflectance only). Removed
/// pixels stay 0. Per-column methods throw ConfigError here; use normalize_columns.
CompositeStack normalize(const CompositeStack& stack, NormalizationMethod method);

/// Composite <-> BSTK. The file form stores rounded DNs for the spectral bands
/// plus a MASK band carrying weekly validity.
BandStack composite_to_bandstack(const CompositeStack& c);
CompositeStack composite_from_bandstack(const BandStack& s);

} // namespace cropmap
