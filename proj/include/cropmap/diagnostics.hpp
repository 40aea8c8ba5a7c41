#pragma once

#include "cropmap/preprocess.hpp"
#include "cropmap/raster_io.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cropmap {

// ------------------------------------------------------------------ smoothing

enum class SavgolEdge {
    interp,   // fit the first/last full window, evaluate it at the edge points
    mirror,   // reflect the series about its end samples (x[-k] = x[k])
};

/// Savitzky-Golay weights of a centered window: row p gives the fitted value at
/// offset p - window/2 from the least-squares polynomial over the window.
std::vector<std::vector<double>> savgol_weights(int window, int order);

/// ConfigError unless window is odd, order < window <= series length.
std::vector<double> savgol_smooth(std::span<const double> series, int window = 9, int order = 3,
                                  SavgolEdge edge = SavgolEdge::interp);

// ------------------------------------------------------------------ ndvi profiles

struct ClassProfile {
    bool present = false;
    std::size_t pixels = 0;
    std::vector<double> mean;      // per week
    std::vector<double> std;       // population std per week
    std::vector<double> smoothed;  // savgol of mean
};

struct NdviProfile {
    std::array<ClassProfile, 2> classes;   // [non-cropland, cropland]
    int window = 9;
    int order = 3;
};

/// Weekly NDVI mean/std per class over labeled, non-removed pixels. The stack
/// must carry an NDVI band.
NdviProfile class_ndvi_profile(const CompositeStack& stack, const LabelRaster& labels, int window = 9,
                               int order = 3, SavgolEdge edge = SavgolEdge::interp);

/// week,class,pixels,mean,std,smoothed
void write_profile_csv(const NdviProfile& p, const std::filesystem::path& path);

// ------------------------------------------------------------------ semivariogram

struct VarioSample {
    double x = 0.0;
    double y = 0.0;
    double value = 0.0;
};

std::vector<VarioSample> subsample_stride(std::span<const VarioSample> samples, std::size_t stride);
/// n samples drawn without replacement, kept in input order.
std::vector<VarioSample> subsample_random(std::span<const VarioSample> samples, std::size_t n, std::uint64_t seed);

struct Semivariogram {
    double bin_width = 0.0;
    double max_lag = 0.0;
    std::vector<std::size_t> bin;        // bin index of each entry
    std::vector<double> lag;             // bin center
    std::vector<double> mean_distance;   // mean pair distance in the bin
    std::vector<std::uint64_t> pairs;
    std::vector<double> gamma;
};

/// Unordered pairs i < j with d = sqrt(dx^2 + dy^2) <= max_lag go to bin
/// floor(d / bin_width) (d == max_lag falls in the last bin);
/// gamma = sum (zi - zj)^2 / (2 N). Empty bins are omitted.
Semivariogram empirical_semivariogram(std::span<const VarioSample> samples, double bin_width, double max_lag,
                                      std::size_t stride = 1, unsigned threads = 0);

struct SphericalFit {
    double nugget = 0.0;
    double sill = 0.0;       // partial sill, above the nugget
    double range = 0.0;
    double objective = 0.0;  // pair-weighted squared error
    bool degenerate = false;
};

/// n + s (1.5 h/a - 0.5 (h/a)^3) for h <= a, n + s beyond.
double spherical_model(double h, double nugget, double sill, double range);
double spherical_objective(const Semivariogram& vg, double nugget, double sill, double range);

/// Coarse grid over (n, s, a), then cyclic golden-section refinement per
/// coordinate that only accepts improvements. n, s >= 0, a in (0, max_lag].
SphericalFit fit_spherical(const Semivariogram& vg);

/// Points evaluated by the coarse grid of fit_spherical, for checks.
std::vector<std::array<double, 3>> spherical_coarse_grid(const Semivariogram& vg);

/// lag,mean_distance,pairs,gamma + JSON sidecar with the fitted parameters.
void write_variogram(const Semivariogram& vg, const SphericalFit& fit, const std::filesystem::path& csv_path);

} // namespace cropmap
