#include "cropmap/diagnostics.hpp"

#include "cropmap/errors.hpp"
#include "cropmap/parallel.hpp"
#include "cropmap/random.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

namespace cropmap {

std::vector<std::vector<double>> savgol_weights(int window, int order) {
    if (window < 1 || window % 2 == 0)
        throw ConfigError("savgol window must be odd and positive");
    if (order < 0 || order >= window)
        throw ConfigError("savgol order must be in [0, window)");
    const int half = window / 2;
    Eigen::MatrixXd A(window, order + 1);
    for (int i = 0; i < window; ++i)
        for (int k = 0; k <= order; ++k)
            A(i, k) = std::pow(static_cast<double>(i - half), k);
    // pinv(A): polynomial coefficients from window samples
    const Eigen::MatrixXd pinv = A.colPivHouseholderQr().solve(Eigen::MatrixXd::Identity(window, window));
    const Eigen::MatrixXd hat = A * pinv;
    std::vector<std::vector<double>> w(static_cast<std::size_t>(window), std::vector<double>(window));
    for (int p = 0; p < window; ++p)
        for (int i = 0; i < window; ++i)
            w[static_cast<std::size_t>(p)][static_cast<std::size_t>(i)] = hat(p, i);
    return w;
}

std::vector<double> savgol_smooth(std::span<const double> series, int window, int order, SavgolEdge edge) {
    const auto w = savgol_weights(window, order);
    const std::size_t n = series.size();
    if (static_cast<std::size_t>(window) > n)
        throw ConfigError("savgol window longer than the series");
    const std::size_t win = static_cast<std::size_t>(window), half = win / 2;
    const auto& center = w[half];
    std::vector<double> out(n);

    auto at = [&](std::ptrdiff_t i) {
        // mirror: x[-k] = x[k], x[n-1+k] = x[n-1-k]
        const auto last = static_cast<std::ptrdiff_t>(n) - 1;
        if (i < 0)
            i = -i;
        if (i > last)
            i = 2 * last - i;
        return series[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, last))];
    };

    for (std::size_t p = 0; p < n; ++p) {
        double acc = 0.0;
        if (p >= half && p + half < n) {
            for (std::size_t i = 0; i < win; ++i)
                acc += center[i] * series[p - half + i];
        } else if (edge == SavgolEdge::interp) {
            const bool head = p < half;
            const std::size_t start = head ? 0 : n - win;
            const auto& row = w[p - start];
            for (std::size_t i = 0; i < win; ++i)
                acc += row[i] * series[start + i];
        } else {
            for (std::size_t i = 0; i < win; ++i)
                acc += center[i] * at(static_cast<std::ptrdiff_t>(p + i) - static_cast<std::ptrdiff_t>(half));
        }
        out[p] = acc;
    }
    return out;
}

NdviProfile class_ndvi_profile(const CompositeStack& stack, const LabelRaster& labels, int window, int order,
                               SavgolEdge edge) {
    if (labels.height != stack.height || labels.width != stack.width)
        throw SchemaError("label raster and composite differ in shape");
    const std::size_t nd = stack.band_index(Band::NDVI);
    const std::size_t n = stack.plane_size();
    const std::size_t weeks = static_cast<std::size_t>(stack.weeks);

    NdviProfile prof;
    prof.window = window;
    prof.order = order;
    std::array<std::vector<std::size_t>, 2> members;
    for (std::size_t p = 0; p < n; ++p) {
        const std::uint8_t v = labels.values[p];
        if (v <= 1 && !stack.removed[p])
            members[v].push_back(p);
    }
    for (std::size_t c = 0; c < 2; ++c) {
        auto& cp = prof.classes[c];
        cp.pixels = members[c].size();
        cp.present = cp.pixels > 0;
        if (!cp.present)
            continue;
        cp.mean.assign(weeks, 0.0);
        cp.std.assign(weeks, 0.0);
        const double cnt = static_cast<double>(cp.pixels);
        for (std::size_t w = 0; w < weeks; ++w) {
            double sum = 0.0;
            for (auto p : members[c])
                sum += stack.value(w, nd, p);
            const double mean = sum / cnt;
            double ss = 0.0;
            for (auto p : members[c]) {
                const double d = stack.value(w, nd, p) - mean;
                ss += d * d;
            }
            cp.mean[w] = mean;
            cp.std[w] = std::sqrt(ss / cnt);
        }
        cp.smoothed = savgol_smooth(cp.mean, window, order, edge);
    }
    return prof;
}

namespace {

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    return out;
}

} // namespace

void write_profile_csv(const NdviProfile& p, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "week,class,pixels,mean,std,smoothed\n";
    static const char* names[2] = {"non_cropland", "cropland"};
    for (std::size_t c = 0; c < 2; ++c) {
        const auto& cp = p.classes[c];
        if (!cp.present)
            continue;
        for (std::size_t w = 0; w < cp.mean.size(); ++w)
            out << w << ',' << names[c] << ',' << cp.pixels << ',' << num(cp.mean[w]) << ',' << num(cp.std[w]) << ','
                << num(cp.smoothed[w]) << '\n';
    }
}

std::vector<VarioSample> subsample_stride(std::span<const VarioSample> samples, std::size_t stride) {
    if (stride == 0)
        throw ConfigError("subsample stride must be >= 1");
    std::vector<VarioSample> out;
    for (std::size_t i = 0; i < samples.size(); i += stride)
        out.push_back(samples[i]);
    return out;
}

std::vector<VarioSample> subsample_random(std::span<const VarioSample> samples, std::size_t n, std::uint64_t seed) {
    if (n >= samples.size())
        return {samples.begin(), samples.end()};
    std::vector<std::size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i)
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    std::vector<VarioSample> out;
    for (auto i : idx)
        out.push_back(samples[i]);
    return out;
}

Semivariogram empirical_semivariogram(std::span<const VarioSample> all, double bin_width, double max_lag,
                                      std::size_t stride, unsigned threads) {
    if (!(bin_width > 0.0) || !(max_lag > 0.0))
        throw ConfigError("bin_width and max_lag must be positive");
    const auto samples = subsample_stride(all, stride);
    if (samples.size() < 2)
        throw DomainError("semivariogram needs at least 2 samples");
    const std::size_t nb = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(max_lag / bin_width)));
    const std::size_t n = samples.size();

    struct Acc {
        std::vector<std::uint64_t> count;
        std::vector<double> sq;
        std::vector<double> dist;
    };
    const std::size_t chunk = 64;
    const std::size_t n_chunks = (n + chunk - 1) / chunk;
    std::vector<Acc> acc(n_chunks);
    parallel_for(
        n_chunks,
        [&](std::size_t c) {
            Acc& a = acc[c];
            a.count.assign(nb, 0);
            a.sq.assign(nb, 0.0);
            a.dist.assign(nb, 0.0);
            const std::size_t end = std::min(n, (c + 1) * chunk);
            for (std::size_t i = c * chunk; i < end; ++i)
                for (std::size_t j = i + 1; j < n; ++j) {
                    const double dx = samples[i].x - samples[j].x, dy = samples[i].y - samples[j].y;
                    const double d = std::sqrt(dx * dx + dy * dy);
                    if (d > max_lag)
                        continue;
                    const std::size_t b = std::min(nb - 1, static_cast<std::size_t>(std::floor(d / bin_width)));
                    const double dz = samples[i].value - samples[j].value;
                    ++a.count[b];
                    a.sq[b] += dz * dz;
                    a.dist[b] += d;
                }
        },
        threads);

    Semivariogram vg;
    vg.bin_width = bin_width;
    vg.max_lag = max_lag;
    for (std::size_t b = 0; b < nb; ++b) {
        std::uint64_t cnt = 0;
        double sq = 0.0, dist = 0.0;
        for (const auto& a : acc) {
            cnt += a.count[b];
            sq += a.sq[b];
            dist += a.dist[b];
        }
        if (cnt == 0)
            continue;
        vg.bin.push_back(b);
        vg.lag.push_back((static_cast<double>(b) + 0.5) * bin_width);
        vg.mean_distance.push_back(dist / static_cast<double>(cnt));
        vg.pairs.push_back(cnt);
        vg.gamma.push_back(sq / (2.0 * static_cast<double>(cnt)));
    }
    return vg;
}

double spherical_model(double h, double nugget, double sill, double range) {
    if (h >= range)
        return nugget + sill;
    const double r = h / range;
    return nugget + sill * (1.5 * r - 0.5 * r * r * r);
}

double spherical_objective(const Semivariogram& vg, double nugget, double sill, double range) {
    double obj = 0.0;
    for (std::size_t b = 0; b < vg.lag.size(); ++b) {
        const double e = vg.gamma[b] - spherical_model(vg.lag[b], nugget, sill, range);
        obj += static_cast<double>(vg.pairs[b]) * e * e;
    }
    return obj;
}

namespace {

struct Box {
    double hi_gamma;
    double lo_range, hi_range;
};

Box fit_box(const Semivariogram& vg) {
    const double gmax = *std::max_element(vg.gamma.begin(), vg.gamma.end());
    return {2.0 * gmax, 1e-6 * vg.max_lag, vg.max_lag};
}

constexpr int kGridN = 11;
constexpr int kGridA = 40;

} // namespace

std::vector<std::array<double, 3>> spherical_coarse_grid(const Semivariogram& vg) {
    if (vg.gamma.empty())
        return {};
    const Box box = fit_box(vg);
    std::vector<std::array<double, 3>> pts;
    for (int i = 0; i < kGridN; ++i)
        for (int j = 0; j < kGridN; ++j)
            for (int k = 1; k <= kGridA; ++k)
                pts.push_back({box.hi_gamma * i / (kGridN - 1), box.hi_gamma * j / (kGridN - 1),
                               vg.max_lag * k / kGridA});
    return pts;
}

SphericalFit fit_spherical(const Semivariogram& vg) {
    if (vg.lag.size() < 3)
        throw DomainError("spherical fit needs at least 3 non-empty bins");
    SphericalFit fit;
    if (std::all_of(vg.gamma.begin(), vg.gamma.end(), [](double g) { return g == 0.0; })) {
        fit.range = vg.lag.front();
        fit.degenerate = true;
        return fit;
    }

    std::array<double, 3> best{};
    double best_obj = std::numeric_limits<double>::infinity();
    for (const auto& p : spherical_coarse_grid(vg)) {
        const double o = spherical_objective(vg, p[0], p[1], p[2]);
        if (o < best_obj) {
            best_obj = o;
            best = p;
        }
    }

    const Box box = fit_box(vg);
    const double lo[3] = {0.0, 0.0, box.lo_range};
    const double hi[3] = {box.hi_gamma, box.hi_gamma, box.hi_range};
    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;

    for (int cycle = 0; cycle < 500; ++cycle) {
        const double start_obj = best_obj;
        for (int c = 0; c < 3; ++c) {
            auto f = [&](double v) {
                auto q = best;
                q[static_cast<std::size_t>(c)] = v;
                return spherical_objective(vg, q[0], q[1], q[2]);
            };
            double a = lo[c], b = hi[c];
            double x1 = b - inv_phi * (b - a), x2 = a + inv_phi * (b - a);
            double f1 = f(x1), f2 = f(x2);
            for (int it = 0; it < 100 && (b - a) > 1e-12 * (hi[c] - lo[c]); ++it) {
                if (f1 <= f2) {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - inv_phi * (b - a);
                    f1 = f(x1);
                } else {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + inv_phi * (b - a);
                    f2 = f(x2);
                }
            }
            const double x = f1 <= f2 ? x1 : x2;
            const double o = f(x);
            if (o < best_obj) {
                best_obj = o;
                best[static_cast<std::size_t>(c)] = x;
            }
        }
        if (!(best_obj < start_obj - 1e-15 * std::max(1.0, start_obj)))
            break;
    }
    fit.nugget = best[0];
    fit.sill = best[1];
    fit.range = best[2];
    fit.objective = best_obj;
    return fit;
}

void write_variogram(const Semivariogram& vg, const SphericalFit& fit, const std::filesystem::path& csv_path) {
    {
        auto out = open_out(csv_path);
        out << "lag,mean_distance,pairs,gamma\n";
        for (std::size_t b = 0; b < vg.lag.size(); ++b)
            out << num(vg.lag[b]) << ',' << num(vg.mean_distance[b]) << ',' << vg.pairs[b] << ',' << num(vg.gamma[b])
                << '\n';
    }
    nlohmann::ordered_json j;
    j["model"] = "spherical";
    j["nugget"] = fit.nugget;
    j["sill"] = fit.sill;
    j["range"] = fit.range;
    j["objective"] = fit.objective;
    j["degenerate"] = fit.degenerate;
    j["bin_width"] = vg.bin_width;
    j["max_lag"] = vg.max_lag;
    auto side = csv_path;
    side.replace_extension(".fit.json");
    auto out = open_out(side);
    out << j.dump(2) << '\n';
}

} // namespace cropmap
