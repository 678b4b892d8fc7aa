#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pmts/checkpoint.hpp"
#include "pmts/rng.hpp"
#include "pmts/tensor.hpp"

// Dataset construction: ingestion (C-MAPSS text, XJTU-SY vibration CSVs),
// synthetic run-to-failure generation, RUL labeling, sliding windows, the
// three-level few-shot sampling, and leakage-safe min-max normalization.
namespace pmts {

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct RunToFailureUnit {
    int unit_id = 0;
    std::vector<std::vector<double>> series; // N channels x L timesteps
    std::size_t onset_index = 0;             // timestep where degradation begins
    std::string condition;

    std::size_t channels() const { return series.size(); }
    std::size_t length() const { return series.empty() ? 0 : series[0].size(); }
};

struct WindowSample {
    Tensor x; // [N x T]
    double y = 0.0; // normalized RUL at the window's final timestamp
    int unit_id = 0;
    std::size_t end_timestep = 0;
};

struct FewShotConfig {
    double p1 = 1.0; // device retention
    double p2 = 1.0; // RUL-value coverage
    double p3 = 1.0; // global sample retention
    std::uint64_t seed = 0;
    bool keep_health = true; // health samples bypass p3

    void validate() const {
        for (double p : {p1, p2, p3}) {
            if (!(p > 0.0 && p <= 1.0)) {
                throw DataError("fewshot: probabilities must lie in (0, 1], got " + std::to_string(p));
            }
        }
    }
};

struct NormStats {
    std::vector<double> min, max; // per channel, fitted on the training split
};

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

// The 14 C-MAPSS sensor columns commonly used in prior work, as 0-based
// indices into the 21 sensor columns (sensors 2,3,4,7,8,9,11,12,13,14,15,17,20,21).
inline std::vector<int> default_cmapss_sensors() {
    return {1, 2, 3, 6, 7, 8, 10, 11, 12, 13, 14, 16, 19, 20};
}

// Whitespace-separated text, 26 columns per row: unit id, cycle, 3 operating
// settings, 21 sensor channels. Rows grouped by unit id, ordered by cycle.
inline std::vector<RunToFailureUnit> parse_cmapss(const std::string& path,
                                                  std::vector<int> sensor_indices = default_cmapss_sensors()) {
    std::ifstream is(path);
    if (!is) throw DataError("cmapss: cannot open '" + path + "'");
    if (sensor_indices.empty()) sensor_indices = default_cmapss_sensors();
    for (int idx : sensor_indices) {
        if (idx < 0 || idx > 20) {
            throw DataError("cmapss: sensor index " + std::to_string(idx) + " outside [0, 20]");
        }
    }

    std::map<int, std::vector<std::vector<double>>> rows_by_unit; // unit -> rows of 21 sensors
    std::map<int, long> last_cycle;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::vector<double> cols;
        double v;
        while (ls >> v) cols.push_back(v);
        if (cols.empty()) continue; // blank line
        if (cols.size() != 26) {
            throw ParseError("cmapss '" + path + "' line " + std::to_string(line_no) + ": expected 26 columns, got " +
                             std::to_string(cols.size()));
        }
        const int unit = static_cast<int>(cols[0]);
        const long cycle = static_cast<long>(cols[1]);
        auto it = last_cycle.find(unit);
        if (it != last_cycle.end() && cycle <= it->second) {
            throw ParseError("cmapss '" + path + "' line " + std::to_string(line_no) + ": non-monotone cycle " +
                             std::to_string(cycle) + " for unit " + std::to_string(unit));
        }
        last_cycle[unit] = cycle;
        rows_by_unit[unit].emplace_back(cols.begin() + 5, cols.end());
    }
    if (rows_by_unit.empty()) throw DataError("cmapss '" + path + "': no data rows");

    std::vector<RunToFailureUnit> units;
    for (auto& [unit_id, rows] : rows_by_unit) {
        RunToFailureUnit u;
        u.unit_id = unit_id;
        u.condition = "cmapss";
        u.series.assign(sensor_indices.size(), std::vector<double>(rows.size()));
        for (std::size_t t = 0; t < rows.size(); ++t) {
            for (std::size_t c = 0; c < sensor_indices.size(); ++c) {
                u.series[c][t] = rows[t][static_cast<std::size_t>(sensor_indices[c])];
            }
        }
        units.push_back(std::move(u));
    }
    return units;
}

namespace detail {

// Numeric key for "Filename37.csv"-style names; files sort by that number.
inline long numeric_key(const std::string& stem) {
    std::string digits;
    for (char ch : stem)
        if (std::isdigit(static_cast<unsigned char>(ch))) digits.push_back(ch);
    return digits.empty() ? -1 : std::stol(digits);
}

} // namespace detail

// Directory of per-minute CSV files with two acceleration columns
// (horizontal, vertical); a header row is tolerated. Files concatenate in
// numeric filename order into one 2-channel unit.
inline RunToFailureUnit parse_xjtu(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw DataError("xjtu: '" + dir + "' is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
    }
    if (files.empty()) throw DataError("xjtu: no .csv files in '" + dir + "'");
    std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
        const long ka = detail::numeric_key(a.stem().string());
        const long kb = detail::numeric_key(b.stem().string());
        return ka != kb ? ka < kb : a.string() < b.string();
    });

    RunToFailureUnit u;
    u.unit_id = 1;
    u.condition = "xjtu";
    u.series.assign(2, {});
    for (const fs::path& f : files) {
        std::ifstream is(f);
        if (!is) throw DataError("xjtu: cannot open '" + f.string() + "'");
        std::string line;
        std::size_t rows = 0;
        bool first = true;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::replace(line.begin(), line.end(), ',', ' ');
            std::istringstream ls(line);
            double h, v;
            if (!(ls >> h >> v)) {
                if (first) { // header row tolerated
                    first = false;
                    continue;
                }
                throw DataError("xjtu: '" + f.string() + "' needs two float columns");
            }
            first = false;
            u.series[0].push_back(h);
            u.series[1].push_back(v);
            ++rows;
        }
        if (rows == 0) throw DataError("xjtu: '" + f.string() + "' contains no samples");
    }
    return u;
}

// ---------------------------------------------------------------------------
// Synthetic run-to-failure generation
// ---------------------------------------------------------------------------

struct SyntheticConfig {
    std::size_t units = 8;
    std::size_t channels = 3;
    std::size_t length = 400;
    std::size_t onset_min = 100;
    std::size_t onset_max = 250;
    double noise = 0.02;
    double slope_min = 0.5;
    double slope_max = 2.0;
    std::uint64_t seed = 0;
};

// Each channel: smooth baseline + post-onset monotone trend with random
// slope/exponent + Gaussian noise. Ground-truth onset is recorded.
inline std::vector<RunToFailureUnit> gen_synthetic(const SyntheticConfig& cfg) {
    if (cfg.units == 0 || cfg.channels == 0 || cfg.length < 2 || cfg.onset_max >= cfg.length ||
        cfg.onset_min > cfg.onset_max) {
        throw DataError("synthetic: invalid dimensions");
    }
    Rng rng(cfg.seed);
    std::vector<RunToFailureUnit> units;
    for (std::size_t uidx = 0; uidx < cfg.units; ++uidx) {
        Rng urng = rng.split(uidx + 1);
        RunToFailureUnit u;
        u.unit_id = static_cast<int>(uidx + 1);
        u.condition = "synthetic";
        u.onset_index = cfg.onset_min + urng.index(cfg.onset_max - cfg.onset_min + 1);
        for (std::size_t c = 0; c < cfg.channels; ++c) {
            const double level = urng.uniform(-0.5, 0.5);
            const double amp = urng.uniform(0.05, 0.2);
            const double freq = urng.uniform(1.0, 4.0);
            const double phase = urng.uniform(0.0, 6.283185307179586);
            const double slope = urng.uniform(cfg.slope_min, cfg.slope_max);
            const double expo = urng.uniform(1.0, 2.0);
            const double direction = urng.bernoulli(0.5) ? 1.0 : -1.0;
            std::vector<double> ch(cfg.length);
            const double span = static_cast<double>(cfg.length - 1 - u.onset_index);
            for (std::size_t t = 0; t < cfg.length; ++t) {
                double v = level + amp * std::sin(freq * 6.283185307179586 * static_cast<double>(t) /
                                                      static_cast<double>(cfg.length) +
                                                  phase);
                if (t >= u.onset_index && span > 0.0) {
                    const double frac = static_cast<double>(t - u.onset_index) / span;
                    v += direction * slope * std::pow(frac, expo);
                }
                if (cfg.noise > 0.0) v += urng.normal(0.0, cfg.noise);
                ch[t] = v;
            }
            u.series.push_back(std::move(ch));
        }
        units.push_back(std::move(u));
    }
    return units;
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

// Piecewise-linear RUL: 1 while remaining cycles >= knee, then linear to 0 at
// the final timestep.
inline std::vector<double> label_piecewise_linear(const RunToFailureUnit& unit, std::size_t knee) {
    if (knee == 0) throw DataError("labels: knee must be > 0");
    const std::size_t L = unit.length();
    if (L == 0) throw DataError("labels: empty unit");
    if (knee >= L) {
        std::fprintf(stderr, "pmts: warning: knee %zu >= unit length %zu (unit %d is all-degrading)\n",
                     knee, L, unit.unit_id);
    }
    std::vector<double> y(L);
    for (std::size_t t = 0; t < L; ++t) {
        const double remaining = static_cast<double>(L - 1 - t);
        y[t] = std::min(1.0, remaining / static_cast<double>(knee));
    }
    return y;
}

// Bearing-style label: healthy (1) before the detected onset, linear decay
// from the onset to failure.
inline std::vector<double> label_linear_after_onset(const RunToFailureUnit& unit, std::size_t onset) {
    const std::size_t L = unit.length();
    if (L == 0) throw DataError("labels: empty unit");
    std::vector<double> y(L, 1.0);
    if (onset >= L - 1) {
        // Degradation never observed; the final step still reads 0.
        y[L - 1] = 0.0;
        return y;
    }
    const double span = static_cast<double>(L - 1 - onset);
    for (std::size_t t = onset; t < L; ++t) y[t] = static_cast<double>(L - 1 - t) / span;
    return y;
}

// ---------------------------------------------------------------------------
// Degradation onset (RMS + 3-sigma)
// ---------------------------------------------------------------------------

// RMS over non-overlapping windows (all channels pooled); onset is the first
// window exceeding mu + 3*sigma of the baseline windows for `consecutive`
// windows in a row, converted to a timestep. Returns L when nothing triggers.
inline std::size_t detect_onset_rms3sigma(const RunToFailureUnit& unit, double baseline_frac = 0.1,
                                          std::size_t window = 16, std::size_t consecutive = 2) {
    const std::size_t L = unit.length();
    const std::size_t N = unit.channels();
    if (window == 0 || L < window) throw DataError("onset: window longer than series");
    const std::size_t n_windows = L / window;
    std::vector<double> rms(n_windows);
    for (std::size_t w = 0; w < n_windows; ++w) {
        double acc = 0.0;
        for (std::size_t c = 0; c < N; ++c)
            for (std::size_t t = w * window; t < (w + 1) * window; ++t) acc += unit.series[c][t] * unit.series[c][t];
        rms[w] = std::sqrt(acc / static_cast<double>(N * window));
    }
    const std::size_t n_base = static_cast<std::size_t>(std::floor(baseline_frac * static_cast<double>(n_windows)));
    if (n_base < 3) {
        throw DataError("onset: fewer than 3 baseline windows (have " + std::to_string(n_base) + ")");
    }
    double mu = 0.0;
    for (std::size_t w = 0; w < n_base; ++w) mu += rms[w];
    mu /= static_cast<double>(n_base);
    double var = 0.0;
    for (std::size_t w = 0; w < n_base; ++w) var += (rms[w] - mu) * (rms[w] - mu);
    var /= static_cast<double>(n_base - 1);
    const double sigma = std::max(std::sqrt(var), 1e-12); // degenerate-baseline floor
    const double threshold = mu + 3.0 * sigma;

    std::size_t run = 0;
    for (std::size_t w = 0; w < n_windows; ++w) {
        run = rms[w] > threshold ? run + 1 : 0;
        if (run >= consecutive) return (w + 1 - consecutive) * window;
    }
    return L; // all-healthy
}

// ---------------------------------------------------------------------------
// Sliding windows
// ---------------------------------------------------------------------------

// Starts at 0, s, 2s, ... while start+T <= L; no forced tail window. The
// label is y at the window's last timestep.
inline std::vector<WindowSample> window_slide(const RunToFailureUnit& unit,
                                              const std::vector<double>& labels, std::size_t T,
                                              std::size_t s) {
    if (T == 0 || s == 0) throw DataError("windows: T and step must be >= 1");
    const std::size_t L = unit.length();
    if (labels.size() != L) throw DataError("windows: label length mismatch");
    std::vector<WindowSample> out;
    if (L < T) return out;
    const std::size_t N = unit.channels();
    for (std::size_t start = 0; start + T <= L; start += s) {
        WindowSample w;
        std::vector<double> values(N * T);
        for (std::size_t c = 0; c < N; ++c)
            for (std::size_t t = 0; t < T; ++t) values[c * T + t] = unit.series[c][start + t];
        w.x = Tensor({N, T}, std::move(values));
        w.end_timestep = start + T - 1;
        w.y = labels[w.end_timestep];
        w.unit_id = unit.unit_id;
        out.push_back(std::move(w));
    }
    return out;
}

inline std::size_t expected_window_count(std::size_t L, std::size_t T, std::size_t s) {
    return L >= T ? (L - T) / s + 1 : 0;
}

// ---------------------------------------------------------------------------
// Three-level few-shot sampling
// ---------------------------------------------------------------------------

// (1) whole units kept w.p. p1; (2) the set of distinct RUL values < 1 thinned
// w.p. p2, keeping every sample that carries a selected value and all health
// samples; (3) survivors kept w.p. p3, health samples exempt unless
// keep_health is off. Deterministic given (input order, seed).
inline std::vector<WindowSample> fewshot_sample(const std::vector<WindowSample>& samples,
                                                const FewShotConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Rng unit_rng = rng.split(1), value_rng = rng.split(2), sample_rng = rng.split(3);

    std::set<int> unit_ids;
    for (const auto& s : samples) unit_ids.insert(s.unit_id);
    std::set<int> kept_units;
    for (int id : unit_ids) { // ascending, fixed draw order
        if (unit_rng.bernoulli(cfg.p1)) kept_units.insert(id);
    }

    std::set<double> rul_values;
    for (const auto& s : samples) {
        if (kept_units.count(s.unit_id) && s.y < 1.0) rul_values.insert(s.y);
    }
    std::set<double> kept_values;
    for (double v : rul_values) { // ascending, fixed draw order
        if (value_rng.bernoulli(cfg.p2)) kept_values.insert(v);
    }

    std::vector<WindowSample> out;
    for (const auto& s : samples) {
        if (!kept_units.count(s.unit_id)) continue;
        const bool health = s.y == 1.0;
        if (!health && !kept_values.count(s.y)) continue;
        if (health && cfg.keep_health) {
            out.push_back(s);
            continue;
        }
        if (sample_rng.bernoulli(cfg.p3)) out.push_back(s);
    }
    if (out.empty()) {
        std::fprintf(stderr, "pmts: warning: few-shot sampling produced an empty subset (p1=%g p2=%g p3=%g seed=%llu)\n",
                     cfg.p1, cfg.p2, cfg.p3, static_cast<unsigned long long>(cfg.seed));
    }
    return out;
}

// Degradation stage bins: Late [0,0.3), Middle [0.3,0.7), Early [0.7,1.0), Health == 1.
struct StageCounts {
    std::size_t early = 0, middle = 0, late = 0, health = 0;
    std::size_t total() const { return early + middle + late + health; }
    std::size_t degradation() const { return early + middle + late; }
};

inline StageCounts stage_counts(const std::vector<WindowSample>& samples) {
    StageCounts c;
    for (const auto& s : samples) {
        if (s.y == 1.0) {
            ++c.health;
        } else if (s.y >= 0.7) {
            ++c.early;
        } else if (s.y >= 0.3) {
            ++c.middle;
        } else {
            ++c.late;
        }
    }
    return c;
}

// ---------------------------------------------------------------------------
// Min-max normalization (fit on train only; test values are not clipped)
// ---------------------------------------------------------------------------

inline NormStats minmax_fit(const std::vector<WindowSample>& train) {
    if (train.empty()) throw DataError("minmax: empty training set");
    const std::size_t N = train[0].x.dim(0);
    NormStats st;
    st.min.assign(N, std::numeric_limits<double>::infinity());
    st.max.assign(N, -std::numeric_limits<double>::infinity());
    for (const auto& s : train) {
        if (s.x.dim(0) != N) throw DataError("minmax: inconsistent channel count");
        const std::size_t T = s.x.dim(1);
        for (std::size_t c = 0; c < N; ++c)
            for (std::size_t t = 0; t < T; ++t) {
                st.min[c] = std::min(st.min[c], s.x[c * T + t]);
                st.max[c] = std::max(st.max[c], s.x[c * T + t]);
            }
    }
    return st;
}

// Constant channels (max == min) map to 0.
inline void minmax_apply(const NormStats& stats, std::vector<WindowSample>& samples) {
    for (auto& s : samples) {
        const std::size_t N = s.x.dim(0), T = s.x.dim(1);
        if (stats.min.size() != N) throw DataError("minmax: stats fitted for a different channel count");
        Tensor out = Tensor::zeros({N, T});
        for (std::size_t c = 0; c < N; ++c) {
            const double lo = stats.min[c], span = stats.max[c] - stats.min[c];
            for (std::size_t t = 0; t < T; ++t) {
                out[c * T + t] = span > 0.0 ? (s.x[c * T + t] - lo) / span : 0.0;
            }
        }
        s.x = out;
    }
}

// ---------------------------------------------------------------------------
// Prepared-dataset files (PMTS tensors; the JSON sidecar is written by the CLI)
// ---------------------------------------------------------------------------

struct PreparedDataset {
    std::vector<WindowSample> samples;
    NormStats stats;
};

inline void save_dataset(const std::string& path, const std::vector<WindowSample>& samples,
                         const NormStats& stats) {
    if (samples.empty()) throw DataError("dataset: refusing to save an empty sample set");
    const std::size_t n = samples.size();
    const std::size_t N = samples[0].x.dim(0), T = samples[0].x.dim(1);
    std::vector<double> windows(n * N * T), labels(n), units(n), ends(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (samples[i].x.shape() != Shape{N, T}) throw DataError("dataset: ragged sample shapes");
        std::copy(samples[i].x.values().begin(), samples[i].x.values().end(), windows.begin() + i * N * T);
        labels[i] = samples[i].y;
        units[i] = static_cast<double>(samples[i].unit_id);
        ends[i] = static_cast<double>(samples[i].end_timestep);
    }
    TensorMap m;
    m.emplace_back("data.windows", Tensor({n, N, T}, std::move(windows)));
    m.emplace_back("data.labels", Tensor({n}, std::move(labels)));
    m.emplace_back("data.unit_ids", Tensor({n}, std::move(units)));
    m.emplace_back("data.end_timesteps", Tensor({n}, std::move(ends)));
    m.emplace_back("data.norm_min", Tensor({stats.min.size()}, stats.min));
    m.emplace_back("data.norm_max", Tensor({stats.max.size()}, stats.max));
    save_tensors(path, m);
}

inline PreparedDataset load_dataset(const std::string& path) {
    const TensorMap m = load_tensors(path);
    const Tensor* windows = find_tensor(m, "data.windows");
    const Tensor* labels = find_tensor(m, "data.labels");
    if (!windows || !labels) throw IoError("dataset '" + path + "': missing data tensors");
    if (windows->rank() != 3 || labels->rank() != 1 || windows->dim(0) != labels->dim(0)) {
        throw IoError("dataset '" + path + "': malformed data tensors");
    }
    const Tensor* units = find_tensor(m, "data.unit_ids");
    const Tensor* ends = find_tensor(m, "data.end_timesteps");
    const std::size_t n = windows->dim(0), N = windows->dim(1), T = windows->dim(2);
    PreparedDataset ds;
    for (std::size_t i = 0; i < n; ++i) {
        WindowSample s;
        std::vector<double> v(windows->values().begin() + i * N * T,
                              windows->values().begin() + (i + 1) * N * T);
        s.x = Tensor({N, T}, std::move(v));
        s.y = (*labels)[i];
        if (units) s.unit_id = static_cast<int>((*units)[i]);
        if (ends) s.end_timestep = static_cast<std::size_t>((*ends)[i]);
        ds.samples.push_back(std::move(s));
    }
    if (const Tensor* mn = find_tensor(m, "data.norm_min")) ds.stats.min = mn->values();
    if (const Tensor* mx = find_tensor(m, "data.norm_max")) ds.stats.max = mx->values();
    return ds;
}

} // namespace pmts
