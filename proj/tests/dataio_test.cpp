#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "pmts/dataio.hpp"

using namespace pmts;

namespace {

std::string write_file(const std::string& name, const std::string& content) {
    const std::string path = testing::TempDir() + name;
    std::ofstream os(path);
    os << content;
    return path;
}

// Two units, 26 whitespace columns per row, sensor s is (unit*100 + cycle + s).
std::string toy_cmapss(std::size_t len1, std::size_t len2) {
    std::ostringstream os;
    for (int unit = 1; unit <= 2; ++unit) {
        const std::size_t len = unit == 1 ? len1 : len2;
        for (std::size_t cycle = 1; cycle <= len; ++cycle) {
            os << unit << " " << cycle << " 0.1 0.2 0.3";
            for (int s = 0; s < 21; ++s) os << " " << unit * 100 + static_cast<int>(cycle) + s;
            os << "\n";
        }
    }
    return os.str();
}

} // namespace

TEST(ParseCmapss, ToyFileGroupsUnits) {
    const std::string path = write_file("toy.txt", toy_cmapss(5, 7));
    auto units = parse_cmapss(path);
    ASSERT_EQ(units.size(), 2u);
    EXPECT_EQ(units[0].unit_id, 1);
    EXPECT_EQ(units[0].length(), 5u);
    EXPECT_EQ(units[1].length(), 7u);
    EXPECT_EQ(units[0].channels(), 14u); // default sensor subset
    // Default subset starts at sensor index 1 => value unit*100 + cycle + 1.
    EXPECT_DOUBLE_EQ(units[0].series[0][0], 102.0);
}

TEST(ParseCmapss, AllSensorsWhenFullSelection) {
    const std::string path = write_file("toy_all.txt", toy_cmapss(4, 4));
    std::vector<int> all(21);
    for (int i = 0; i < 21; ++i) all[i] = i;
    auto units = parse_cmapss(path, all);
    EXPECT_EQ(units[0].channels(), 21u);
}

TEST(ParseCmapss, BadColumnCountNamesLine) {
    const std::string path = write_file("bad_cols.txt", "1 1 0.1 0.2 0.3 9 9 9\n");
    try {
        parse_cmapss(path);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
    }
}

TEST(ParseCmapss, NonMonotoneCyclesNameLine) {
    std::string content = toy_cmapss(3, 3);
    content += content.substr(0, content.find('\n') + 1); // repeat unit 1 cycle 1
    const std::string path = write_file("bad_cycle.txt", content);
    try {
        parse_cmapss(path);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("non-monotone"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("line 7"), std::string::npos);
    }
}

TEST(ParseXjtu, FilesConcatenateInNumericOrder) {
    namespace fs = std::filesystem;
    const std::string dir = testing::TempDir() + "xjtu_toy";
    fs::create_directories(dir);
    // Written out of lexicographic order on purpose: 2, 10, 1.
    auto write_csv = [&](const std::string& name, double base) {
        std::ofstream os(dir + "/" + name);
        os << "Horizontal_vibration_signals,Vertical_vibration_signals\n";
        for (int i = 0; i < 4; ++i) os << base + i << "," << -(base + i) << "\n";
    };
    write_csv("2.csv", 200);
    write_csv("10.csv", 1000);
    write_csv("1.csv", 100);
    RunToFailureUnit u = parse_xjtu(dir);
    EXPECT_EQ(u.channels(), 2u);
    ASSERT_EQ(u.length(), 12u);
    EXPECT_DOUBLE_EQ(u.series[0][0], 100.0);  // file 1 first
    EXPECT_DOUBLE_EQ(u.series[0][4], 200.0);  // then file 2
    EXPECT_DOUBLE_EQ(u.series[0][8], 1000.0); // file 10 last (numeric, not lexicographic)
    EXPECT_DOUBLE_EQ(u.series[1][0], -100.0);
}

TEST(ParseXjtu, SingleColumnRejected) {
    namespace fs = std::filesystem;
    const std::string dir = testing::TempDir() + "xjtu_bad";
    fs::create_directories(dir);
    std::ofstream(dir + "/1.csv") << "h\n1.0\n2.0\n";
    EXPECT_THROW(parse_xjtu(dir), DataError);
}

TEST(GenSynthetic, DeterministicAndOnsetRecoverable) {
    SyntheticConfig cfg;
    cfg.units = 3;
    cfg.channels = 2;
    cfg.length = 200;
    cfg.onset_min = 60;
    cfg.onset_max = 120;
    cfg.noise = 0.0;
    cfg.seed = 9;
    auto a = gen_synthetic(cfg);
    auto b = gen_synthetic(cfg);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].onset_index, b[i].onset_index);
        EXPECT_EQ(a[i].series, b[i].series); // bitwise deterministic
    }

    // With the trend suppressed, the pre-onset part is identical and the
    // post-onset part diverges: onset is recoverable from the difference.
    SyntheticConfig flat = cfg;
    flat.slope_min = flat.slope_max = 0.0;
    auto base = gen_synthetic(flat);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const std::size_t onset = a[i].onset_index;
        std::size_t first_diff = cfg.length;
        for (std::size_t t = 0; t < cfg.length; ++t) {
            if (a[i].series[0][t] != base[i].series[0][t]) {
                first_diff = t;
                break;
            }
        }
        EXPECT_GT(first_diff, onset); // trend is 0 exactly at the onset step
        EXPECT_LE(first_diff, onset + 2);
    }
}

TEST(GenSynthetic, ZeroSlopeIsStationary) {
    SyntheticConfig cfg;
    cfg.units = 1;
    cfg.channels = 1;
    cfg.length = 128;
    cfg.onset_min = 10;
    cfg.onset_max = 20;
    cfg.noise = 0.0;
    cfg.slope_min = cfg.slope_max = 0.0;
    auto u = gen_synthetic(cfg);
    // Pure sinusoid around a level: bounded by level +- amp.
    double lo = 1e9, hi = -1e9;
    for (double v : u[0].series[0]) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    EXPECT_LT(hi - lo, 0.45); // 2 * max amplitude
}

TEST(Labels, PiecewiseLinearKnee) {
    RunToFailureUnit u;
    u.series = {std::vector<double>(241, 0.0)};
    auto y = label_piecewise_linear(u, 120);
    // remaining = 240 - t
    EXPECT_DOUBLE_EQ(y[120], 1.0);  // remaining 120
    EXPECT_DOUBLE_EQ(y[180], 0.5);  // remaining 60
    EXPECT_DOUBLE_EQ(y[240], 0.0);  // remaining 0
    EXPECT_DOUBLE_EQ(y[0], 1.0);    // healthy region saturates at 1
    for (std::size_t t = 1; t < y.size(); ++t) EXPECT_LE(y[t], y[t - 1]);
}

TEST(Labels, KneeBeyondLengthIsAllDegrading) {
    RunToFailureUnit u;
    u.series = {std::vector<double>(100, 0.0)};
    auto y = label_piecewise_linear(u, 120); // warns, proceeds
    EXPECT_LT(y[0], 1.0);
    EXPECT_DOUBLE_EQ(y[99], 0.0);
}

TEST(Labels, LinearAfterOnset) {
    RunToFailureUnit u;
    u.series = {std::vector<double>(101, 0.0)};
    auto y = label_linear_after_onset(u, 50);
    EXPECT_DOUBLE_EQ(y[0], 1.0);
    EXPECT_DOUBLE_EQ(y[50], 1.0);
    EXPECT_DOUBLE_EQ(y[75], 0.5);
    EXPECT_DOUBLE_EQ(y[100], 0.0);
}

TEST(Labels, PropertyMonotoneWithExactEndpoints) {
    Rng rng(71);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t L = 10 + rng.index(300);
        RunToFailureUnit u;
        u.series = {std::vector<double>(L, 0.0)};
        const std::size_t knee = 1 + rng.index(200);
        auto piecewise = label_piecewise_linear(u, knee);
        const std::size_t onset = rng.index(L);
        auto after_onset = label_linear_after_onset(u, onset);
        for (const auto& y : {piecewise, after_onset}) {
            ASSERT_EQ(y.size(), L);
            EXPECT_DOUBLE_EQ(y[L - 1], 0.0);
            for (std::size_t t = 1; t < L; ++t) {
                ASSERT_LE(y[t], y[t - 1]);
                ASSERT_GE(y[t], 0.0);
                ASSERT_LE(y[t], 1.0);
            }
        }
        // Exactly 1 before the knee / onset region.
        for (std::size_t t = 0; t + 1 < L && L - 1 - t >= knee; ++t) {
            ASSERT_DOUBLE_EQ(piecewise[t], 1.0);
        }
        for (std::size_t t = 0; t < onset && t + 1 < L; ++t) {
            ASSERT_DOUBLE_EQ(after_onset[t], 1.0);
        }
    }
}

TEST(Onset, WhiteNoiseNeverTriggers) {
    Rng rng(21);
    RunToFailureUnit u;
    u.series = {std::vector<double>(640)};
    for (auto& v : u.series[0]) v = rng.normal();
    EXPECT_EQ(detect_onset_rms3sigma(u, 0.1, 16), 640u);
}

TEST(Onset, StepInRmsIsLocated) {
    Rng rng(22);
    RunToFailureUnit u;
    u.series = {std::vector<double>(1280)};
    // RMS step at window 40 (timestep 640): amplitude jumps 1 -> 4.
    for (std::size_t t = 0; t < 1280; ++t) u.series[0][t] = rng.normal() * (t < 640 ? 1.0 : 4.0);
    const std::size_t onset = detect_onset_rms3sigma(u, 0.1, 16);
    EXPECT_GE(onset, (40 - 2) * 16u);
    EXPECT_LE(onset, (40 + 2) * 16u);
}

TEST(Onset, ConstantBaselineUsesSigmaFloor) {
    RunToFailureUnit u;
    u.series = {std::vector<double>(320, 1.0)};
    for (std::size_t t = 160; t < 320; ++t) u.series[0][t] = 1.0001; // tiny deviation
    const std::size_t onset = detect_onset_rms3sigma(u, 0.2, 16);
    EXPECT_EQ(onset, 160u);
}

TEST(Onset, InsufficientBaselineErrors) {
    RunToFailureUnit u;
    u.series = {std::vector<double>(64, 0.0)};
    EXPECT_THROW(detect_onset_rms3sigma(u, 0.1, 16), DataError); // only 4 windows, 0 baseline
}

TEST(Windows, EnumerationMatchesSpec) {
    RunToFailureUnit u;
    u.unit_id = 7;
    u.series = {std::vector<double>(100), std::vector<double>(100)};
    for (std::size_t t = 0; t < 100; ++t) {
        u.series[0][t] = static_cast<double>(t);
        u.series[1][t] = -static_cast<double>(t);
    }
    auto labels = label_piecewise_linear(u, 50);
    auto ws = window_slide(u, labels, 30, 15);
    ASSERT_EQ(ws.size(), 5u);
    const std::size_t expected_starts[5] = {0, 15, 30, 45, 60};
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(ws[i].end_timestep, expected_starts[i] + 29);
        EXPECT_DOUBLE_EQ(ws[i].x[0], static_cast<double>(expected_starts[i]));
        EXPECT_DOUBLE_EQ(ws[i].y, labels[ws[i].end_timestep]);
        EXPECT_EQ(ws[i].unit_id, 7);
    }
}

TEST(Windows, BoundaryCases) {
    RunToFailureUnit u;
    u.series = {std::vector<double>(30, 1.0)};
    std::vector<double> labels(30, 1.0);
    EXPECT_EQ(window_slide(u, labels, 30, 15).size(), 1u); // L == T
    RunToFailureUnit v;
    v.series = {std::vector<double>(29, 1.0)};
    EXPECT_EQ(window_slide(v, std::vector<double>(29, 1.0), 30, 15).size(), 0u); // L == T-1
}

TEST(Windows, CountFormulaProperty) {
    Rng rng(23);
    for (int rep = 0; rep < 200; ++rep) {
        const std::size_t L = 1 + rng.index(300);
        const std::size_t T = 1 + rng.index(60);
        const std::size_t s = 1 + rng.index(40);
        RunToFailureUnit u;
        u.series = {std::vector<double>(L, 0.0)};
        auto ws = window_slide(u, std::vector<double>(L, 1.0), T, s);
        EXPECT_EQ(ws.size(), expected_window_count(L, T, s));
    }
}

namespace {

// 20 units x 60 windows with ~40 distinct sub-health RUL values.
std::vector<WindowSample> sampling_fixture() {
    std::vector<WindowSample> samples;
    for (int unit = 1; unit <= 20; ++unit) {
        for (int i = 0; i < 60; ++i) {
            WindowSample s;
            s.x = Tensor::zeros({1, 1});
            s.unit_id = unit;
            s.end_timestep = static_cast<std::size_t>(i);
            s.y = i < 20 ? 1.0 : static_cast<double>(59 - i) / 40.0; // 20 health, 40 degradation
            samples.push_back(s);
        }
    }
    return samples;
}

} // namespace

TEST(FewShot, IdentityAndDeterminism) {
    auto samples = sampling_fixture();
    FewShotConfig all;
    all.seed = 5;
    EXPECT_EQ(fewshot_sample(samples, all).size(), samples.size());

    FewShotConfig cfg;
    cfg.p1 = 0.5;
    cfg.p2 = 0.4;
    cfg.p3 = 0.7;
    cfg.seed = 99;
    auto a = fewshot_sample(samples, cfg);
    auto b = fewshot_sample(samples, cfg);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].unit_id, b[i].unit_id);
        EXPECT_EQ(a[i].end_timestep, b[i].end_timestep);
        EXPECT_EQ(a[i].y, b[i].y);
    }
}

TEST(FewShot, HealthSamplesAlwaysSurviveByDefault) {
    auto samples = sampling_fixture();
    FewShotConfig cfg;
    cfg.p1 = 1.0;
    cfg.p2 = 0.2;
    cfg.p3 = 0.1;
    cfg.seed = 3;
    auto kept = fewshot_sample(samples, cfg);
    const StageCounts c = stage_counts(kept);
    EXPECT_EQ(c.health, 20u * 20u); // every health sample of every unit

    FewShotConfig strict = cfg;
    strict.keep_health = false;
    const StageCounts cs = stage_counts(fewshot_sample(samples, strict));
    EXPECT_LT(cs.health, 20u * 20u / 2u); // p3 = 0.1 thins health too
}

TEST(FewShot, UnbiasednessWithinBinomial3Sigma) {
    // Each level isolated so its draws are iid Bernoulli and the binomial
    // bound is exact: p1 over units, p2 over RUL values, p3 over samples.
    auto samples = sampling_fixture();
    const int trials = 1000;
    auto within3 = [](double observed, double n, double p) {
        const double mean = n * p;
        const double sd = std::sqrt(n * p * (1.0 - p));
        return std::abs(observed - mean) <= 3.0 * sd;
    };

    long kept_units = 0;
    for (int seed = 0; seed < trials; ++seed) {
        FewShotConfig cfg;
        cfg.p1 = 0.3;
        cfg.seed = static_cast<std::uint64_t>(seed);
        std::set<int> units;
        for (const auto& s : fewshot_sample(samples, cfg)) units.insert(s.unit_id);
        kept_units += static_cast<long>(units.size());
    }
    EXPECT_TRUE(within3(static_cast<double>(kept_units), 20.0 * trials, 0.3));

    long kept_values = 0;
    for (int seed = 0; seed < trials; ++seed) {
        FewShotConfig cfg;
        cfg.p2 = 0.25;
        cfg.seed = static_cast<std::uint64_t>(seed);
        std::set<double> values;
        for (const auto& s : fewshot_sample(samples, cfg))
            if (s.y < 1.0) values.insert(s.y);
        kept_values += static_cast<long>(values.size());
    }
    EXPECT_TRUE(within3(static_cast<double>(kept_values), 40.0 * trials, 0.25));

    long kept_degr = 0;
    for (int seed = 0; seed < trials; ++seed) {
        FewShotConfig cfg;
        cfg.p3 = 0.8;
        cfg.seed = static_cast<std::uint64_t>(seed);
        kept_degr += static_cast<long>(stage_counts(fewshot_sample(samples, cfg)).degradation());
    }
    EXPECT_TRUE(within3(static_cast<double>(kept_degr), 800.0 * trials, 0.8));
}

TEST(MinMax, FitApplyAndLeakageRule) {
    std::vector<WindowSample> train(1);
    train[0].x = Tensor({2, 3}, {0, 5, 10, 4, 4, 4});
    NormStats st = minmax_fit(train);
    std::vector<WindowSample> applied = train;
    minmax_apply(st, applied);
    EXPECT_DOUBLE_EQ(applied[0].x[0], 0.0);
    EXPECT_DOUBLE_EQ(applied[0].x[1], 0.5);
    EXPECT_DOUBLE_EQ(applied[0].x[2], 1.0);
    // Constant channel maps to zero.
    EXPECT_DOUBLE_EQ(applied[0].x[3], 0.0);
    EXPECT_DOUBLE_EQ(applied[0].x[5], 0.0);

    // Test values beyond the train max stay unclipped.
    std::vector<WindowSample> test(1);
    test[0].x = Tensor({2, 3}, {20, -10, 5, 4, 4, 4});
    minmax_apply(st, test);
    EXPECT_DOUBLE_EQ(test[0].x[0], 2.0);
    EXPECT_DOUBLE_EQ(test[0].x[1], -1.0);

    EXPECT_THROW(minmax_fit({}), DataError);
}

TEST(MinMax, RoundTripHitsExactBounds) {
    Rng rng(31);
    std::vector<WindowSample> train;
    for (int i = 0; i < 10; ++i) {
        WindowSample s;
        s.x = Tensor::uniform({3, 8}, rng, -5.0, 7.0);
        train.push_back(s);
    }
    NormStats st = minmax_fit(train);
    minmax_apply(st, train);
    for (std::size_t c = 0; c < 3; ++c) {
        double lo = 1e9, hi = -1e9;
        for (const auto& s : train)
            for (std::size_t t = 0; t < 8; ++t) {
                lo = std::min(lo, s.x[c * 8 + t]);
                hi = std::max(hi, s.x[c * 8 + t]);
            }
        EXPECT_DOUBLE_EQ(lo, 0.0);
        EXPECT_DOUBLE_EQ(hi, 1.0);
    }
}

TEST(Dataset, SaveLoadRoundTrip) {
    Rng rng(41);
    std::vector<WindowSample> samples;
    for (int i = 0; i < 6; ++i) {
        WindowSample s;
        s.x = Tensor::uniform({2, 5}, rng, 0.0, 1.0);
        s.y = 0.1 * i;
        s.unit_id = i % 3;
        s.end_timestep = static_cast<std::size_t>(10 + i);
        samples.push_back(s);
    }
    NormStats st;
    st.min = {0.0, -1.0};
    st.max = {1.0, 2.0};
    const std::string path = testing::TempDir() + "ds.pmts";
    save_dataset(path, samples, st);
    PreparedDataset ds = load_dataset(path);
    ASSERT_EQ(ds.samples.size(), 6u);
    for (int i = 0; i < 6; ++i) {
        EXPECT_EQ(ds.samples[i].y, samples[i].y);
        EXPECT_EQ(ds.samples[i].unit_id, samples[i].unit_id);
        EXPECT_EQ(ds.samples[i].end_timestep, samples[i].end_timestep);
        EXPECT_EQ(ds.samples[i].x.values(), samples[i].x.values());
    }
    EXPECT_EQ(ds.stats.min, st.min);
    EXPECT_EQ(ds.stats.max, st.max);
}
