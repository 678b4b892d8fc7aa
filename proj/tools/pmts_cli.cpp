// pmts: end-to-end pipeline driver.
// Commands: prepare, pretrain-proxy, finetune, evaluate, ablate, stability,
// variance-check, report. Exit codes: 0 success, 2 usage error, 3 data error,
// 4 numeric failure (NaN abort).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pmts/dataio.hpp"
#include "pmts/metrics.hpp"
#include "pmts/peft.hpp"
#include "pmts/training.hpp"

using json = nlohmann::ordered_json;
using namespace pmts;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

std::uint64_t resolve_seed(const CLI::App* cmd, std::uint64_t flag_value) {
    if (cmd->count("--seed") > 0) return flag_value;
    if (const char* env = std::getenv("PMTS_SEED")) {
        try {
            return static_cast<std::uint64_t>(std::stoull(env));
        } catch (const std::exception&) {
            throw DataError("PMTS_SEED is not an unsigned integer: " + std::string(env));
        }
    }
    return flag_value;
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << j.dump(2) << "\n";
}

json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open '" + path + "'");
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw DataError("config '" + path + "': " + e.what());
    }
    return j;
}

// JSON config keys fill options that were not given on the command line;
// explicit flags win. Unknown keys are a usage error.
void apply_config_file(CLI::App* cmd, const std::string& path) {
    const json cfg = read_json_file(path);
    if (!cfg.is_object()) throw DataError("config '" + path + "': top level must be an object");
    for (const auto& [key, value] : cfg.items()) {
        std::string flag = key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        CLI::Option* opt = cmd->get_option_no_throw("--" + flag);
        if (!opt) throw CLI::ValidationError("config", "unknown config key '" + key + "'");
        if (opt->count() > 0) continue;
        if (value.is_array()) {
            for (const auto& item : value) {
                opt->add_result(item.is_string() ? item.get<std::string>() : item.dump());
            }
        } else if (value.is_boolean()) {
            if (value.get<bool>()) opt->add_result("true");
        } else {
            opt->add_result(value.is_string() ? value.get<std::string>() : value.dump());
        }
        opt->run_callback();
    }
}

std::vector<std::size_t> parse_size_list(const std::string& csv) {
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) out.push_back(static_cast<std::size_t>(std::stoull(tok)));
    }
    return out;
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) out.push_back(std::stoi(tok));
    }
    return out;
}

BackboneSpec spec_from_string(const std::string& s) {
    if (s == "resnet18") return BackboneSpec::resnet18();
    if (s.rfind("compact:", 0) == 0) {
        std::string rest = s.substr(8);
        std::replace(rest.begin(), rest.end(), ':', ',');
        const auto parts = parse_size_list(rest);
        if (parts.size() != 2) throw DataError("backbone spec '" + s + "': expected compact:BASE:PAIRS");
        return BackboneSpec::compact(parts[0], parts[1]);
    }
    throw DataError("unknown backbone spec '" + s + "' (use resnet18 or compact:BASE:PAIRS)");
}

std::vector<std::size_t> default_ranks_for(const BackboneSpec& spec) {
    if (spec == BackboneSpec::resnet18()) return default_rank_schedule();
    std::vector<std::size_t> ranks;
    for (const BlockSpec& b : spec.blocks) ranks.push_back(std::max<std::size_t>(1, b.in_channels / 4));
    return ranks;
}

json metrics_json(const MetricsReport& r) {
    json j;
    j["mae"] = r.mae;
    j["rmse"] = r.rmse;
    j["mape"] = r.mape;
    j["smape"] = r.smape;
    j["n"] = r.n;
    j["mape_skipped"] = r.mape_skipped;
    return j;
}

std::vector<WindowSample> draw_probe(const std::vector<WindowSample>& pool, std::size_t count,
                                     std::uint64_t seed) {
    if (pool.size() <= count) return pool;
    Rng rng = Rng(seed).split(0xBEEF);
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
    std::vector<WindowSample> probe;
    for (std::size_t i = 0; i < count; ++i) probe.push_back(pool[idx[i]]);
    return probe;
}

// Cross-domain univariate pool for the proxy pre-trainer: random sinusoid
// mixtures with drift, distinct from the downstream task generator.
std::vector<std::vector<double>> synth_pool(std::size_t units, std::size_t length, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<double>> pool;
    for (std::size_t u = 0; u < units; ++u) {
        Rng r = rng.split(u + 1);
        std::vector<double> s(length);
        const double f1 = r.uniform(0.5, 3.0), f2 = r.uniform(3.0, 8.0);
        const double a1 = r.uniform(0.3, 1.0), a2 = r.uniform(0.05, 0.3);
        const double ph1 = r.uniform(0.0, 6.283), ph2 = r.uniform(0.0, 6.283);
        const double drift = r.uniform(-0.5, 0.5);
        for (std::size_t t = 0; t < length; ++t) {
            const double x = static_cast<double>(t) / static_cast<double>(length);
            s[t] = a1 * std::sin(f1 * 6.283 * x + ph1) + a2 * std::sin(f2 * 6.283 * x + ph2) +
                   drift * x + r.normal(0.0, 0.02);
        }
        pool.push_back(std::move(s));
    }
    return pool;
}

struct ModelRecipe {
    std::string backbone_arg = "random"; // checkpoint path or "random"
    std::string spec_str = "resnet18";   // architecture for random backbones
    bool spec_explicit = false;          // otherwise inherit the checkpoint's spec
    std::string ranks_csv;
    VariantFlags flags;
    TuneArm arm = TuneArm::kPeft;
};

// Random-backbone arms inherit the architecture of the referenced checkpoint
// unless --spec was given, so ablation arms stay comparable.
BackboneSpec resolve_random_spec(const ModelRecipe& recipe) {
    if (!recipe.spec_explicit && recipe.backbone_arg != "random" && !recipe.backbone_arg.empty()) {
        return load_backbone(recipe.backbone_arg).spec;
    }
    return spec_from_string(recipe.spec_str);
}

PeftModel build_from_recipe(const ModelRecipe& recipe, std::size_t n_vars, std::size_t seq_len,
                            std::uint64_t model_seed) {
    BackboneState bb = (recipe.backbone_arg == "random" || !recipe.flags.pretrain)
                           ? build_backbone(resolve_random_spec(recipe), Rng(model_seed).split(0xB0))
                           : load_backbone(recipe.backbone_arg);
    std::vector<PeftLayerSpec> specs;
    if (recipe.arm == TuneArm::kPeft) {
        const auto ranks =
            recipe.ranks_csv.empty() ? default_ranks_for(bb.spec) : parse_size_list(recipe.ranks_csv);
        specs = make_peft_specs(bb.spec, ranks);
    }
    VariantFlags flags = recipe.flags;
    if (recipe.arm != TuneArm::kPeft) flags.meta_variable = false; // Full / Linear baselines
    PeftModel model =
        build_variant(std::move(bb), specs, n_vars, seq_len, flags, Rng(model_seed).split(0x30DE1));
    set_trainable_for_arm(model, recipe.arm);
    return model;
}

TuneArm arm_from_string(const std::string& s) {
    if (s == "peft") return TuneArm::kPeft;
    if (s == "full") return TuneArm::kFull;
    if (s == "linear") return TuneArm::kLinear;
    throw CLI::ValidationError("--arm", "must be peft, full or linear");
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

struct PrepareOpts {
    std::string dataset, input, out, sensors, labeling = "auto", norm_from;
    double p1 = 1.0, p2 = 1.0, p3 = 1.0, noise = 0.02;
    std::uint64_t seed = 0;
    std::size_t window = 30, step = 15, knee = 120;
    std::size_t units = 8, channels = 3, length = 400;
    bool strict_health = false;
};

int run_prepare(const CLI::App* cmd, PrepareOpts& o) {
    o.seed = resolve_seed(cmd, o.seed);
    std::vector<RunToFailureUnit> units;
    if (o.dataset == "cmapss") {
        units = parse_cmapss(o.input, o.sensors.empty() ? default_cmapss_sensors() : parse_int_list(o.sensors));
    } else if (o.dataset == "xjtu") {
        units.push_back(parse_xjtu(o.input));
    } else if (o.dataset == "synthetic") {
        SyntheticConfig scfg;
        scfg.units = o.units;
        scfg.channels = o.channels;
        scfg.length = o.length;
        scfg.noise = o.noise;
        scfg.onset_min = o.length / 4;
        scfg.onset_max = o.length / 2;
        scfg.seed = o.seed + 17;
        units = gen_synthetic(scfg);
    } else {
        throw CLI::ValidationError("--dataset", "must be cmapss, xjtu or synthetic");
    }

    std::vector<WindowSample> samples;
    for (const RunToFailureUnit& u : units) {
        std::vector<double> labels;
        if (o.labeling == "onset" || (o.labeling == "auto" && o.dataset == "xjtu")) {
            labels = label_linear_after_onset(u, detect_onset_rms3sigma(u));
        } else {
            labels = label_piecewise_linear(u, o.knee);
        }
        auto ws = window_slide(u, labels, o.window, o.step);
        samples.insert(samples.end(), ws.begin(), ws.end());
    }
    const StageCounts source = stage_counts(samples);

    FewShotConfig fs;
    fs.p1 = o.p1;
    fs.p2 = o.p2;
    fs.p3 = o.p3;
    fs.seed = o.seed;
    fs.keep_health = !o.strict_health;
    std::vector<WindowSample> kept = fewshot_sample(samples, fs);
    const StageCounts stages = stage_counts(kept);

    NormStats stats = o.norm_from.empty() ? minmax_fit(kept) : load_dataset(o.norm_from).stats;
    minmax_apply(stats, kept);
    save_dataset(o.out + ".pmts", kept, stats);

    json sidecar;
    sidecar["dataset"] = o.dataset;
    sidecar["input"] = o.input;
    sidecar["p1"] = o.p1;
    sidecar["p2"] = o.p2;
    sidecar["p3"] = o.p3;
    sidecar["seed"] = o.seed;
    sidecar["window"] = o.window;
    sidecar["step"] = o.step;
    sidecar["labeling"] = o.labeling;
    sidecar["knee"] = o.knee;
    sidecar["norm_from"] = o.norm_from;
    sidecar["source_counts"] = {{"early", source.early},
                                {"middle", source.middle},
                                {"late", source.late},
                                {"health", source.health}};
    sidecar["stage_counts"] = {{"early", stages.early},
                               {"middle", stages.middle},
                               {"late", stages.late},
                               {"health", stages.health}};
    sidecar["total_samples"] = kept.size();
    sidecar["total_pct"] = samples.empty() ? 0.0
                                           : 100.0 * static_cast<double>(kept.size()) /
                                                 static_cast<double>(samples.size());
    sidecar["degradation_pct"] = source.degradation() == 0
                                     ? 0.0
                                     : 100.0 * static_cast<double>(stages.degradation()) /
                                           static_cast<double>(source.degradation());
    write_json_file(o.out + ".json", sidecar);

    json snap;
    snap["dataset"] = o.dataset;
    snap["input"] = o.input;
    snap["out"] = o.out;
    snap["p1"] = o.p1;
    snap["p2"] = o.p2;
    snap["p3"] = o.p3;
    snap["seed"] = o.seed;
    snap["window"] = o.window;
    snap["step"] = o.step;
    snap["knee"] = o.knee;
    snap["sensors"] = o.sensors;
    snap["labeling"] = o.labeling;
    snap["norm_from"] = o.norm_from;
    snap["strict_health_p3"] = o.strict_health;
    snap["units"] = o.units;
    snap["channels"] = o.channels;
    snap["length"] = o.length;
    snap["noise"] = o.noise;
    write_json_file(o.out + ".config.json", snap);

    std::cout << "prepared " << kept.size() << " samples (degradation retention "
              << sidecar["degradation_pct"].dump() << "%) -> " << o.out << ".pmts\n";
    return 0;
}

// ---------------------------------------------------------------------------
// pretrain-proxy
// ---------------------------------------------------------------------------

struct PretrainOpts {
    std::string out, spec = "resnet18", input;
    std::size_t pool_units = 256, pool_length = 178, epochs = 5, batch = 8;
    double mask_ratio = 0.25, lr = 1e-3;
    std::uint64_t seed = 0;
};

int run_pretrain(const CLI::App* cmd, PretrainOpts& o) {
    o.seed = resolve_seed(cmd, o.seed);
    std::vector<std::vector<double>> pool;
    if (!o.input.empty()) {
        PreparedDataset ds = load_dataset(o.input);
        for (const auto& s : ds.samples) {
            const std::size_t n = s.x.dim(0), t = s.x.dim(1);
            for (std::size_t c = 0; c < n; ++c) {
                pool.emplace_back(s.x.values().begin() + c * t, s.x.values().begin() + (c + 1) * t);
            }
        }
    } else {
        pool = synth_pool(o.pool_units, o.pool_length, o.seed + 29);
    }

    BackboneState backbone = build_backbone(spec_from_string(o.spec), Rng(o.seed).split(0xB0));
    PretrainConfig cfg;
    cfg.epochs = o.epochs;
    cfg.mask_ratio = o.mask_ratio;
    cfg.batch_size = o.batch;
    cfg.lr = o.lr;
    cfg.seed = o.seed;
    PretrainResult res = pretrain_proxy(backbone, pool, cfg);
    save_backbone(backbone, o.out);

    json snap;
    snap["out"] = o.out;
    snap["spec"] = o.spec;
    snap["input"] = o.input;
    snap["pool_units"] = o.pool_units;
    snap["pool_length"] = o.pool_length;
    snap["epochs"] = o.epochs;
    snap["mask_ratio"] = o.mask_ratio;
    snap["batch"] = o.batch;
    snap["lr"] = o.lr;
    snap["seed"] = o.seed;
    write_json_file(o.out + ".config.json", snap);
    std::cout << "pretrain-proxy: initial loss " << res.initial_loss << ", final loss "
              << res.epoch_losses.back() << " -> " << o.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

struct FinetuneOpts {
    std::string data, test, backbone = "random", spec = "resnet18", ranks, out, arm = "peft", config;
    std::size_t epochs = 300, batch = 8;
    double lr = 1e-3, gamma = 0.99, weight_decay = 0.01;
    std::uint64_t seed = 0;
    bool no_pretrain = false, no_meta = false, no_zero_init = false;
};

json finetune_snapshot(const FinetuneOpts& o) {
    json snap;
    snap["data"] = o.data;
    snap["test"] = o.test;
    snap["backbone"] = o.backbone;
    snap["spec"] = o.spec;
    snap["ranks"] = o.ranks;
    snap["out"] = o.out;
    snap["arm"] = o.arm;
    snap["epochs"] = o.epochs;
    snap["batch"] = o.batch;
    snap["lr"] = o.lr;
    snap["gamma"] = o.gamma;
    snap["weight_decay"] = o.weight_decay;
    snap["seed"] = o.seed;
    snap["no_pretrain"] = o.no_pretrain;
    snap["no_meta"] = o.no_meta;
    snap["no_zero_init"] = o.no_zero_init;
    return snap;
}

int run_finetune(const CLI::App* cmd, FinetuneOpts& o) {
    o.seed = resolve_seed(cmd, o.seed);
    ModelRecipe recipe;
    recipe.backbone_arg = o.backbone;
    recipe.spec_str = o.spec;
    recipe.spec_explicit = cmd->count("--spec") > 0;
    recipe.ranks_csv = o.ranks;
    recipe.flags.pretrain = !o.no_pretrain && o.backbone != "random";
    recipe.flags.meta_variable = !o.no_meta;
    recipe.flags.zero_init = !o.no_zero_init;
    recipe.arm = arm_from_string(o.arm);

    TrainConfig cfg;
    cfg.epochs = o.epochs;
    cfg.lr = o.lr;
    cfg.lr_gamma = o.gamma;
    cfg.weight_decay = o.weight_decay;
    cfg.batch_size = o.batch;
    cfg.seed = o.seed;

    PreparedDataset train = load_dataset(o.data);
    if (train.samples.empty()) throw DataError("finetune: dataset '" + o.data + "' is empty");
    const std::size_t n_vars = train.samples[0].x.dim(0);
    const std::size_t seq_len = train.samples[0].x.dim(1);
    PeftModel model = build_from_recipe(recipe, n_vars, seq_len, o.seed);

    std::optional<PreparedDataset> test;
    std::vector<WindowSample> probe;
    if (!o.test.empty()) {
        test = load_dataset(o.test);
        probe = draw_probe(test->samples, 32, o.seed);
    }

    StabilityTrace trace =
        finetune(model, train.samples, cfg, recipe.arm, probe.empty() ? nullptr : &probe, o.arm);
    save_model(model, o.out + ".model.pmts");
    write_trace_csv(o.out + ".trace.csv", {trace});
    write_json_file(o.out + ".config.json", finetune_snapshot(o));
    const double final_loss = trace.rows.empty() ? std::nan("") : trace.rows.back().loss_mean;
    if (test) {
        const MetricsReport r = evaluate(model, test->samples);
        write_json_file(o.out + ".metrics.json", metrics_json(r));
        std::cout << "finetune[" << o.arm << "]: final loss " << final_loss << ", test MAE " << r.mae
                  << " -> " << o.out << ".model.pmts\n";
    } else {
        std::cout << "finetune[" << o.arm << "]: final loss " << final_loss << " -> " << o.out
                  << ".model.pmts\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateOpts {
    std::string model, data, out;
};

int run_evaluate(EvaluateOpts& o) {
    PeftModel model = load_model(o.model);
    PreparedDataset test = load_dataset(o.data);
    const MetricsReport r = evaluate(model, test.samples);
    const json j = metrics_json(r);
    if (!o.out.empty()) {
        write_json_file(o.out, j);
        json snap;
        snap["model"] = o.model;
        snap["data"] = o.data;
        snap["out"] = o.out;
        write_json_file(o.out + ".config.json", snap);
    }
    std::cout << j.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateOpts {
    std::string data, test, backbone, spec = "resnet18", ranks, out;
    std::size_t seeds = 3, epochs = 60, batch = 8;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

int run_ablate(const CLI::App* cmd, AblateOpts& o) {
    o.seed = resolve_seed(cmd, o.seed);
    PreparedDataset train = load_dataset(o.data);
    PreparedDataset test = load_dataset(o.test);
    const std::size_t n_vars = train.samples[0].x.dim(0);
    const std::size_t seq_len = train.samples[0].x.dim(1);

    std::FILE* f = std::fopen((o.out + ".ablation.csv").c_str(), "w");
    if (!f) throw IoError("ablate: cannot open output");
    std::fprintf(f, "pretrain,meta_variable,zero_init,seed,mae,rmse,mape,smape\n");
    for (int mask = 7; mask >= 0; --mask) {
        VariantFlags flags;
        flags.pretrain = (mask & 4) != 0;
        flags.meta_variable = (mask & 2) != 0;
        flags.zero_init = (mask & 1) != 0;
        for (std::size_t s = 0; s < o.seeds; ++s) {
            ModelRecipe recipe;
            recipe.backbone_arg = o.backbone;
            recipe.spec_str = o.spec;
            recipe.spec_explicit = cmd->count("--spec") > 0;
            recipe.ranks_csv = o.ranks;
            recipe.flags = flags;
            recipe.arm = TuneArm::kPeft;
            PeftModel model = build_from_recipe(recipe, n_vars, seq_len, o.seed + s);
            TrainConfig cfg;
            cfg.epochs = o.epochs;
            cfg.lr = o.lr;
            cfg.batch_size = o.batch;
            cfg.seed = o.seed + s;
            finetune(model, train.samples, cfg, TuneArm::kPeft);
            const MetricsReport r = evaluate(model, test.samples);
            std::fprintf(f, "%d,%d,%d,%llu,%.17g,%.17g,%.17g,%.17g\n", flags.pretrain ? 1 : 0,
                         flags.meta_variable ? 1 : 0, flags.zero_init ? 1 : 0,
                         static_cast<unsigned long long>(o.seed + s), r.mae, r.rmse, r.mape, r.smape);
        }
    }
    std::fclose(f);

    json snap;
    snap["data"] = o.data;
    snap["test"] = o.test;
    snap["backbone"] = o.backbone;
    snap["spec"] = o.spec;
    snap["ranks"] = o.ranks;
    snap["out"] = o.out;
    snap["seeds"] = o.seeds;
    snap["epochs"] = o.epochs;
    snap["batch"] = o.batch;
    snap["lr"] = o.lr;
    snap["seed"] = o.seed;
    write_json_file(o.out + ".config.json", snap);
    std::cout << "ablation table -> " << o.out << ".ablation.csv\n";
    return 0;
}

// ---------------------------------------------------------------------------
// stability
// ---------------------------------------------------------------------------

struct StabilityOpts {
    std::string data, test, backbone, spec = "resnet18", ranks, out;
    std::size_t seeds = 5, epochs = 30, summary_epoch = 10, batch = 8;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

int run_stability(const CLI::App* cmd, StabilityOpts& o) {
    o.seed = resolve_seed(cmd, o.seed);
    PreparedDataset train = load_dataset(o.data);
    PreparedDataset test = load_dataset(o.test);
    const std::size_t n_vars = train.samples[0].x.dim(0);
    const std::size_t seq_len = train.samples[0].x.dim(1);
    std::vector<WindowSample> probe = draw_probe(test.samples, 32, o.seed);

    TrainConfig cfg;
    cfg.epochs = o.epochs;
    cfg.lr = o.lr;
    cfg.batch_size = o.batch;
    cfg.seed = o.seed;

    const bool spec_explicit = cmd->count("--spec") > 0;
    auto make = [&, spec_explicit](TuneArm arm, bool pretrain) {
        return [=](std::uint64_t seed, RegressorInit init) {
            ModelRecipe recipe;
            recipe.backbone_arg = o.backbone;
            recipe.spec_str = o.spec;
            recipe.spec_explicit = spec_explicit;
            recipe.ranks_csv = o.ranks;
            recipe.flags.pretrain = pretrain;
            recipe.flags.zero_init = init == RegressorInit::kZero;
            recipe.arm = arm;
            return build_from_recipe(recipe, n_vars, seq_len, seed);
        };
    };
    std::vector<StabilityArmSpec> arms(3);
    arms[0].name = "peft-muts";
    arms[0].arm = TuneArm::kPeft;
    arms[0].make = make(TuneArm::kPeft, true);
    arms[1].name = "pretrained-full";
    arms[1].arm = TuneArm::kFull;
    arms[1].make = make(TuneArm::kFull, true);
    arms[2].name = "random-init";
    arms[2].arm = TuneArm::kFull;
    arms[2].make = make(TuneArm::kFull, false);

    auto runs = stability_experiment(arms, train.samples, probe, cfg, o.seeds);
    std::vector<StabilityTrace> traces;
    for (const auto& r : runs) traces.push_back(r.trace);
    write_trace_csv(o.out + ".trace.csv", traces);

    std::FILE* f = std::fopen((o.out + ".summary.csv").c_str(), "w");
    if (!f) throw IoError("stability: cannot open summary output");
    const std::size_t epoch = std::min(o.summary_epoch, o.epochs - 1);
    std::fprintf(f, "arm,reg_init,epoch,loss_std\n");
    for (const auto& arm : arms) {
        for (const char* init : {"zero", "kaiming"}) {
            std::fprintf(f, "%s,%s,%zu,%.17g\n", arm.name.c_str(), init, epoch,
                         cross_seed_loss_std(runs, arm.name, init, epoch));
        }
    }
    std::fclose(f);

    json snap;
    snap["data"] = o.data;
    snap["test"] = o.test;
    snap["backbone"] = o.backbone;
    snap["spec"] = o.spec;
    snap["ranks"] = o.ranks;
    snap["out"] = o.out;
    snap["seeds"] = o.seeds;
    snap["epochs"] = o.epochs;
    snap["summary_epoch"] = o.summary_epoch;
    snap["batch"] = o.batch;
    snap["lr"] = o.lr;
    snap["seed"] = o.seed;
    write_json_file(o.out + ".config.json", snap);
    std::cout << "stability traces -> " << o.out << ".trace.csv, summary -> " << o.out
              << ".summary.csv\n";
    return 0;
}

// ---------------------------------------------------------------------------
// variance-check
// ---------------------------------------------------------------------------

struct VarianceOpts {
    std::size_t trials = 100000, batch = 8, dim = 16;
    double eta = 0.01, sigma_y = 1.0;
    std::vector<double> sigma_z{1.0};
    std::vector<double> sigma_phi{0.0, 0.5, 1.0};
    bool coupled = false;
    std::string out;
    std::uint64_t seed = 0;
};

int run_variance(const CLI::App* cmd, VarianceOpts& o) {
    o.seed = resolve_seed(cmd, o.seed);
    std::vector<VarianceGridRow> rows;
    std::uint64_t salt = 0;
    for (double sz : o.sigma_z) {
        for (double sphi : o.sigma_phi) {
            VarianceLawParams p;
            p.trials = o.trials;
            p.eta = o.eta;
            p.batch = o.batch;
            p.dim = o.dim;
            p.sigma_y = o.sigma_y;
            p.sigma_z = sz;
            p.sigma_phi = sphi;
            p.coupled = o.coupled;
            p.seed = o.seed + (++salt);
            const VarianceLawResult r = variance_law_mc(p);
            rows.push_back({sz, sphi, r.measured, r.predicted_random, r.predicted_zero_b1, r.trials});
            std::cout << "sigma_z=" << sz << " sigma_phi=" << sphi << ": measured " << r.measured
                      << ", predicted " << r.predicted_random << " ("
                      << (o.coupled ? "coupled" : "product-form") << ")\n";
        }
    }
    VarianceLawParams zp;
    zp.trials = o.trials;
    zp.eta = o.eta;
    zp.batch = o.batch;
    zp.dim = o.dim;
    zp.sigma_y = o.sigma_y;
    zp.sigma_z = o.sigma_z[0];
    zp.seed = o.seed + 101;
    const VarianceLawResult rz = variance_law_mc(zp);
    std::cout << "zero-init B-exponent check: measured " << rz.measured << "; eta^2/B form "
              << rz.predicted_zero_b1 << "; eta^2/B^2 form " << rz.predicted_zero_b2
              << " => measurement supports "
              << (std::abs(rz.measured - rz.predicted_zero_b1) <
                          std::abs(rz.measured - rz.predicted_zero_b2)
                      ? "eta^2/B"
                      : "eta^2/B^2")
              << "\n";
    if (!o.out.empty()) {
        write_variance_csv(o.out, rows);
        json snap;
        snap["trials"] = o.trials;
        snap["eta"] = o.eta;
        snap["batch"] = o.batch;
        snap["dim"] = o.dim;
        snap["sigma_y"] = o.sigma_y;
        snap["sigma_z"] = o.sigma_z;
        snap["sigma_phi"] = o.sigma_phi;
        snap["coupled"] = o.coupled;
        snap["out"] = o.out;
        snap["seed"] = o.seed;
        write_json_file(o.out + ".config.json", snap);
    }
    return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportOpts {
    std::vector<std::string> metrics, traces;
    std::string out;
};

int run_report(ReportOpts& o) {
    if (o.metrics.empty() && o.traces.empty()) {
        throw CLI::ValidationError("report", "need --metrics and/or --traces inputs");
    }
    if (!o.metrics.empty()) {
        const std::vector<std::string> keys{"mae", "rmse", "mape", "smape"};
        std::vector<json> inputs;
        for (const auto& p : o.metrics) {
            json j = read_json_file(p);
            for (const auto& k : keys) {
                if (!j.contains(k)) throw DataError("report: '" + p + "' lacks metric '" + k + "'");
            }
            inputs.push_back(std::move(j));
        }
        std::FILE* f = std::fopen((o.out + ".summary.csv").c_str(), "w");
        if (!f) throw IoError("report: cannot open summary output");
        std::fprintf(f, "metric,mean,std,n\n");
        for (const auto& k : keys) {
            double mean = 0.0;
            for (const auto& j : inputs) mean += j[k].get<double>();
            mean /= static_cast<double>(inputs.size());
            double var = 0.0;
            for (const auto& j : inputs) {
                const double d = j[k].get<double>() - mean;
                var += d * d;
            }
            const double sd =
                inputs.size() > 1 ? std::sqrt(var / static_cast<double>(inputs.size() - 1)) : 0.0;
            std::fprintf(f, "%s,%.17g,%.17g,%zu\n", k.c_str(), mean, sd, inputs.size());
        }
        std::fclose(f);
        std::cout << "metric summary -> " << o.out << ".summary.csv\n";
    }
    if (!o.traces.empty()) {
        std::map<std::string, std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>>>
            series;
        for (const auto& p : o.traces) {
            std::ifstream is(p);
            if (!is) throw DataError("report: cannot open '" + p + "'");
            std::string line;
            std::getline(is, line);
            if (line != "epoch,loss_mean,sigma_z_norm,lr,seed,arm") {
                throw DataError("report: '" + p + "' does not carry the trace schema");
            }
            while (std::getline(is, line)) {
                if (line.empty()) continue;
                std::stringstream ss(line);
                std::string tok;
                std::vector<std::string> cols;
                while (std::getline(ss, tok, ',')) cols.push_back(tok);
                if (cols.size() != 6) throw DataError("report: malformed trace row in '" + p + "'");
                const std::size_t epoch = std::stoul(cols[0]);
                series[cols[5]][epoch].first.push_back(std::stod(cols[1]));
                series[cols[5]][epoch].second.push_back(std::stod(cols[2]));
            }
        }
        std::FILE* f = std::fopen((o.out + ".plotdata.csv").c_str(), "w");
        if (!f) throw IoError("report: cannot open plot data output");
        std::fprintf(f, "arm,epoch,loss_mean,loss_std,sigma_mean,sigma_std,runs\n");
        auto mean_std = [](const std::vector<double>& v) {
            double mean = 0.0;
            for (double x : v) mean += x;
            mean /= static_cast<double>(v.size());
            double var = 0.0;
            for (double x : v) var += (x - mean) * (x - mean);
            return std::make_pair(mean,
                                  v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0);
        };
        for (const auto& [arm, epochs] : series) {
            for (const auto& [epoch, data] : epochs) {
                const auto [lm, ls] = mean_std(data.first);
                const auto [sm, ss] = mean_std(data.second);
                std::fprintf(f, "%s,%zu,%.17g,%.17g,%.17g,%.17g,%zu\n", arm.c_str(), epoch, lm, ls, sm,
                             ss, data.first.size());
            }
        }
        std::fclose(f);
        std::cout << "plot data -> " << o.out << ".plotdata.csv\n";
    }
    json snap;
    snap["metrics"] = o.metrics;
    snap["traces"] = o.traces;
    snap["out"] = o.out;
    write_json_file(o.out + ".config.json", snap);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"PEFT-MuTS: parameter-efficient fine-tuning for few-shot RUL prediction"};
    app.require_subcommand(1);

    PrepareOpts po;
    CLI::App* prepare = app.add_subcommand("prepare", "Build a prepared dataset (windows + labels)");
    prepare->add_option("--dataset", po.dataset, "cmapss | xjtu | synthetic")->required();
    prepare->add_option("--input", po.input, "source file/directory (unused for synthetic)");
    prepare->add_option("--out", po.out, "output prefix")->required();
    prepare->add_option("--p1", po.p1, "device retention probability");
    prepare->add_option("--p2", po.p2, "RUL coverage probability");
    prepare->add_option("--p3", po.p3, "global retention probability");
    prepare->add_option("--seed", po.seed, "sampling seed (PMTS_SEED fallback)");
    prepare->add_option("--window", po.window, "window length");
    prepare->add_option("--step", po.step, "window step");
    prepare->add_option("--knee", po.knee, "piecewise-linear knee in cycles");
    prepare->add_option("--sensors", po.sensors, "comma-separated 0-based sensor indices (cmapss)");
    prepare->add_option("--labeling", po.labeling, "auto | knee | onset");
    prepare->add_option("--norm-from", po.norm_from, "take min/max stats from this prepared dataset");
    prepare->add_flag("--strict-health-p3", po.strict_health, "apply p3 to health samples as well");
    prepare->add_option("--units", po.units, "synthetic: unit count");
    prepare->add_option("--channels", po.channels, "synthetic: variable count");
    prepare->add_option("--length", po.length, "synthetic: series length");
    prepare->add_option("--noise", po.noise, "synthetic: noise std");

    PretrainOpts pr;
    CLI::App* pretrain = app.add_subcommand("pretrain-proxy", "Masked-reconstruction proxy pre-training");
    pretrain->add_option("--out", pr.out, "checkpoint output path")->required();
    pretrain->add_option("--spec", pr.spec, "resnet18 | compact:BASE:PAIRS");
    pretrain->add_option("--input", pr.input, "prepared dataset to dump channels from");
    pretrain->add_option("--pool-units", pr.pool_units, "synthetic pool: series count");
    pretrain->add_option("--pool-length", pr.pool_length, "synthetic pool: series length");
    pretrain->add_option("--epochs", pr.epochs, "epochs");
    pretrain->add_option("--mask-ratio", pr.mask_ratio, "contiguous mask ratio");
    pretrain->add_option("--batch", pr.batch, "batch size");
    pretrain->add_option("--lr", pr.lr, "learning rate");
    pretrain->add_option("--seed", pr.seed, "seed (PMTS_SEED fallback)");

    FinetuneOpts fo;
    CLI::App* ft = app.add_subcommand("finetune", "Fine-tune on a prepared dataset");
    ft->add_option("--data", fo.data, "prepared training dataset (.pmts)")->required();
    ft->add_option("--test", fo.test, "prepared test dataset (.pmts)");
    ft->add_option("--backbone", fo.backbone, "backbone checkpoint path, or 'random'");
    ft->add_option("--spec", fo.spec, "backbone spec when random");
    ft->add_option("--ranks", fo.ranks, "comma-separated r_k schedule");
    ft->add_option("--out", fo.out, "output prefix")->required();
    ft->add_option("--arm", fo.arm, "peft | full | linear");
    ft->add_option("--epochs", fo.epochs, "epochs");
    ft->add_option("--lr", fo.lr, "initial learning rate");
    ft->add_option("--gamma", fo.gamma, "exponential LR decay per epoch");
    ft->add_option("--weight-decay", fo.weight_decay, "AdamW weight decay");
    ft->add_option("--batch", fo.batch, "maximum batch size");
    ft->add_option("--seed", fo.seed, "seed (PMTS_SEED fallback)");
    ft->add_flag("--no-pretrain", fo.no_pretrain, "ablation: random backbone");
    ft->add_flag("--no-meta", fo.no_meta, "ablation: no meta-variable fusion");
    ft->add_flag("--no-zero-init", fo.no_zero_init, "ablation: Kaiming bias-free regressor");
    ft->add_option("--config", fo.config, "JSON config file (flags override file keys)");

    EvaluateOpts eo;
    CLI::App* ev = app.add_subcommand("evaluate", "Evaluate a model checkpoint");
    ev->add_option("--model", eo.model, "model checkpoint (.pmts)")->required();
    ev->add_option("--data", eo.data, "prepared test dataset (.pmts)")->required();
    ev->add_option("--out", eo.out, "metrics JSON output path");

    AblateOpts ao;
    CLI::App* ab = app.add_subcommand("ablate", "Run all pretrain/meta/zero-init variant arms");
    ab->add_option("--data", ao.data, "prepared training dataset")->required();
    ab->add_option("--test", ao.test, "prepared test dataset")->required();
    ab->add_option("--backbone", ao.backbone, "pre-trained backbone checkpoint")->required();
    ab->add_option("--spec", ao.spec, "backbone spec for random arms");
    ab->add_option("--ranks", ao.ranks, "comma-separated r_k schedule");
    ab->add_option("--out", ao.out, "output prefix")->required();
    ab->add_option("--seeds", ao.seeds, "repeats per arm");
    ab->add_option("--epochs", ao.epochs, "epochs");
    ab->add_option("--lr", ao.lr, "learning rate");
    ab->add_option("--batch", ao.batch, "maximum batch size");
    ab->add_option("--seed", ao.seed, "base seed (PMTS_SEED fallback)");

    StabilityOpts so;
    CLI::App* st = app.add_subcommand("stability", "Loss / sigma||z||_2 stability experiment");
    st->add_option("--data", so.data, "prepared training dataset")->required();
    st->add_option("--test", so.test, "prepared test dataset (probe source)")->required();
    st->add_option("--backbone", so.backbone, "pre-trained backbone checkpoint")->required();
    st->add_option("--spec", so.spec, "backbone spec for the random arm");
    st->add_option("--ranks", so.ranks, "comma-separated r_k schedule");
    st->add_option("--out", so.out, "output prefix")->required();
    st->add_option("--seeds", so.seeds, "seeds per arm");
    st->add_option("--epochs", so.epochs, "epochs");
    st->add_option("--summary-epoch", so.summary_epoch, "epoch for the cross-seed loss std summary");
    st->add_option("--lr", so.lr, "learning rate");
    st->add_option("--batch", so.batch, "maximum batch size");
    st->add_option("--seed", so.seed, "base seed (PMTS_SEED fallback)");

    VarianceOpts vo;
    CLI::App* vc = app.add_subcommand("variance-check", "Monte-Carlo check of the gradient-variance law");
    vc->add_option("--trials", vo.trials, "Monte-Carlo trials");
    vc->add_option("--eta", vo.eta, "learning rate");
    vc->add_option("--batch", vo.batch, "batch size B");
    vc->add_option("--dim", vo.dim, "feature dimension d");
    vc->add_option("--sigma-z", vo.sigma_z, "feature stds")->delimiter(',');
    vc->add_option("--sigma-y", vo.sigma_y, "label std");
    vc->add_option("--sigma-phi", vo.sigma_phi, "regressor-init stds")->delimiter(',');
    vc->add_flag("--coupled", vo.coupled, "simulate the literal one-step update instead of the product form");
    vc->add_option("--out", vo.out, "CSV output path");
    vc->add_option("--seed", vo.seed, "seed (PMTS_SEED fallback)");

    ReportOpts ro;
    CLI::App* rp = app.add_subcommand("report", "Aggregate metrics / traces over repeated runs");
    rp->add_option("--metrics", ro.metrics, "metrics JSON files")->delimiter(',');
    rp->add_option("--traces", ro.traces, "trace CSV files")->delimiter(',');
    rp->add_option("--out", ro.out, "output prefix")->required();

    try {
        app.parse(argc, argv);
        if (ft->parsed() && !fo.config.empty()) apply_config_file(ft, fo.config);
        if (prepare->parsed()) return run_prepare(prepare, po);
        if (pretrain->parsed()) return run_pretrain(pretrain, pr);
        if (ft->parsed()) return run_finetune(ft, fo);
        if (ev->parsed()) return run_evaluate(eo);
        if (ab->parsed()) return run_ablate(ab, ao);
        if (st->parsed()) return run_stability(st, so);
        if (vc->parsed()) return run_variance(vc, vo);
        if (rp->parsed()) return run_report(ro);
        return kExitUsage;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    } catch (const NumericError& e) {
        std::cerr << "pmts: numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "pmts: error: " << e.what() << "\n";
        return kExitData;
    }
}
