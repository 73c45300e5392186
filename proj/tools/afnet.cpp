// afnet command-line front end: synthetic data generation, preprocessing,
// training, evaluation, the cross-validation protocol, ablations, class
// activation maps and parameter accounting. Every command writes a run
// manifest next to its outputs so a published number can be reproduced from
// the manifest alone.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "afnet/config.hpp"
#include "afnet/rng.hpp"
#include "afnet/harness.hpp"
#include "afnet/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace afnet;

namespace {

constexpr const char* kToolVersion = "afnet 0.1.0";

std::string iso_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct ManifestWriter {
    nlohmann::json j;
    std::string out_dir;

    ManifestWriter(const std::string& command, int argc, char** argv, const std::string& dir)
        : out_dir(dir) {
        j["tool"] = kToolVersion;
        j["command"] = command;
        j["started"] = iso_now();
        nlohmann::json args = nlohmann::json::array();
        for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
        j["argv"] = args;
    }
    void put_config(const ModelConfig& mc, const TrainConfig& tc) {
        nlohmann::json m = nlohmann::json::object();
        for (const auto& [k, v] : config_echo(mc)) m[k] = v;
        j["model_config"] = m;
        nlohmann::json t = nlohmann::json::object();
        for (const auto& [k, v] : train_config_echo(tc)) t[k] = v;
        j["train_config"] = t;
    }
    void finish() {
        j["finished"] = iso_now();
        fs::create_directories(out_dir);
        std::ofstream os(fs::path(out_dir) / "run_manifest.json");
        os << j.dump(2) << "\n";
    }
};

LoadedConfig resolve_config(const std::string& config_path, const std::vector<std::string>& sets) {
    LoadedConfig lc;
    if (!config_path.empty()) lc = load_config(config_path);
    // --set key=value overrides config-file values, which override defaults
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        const std::string key = kv.substr(0, eq);
        const std::string value = kv.substr(eq + 1);
        bool known = apply_model_config_kv(lc.model, key, value);
        if (key == "seed") lc.train.seed = lc.model.seed;
        if (!known) known = apply_train_config_kv(lc.train, key, value);
        if (!known) throw ConfigError("--set: unknown key '" + key + "'");
    }
    return lc;
}

int cmd_synth(int argc, char** argv, int subjects, const std::string& out, std::uint64_t seed,
              int grid_n, int intensity) {
    ManifestWriter mw("synth", argc, argv, out);
    fs::create_directories(out);
    int written = 0;
    for (int s = 0; s < subjects; ++s) {
        const std::uint64_t subject_seed = mix_seed(seed, static_cast<std::uint64_t>(s));
        const int level = intensity > 0 ? intensity : (s % 2 == 0 ? 4 : 3);
        for (int c = 0; c < kNumExpressions; ++c) {
            Scan scan = synth_scan(c, subject_seed, level, grid_n);
            char name[64];
            std::snprintf(name, sizeof name, "scan_s%03d_%s.scan", s, expression_name(c));
            write_scan((fs::path(out) / name).string(), scan);
            ++written;
        }
    }
    mw.j["seed"] = seed;
    mw.j["subjects"] = subjects;
    mw.j["scans_written"] = written;
    mw.finish();
    std::cout << "wrote " << written << " scans to " << out << "\n";
    return 0;
}

int cmd_preprocess(int argc, char** argv, const std::string& in, const std::string& out,
                   std::int64_t size, bool ppm) {
    ManifestWriter mw("preprocess", argc, argv, out);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(in))
        if (e.is_regular_file() && e.path().extension() == ".scan") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw InputError("preprocess: no .scan files in " + in);

    Dataset ds;
    for (const auto& f : files) {
        Scan scan = read_scan(f.string());
        Preprocessed pp = preprocess_scan(scan, size);
        Sample s;
        s.subject = scan.subject_id;
        s.label = scan.expression;
        s.intensity = scan.intensity;
        s.texture = pp.pair.texture;
        s.depth = pp.pair.depth;
        s.mask1 = pp.masks.mask1;
        s.mask2 = pp.masks.mask2;
        ds.push_back(std::move(s));
    }
    save_dataset(out, ds);
    if (ppm) {
        fs::create_directories(fs::path(out) / "ppm");
        for (std::size_t i = 0; i < ds.size(); ++i) {
            char stem[64];
            std::snprintf(stem, sizeof stem, "sample%04zu", i);
            write_ppm((fs::path(out) / "ppm" / (std::string(stem) + "_tex.ppm")).string(),
                      ds[i].texture);
            write_ppm((fs::path(out) / "ppm" / (std::string(stem) + "_dep.ppm")).string(),
                      ds[i].depth);
            write_ppm((fs::path(out) / "ppm" / (std::string(stem) + "_mask1.ppm")).string(),
                      ds[i].mask1.reshaped({ds[i].mask1.dim(1), ds[i].mask1.dim(2)}));
        }
    }
    mw.j["scans"] = files.size();
    mw.j["grid_size"] = size;
    mw.finish();
    std::cout << "preprocessed " << ds.size() << " scans into " << out << "\n";
    return 0;
}

int cmd_train(int argc, char** argv, const std::string& data, const std::string& out,
              const LoadedConfig& lc) {
    ManifestWriter mw("train", argc, argv, out);
    mw.put_config(lc.model, lc.train);
    Dataset ds = load_dataset(data);
    TrainOutput to = train(lc.model, lc.train, ds);
    save_checkpoint((fs::path(out) / "checkpoint").string(), to.model);
    {
        fs::create_directories(out);
        std::ofstream os(fs::path(out) / "runlog.csv");
        os << "epoch,train_loss,train_accuracy\n";
        for (std::size_t e = 0; e < to.log.epochs.size(); ++e) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f\n", e, to.log.epochs[e].loss,
                          to.log.epochs[e].accuracy);
            os << buf;
        }
    }
    mw.j["samples"] = ds.size();
    mw.j["wall_ms"] = to.log.wall_ms;
    mw.j["final_train_loss"] = to.log.epochs.back().loss;
    mw.finish();
    std::cout << "trained on " << ds.size() << " samples; final train loss "
              << to.log.epochs.back().loss << "\n";
    return 0;
}

int cmd_eval(int argc, char** argv, const std::string& data, const std::string& checkpoint,
             const std::string& out) {
    ManifestWriter mw("eval", argc, argv, out);
    AfnetModel model = load_checkpoint(checkpoint);
    Dataset ds = load_dataset(data);
    EvalResult res = evaluate(model, ds);
    fs::create_directories(out);
    {
        std::ofstream os(fs::path(out) / "eval.txt");
        char buf[64];
        std::snprintf(buf, sizeof buf, "accuracy: %.6f\n", res.accuracy);
        os << buf << "\nconfusion (rows = truth):\n" << res.confusion.pretty();
    }
    write_tensor((fs::path(out) / "confusion.aftn").string(), res.confusion.to_tensor());
    mw.j["samples"] = ds.size();
    mw.j["accuracy"] = res.accuracy;
    mw.finish();
    std::cout << "accuracy " << res.accuracy << " on " << ds.size() << " samples\n"
              << res.confusion.pretty();
    return 0;
}

int cmd_protocol(int argc, char** argv, const std::string& data, const std::string& out,
                 const LoadedConfig& lc, int repeats, int k, int jobs) {
    ManifestWriter mw("protocol", argc, argv, out);
    mw.put_config(lc.model, lc.train);
    Dataset ds = load_dataset(data);
    ProtocolResult res = run_protocol(lc.model, lc.train, ds, repeats, k, jobs);
    write_protocol_report(out, res, lc.model, lc.train, repeats, k);
    mw.j["repeats"] = repeats;
    mw.j["k"] = k;
    mw.j["mean_accuracy"] = res.mean_accuracy;
    mw.j["std_accuracy"] = res.std_accuracy;
    mw.finish();
    char buf[96];
    std::snprintf(buf, sizeof buf, "mean accuracy %.6f +- %.6f over %zu rotations\n",
                  res.mean_accuracy, res.std_accuracy, res.rotations.size());
    std::cout << buf;
    return 0;
}

int cmd_ablate(int argc, char** argv, const std::string& data, const std::string& out,
               const LoadedConfig& lc, const std::string& axis, int repeats, int k, int jobs) {
    ManifestWriter mw("ablate", argc, argv, out);
    mw.put_config(lc.model, lc.train);
    Dataset ds = load_dataset(data);
    AblationReport rep = ablate(ds, ablation_axis_from_name(axis), lc.model, lc.train, repeats, k, jobs);
    write_ablation_report(out, rep);
    mw.j["axis"] = ablation_axis_name(rep.axis);
    mw.j["rows"] = rep.rows.size();
    mw.finish();
    for (const auto& row : rep.rows) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%-16s mean %.6f  std %.6f\n", row.label.c_str(),
                      row.mean_accuracy, row.std_accuracy);
        std::cout << buf;
    }
    return 0;
}

int cmd_cam(int argc, char** argv, const std::string& checkpoint, const std::string& data,
            std::size_t index, int target_class, const std::string& layer, const std::string& out,
            bool ppm) {
    ManifestWriter mw("cam", argc, argv, out);
    AfnetModel model = load_checkpoint(checkpoint);
    Dataset ds = load_dataset(data);
    if (index >= ds.size()) throw InputError("cam: sample index out of range");
    Batch one = make_batch(ds, {index});
    Tensor heat = model.grad_cam(one, target_class, layer);
    fs::create_directories(out);
    write_tensor((fs::path(out) / "cam.aftn").string(), heat);
    if (ppm) write_ppm((fs::path(out) / "cam.ppm").string(), heat);
    mw.j["sample"] = index;
    mw.j["target_class"] = target_class;
    mw.j["layer"] = layer;
    mw.finish();
    std::cout << "wrote " << (fs::path(out) / "cam.aftn").string() << "\n";
    return 0;
}

int cmd_params(const LoadedConfig& lc, const std::string& out) {
    ParamReport rep = count_params(lc.model);
    char buf[96];
    std::cout << "component        parameters\n";
    for (const auto& c : rep.components) {
        std::snprintf(buf, sizeof buf, "%-12s %14lld\n", c.component.c_str(),
                      static_cast<long long>(c.count));
        std::cout << buf;
    }
    std::snprintf(buf, sizeof buf, "%-12s %14lld  (%.2f MB at 32-bit)\n", "total",
                  static_cast<long long>(rep.total), rep.megabytes32());
    std::cout << buf;
    if (!out.empty()) {
        fs::create_directories(out);
        std::ofstream os(fs::path(out) / "params.csv");
        os << "component,parameters\n";
        for (const auto& c : rep.components) os << c.component << "," << c.count << "\n";
        os << "total," << rep.total << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{std::string(kToolVersion) +
                 " - mask-guided adaptive-fusion expression recognition on a compact "
                 "differentiable-tensor engine"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, in_dir, checkpoint_dir, layer = "fused.layer4",
                                                                        axis = "fusion";
    std::vector<std::string> sets;
    int subjects = 12, grid_n = 120, repeats = 1, k = 10, jobs = 1, target_class = 0,
        intensity = 0;
    std::size_t sample_index = 0;
    std::int64_t grid_size = 224;
    std::uint64_t seed = 0;
    bool ppm = false;

    auto add_config_opts = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key=value configuration file");
        cmd->add_option("--set", sets, "override one key=value (repeatable)");
    };

    CLI::App* synth = app.add_subcommand("synth", "generate synthetic face scans");
    synth->add_option("--subjects", subjects, "number of subjects")->required();
    synth->add_option("--out", out_dir, "output directory")->required();
    synth->add_option("--seed", seed, "generator seed");
    synth->add_option("--grid-n", grid_n, "point grid resolution per scan");
    synth->add_option("--intensity", intensity, "fixed expression intensity 1..4 (default: alternate 4/3)");

    CLI::App* prep = app.add_subcommand("preprocess", "scans -> aligned tensors and masks");
    prep->add_option("--in", in_dir, "directory of .scan files")->required();
    prep->add_option("--out", out_dir, "output dataset directory")->required();
    prep->add_option("--size", grid_size, "image size S (divisible by 8)");
    prep->add_flag("--ppm", ppm, "also write PPM previews");

    CLI::App* trainc = app.add_subcommand("train", "train one model on a dataset");
    trainc->add_option("--data", data_dir, "preprocessed dataset directory")->required();
    trainc->add_option("--out", out_dir, "output directory")->required();
    add_config_opts(trainc);

    CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    evalc->add_option("--data", data_dir, "preprocessed dataset directory")->required();
    evalc->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
    evalc->add_option("--out", out_dir, "output directory")->required();

    CLI::App* proto = app.add_subcommand("protocol", "repeated k-fold cross-validation");
    proto->add_option("--data", data_dir, "preprocessed dataset directory")->required();
    proto->add_option("--out", out_dir, "output directory")->required();
    proto->add_option("--repeats", repeats, "protocol repeats");
    proto->add_option("--k", k, "fold count");
    proto->add_option("--jobs", jobs, "parallel fold rotations");
    add_config_opts(proto);

    CLI::App* abl = app.add_subcommand("ablate", "run one ablation axis");
    abl->add_option("--data", data_dir, "preprocessed dataset directory")->required();
    abl->add_option("--out", out_dir, "output directory")->required();
    abl->add_option("--axis", axis, "fusion | ma | positions")->required();
    abl->add_option("--repeats", repeats, "protocol repeats");
    abl->add_option("--k", k, "fold count");
    abl->add_option("--jobs", jobs, "parallel fold rotations");
    add_config_opts(abl);

    CLI::App* cam = app.add_subcommand("cam", "gradient-weighted class activation map");
    cam->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
    cam->add_option("--data", data_dir, "preprocessed dataset directory")->required();
    cam->add_option("--index", sample_index, "sample index");
    cam->add_option("--class", target_class, "target class 0..5")->required();
    cam->add_option("--layer", layer, "activation name, e.g. tex.layer3");
    cam->add_option("--out", out_dir, "output directory")->required();
    cam->add_flag("--ppm", ppm, "also write a PPM preview");

    CLI::App* par = app.add_subcommand("params", "per-component parameter accounting");
    par->add_option("--out", out_dir, "optional output directory for params.csv");
    add_config_opts(par);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help() << "\n";
        return 2;
    }

    try {
        if (*synth) return cmd_synth(argc, argv, subjects, out_dir, seed, grid_n, intensity);
        if (*prep) return cmd_preprocess(argc, argv, in_dir, out_dir, grid_size, ppm);
        LoadedConfig lc = resolve_config(config_path, sets);
        if (*trainc) return cmd_train(argc, argv, data_dir, out_dir, lc);
        if (*evalc) return cmd_eval(argc, argv, data_dir, checkpoint_dir, out_dir);
        if (*proto) return cmd_protocol(argc, argv, data_dir, out_dir, lc, repeats, k, jobs);
        if (*abl) return cmd_ablate(argc, argv, data_dir, out_dir, lc, axis, repeats, k, jobs);
        if (*cam)
            return cmd_cam(argc, argv, checkpoint_dir, data_dir, sample_index, target_class, layer,
                           out_dir, ppm);
        if (*par) return cmd_params(lc, out_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
