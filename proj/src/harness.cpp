#include "afnet/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <atomic>
#include <thread>

#include "afnet/rng.hpp"
#include "afnet/tensor_io.hpp"

namespace afnet {

namespace {

std::string fmt_acc(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace

void TrainConfig::validate() const {
    if (learning_rate < 0) throw ConfigError("learning_rate must be non-negative");
    if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1)
        throw ConfigError("betas must lie in (0,1)");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 for batch statistics");
}

FoldPlan build_folds(std::vector<int> subject_ids, int k, std::uint64_t seed) {
    std::sort(subject_ids.begin(), subject_ids.end());
    subject_ids.erase(std::unique(subject_ids.begin(), subject_ids.end()), subject_ids.end());
    if (k < 1) throw ConfigError("build_folds: k must be >= 1");
    if (static_cast<std::size_t>(k) > subject_ids.size())
        throw ConfigError("build_folds: k exceeds the number of subjects");
    Rng rng(seed);
    for (std::size_t i = subject_ids.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(subject_ids[i - 1], subject_ids[j]);
    }
    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    plan.folds.assign(static_cast<std::size_t>(k), {});
    for (std::size_t i = 0; i < subject_ids.size(); ++i)
        plan.folds[i % static_cast<std::size_t>(k)].push_back(subject_ids[i]);
    return plan;
}

Dataset make_synthetic_dataset(int subjects, std::int64_t grid_size, std::uint64_t seed,
                               int grid_n) {
    if (subjects < 1) throw ConfigError("make_synthetic_dataset: need at least one subject");
    Dataset ds;
    ds.reserve(static_cast<std::size_t>(subjects) * kNumExpressions);
    for (int s = 0; s < subjects; ++s) {
        const std::uint64_t subject_seed = mix_seed(seed, static_cast<std::uint64_t>(s));
        const int intensity = s % 2 == 0 ? 4 : 3;
        for (int c = 0; c < kNumExpressions; ++c) {
            Scan scan = synth_scan(c, subject_seed, intensity, grid_n);
            Preprocessed pp = preprocess_scan(scan, grid_size);
            Sample sample;
            sample.subject = s;
            sample.label = c;
            sample.intensity = intensity;
            sample.texture = pp.pair.texture;
            sample.depth = pp.pair.depth;
            sample.mask1 = pp.masks.mask1;
            sample.mask2 = pp.masks.mask2;
            ds.push_back(std::move(sample));
        }
    }
    return ds;
}

Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ContractError("make_batch: empty index list");
    const std::int64_t n = static_cast<std::int64_t>(indices.size());
    const auto& first = ds.at(indices[0]);
    const std::int64_t s = first.texture.dim(1);
    const std::int64_t m1 = first.mask1.dim(1), m2 = first.mask2.dim(1);

    Batch batch;
    batch.texture = Tensor::zeros({n, 3, s, s});
    batch.depth = Tensor::zeros({n, 3, s, s});
    batch.mask1 = Tensor::zeros({n, 1, m1, m1});
    batch.mask2 = Tensor::zeros({n, 1, m2, m2});
    const std::int64_t img = 3 * s * s;
    for (std::int64_t i = 0; i < n; ++i) {
        const Sample& smp = ds.at(indices[static_cast<std::size_t>(i)]);
        if (smp.texture.shape() != first.texture.shape() ||
            smp.depth.shape() != first.depth.shape() ||
            smp.mask1.shape() != first.mask1.shape() ||
            smp.mask2.shape() != first.mask2.shape())
            throw InputError("make_batch: samples disagree on tensor shapes");
        std::copy(smp.texture.data().begin(), smp.texture.data().end(),
                  batch.texture.data().begin() + i * img);
        std::copy(smp.depth.data().begin(), smp.depth.data().end(),
                  batch.depth.data().begin() + i * img);
        std::copy(smp.mask1.data().begin(), smp.mask1.data().end(),
                  batch.mask1.data().begin() + i * m1 * m1);
        std::copy(smp.mask2.data().begin(), smp.mask2.data().end(),
                  batch.mask2.data().begin() + i * m2 * m2);
        batch.labels.push_back(smp.label);
    }
    return batch;
}

TrainOutput train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const Dataset& train_set) {
    train_cfg.validate();
    if (train_set.empty()) throw InputError("train: empty training set");
    const double t0 = now_ms();

    TrainOutput out{AfnetModel(model_cfg), {}};
    AfnetModel& model = out.model;
    Adam opt(model.parameters(), train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2);
    Rng shuffle_rng(mix_seed(train_cfg.seed, 0x73687566ULL));

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.next_below(i))]);
        double loss_sum = 0.0;
        std::int64_t seen = 0, correct = 0;
        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(train_cfg.batch_size)) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(at),
                                         order.begin() +
                                             static_cast<std::ptrdiff_t>(std::min(
                                                 order.size(), at + static_cast<std::size_t>(
                                                                        train_cfg.batch_size))));
            // batch statistics need more than one value per channel
            if (idx.size() < 2) continue;
            Batch batch = make_batch(train_set, idx);
            opt.zero_grad();
            Tape tape;
            Tensor logits = model.forward(&tape, batch, /*training=*/true);
            auto ce = softmax_cross_entropy(&tape, logits, batch.labels);
            backward(tape, ce.loss);
            opt.step();

            loss_sum += ce.loss.value() * static_cast<double>(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) {
                int best = 0;
                for (int c = 1; c < kNumExpressions; ++c)
                    if (ce.probs.data()[i * kNumExpressions + static_cast<std::size_t>(c)] >
                        ce.probs.data()[i * kNumExpressions + static_cast<std::size_t>(best)])
                        best = c;
                if (best == batch.labels[i]) ++correct;
            }
            seen += static_cast<std::int64_t>(idx.size());
        }
        EpochLog el;
        el.loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
        el.accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
        out.log.epochs.push_back(el);
    }
    out.log.wall_ms = now_ms() - t0;
    out.log.config = config_echo(model_cfg);
    return out;
}

std::int64_t& ConfusionMatrix::at(int truth, int predicted) {
    return counts[static_cast<std::size_t>(truth * kNumExpressions + predicted)];
}
std::int64_t ConfusionMatrix::at(int truth, int predicted) const {
    return counts[static_cast<std::size_t>(truth * kNumExpressions + predicted)];
}
std::int64_t ConfusionMatrix::total() const {
    std::int64_t t = 0;
    for (auto v : counts) t += v;
    return t;
}
std::int64_t ConfusionMatrix::trace() const {
    std::int64_t t = 0;
    for (int i = 0; i < kNumExpressions; ++i) t += at(i, i);
    return t;
}
double ConfusionMatrix::accuracy() const {
    const std::int64_t t = total();
    return t ? static_cast<double>(trace()) / static_cast<double>(t) : 0.0;
}
void ConfusionMatrix::add(const ConfusionMatrix& other) {
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}
Tensor ConfusionMatrix::to_tensor() const {
    Tensor t = Tensor::zeros({kNumExpressions, kNumExpressions});
    for (std::size_t i = 0; i < counts.size(); ++i) t.data()[i] = static_cast<double>(counts[i]);
    return t;
}
std::string ConfusionMatrix::pretty() const {
    std::ostringstream os;
    os << "true\\pred";
    for (int p = 0; p < kNumExpressions; ++p) os << "\t" << expression_name(p);
    os << "\n";
    for (int t = 0; t < kNumExpressions; ++t) {
        os << expression_name(t);
        for (int p = 0; p < kNumExpressions; ++p) os << "\t" << at(t, p);
        os << "\n";
    }
    return os.str();
}

EvalResult evaluate(AfnetModel& model, const Dataset& eval_set, int batch_size) {
    if (eval_set.empty()) throw InputError("evaluate: empty evaluation set");
    if (batch_size < 1) throw ConfigError("evaluate: batch_size must be >= 1");
    EvalResult res;
    for (std::size_t at = 0; at < eval_set.size(); at += static_cast<std::size_t>(batch_size)) {
        std::vector<std::size_t> idx;
        for (std::size_t i = at; i < std::min(eval_set.size(), at + static_cast<std::size_t>(batch_size)); ++i)
            idx.push_back(i);
        Batch batch = make_batch(eval_set, idx);
        Tensor logits = model.forward(nullptr, batch, /*training=*/false);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            int best = 0;
            for (int c = 1; c < kNumExpressions; ++c)
                if (logits.data()[i * kNumExpressions + static_cast<std::size_t>(c)] >
                    logits.data()[i * kNumExpressions + static_cast<std::size_t>(best)])
                    best = c;
            res.confusion.at(batch.labels[i], best) += 1;
        }
    }
    res.accuracy = res.confusion.accuracy();
    return res;
}

ProtocolResult run_protocol(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                            const Dataset& dataset, int repeats, int k, int jobs) {
    if (repeats < 1) throw ConfigError("run_protocol: repeats must be >= 1");
    if (dataset.empty()) throw InputError("run_protocol: empty dataset");
    std::vector<int> subjects;
    for (const auto& s : dataset) subjects.push_back(s.subject);
    std::sort(subjects.begin(), subjects.end());
    subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
    if (static_cast<int>(subjects.size()) < k)
        throw ConfigError("run_protocol: dataset spans fewer subjects than folds");

    struct Task {
        int repeat, fold;
        std::vector<int> eval_subjects;
    };
    std::vector<Task> tasks;
    for (int r = 0; r < repeats; ++r) {
        FoldPlan plan = build_folds(subjects, k, train_cfg.seed + static_cast<std::uint64_t>(r));
        for (int f = 0; f < k; ++f) tasks.push_back({r, f, plan.folds[static_cast<std::size_t>(f)]});
    }

    ProtocolResult result;
    result.rotations.assign(tasks.size(), {});

    auto run_task = [&](std::size_t ti) {
        const Task& task = tasks[ti];
        Dataset train_set, eval_set;
        for (const auto& s : dataset) {
            const bool held_out = std::find(task.eval_subjects.begin(), task.eval_subjects.end(),
                                            s.subject) != task.eval_subjects.end();
            (held_out ? eval_set : train_set).push_back(s);
        }
        ModelConfig mc = model_cfg;
        mc.seed = mix_seed(mix_seed(model_cfg.seed, static_cast<std::uint64_t>(task.repeat)),
                           static_cast<std::uint64_t>(task.fold));
        TrainConfig tc = train_cfg;
        tc.seed = mix_seed(mix_seed(train_cfg.seed, static_cast<std::uint64_t>(task.repeat)),
                           static_cast<std::uint64_t>(task.fold) + 0x9e37ULL);
        TrainOutput trained = train(mc, tc, train_set);
        EvalResult ev = evaluate(trained.model, eval_set, train_cfg.batch_size);
        RotationResult rot;
        rot.repeat = task.repeat;
        rot.fold = task.fold;
        rot.accuracy = ev.accuracy;
        rot.confusion = ev.confusion;
        rot.log = std::move(trained.log);
        result.rotations[ti] = std::move(rot);
    };

    const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
    if (workers == 1) {
        for (std::size_t ti = 0; ti < tasks.size(); ++ti) run_task(ti);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (;;) {
                    const std::size_t ti = next.fetch_add(1);
                    if (ti >= tasks.size()) return;
                    run_task(ti);
                }
            });
        for (auto& t : pool) t.join();
    }

    double mean = 0.0;
    for (const auto& rot : result.rotations) {
        mean += rot.accuracy;
        result.aggregate.add(rot.confusion);
    }
    mean /= static_cast<double>(result.rotations.size());
    double var = 0.0;
    for (const auto& rot : result.rotations) {
        const double d = rot.accuracy - mean;
        var += d * d;
    }
    var /= static_cast<double>(result.rotations.size());
    result.mean_accuracy = mean;
    result.std_accuracy = std::sqrt(var);
    return result;
}

const char* ablation_axis_name(AblationAxis axis) {
    switch (axis) {
        case AblationAxis::FusionStrategy: return "fusion_strategy";
        case AblationAxis::MaAndModality: return "ma_and_modality";
        case AblationAxis::FusionPositions: return "fusion_positions";
    }
    return "?";
}

AblationAxis ablation_axis_from_name(const std::string& name) {
    if (name == "fusion_strategy" || name == "fusion") return AblationAxis::FusionStrategy;
    if (name == "ma_and_modality" || name == "ma") return AblationAxis::MaAndModality;
    if (name == "fusion_positions" || name == "positions") return AblationAxis::FusionPositions;
    throw ConfigError("unknown ablation axis '" + name + "'");
}

AblationReport ablate(const Dataset& dataset, AblationAxis axis, const ModelConfig& base,
                      const TrainConfig& train_cfg, int repeats, int k, int jobs) {
    std::vector<std::pair<std::string, ModelConfig>> rows;
    switch (axis) {
        case AblationAxis::FusionStrategy: {
            // strategy comparison runs without mask attention
            auto with = [&](FusionStrategy s, bool iwc) {
                ModelConfig c = base;
                c.modality = Modality::Both;
                c.ma_enabled = false;
                c.fusion_strategy = s;
                c.iwc_enabled = iwc;
                return c;
            };
            rows.emplace_back("s1_data", with(FusionStrategy::DataLevel, false));
            rows.emplace_back("s2_decision", with(FusionStrategy::DecisionLevel, false));
            rows.emplace_back("s3_fc", with(FusionStrategy::FcConcat, false));
            rows.emplace_back("s4_convsum", with(FusionStrategy::ConvSum, false));
            rows.emplace_back("ours_adaptive", with(FusionStrategy::ConvAdaptive, true));
            break;
        }
        case AblationAxis::MaAndModality: {
            auto single = [&](Modality m, bool ma) {
                ModelConfig c = base;
                c.modality = m;
                c.ma_enabled = ma;
                c.fusion_strategy = FusionStrategy::ConvAdaptive;
                c.iwc_enabled = true;
                return c;
            };
            rows.emplace_back("2d", single(Modality::Texture, false));
            rows.emplace_back("2d_ma", single(Modality::Texture, true));
            rows.emplace_back("3d", single(Modality::Depth, false));
            rows.emplace_back("3d_ma", single(Modality::Depth, true));
            rows.emplace_back("2d3d_fusion", single(Modality::Both, false));
            rows.emplace_back("2d3d_ma_fusion", single(Modality::Both, true));
            break;
        }
        case AblationAxis::FusionPositions: {
            auto at = [&](std::vector<int> pos, const char* label) {
                ModelConfig c = base;
                c.modality = Modality::Both;
                c.ma_enabled = false;
                c.fusion_strategy = FusionStrategy::ConvAdaptive;
                c.iwc_enabled = true;
                c.fusion_positions = std::move(pos);
                return std::make_pair(std::string(label), c);
            };
            rows.push_back(at({3}, "layer3"));
            rows.push_back(at({4}, "layer4"));
            rows.push_back(at({3, 4}, "layer34"));
            rows.push_back(at({1, 2, 3, 4}, "layer1234"));
            break;
        }
    }

    AblationReport report;
    report.axis = axis;
    for (auto& [label, cfg] : rows) {
        cfg.validate();
        ProtocolResult pr = run_protocol(cfg, train_cfg, dataset, repeats, k, jobs);
        AblationRow row;
        row.label = label;
        row.config = cfg;
        row.mean_accuracy = pr.mean_accuracy;
        row.std_accuracy = pr.std_accuracy;
        report.rows.push_back(std::move(row));
    }
    return report;
}

void save_dataset(const std::string& dir, const Dataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream index(fs::path(dir) / "index.csv");
    if (!index) throw InputError("save_dataset: cannot write index in " + dir);
    index << "id,subject,label,intensity,texture,depth,mask1,mask2\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const Sample& s = ds[i];
        char stem[64];
        std::snprintf(stem, sizeof stem, "sample%04zu", i);
        const std::string tex = std::string(stem) + "_tex.aftn";
        const std::string dep = std::string(stem) + "_dep.aftn";
        const std::string m1 = std::string(stem) + "_mask1.aftn";
        const std::string m2 = std::string(stem) + "_mask2.aftn";
        write_tensor((fs::path(dir) / tex).string(), s.texture);
        write_tensor((fs::path(dir) / dep).string(), s.depth);
        write_tensor((fs::path(dir) / m1).string(), s.mask1);
        write_tensor((fs::path(dir) / m2).string(), s.mask2);
        index << i << "," << s.subject << "," << s.label << "," << s.intensity << "," << tex << ","
              << dep << "," << m1 << "," << m2 << "\n";
    }
}

Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream index(fs::path(dir) / "index.csv");
    if (!index) throw InputError("load_dataset: no index.csv in " + dir);
    Dataset ds;
    std::string line;
    std::getline(index, line);  // header
    std::size_t lineno = 1;
    while (std::getline(index, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ls(line);
        std::string col;
        while (std::getline(ls, col, ',')) cols.push_back(col);
        if (cols.size() != 8)
            throw InputError("load_dataset: malformed index line " + std::to_string(lineno));
        Sample s;
        try {
            s.subject = std::stoi(cols[1]);
            s.label = std::stoi(cols[2]);
            s.intensity = std::stoi(cols[3]);
        } catch (...) {
            throw InputError("load_dataset: bad numbers at index line " + std::to_string(lineno));
        }
        s.texture = read_tensor((fs::path(dir) / cols[4]).string());
        s.depth = read_tensor((fs::path(dir) / cols[5]).string());
        s.mask1 = read_tensor((fs::path(dir) / cols[6]).string());
        s.mask2 = read_tensor((fs::path(dir) / cols[7]).string());
        ds.push_back(std::move(s));
    }
    if (ds.empty()) throw InputError("load_dataset: empty dataset in " + dir);
    return ds;
}

namespace {

std::string echo_join(const std::vector<std::pair<std::string, std::string>>& kv) {
    std::string s;
    for (const auto& [k, v] : kv) {
        if (!s.empty()) s += ";";
        s += k + "=" + v;
    }
    return s;
}

}  // namespace

void write_protocol_report(const std::string& dir, const ProtocolResult& result,
                           const ModelConfig& model_cfg, const TrainConfig& train_cfg, int repeats,
                           int k) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
        std::ofstream os(fs::path(dir) / "folds.csv");
        os << "repeat,fold,accuracy\n";
        for (const auto& rot : result.rotations)
            os << rot.repeat << "," << rot.fold << "," << fmt_acc(rot.accuracy) << "\n";
    }
    {
        std::ofstream os(fs::path(dir) / "epochs.csv");
        os << "repeat,fold,epoch,train_loss,train_accuracy\n";
        for (const auto& rot : result.rotations)
            for (std::size_t e = 0; e < rot.log.epochs.size(); ++e)
                os << rot.repeat << "," << rot.fold << "," << e << ","
                   << fmt_acc(rot.log.epochs[e].loss) << "," << fmt_acc(rot.log.epochs[e].accuracy)
                   << "\n";
    }
    {
        std::ofstream os(fs::path(dir) / "summary.txt");
        os << "protocol: " << repeats << " x " << k << "-fold subject-disjoint cross-validation\n";
        os << "rotations: " << result.rotations.size() << "\n";
        os << "mean_accuracy: " << fmt_acc(result.mean_accuracy) << "\n";
        os << "std_accuracy: " << fmt_acc(result.std_accuracy) << "\n";
        os << "model: " << echo_join(config_echo(model_cfg)) << "\n";
        os << "train: learning_rate=" << train_cfg.learning_rate << ";beta1=" << train_cfg.beta1
           << ";beta2=" << train_cfg.beta2 << ";epochs=" << train_cfg.epochs
           << ";batch_size=" << train_cfg.batch_size << ";seed=" << train_cfg.seed << "\n";
        os << "\naggregated confusion (rows = truth):\n" << result.aggregate.pretty();
    }
    write_tensor((fs::path(dir) / "confusion.aftn").string(), result.aggregate.to_tensor());
}

void write_ablation_report(const std::string& dir, const AblationReport& report) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::string axis = ablation_axis_name(report.axis);
    {
        std::ofstream os(fs::path(dir) / ("ablation_" + axis + ".csv"));
        os << "axis,row,mean_accuracy,std_accuracy,config\n";
        for (const auto& row : report.rows)
            os << axis << "," << row.label << "," << fmt_acc(row.mean_accuracy) << ","
               << fmt_acc(row.std_accuracy) << "," << echo_join(config_echo(row.config)) << "\n";
    }
    {
        std::ofstream os(fs::path(dir) / ("ablation_" + axis + ".txt"));
        os << "ablation axis: " << axis << "\n\n";
        for (const auto& row : report.rows)
            os << "  " << row.label << "  mean=" << fmt_acc(row.mean_accuracy)
               << "  std=" << fmt_acc(row.std_accuracy) << "\n";
    }
}

}  // namespace afnet
