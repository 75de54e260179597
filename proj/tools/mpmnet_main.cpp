#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mpmnet/attacks.hpp"
#include "mpmnet/checkpoint.hpp"
#include "mpmnet/config.hpp"
#include "mpmnet/data.hpp"
#include "mpmnet/mpm.hpp"
#include "mpmnet/report.hpp"

namespace fs = std::filesystem;
using namespace mpmnet;

namespace {

struct CommonArgs {
    std::string config_file;
    std::string preset;
    std::string out_dir = "out";
    std::int64_t seed = -1;  // -1: keep the config's seed
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config_file, "flat key = value config file");
    cmd->add_option("--preset", a.preset, "desk-mnist | paper-mnist | paper-cifar10");
    cmd->add_option("--out-dir", a.out_dir, "output directory");
    cmd->add_option("--seed", a.seed, "RNG seed (overrides the config)");
    cmd->add_option("--set", a.overrides, "key=value config overrides")->take_all();
}

cfg::Config preset_config(const std::string& name) {
    if (name.empty()) return {};
    if (name == "desk-mnist")
        // 10 epochs need a much faster extractor lr than the paper's 1e-3 (it
        // also buys most of the C&W resistance), a head step of 1e-2, and a
        // dual step large enough to hold the constraint from the start
        return cfg::Config::from_text(
            "dataset = mnist\npositive-digit = 0\ntrain-samples = 5000\nepochs = 10\n"
            "batch-size = 128\nlr-decay-epochs = 5,8\nlr = 0.02\nhead-lr = 0.01\n"
            "dual-lr = 1\nbaseline-lr = 0.001\n"
            "fgsm-examples = 1000\ncw-examples = 200\n");
    if (name == "paper-mnist")
        return cfg::Config::from_text(
            "dataset = mnist\npositive-digit = 0\ntrain-samples = 0\nepochs = 100\n"
            "batch-size = 128\nlr-decay-epochs = 50,80\n");
    if (name == "paper-cifar10")
        return cfg::Config::from_text(
            "dataset = cifar10\npositive-digit = 0\ntrain-samples = 0\nepochs = 100\n"
            "batch-size = 128\nlr-decay-epochs = 50,80\n");
    throw ConfigError("unknown preset '" + name + "'");
}

cfg::Config resolve_config(const CommonArgs& a) {
    cfg::Config c = preset_config(a.preset);
    if (!a.config_file.empty()) {
        for (const auto& [k, v] : cfg::Config::from_file(a.config_file).entries()) c.set(k, v);
    }
    c.apply_overrides(a.overrides);
    if (a.seed >= 0) c.set("seed", std::to_string(a.seed));
    return c;
}

std::string data_dir(const cfg::Config& c) {
    if (c.has("data-dir")) return c.require("data-dir");
    if (const char* env = std::getenv("MPMNET_DATA_DIR")) return env;
    throw ConfigError("set data-dir in the config or the MPMNET_DATA_DIR environment variable");
}

struct LoadedData {
    data::ImageDataset train, test;
    std::vector<std::pair<std::string, std::string>> hashes;
};

LoadedData load_dataset(const cfg::Config& c, net::DatasetKind kind) {
    const std::string root = data_dir(c);
    LoadedData d;
    std::vector<std::string> files;
    if (kind == net::DatasetKind::Mnist) {
        const std::string m = root + "/mnist/";
        d.train = data::load_mnist_idx(m + "train-images-idx3-ubyte", m + "train-labels-idx1-ubyte", "train");
        d.test = data::load_mnist_idx(m + "t10k-images-idx3-ubyte", m + "t10k-labels-idx1-ubyte", "test");
        files = {m + "train-images-idx3-ubyte", m + "train-labels-idx1-ubyte", m + "t10k-images-idx3-ubyte",
                 m + "t10k-labels-idx1-ubyte"};
    } else {
        const std::string m = root + "/cifar10/";
        std::vector<std::string> train_files;
        for (int i = 1; i <= 5; ++i) train_files.push_back(m + "data_batch_" + std::to_string(i) + ".bin");
        d.train = data::load_cifar10_bin(train_files, "train");
        d.test = data::load_cifar10_bin({m + "test_batch.bin"}, "test");
        files = train_files;
        files.push_back(m + "test_batch.bin");
    }
    for (const auto& f : files) {
        std::ostringstream h;
        h << std::hex << report::fnv1a_file(f);
        d.hashes.emplace_back(fs::path(f).filename().string(), h.str());
    }
    return d;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::istringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        out.push_back(std::stoi(tok));
    }
    return out;
}

mpm::TrainConfig train_config(const cfg::Config& c) {
    mpm::TrainConfig t;
    t.epochs = static_cast<int>(c.integer("epochs", 100));
    t.lr = c.num("lr", 1e-3);
    t.momentum = c.num("momentum", 0.5);
    t.lr_decay_epochs = parse_int_list(c.str("lr-decay-epochs", "50,80"));
    t.lr_decay_factor = c.num("lr-decay-factor", 0.1);
    t.batch_size = c.integer("batch-size", 128);
    t.head_lr = c.num("head-lr", 0.0);
    t.dual_lr = c.num("dual-lr", c.num("lr", 1e-3));
    t.seed = static_cast<std::uint64_t>(c.integer("seed", 0));
    t.cov_reg = c.num("cov-reg", 1e-6);
    t.sqrt_sigma = c.num("sqrt-sigma", 1e-12);
    t.biased_cov = c.flag("biased-cov", true);
    t.lambda_init = c.num("lambda-init", 0.0);
    t.mode = mpm::parse_constraint_mode(c.str("constraint-mode", "lagrangian-dual"));
    t.stratify = c.str("stratify", "balanced") == "natural" ? data::StratifyMode::Natural : data::StratifyMode::Balanced;
    if (t.epochs < 0) throw ConfigError("epochs must be >= 0");
    return t;
}

void write_manifest(const std::string& out_dir, const std::string& command, const cfg::Config& c, std::int64_t seed,
                    const std::vector<std::pair<std::string, std::string>>& data_hashes,
                    const std::string& checkpoint_path, const std::vector<std::pair<std::string, double>>& metrics,
                    double wall_sec) {
    std::ofstream f(fs::path(out_dir) / "manifest.txt");
    if (!f) throw FormatError("cannot write manifest in " + out_dir);
    f << "command=" << command << '\n';
    f << "seed=" << seed << '\n';
    f << "wall_clock_sec=" << report::fmt6(wall_sec) << '\n';
    if (!checkpoint_path.empty()) f << "checkpoint=" << checkpoint_path << '\n';
    for (const auto& [k, v] : data_hashes) f << "data." << k << '=' << v << '\n';
    for (const auto& [k, v] : c.entries()) f << "config." << k << '=' << v << '\n';
    for (const auto& [k, v] : metrics) f << "metric." << k << '=' << report::fmt6(v) << '\n';
}

double model_accuracy(const BinaryModel& m, const data::ImageDataset& ds, const data::BinaryTask& task, int threads) {
    std::vector<int> cls(task.labels.size());
    for (std::size_t i = 0; i < task.labels.size(); ++i) cls[i] = task.labels[i] > 0 ? 0 : 1;
    return attack::accuracy(attack::predict_batched(m, ds.images, 256, threads), cls);
}

int threads_of(const cfg::Config& c) { return static_cast<int>(c.integer("threads", 0)); }

// ---------------------------------------------------------------------------

int cmd_train(const CommonArgs& args) {
    const auto t0 = std::chrono::steady_clock::now();
    cfg::Config c = resolve_config(args);
    const auto kind = net::parse_dataset_kind(c.str("dataset", "mnist"));
    const auto head = net::parse_head_kind(c.require("head"));
    const int digit = static_cast<int>(c.integer("positive-digit", 0));
    mpm::TrainConfig tc = train_config(c);
    if (head == net::HeadKind::Softmax2) {
        // baseline defaults differ from the MPM head's
        if (c.has("baseline-lr")) tc.lr = c.num("baseline-lr", 1e-2);
        else if (!c.has("lr")) tc.lr = 1e-2;
        if (!c.has("momentum")) tc.momentum = 0.9;
    }
    const int threads = threads_of(c);

    LoadedData d = load_dataset(c, kind);
    const std::int64_t nsub = c.integer("train-samples", 0);
    data::ImageDataset train = nsub > 0 ? data::subset(d.train, nsub) : std::move(d.train);
    data::BinaryTask task = data::make_binary_task(train, digit);
    data::BinaryTask test_task = data::make_binary_task(d.test, digit);

    net::NetworkArch arch = net::build_arch(kind, head);
    std::mt19937_64 init_rng(tc.seed);
    net::ModelParams params = net::init_params(arch, init_rng);

    BinaryModel model;
    model.arch = arch;
    model.positive_digit = digit;

    std::vector<std::pair<std::string, double>> metrics;
    double last_loss = 0;

    auto run_epochs = [&](auto&& step_fn, auto&& end_epoch_fn) {
        for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
            auto batches = data::stratified_batches(task, tc.batch_size,
                                                   tc.seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(epoch),
                                                   tc.stratify);
            double loss_sum = 0;
            for (const auto& b : batches) {
                Tensor images = train.gather(b);
                std::vector<int> labels;
                labels.reserve(b.size());
                for (auto i : b) labels.push_back(task.labels[static_cast<std::size_t>(i)]);
                loss_sum += step_fn(images, labels);
            }
            end_epoch_fn(epoch);
            last_loss = loss_sum / static_cast<double>(batches.size());
            std::cout << "epoch " << epoch << " loss " << report::fmt6(last_loss) << std::endl;
        }
    };

    if (head == net::HeadKind::Mpm1) {
        mpm::DeepMpmTrainer trainer(arch, std::move(params), tc);
        run_epochs([&](const Tensor& x, const std::vector<int>& y) { return trainer.step(x, y).loss; },
                   [&](int e) { trainer.end_epoch(e); });
        auto [sol, stats] = trainer.freeze(train.images, task.labels);
        model.params = trainer.params();
        model.lambda = trainer.lambda();
        model.solution = std::move(sol);
        model.frozen_stats = std::move(stats);
        metrics.emplace_back("alpha_star", model.solution->alpha_star);
    } else {
        mpm::SoftmaxTrainer trainer(arch, std::move(params), tc);
        run_epochs([&](const Tensor& x, const std::vector<int>& y) { return trainer.step(x, y); },
                   [&](int e) { trainer.end_epoch(e); });
        model.params = trainer.params();
    }

    const double train_acc = model_accuracy(model, train, task, threads);
    const double test_acc = model_accuracy(model, d.test, test_task, threads);
    std::cout << "train_accuracy " << report::fmt6(100 * train_acc) << "  test_accuracy "
              << report::fmt6(100 * test_acc) << std::endl;
    metrics.emplace_back("final_loss", last_loss);
    metrics.emplace_back("train_accuracy_pct", 100 * train_acc);
    metrics.emplace_back("test_accuracy_pct", 100 * test_acc);

    fs::create_directories(args.out_dir);
    const std::string ckpt_dir = (fs::path(args.out_dir) / "checkpoint").string();
    ckpt::save(model, ckpt_dir);
    report::write_metrics_csv((fs::path(args.out_dir) / "metrics.csv").string(), metrics);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(args.out_dir, "train", c, static_cast<std::int64_t>(tc.seed), d.hashes, ckpt_dir, metrics, wall);
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint) {
    const auto t0 = std::chrono::steady_clock::now();
    cfg::Config c = resolve_config(args);
    BinaryModel model = ckpt::load(checkpoint);
    if (c.has("dataset") && net::parse_dataset_kind(c.require("dataset")) != model.arch.dataset)
        throw ConfigError("checkpoint dataset does not match the configured dataset");
    const int threads = threads_of(c);

    LoadedData d = load_dataset(c, model.arch.dataset);
    const std::int64_t nsub = c.integer("train-samples", 0);
    data::ImageDataset train = nsub > 0 ? data::subset(d.train, nsub) : std::move(d.train);
    data::BinaryTask train_task = data::make_binary_task(train, model.positive_digit);
    data::BinaryTask test_task = data::make_binary_task(d.test, model.positive_digit);

    const double train_acc = model_accuracy(model, train, train_task, threads);
    const double test_acc = model_accuracy(model, d.test, test_task, threads);
    std::cout << "digit " << model.positive_digit << " head " << net::to_string(model.arch.head)
              << " train_accuracy " << report::fmt6(100 * train_acc) << " test_accuracy "
              << report::fmt6(100 * test_acc) << std::endl;

    std::vector<std::pair<std::string, double>> metrics = {{"train_accuracy_pct", 100 * train_acc},
                                                           {"test_accuracy_pct", 100 * test_acc}};
    fs::create_directories(args.out_dir);
    report::write_metrics_csv((fs::path(args.out_dir) / "metrics.csv").string(), metrics);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(args.out_dir, "eval", c, c.integer("seed", 0), d.hashes, checkpoint, metrics, wall);
    return 0;
}

std::string model_name(const BinaryModel& m, const std::string& suffix) {
    return (m.arch.head == net::HeadKind::Mpm1 ? std::string("deepmpm") : std::string("cnn")) + suffix;
}

int cmd_attack(const CommonArgs& args, const std::string& kind, const std::string& ckpt_a, const std::string& ckpt_b) {
    const auto t0 = std::chrono::steady_clock::now();
    cfg::Config c = resolve_config(args);
    BinaryModel a = ckpt::load(ckpt_a), b = ckpt::load(ckpt_b);
    if (a.arch.dataset != b.arch.dataset || a.positive_digit != b.positive_digit)
        throw ConfigError("the two checkpoints are not on the same task");
    const int threads = threads_of(c);

    std::string name_a = model_name(a, ""), name_b = model_name(b, "");
    if (name_a == name_b) {
        name_a += "-a";
        name_b += "-b";
    }

    LoadedData d = load_dataset(c, a.arch.dataset);
    data::BinaryTask test_task = data::make_binary_task(d.test, a.positive_digit);

    attack::AttackReport rep;
    std::vector<std::pair<std::string, double>> metrics;
    if (kind == "fgsm") {
        const std::int64_t maxn = c.integer("fgsm-examples", 1000);
        auto set = attack::jointly_correct_set(a, b, d.test, test_task, maxn, threads);
        attack::FgsmGrid grid = attack::FgsmGrid::for_dataset(a.arch.dataset);
        if (c.has("eps-grid")) {
            grid.epsilons.clear();
            std::istringstream ss(c.require("eps-grid"));
            std::string tok;
            while (std::getline(ss, tok, ',')) grid.epsilons.push_back(std::stod(tok));
        }
        auto mode = attack::parse_mpm_fgsm_loss(c.str("mpm-fgsm-loss", "frozen-stats"));
        rep = attack::eval_fgsm_grid(a, name_a, b, name_b, set, grid, mode, threads);
    } else if (kind == "cw") {
        const std::int64_t maxn = c.integer("cw-examples", 200);
        auto set = attack::jointly_correct_set(a, b, d.test, test_task, maxn, threads);
        attack::CwConfig cw;
        cw.binary_search_steps = static_cast<int>(c.integer("cw-search-steps", 6));
        cw.c_initial = c.num("cw-c-initial", 1e-3);
        cw.max_iterations = static_cast<int>(c.integer("cw-iterations", 500));
        cw.step_size = c.num("cw-step-size", 1e-2);
        cw.kappa = c.num("cw-kappa", 0.0);
        cw.threads = threads;
        rep = attack::eval_cw(a, name_a, b, name_b, set, cw);
        auto gap = attack::perturbation_gap(rep, name_a, name_b);
        std::cout << "perturbation gap (" << name_a << " - " << name_b << "): mean " << report::fmt6(gap.mean_diff)
                  << " median " << report::fmt6(gap.median_diff) << " over " << gap.count << " examples" << std::endl;
        metrics = {{"gap_mean_l2", gap.mean_diff},
                   {"gap_median_l2", gap.median_diff},
                   {"gap_examples", static_cast<double>(gap.count)},
                   {"mean_l2_" + name_a, gap.mean_a},
                   {"mean_l2_" + name_b, gap.mean_b}};
    } else {
        throw ConfigError("attack kind must be fgsm or cw");
    }

    for (const auto& r : rep.curves)
        std::cout << rep.attack << ' ' << r.source << " -> " << r.target << "  x " << report::fmt6(r.x)
                  << "  accuracy " << report::fmt6(100 * r.accuracy) << std::endl;

    fs::create_directories(args.out_dir);
    report::write_attack_csv((fs::path(args.out_dir) / "attack_report.csv").string(),
                             (fs::path(args.out_dir) / "attack_examples.csv").string(), rep);
    if (kind == "fgsm") report::write_fgsm_svg((fs::path(args.out_dir) / "curves.svg").string(), rep);
    for (const auto& r : rep.curves)
        if (r.source == r.target) metrics.emplace_back(r.source + "_self_acc_at_" + report::fmt6(r.x), 100 * r.accuracy);
    report::write_metrics_csv((fs::path(args.out_dir) / "metrics.csv").string(), metrics);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(args.out_dir, "attack-" + kind, c, c.integer("seed", 0), d.hashes, ckpt_a + ";" + ckpt_b, metrics,
                   wall);
    return 0;
}

Tensor read_numeric_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open '" + path + "'");
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::istringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            try {
                row.push_back(std::stod(tok));
            } catch (const std::exception&) {
                throw FormatError("non-numeric CSV value '" + tok + "' in " + path);
            }
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw FormatError("ragged CSV rows in " + path);
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw FormatError("empty CSV " + path);
    Tensor t({static_cast<std::int64_t>(rows.size()), static_cast<std::int64_t>(rows.front().size())});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows.front().size(); ++j)
            t.at2(static_cast<std::int64_t>(i), static_cast<std::int64_t>(j)) = rows[i][j];
    return t;
}

int cmd_mpm_solve(const CommonArgs& args, const std::string& features_csv, const std::string& labels_csv) {
    const auto t0 = std::chrono::steady_clock::now();
    cfg::Config c = resolve_config(args);
    Tensor f = read_numeric_csv(features_csv);
    Tensor lraw = read_numeric_csv(labels_csv);
    if (lraw.dim(1) != 1 || lraw.dim(0) != f.dim(0))
        throw FormatError("label CSV must hold one +/-1 label per feature row");
    std::vector<int> labels;
    for (std::int64_t i = 0; i < lraw.dim(0); ++i) {
        if (lraw[i] != 1.0 && lraw[i] != -1.0) throw FormatError("labels must be +1 or -1");
        labels.push_back(static_cast<int>(lraw[i]));
    }

    mpm::ClassStats stats = mpm::compute_class_stats(f, labels, c.num("cov-reg", 0.0), c.flag("biased-cov", true));
    auto res = mpm::solve_classical_mpm(stats.mean_x, stats.mean_y, stats.cov_x, stats.cov_y);

    std::int64_t correct = 0;
    for (std::int64_t i = 0; i < f.dim(0); ++i) {
        double v = -res.solution.b_star;
        for (std::int64_t j = 0; j < f.dim(1); ++j) v += res.solution.a_star[j] * f.at2(i, j);
        correct += (v >= 0) == (labels[static_cast<std::size_t>(i)] > 0);
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(f.dim(0));

    std::ostringstream avals;
    for (std::int64_t j = 0; j < res.solution.a_star.numel(); ++j)
        avals << (j ? "," : "") << report::fmt6(res.solution.a_star[j]);
    std::cout << "a_star=" << avals.str() << '\n';
    std::cout << "b_star=" << report::fmt6(res.solution.b_star) << '\n';
    std::cout << "alpha_star=" << report::fmt6(res.solution.alpha_star) << '\n';
    std::cout << "objective=" << report::fmt6(res.objective) << '\n';
    std::cout << "iterations=" << res.iterations << '\n';
    std::cout << "train_accuracy=" << report::fmt6(100 * acc) << std::endl;

    fs::create_directories(args.out_dir);
    std::vector<std::pair<std::string, double>> metrics = {{"alpha_star", res.solution.alpha_star},
                                                           {"objective", res.objective},
                                                           {"train_accuracy_pct", 100 * acc}};
    report::write_metrics_csv((fs::path(args.out_dir) / "metrics.csv").string(), metrics);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(args.out_dir, "mpm-solve", c, c.integer("seed", 0), {}, "", metrics, wall);
    return 0;
}

int cmd_report(const CommonArgs& args, const std::string& curves_csv, const std::string& examples_csv) {
    const auto t0 = std::chrono::steady_clock::now();
    cfg::Config c = resolve_config(args);
    attack::AttackReport rep = report::read_attack_csv(curves_csv, examples_csv);
    fs::create_directories(args.out_dir);
    std::vector<std::pair<std::string, double>> metrics;
    if (rep.attack == "fgsm") {
        report::write_fgsm_svg((fs::path(args.out_dir) / "curves.svg").string(), rep);
        std::cout << "wrote curves.svg (" << rep.curves.size() << " curve points)" << std::endl;
    } else {
        std::vector<std::string> sources;
        for (const auto& e : rep.examples)
            if (std::find(sources.begin(), sources.end(), e.source) == sources.end()) sources.push_back(e.source);
        if (sources.size() != 2) throw EvalError("gap summary needs exactly two attack sources");
        auto gap = attack::perturbation_gap(rep, sources[0], sources[1]);
        std::cout << "perturbation gap (" << sources[0] << " - " << sources[1] << "): mean "
                  << report::fmt6(gap.mean_diff) << " median " << report::fmt6(gap.median_diff) << " over "
                  << gap.count << " examples" << std::endl;
        metrics = {{"gap_mean_l2", gap.mean_diff}, {"gap_median_l2", gap.median_diff}};
    }
    report::write_metrics_csv((fs::path(args.out_dir) / "metrics.csv").string(), metrics);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(args.out_dir, "report", c, c.integer("seed", 0), {}, "", metrics, wall);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DeepMPM / CNN binary classifiers with FGSM and C&W-L2 robustness evaluation"};
    app.require_subcommand(1);

    CommonArgs train_args, eval_args, attack_args, solve_args, report_args;
    std::string eval_ckpt, attack_kind, attack_ckpt_a, attack_ckpt_b;
    std::string solve_features, solve_labels, report_curves, report_examples;

    auto* train = app.add_subcommand("train", "train a binary classifier and write a checkpoint");
    add_common(train, train_args);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on its task");
    add_common(eval, eval_args);
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();

    auto* attack = app.add_subcommand("attack", "attack two checkpoints on the same task");
    add_common(attack, attack_args);
    attack->add_option("--kind", attack_kind, "fgsm | cw")->required();
    attack->add_option("--checkpoint-a", attack_ckpt_a, "first checkpoint directory")->required();
    attack->add_option("--checkpoint-b", attack_ckpt_b, "second checkpoint directory")->required();

    auto* solve = app.add_subcommand("mpm-solve", "classical MPM on raw CSV features");
    add_common(solve, solve_args);
    solve->add_option("--features", solve_features, "numeric feature CSV")->required();
    solve->add_option("--labels", solve_labels, "one +/-1 label per row")->required();

    auto* rpt = app.add_subcommand("report", "regenerate plots/summaries from attack CSVs");
    add_common(rpt, report_args);
    rpt->add_option("--curves", report_curves, "attack_report.csv from a previous run")->required();
    rpt->add_option("--examples", report_examples, "attack_examples.csv from a previous run")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(train_args);
        if (eval->parsed()) return cmd_eval(eval_args, eval_ckpt);
        if (attack->parsed()) return cmd_attack(attack_args, attack_kind, attack_ckpt_a, attack_ckpt_b);
        if (solve->parsed()) return cmd_mpm_solve(solve_args, solve_features, solve_labels);
        if (rpt->parsed()) return cmd_report(report_args, report_curves, report_examples);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
