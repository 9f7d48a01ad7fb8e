#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dhm/checkpoint.hpp"
#include "dhm/config.hpp"
#include "dhm/cost_model.hpp"
#include "dhm/data_io.hpp"
#include "dhm/trainer.hpp"

namespace fs = std::filesystem;
using namespace dhm;

namespace {

constexpr int kExitBadConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitBadCheckpoint = 4;

std::string default_data_dir() {
    const char* env = std::getenv("DHM_DATA_DIR");
    return env ? env : "";
}

std::string find_idx(const std::string& dir, const std::string& stem) {
    for (const auto& name : {stem, stem + ".gz"}) {
        const fs::path p = fs::path(dir) / name;
        if (fs::exists(p)) return p.string();
    }
    throw ConfigError("cannot find '" + stem + "' (or .gz) under --data-dir '" + dir + "'");
}

LabeledImageSet load_mnist(const std::string& dir, bool train) {
    if (dir.empty())
        throw ConfigError("--data-dir is required (or set DHM_DATA_DIR)");
    const std::string imgs = train ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte";
    const std::string labs = train ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte";
    return load_idx(find_idx(dir, imgs), find_idx(dir, labs));
}

std::vector<double> parse_thresholds(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            out.push_back(std::stod(tok));
        } catch (const std::exception&) {
            throw ConfigError("bad threshold '" + tok + "' in --prune-threshold");
        }
    }
    if (out.empty()) throw ConfigError("--prune-threshold list is empty");
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write '" + path.string() + "'");
    f << text;
}

void write_histogram_file(const fs::path& path, const ScoreHistogram& h) {
    std::ostringstream os;
    for (auto b : h.bins) os << b << '\n';
    write_text(path, os.str());
}

std::string nom_report_text(const NomReport& rep, bool pruned) {
    std::ostringstream os;
    os << "# layer-id shape count\n";
    for (const auto& e : rep.per_layer) os << e.id << ' ' << e.shape << ' ' << e.count << '\n';
    os << "total_unpruned " << rep.total_unpruned << '\n';
    if (pruned) {
        os << "total_pruned " << rep.total_pruned << '\n';
        os << "pruned_mean " << rep.pruned_mean << '\n';
        os << "pruned_min " << rep.pruned_min << '\n';
        os << "pruned_max " << rep.pruned_max << '\n';
        os << "# evaluated-nodes frequency\n";
        for (const auto& [nodes, freq] : rep.evaluated_node_histogram)
            os << "evaluated " << nodes << ' ' << freq << '\n';
    }
    return os.str();
}

struct ArchFlags {
    std::string mode = "separated";
    bool sparse = false;
    double sparsity = 0.5;
    int intermediate = 16;
    std::string gate, root_map, node_map, gate_head, trunk;

    ArchitectureSpec build() const {
        ArchitectureSpec a = default_mnist_arch(parse_mode(mode), sparse, sparsity);
        a.intermediate_channels = intermediate;
        if (!gate.empty()) a.gate = gate;
        if (!root_map.empty()) a.root_map = root_map;
        if (!node_map.empty()) a.node_map = node_map;
        if (!gate_head.empty()) a.gate_head = gate_head;
        if (!trunk.empty()) a.trunk = trunk;
        return a;
    }

    void add_to(CLI::App* cmd) {
        cmd->add_option("--mode", mode, "Tree topology: separated, connected or ndf")
            ->check(CLI::IsMember({"separated", "connected", "ndf"}));
        cmd->add_flag("--sparse", sparse, "Use local-binary convolutions (DSHM)");
        cmd->add_option("--sparsity", sparsity, "Nonzero fraction of the fixed ternary kernels");
        cmd->add_option("--intermediate-channels", intermediate,
                        "Intermediate channels of local-binary convolutions");
        cmd->add_option("--gate", gate, "Override: per-node gate layers (separated)");
        cmd->add_option("--root-map", root_map, "Override: root mapping layers (connected)");
        cmd->add_option("--node-map", node_map, "Override: per-node mapping layers (connected)");
        cmd->add_option("--gate-head", gate_head, "Override: score head layers (connected)");
        cmd->add_option("--trunk", trunk, "Override: shared trunk layers (ndf)");
    }
};

int cmd_train_mnist(const std::string& data_dir, const std::string& out_dir, const ArchFlags& af,
                    TrainConfig cfg) {
    cfg.mode = parse_mode(af.mode);
    auto train = load_mnist(data_dir, true);
    auto test = load_mnist(data_dir, false);
    fs::create_directories(out_dir);
    auto res = train_classifier(cfg, af.build(), train, test, &std::cout);
    save_checkpoint((fs::path(out_dir) / "model.dhm").string(), res.tree);
    write_text(fs::path(out_dir) / "metrics.csv", metrics_csv(res.log));
    for (const auto& h : res.histograms)
        write_histogram_file(fs::path(out_dir) / ("hist_iter" + std::to_string(h.iteration) + ".txt"), h);
    std::cout << "final accuracy " << res.log.back().test_metric_unpruned << " (pruned "
              << res.log.back().test_metric_pruned << ")\n";
    std::cout << "wrote " << out_dir << "/model.dhm\n";
    return 0;
}

int cmd_train_landmarks(const std::string& out_dir, CascadeConfig cfg, int n, int image_size,
                        int num_landmarks, double noise, std::uint64_t data_seed, int test_n) {
    if (cfg.gate_arch.empty()) cfg.gate_arch = default_cascade_gate_arch();
    auto train = gen_landmark_task(n, image_size, num_landmarks, noise, data_seed);
    auto test = gen_landmark_task(test_n, image_size, num_landmarks, noise, data_seed + 1);
    fs::create_directories(out_dir);
    auto res = train_cascade(cfg, train, &std::cout);

    std::ostringstream os;
    os.precision(10);
    os << "stage,train_error\n";
    os << "0," << res.baseline_error << '\n';
    for (std::size_t t = 0; t < res.stage_errors.size(); ++t)
        os << (t + 1) << ',' << res.stage_errors[t] << '\n';
    write_text(fs::path(out_dir) / "cascade_metrics.csv", os.str());

    const double unpruned = cascade_eval(res.model, test);
    PruneConfig prune{0.5};
    const double pruned = cascade_eval(res.model, test, &prune);
    std::cout << "test error unpruned " << unpruned << " pruned(0.5) " << pruned << '\n';
    std::ostringstream ev;
    ev.precision(10);
    ev << "metric,value\n"
       << "baseline," << res.baseline_error << '\n'
       << "test_unpruned," << unpruned << '\n'
       << "test_pruned_0.5," << pruned << '\n';
    write_text(fs::path(out_dir) / "cascade_eval.csv", ev.str());
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir,
             const std::string& thresholds) {
    auto tree = load_checkpoint<float>(checkpoint);
    auto test = load_mnist(data_dir, false);
    std::cout << "threshold accuracy nom_mean nom_min nom_max\n";
    for (double th : parse_thresholds(thresholds)) {
        if (th < 0 || th > 0.5) throw ConfigError("thresholds must lie in [0, 0.5]");
        if (th == 0.0) {
            const double acc = classification_accuracy(tree, test.images, test.labels);
            const auto unp = nom_model(tree).total_unpruned;
            std::cout << th << ' ' << acc << ' ' << unp << ' ' << unp << ' ' << unp << '\n';
        } else {
            auto pe = pruned_classification_eval(tree, test.images, test.labels, PruneConfig{th});
            std::cout << th << ' ' << pe.accuracy << ' ' << pe.nom_mean << ' ' << pe.nom_min << ' '
                      << pe.nom_max << '\n';
            std::cout << "# evaluated-nodes frequency:";
            for (const auto& [nodes, freq] : pe.evaluated_node_histogram)
                std::cout << ' ' << nodes << ':' << freq;
            std::cout << '\n';
        }
    }
    return 0;
}

int cmd_nom(const std::string& checkpoint, const ArchFlags& af, int depth, int height, int width,
            double threshold, const std::string& data_dir, const std::string& out_file) {
    TreeTopology<float> tree;
    if (!checkpoint.empty()) {
        tree = load_checkpoint<float>(checkpoint);
    } else {
        tree = build_tree<float>(depth, parse_mode(af.mode), af.build(), {1, height, width}, 10, 1);
    }
    NomReport rep;
    bool pruned = false;
    if (threshold > 0) {
        auto test = load_mnist(data_dir, false);
        PruneConfig cfg{threshold};
        rep = nom_model(tree, &cfg, &test.images);
        pruned = true;
    } else {
        rep = nom_model(tree);
    }
    const std::string text = nom_report_text(rep, pruned);
    if (out_file.empty())
        std::cout << text;
    else
        write_text(out_file, text);
    return 0;
}

int cmd_hist(const std::string& checkpoint, const std::string& data_dir,
             const std::string& out_file) {
    auto tree = load_checkpoint<float>(checkpoint);
    auto test = load_mnist(data_dir, false);
    auto h = emit_histogram(tree, test.images, 0);
    if (out_file.empty()) {
        for (auto b : h.bins) std::cout << b << '\n';
    } else {
        write_histogram_file(out_file, h);
    }
    return 0;
}

int cmd_gen_data(const std::string& out_dir, int n, int image_size, int num_landmarks,
                 double noise, std::uint64_t seed) {
    auto set = gen_landmark_task(n, image_size, num_landmarks, noise, seed);
    fs::create_directories(out_dir);
    LabeledImageSet as_idx;
    as_idx.images = set.images;
    as_idx.labels.assign(static_cast<std::size_t>(n), 0);
    save_idx((fs::path(out_dir) / "landmark-images-idx3-ubyte").string(),
             (fs::path(out_dir) / "landmark-labels-idx1-ubyte").string(), as_idx);
    std::ostringstream os;
    os.precision(10);
    for (int s = 0; s < n; ++s) {
        for (int k = 0; k < 2 * num_landmarks; ++k)
            os << (k ? "," : "") << set.shapes.data()[s * 2 * num_landmarks + k];
        os << '\n';
    }
    write_text(fs::path(out_dir) / "shapes.csv", os.str());
    std::ostringstream ms;
    ms.precision(10);
    for (std::size_t k = 0; k < set.mean_shape.size(); ++k)
        ms << (k ? "," : "") << set.mean_shape[k];
    ms << '\n';
    write_text(fs::path(out_dir) / "mean_shape.csv", ms.str());
    std::cout << "wrote " << n << " samples to " << out_dir << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deep hierarchical machine: soft decision trees with learned routing"};
    app.require_subcommand(1);

    // ---- train ----
    auto* train = app.add_subcommand("train", "Train a classifier or a landmark cascade");
    train->set_config("--config", "", "Flat key=value config file (CLI flags override it)");
    std::string task = "mnist", data_dir = default_data_dir(), out_dir = "out";
    train->add_option("--task", task, "mnist or landmarks")
        ->check(CLI::IsMember({"mnist", "landmarks"}));
    train->add_option("--data-dir", data_dir, "Dataset root (default: env DHM_DATA_DIR)");
    train->add_option("--out", out_dir, "Output directory");
    ArchFlags af;
    af.add_to(train);
    TrainConfig tc;
    train->add_option("--depth", tc.depth, "Tree depth");
    train->add_option("--epochs", tc.epochs, "Training epochs");
    train->add_option("--lr", tc.learning_rate, "Adam learning rate");
    train->add_option("--batch", tc.batch_size, "Batch size");
    train->add_option("--seed", tc.seed, "Master seed");
    train->add_option("--prune-threshold", tc.prune_threshold_eval,
                      "Threshold for the per-epoch pruned evaluation");
    train->add_option("--leaf-iters", tc.leaf_update_iterations,
                      "Fixed-point iterations per leaf-update phase");
    CascadeConfig cc;
    int gen_n = 2000, gen_test_n = 500, gen_size = 32, gen_landmarks = 4;
    double gen_noise = 1.0;
    std::uint64_t gen_seed = 100;
    train->add_option("--stages", cc.stages, "Cascade stages (landmarks)");
    train->add_option("--tree-depth", cc.tree_depth, "Per-stage tree depth (landmarks)");
    train->add_option("--ensemble", cc.ensemble_size, "Trees per stage (landmarks)");
    train->add_option("--epochs-per-stage", cc.epochs_per_stage, "Epochs per stage (landmarks)");
    train->add_option("--cascade-lr", cc.learning_rate, "Cascade learning rate");
    train->add_option("--cascade-batch", cc.batch_size, "Cascade batch size");
    train->add_option("--cascade-gate", cc.gate_arch, "Cascade dividing-node layers");
    train->add_option("--n", gen_n, "Synthetic training samples (landmarks)");
    train->add_option("--test-n", gen_test_n, "Synthetic test samples (landmarks)");
    train->add_option("--image-size", gen_size, "Synthetic image side (landmarks)");
    train->add_option("--num-landmarks", gen_landmarks, "Landmarks per figure");
    train->add_option("--noise", gen_noise, "Synthetic deformation scale");
    train->add_option("--data-seed", gen_seed, "Synthetic dataset seed");

    // ---- eval ----
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint at pruning thresholds");
    eval->set_config("--config");
    std::string ckpt, thresholds = "0,0.5", eval_data = default_data_dir();
    eval->add_option("--checkpoint", ckpt, "Model checkpoint")->required();
    eval->add_option("--data-dir", eval_data, "Dataset root (default: env DHM_DATA_DIR)");
    eval->add_option("--prune-threshold", thresholds, "Comma-separated thresholds");

    // ---- nom-report ----
    auto* nom = app.add_subcommand("nom-report", "Multiplication-count report");
    nom->set_config("--config");
    std::string nom_ckpt, nom_out, nom_data = default_data_dir();
    int nom_depth = 7, nom_h = 28, nom_w = 28;
    double nom_th = 0.0;
    ArchFlags nom_af;
    nom->add_option("--checkpoint", nom_ckpt, "Report on an existing checkpoint");
    nom_af.add_to(nom);
    nom->add_option("--depth", nom_depth, "Tree depth (fresh model)");
    nom->add_option("--height", nom_h, "Input height (fresh model)");
    nom->add_option("--width", nom_w, "Input width (fresh model)");
    nom->add_option("--prune-threshold", nom_th, "Also report pruned statistics over the test set");
    nom->add_option("--data-dir", nom_data, "Dataset root for pruned statistics");
    nom->add_option("--out", nom_out, "Output file (default: stdout)");

    // ---- hist ----
    auto* hist = app.add_subcommand("hist", "Recommendation-score histogram (500 bins)");
    hist->set_config("--config");
    std::string hist_ckpt, hist_out, hist_data = default_data_dir();
    hist->add_option("--checkpoint", hist_ckpt, "Model checkpoint")->required();
    hist->add_option("--data-dir", hist_data, "Dataset root (default: env DHM_DATA_DIR)");
    hist->add_option("--out", hist_out, "Output file (default: stdout)");

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "Write a synthetic landmark dataset");
    gen->set_config("--config");
    std::string gen_out = "data";
    int gd_n = 2000, gd_size = 32, gd_landmarks = 4;
    double gd_noise = 1.0;
    std::uint64_t gd_seed = 100;
    gen->add_option("--out", gen_out, "Output directory");
    gen->add_option("--n", gd_n, "Sample count");
    gen->add_option("--image-size", gd_size, "Image side length");
    gen->add_option("--num-landmarks", gd_landmarks, "Landmarks per figure");
    gen->add_option("--noise", gd_noise, "Deformation scale");
    gen->add_option("--seed", gd_seed, "Dataset seed");

    try {
        app.parse(argc, argv);
        if (*train) {
            if (task == "mnist") return cmd_train_mnist(data_dir, out_dir, af, tc);
            cc.seed = tc.seed;
            return cmd_train_landmarks(out_dir, cc, gen_n, gen_size, gen_landmarks, gen_noise,
                                       gen_seed, gen_test_n);
        }
        if (*eval) return cmd_eval(ckpt, eval_data, thresholds);
        if (*nom)
            return cmd_nom(nom_ckpt, nom_af, nom_depth, nom_h, nom_w, nom_th, nom_data, nom_out);
        if (*hist) return cmd_hist(hist_ckpt, hist_data, hist_out);
        if (*gen) return cmd_gen_data(gen_out, gd_n, gd_size, gd_landmarks, gd_noise, gd_seed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitBadConfig;
    } catch (const TrainDivergence& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitDivergence;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitBadCheckpoint;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitBadConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
