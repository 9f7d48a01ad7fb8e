#include "doctest.h"

#include <cmath>

#include "dhm/trainer.hpp"
#include "helpers.hpp"

using namespace dhm;
using namespace dhm::testing;

namespace {

// Two-class toy set: class 0 is bright on the left half, class 1 on the right.
LabeledImageSet make_halves(int n, int size, unsigned seed) {
    LabeledImageSet set;
    set.images = Tensor<float>({n, 1, size, size});
    set.labels.resize(n);
    set.num_classes = 2;
    auto rng = test_rng(seed);
    std::uniform_real_distribution<double> bg(0.0, 0.2), fg(0.7, 1.0);
    for (int s = 0; s < n; ++s) {
        const int cls = s % 2;
        set.labels[s] = cls;
        float* img = set.images.data() + static_cast<std::size_t>(s) * size * size;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const bool lit = cls == 0 ? x < size / 2 : x >= size / 2;
                img[y * size + x] = static_cast<float>(lit ? fg(rng) : bg(rng));
            }
    }
    return set;
}

}  // namespace

TEST_CASE("adam: first step has learning-rate magnitude and skips frozen parameters") {
    Parameter<float> w(Tensor<float>::from({2}, {5.0f, -2.0f}), true, "w");
    Parameter<float> frozen(Tensor<float>::from({1}, {3.0f}), false, "f");
    frozen.value.set_requires_grad(false);
    Adam<float> opt({&w, &frozen}, {0.1, 0.9, 0.999, 1e-8});
    w.value.ensure_grad();
    w.value.grad()[0] = 4.0f;   // positive gradient: step down
    w.value.grad()[1] = -1.0f;  // negative gradient: step up
    opt.step();
    // bias-corrected Adam's first step is lr * sign(g) (up to epsilon)
    CHECK(w.value.data()[0] == doctest::Approx(5.0 - 0.1).epsilon(1e-4));
    CHECK(w.value.data()[1] == doctest::Approx(-2.0 + 0.1).epsilon(1e-4));
    CHECK(frozen.value.data()[0] == 3.0f);
}

TEST_CASE("adam minimizes a quadratic") {
    Parameter<float> w(Tensor<float>::from({1}, {0.0f}), true, "w");
    Adam<float> opt({&w}, {0.05, 0.9, 0.999, 1e-8});
    for (int i = 0; i < 400; ++i) {
        w.value.ensure_grad();
        w.value.grad()[0] = 2.0f * (w.value.data()[0] - 3.0f);
        opt.step();
        opt.zero_grad();
    }
    CHECK(w.value.data()[0] == doctest::Approx(3.0).epsilon(1e-2));
}

TEST_CASE("histogram: fresh tree mass sits near 0.5; empty dataset gives zero bins") {
    ArchitectureSpec arch;
    arch.gate = "flatten|linear:1|sigmoid";
    auto tree = build_tree<float>(3, TreeMode::separated, arch, {1, 6, 6}, 4, 3);
    auto rng = test_rng(1);
    auto images = random_tensor<float>({40, 1, 6, 6}, rng, 0.0f, 1.0f);
    auto h = emit_histogram(tree, images, 1);
    CHECK(h.total() == 7 * 40);
    CHECK(h.mass_between(0.4, 0.6) >= 0.5);

    Tensor<float> empty;  // undefined = empty dataset
    auto h0 = emit_histogram(tree, empty, 2);
    CHECK(h0.total() == 0);
}

TEST_CASE("train_classifier: one epoch on a toy set beats the uniform-leaf loss") {
    auto train = make_halves(100, 8, 1);
    auto test = make_halves(40, 8, 2);
    TrainConfig cfg;
    cfg.depth = 2;
    cfg.epochs = 1;
    cfg.batch_size = 20;
    cfg.learning_rate = 0.05;
    cfg.leaf_update_iterations = 10;
    cfg.prune_threshold_eval = 0.5;
    cfg.seed = 7;
    ArchitectureSpec arch;
    arch.gate = "flatten|linear:1|sigmoid";
    auto res = train_classifier(cfg, arch, train, test);
    CHECK(res.log.size() == 1);
    CHECK(res.log[0].train_loss < std::log(2.0));
    CHECK(res.log[0].nom_pruned_mean > 0.0);
    CHECK(res.histograms.size() >= 1);  // end-of-training snapshot
}

TEST_CASE("train_classifier solves the toy task and pruning stays close") {
    auto train = make_halves(200, 8, 3);
    auto test = make_halves(60, 8, 4);
    TrainConfig cfg;
    cfg.depth = 2;
    cfg.epochs = 8;
    cfg.batch_size = 50;
    cfg.learning_rate = 0.05;
    cfg.leaf_update_iterations = 10;
    cfg.seed = 11;
    ArchitectureSpec arch;
    arch.gate = "flatten|linear:1|sigmoid";
    auto res = train_classifier(cfg, arch, train, test);
    const auto& last = res.log.back();
    CHECK(last.test_metric_unpruned >= 0.95);
    CHECK(last.test_metric_pruned >= last.test_metric_unpruned - 0.1);
    // pruned mean cost is below the full model's (2 of 3 nodes on any path)
    auto full = nom_model(res.tree).total_unpruned;
    CHECK(last.nom_pruned_mean < static_cast<double>(full));
}

TEST_CASE("same seed reproduces the metrics log exactly") {
    auto train = make_halves(80, 8, 5);
    auto test = make_halves(20, 8, 6);
    TrainConfig cfg;
    cfg.depth = 2;
    cfg.epochs = 2;
    cfg.batch_size = 20;
    cfg.learning_rate = 0.05;
    cfg.leaf_update_iterations = 5;
    cfg.seed = 21;
    ArchitectureSpec arch;
    arch.gate = "flatten|linear:1|sigmoid";
    auto a = train_classifier(cfg, arch, train, test);
    auto b = train_classifier(cfg, arch, train, test);
    CHECK(metrics_csv(a.log) == metrics_csv(b.log));
    cfg.seed = 22;
    auto c = train_classifier(cfg, arch, train, test);
    CHECK(metrics_csv(a.log) != metrics_csv(c.log));
}

TEST_CASE("trained-model histogram shifts mass toward the extremes") {
    auto train = make_halves(200, 8, 8);
    TrainConfig cfg;
    cfg.depth = 2;
    cfg.epochs = 10;
    cfg.batch_size = 50;
    cfg.learning_rate = 0.1;
    cfg.leaf_update_iterations = 10;
    cfg.seed = 9;
    ArchitectureSpec arch;
    arch.gate = "flatten|linear:1|sigmoid";
    auto res = train_classifier(cfg, arch, train, train);
    const auto& first = res.histograms.front();  // iteration 1
    const auto& last = res.histograms.back();
    const double tail_first = first.mass_between(0.0, 0.1) + first.mass_between(0.9, 1.0);
    const double tail_last = last.mass_between(0.0, 0.1) + last.mass_between(0.9, 1.0);
    CHECK(tail_last > tail_first);
}

TEST_CASE("cascade: zero stages predict the initial shape") {
    auto set = gen_landmark_task(30, 32, 4, 1.0, 5);
    CascadeModel model;
    model.image_size = 32;
    model.num_landmarks = 4;
    model.crop = cascade_crop_size(32);
    model.initial_shape = set.mean_shape;
    auto pred = cascade_predict(model, set.images);
    for (int s = 0; s < 30; ++s)
        for (int k = 0; k < 8; ++k)
            CHECK(pred[s * 8 + k] == set.mean_shape[k]);
    CHECK(cascade_eval(model, set) ==
          doctest::Approx(landmark_error(pred, set.shapes, 4)).epsilon(1e-12));
}

TEST_CASE("cascade: a stage with all-zero leaves changes nothing") {
    auto set = gen_landmark_task(10, 32, 3, 1.0, 6);
    CascadeModel model;
    model.image_size = 32;
    model.num_landmarks = 3;
    model.crop = cascade_crop_size(32);
    model.initial_shape = set.mean_shape;

    ArchitectureSpec arch;
    arch.gate = "flatten|linear:1|sigmoid";
    CascadeStageModel stage;
    auto tree = build_tree<float>(2, TreeMode::separated, arch,
                                  {1, model.crop, model.crop}, 6, 3);
    for (auto& lf : tree.leaf_values) std::fill(lf.begin(), lf.end(), 0.0f);
    stage.members.push_back(std::move(tree));
    stage.node_landmark.push_back({0, 1, 2});
    model.stages.push_back(std::move(stage));

    auto pred = cascade_predict(model, set.images);
    for (int s = 0; s < 10; ++s)
        for (int k = 0; k < 6; ++k) CHECK(pred[s * 6 + k] == set.mean_shape[k]);
}

TEST_CASE("cascade training reduces the error below the mean-shape baseline") {
    auto set = gen_landmark_task(150, 32, 4, 1.0, 7);
    CascadeConfig cfg;
    cfg.stages = 3;
    cfg.tree_depth = 3;
    cfg.ensemble_size = 2;
    cfg.learning_rate = 0.01;
    cfg.epochs_per_stage = 3;
    cfg.batch_size = 50;
    cfg.seed = 13;
    cfg.gate_arch = "flatten|linear:8|relu|linear:1|sigmoid";
    auto res = train_cascade(cfg, set);
    REQUIRE(res.stage_errors.size() == 3);
    CHECK(res.baseline_error > 0.0);
    CHECK(res.stage_errors.back() < res.baseline_error);
    // every stage error is finite and the sequence does not blow up
    for (double e : res.stage_errors) CHECK(std::isfinite(e));

    // pruned evaluation stays finite and close at this scale
    PruneConfig prune{0.5};
    const double pruned = cascade_eval(res.model, set, &prune);
    CHECK(std::isfinite(pruned));
    CHECK(pruned < res.baseline_error);

    // determinism
    auto res2 = train_cascade(cfg, set);
    CHECK(res.stage_errors == res2.stage_errors);
}
