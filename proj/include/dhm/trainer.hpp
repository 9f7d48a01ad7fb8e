#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dhm/classification.hpp"
#include "dhm/cost_model.hpp"
#include "dhm/data_io.hpp"
#include "dhm/regression.hpp"
#include "dhm/rng.hpp"
#include "dhm/tree.hpp"

namespace dhm {

// ---------------------------------------------------------------- optimizer

struct AdamConfig {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Adam over a fixed parameter list. Parameters with trainable == false are
// never touched (LBC fixed kernels).
template <class T>
class Adam {
public:
    Adam(std::vector<Parameter<T>*> params, AdamConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        state_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            state_[i].m.assign(params_[i]->value.size(), 0.0);
            state_[i].v.assign(params_[i]->value.size(), 0.0);
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Parameter<T>* p = params_[i];
            if (!p->trainable) continue;
            const T* g = p->value.grad();
            T* w = p->value.data();
            auto& st = state_[i];
            for (std::size_t k = 0; k < p->value.size(); ++k) {
                const double gk = static_cast<double>(g[k]);
                st.m[k] = cfg_.beta1 * st.m[k] + (1.0 - cfg_.beta1) * gk;
                st.v[k] = cfg_.beta2 * st.v[k] + (1.0 - cfg_.beta2) * gk * gk;
                const double mhat = st.m[k] / bc1;
                const double vhat = st.v[k] / bc2;
                w[k] -= static_cast<T>(cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon));
            }
        }
    }

    void zero_grad() {
        for (Parameter<T>* p : params_)
            if (p->trainable) p->value.zero_grad();
    }

private:
    struct State {
        std::vector<double> m, v;
    };
    std::vector<Parameter<T>*> params_;
    AdamConfig cfg_;
    std::vector<State> state_;
    long t_ = 0;
};

// ---------------------------------------------------------------- histograms

struct ScoreHistogram {
    std::vector<std::int64_t> bins = std::vector<std::int64_t>(500, 0);
    long iteration = 0;

    std::int64_t total() const { return std::accumulate(bins.begin(), bins.end(), std::int64_t(0)); }

    // Fraction of mass within [lo, hi] measured over bin centers.
    double mass_between(double lo, double hi) const {
        const std::int64_t n = total();
        if (n == 0) return 0.0;
        std::int64_t in = 0;
        for (std::size_t b = 0; b < bins.size(); ++b) {
            const double center = (b + 0.5) / bins.size();
            if (center >= lo && center <= hi) in += bins[b];
        }
        return static_cast<double>(in) / static_cast<double>(n);
    }
};

// Every dividing node's score over a dataset, quantized into 500 uniform bins.
// An undefined tensor counts as the empty dataset (all-zero bins).
template <class T>
ScoreHistogram emit_histogram(const TreeTopology<T>& tree, const Tensor<T>& images, long iteration) {
    ScoreHistogram h;
    h.iteration = iteration;
    if (!images.defined()) return h;
    auto scores = all_scores(tree, images);
    for (T s : scores) {
        int b = static_cast<int>(static_cast<double>(s) * 500.0);
        b = std::clamp(b, 0, 499);
        ++h.bins[static_cast<std::size_t>(b)];
    }
    return h;
}

// ---------------------------------------------------------------- evaluation

// Argmax accuracy over a labeled set, without pruning (batched fast path).
template <class T>
double classification_accuracy(const TreeTopology<T>& tree, const Tensor<T>& images,
                               const std::vector<int>& labels) {
    const int n = images.dim(0);
    auto scores = all_scores(tree, images);
    std::vector<const T*> rows(tree.n_div());
    for (int i = 0; i < tree.n_div(); ++i) rows[i] = scores.data() + static_cast<std::size_t>(i) * n;
    auto w = leaf_weights_from_scores<T>(tree.depth, rows, n);
    int correct = 0;
    std::vector<double> p(static_cast<std::size_t>(tree.leaf_dim));
    for (int b = 0; b < n; ++b) {
        std::fill(p.begin(), p.end(), 0.0);
        for (int j = 0; j < tree.n_leaves(); ++j) {
            const double wv = static_cast<double>(w[static_cast<std::size_t>(j) * n + b]);
            if (wv == 0.0) continue;
            const auto& lf = tree.leaf_values[j];
            for (int k = 0; k < tree.leaf_dim; ++k) p[k] += wv * static_cast<double>(lf[k]);
        }
        const int pred = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
        if (pred == labels[static_cast<std::size_t>(b)]) ++correct;
    }
    return static_cast<double>(correct) / n;
}

struct PrunedEval {
    double accuracy = 0.0;
    double nom_mean = 0.0;
    std::int64_t nom_min = 0;
    std::int64_t nom_max = 0;
    std::map<int, std::int64_t> evaluated_node_histogram;
};

// Accuracy and mean executed multiplies under pruned routing (per-sample,
// since the surviving path is data-dependent).
template <class T>
PrunedEval pruned_classification_eval(const TreeTopology<T>& tree, const Tensor<T>& images,
                                      const std::vector<int>& labels, const PruneConfig& prune) {
    const int n = images.dim(0);
    const std::size_t per = images.size() / static_cast<std::size_t>(n);
    std::vector<int> sub_shape = images.shape();
    sub_shape[0] = 1;

    std::vector<std::int64_t> node_costs(tree.n_div());
    for (int i = 0; i < tree.n_div(); ++i) node_costs[i] = detail_cost::node_cost(tree, i);
    const std::int64_t shared =
        tree.mode == TreeMode::ndf ? tree.trunk.nom(tree.arch.intermediate_channels) : 0;

    PrunedEval out;
    int correct = 0;
    double nom_sum = 0;
    for (int b = 0; b < n; ++b) {
        Tensor<T> x(sub_shape);
        std::copy(images.data() + b * per, images.data() + (b + 1) * per, x.data());
        auto rs = route(tree, x, &prune);
        auto p = predict(tree, rs);
        const int pred = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
        if (pred == labels[static_cast<std::size_t>(b)]) ++correct;
        std::int64_t c = shared;
        int evaluated = 0;
        for (int i = 0; i < tree.n_div(); ++i)
            if (rs.evaluated[i]) {
                c += node_costs[i];
                ++evaluated;
            }
        ++out.evaluated_node_histogram[evaluated];
        nom_sum += static_cast<double>(c);
        out.nom_min = b == 0 ? c : std::min(out.nom_min, c);
        out.nom_max = b == 0 ? c : std::max(out.nom_max, c);
    }
    out.accuracy = static_cast<double>(correct) / n;
    out.nom_mean = nom_sum / n;
    return out;
}

// ---------------------------------------------------------------- classifier

struct TrainConfig {
    int depth = 7;
    TreeMode mode = TreeMode::separated;
    double learning_rate = 0.001;
    int batch_size = 500;
    int epochs = 50;
    double prune_threshold_eval = 0.5;
    int leaf_update_iterations = 20;
    std::uint64_t seed = 1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::vector<long> histogram_iterations = {1, 7, 500};
    int histogram_sample_cap = 5000;

    void validate() const {
        if (depth < 1) throw ConfigError("depth must be >= 1");
        if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (leaf_update_iterations < 1) throw ConfigError("leaf_update_iterations must be >= 1");
        if (prune_threshold_eval < 0 || prune_threshold_eval > 0.5)
            throw ConfigError("prune_threshold_eval must be in [0, 0.5]");
    }
};

struct EpochMetrics {
    int epoch = 0;
    double train_loss = 0.0;
    double test_metric_unpruned = 0.0;
    double test_metric_pruned = 0.0;
    double nom_pruned_mean = 0.0;
};

inline std::string metrics_csv(const std::vector<EpochMetrics>& log) {
    std::ostringstream os;
    os.precision(10);
    os << "epoch,train_loss,test_metric_unpruned,test_metric_pruned,nom_pruned_mean\n";
    for (const auto& m : log)
        os << m.epoch << ',' << m.train_loss << ',' << m.test_metric_unpruned << ','
           << m.test_metric_pruned << ',' << m.nom_pruned_mean << '\n';
    return os.str();
}

struct ClassifierResult {
    TreeTopology<float> tree;
    std::vector<EpochMetrics> log;
    std::vector<ScoreHistogram> histograms;
};

namespace detail_train {

inline Tensor<float> gather(const Tensor<float>& images, const std::vector<int>& idx, int start,
                            int count) {
    std::vector<int> shape = images.shape();
    shape[0] = count;
    Tensor<float> out(shape);
    const std::size_t per = images.size() / static_cast<std::size_t>(images.dim(0));
    for (int b = 0; b < count; ++b)
        std::copy(images.data() + static_cast<std::size_t>(idx[start + b]) * per,
                  images.data() + static_cast<std::size_t>(idx[start + b] + 1) * per,
                  out.data() + static_cast<std::size_t>(b) * per);
    return out;
}

inline Tensor<float> head(const Tensor<float>& images, int count) {
    std::vector<int> shape = images.shape();
    shape[0] = count;
    Tensor<float> out(shape);
    std::copy(images.data(), images.data() + out.size(), out.data());
    return out;
}

}  // namespace detail_train

// Minibatch Adam on the routing parameters (closed-form dL/ds seeded into the
// gate outputs, then replayed through the tape) alternated with one leaf
// re-estimation per epoch.
inline ClassifierResult train_classifier(const TrainConfig& cfg, const ArchitectureSpec& arch,
                                         const LabeledImageSet& train, const LabeledImageSet& test,
                                         std::ostream* progress = nullptr) {
    cfg.validate();
    const int n = train.images.dim(0);
    if (n == 0 || test.images.dim(0) == 0) throw ConfigError("empty dataset");
    const std::vector<int> input_shape{train.images.dim(1), train.images.dim(2),
                                       train.images.dim(3)};

    ClassifierResult res;
    res.tree = build_tree<float>(cfg.depth, cfg.mode, arch, input_shape, train.num_classes,
                                 derive_seed(cfg.seed, "tree"));
    auto params = res.tree.parameters();
    Adam<float> opt(params, {cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon});

    const int hist_n = std::min(cfg.histogram_sample_cap, n);
    const Tensor<float> hist_set = detail_train::head(train.images, hist_n);
    auto want_hist = [&](long iter) {
        return std::find(cfg.histogram_iterations.begin(), cfg.histogram_iterations.end(), iter) !=
               cfg.histogram_iterations.end();
    };

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    const int n_div = res.tree.n_div();
    long iter = 0;

    // Uniform leaves make every routing gradient exactly zero, so the
    // alternation starts with a leaf phase to break the symmetry.
    leaf_update(res.tree, train.images, train.labels, cfg.leaf_update_iterations);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto erng = make_rng(cfg.seed, "epoch/" + std::to_string(epoch));
        std::shuffle(order.begin(), order.end(), erng);
        double loss_sum = 0;
        long loss_count = 0;

        for (int start = 0; start < n; start += cfg.batch_size) {
            const int B = std::min(cfg.batch_size, n - start);
            auto bx = detail_train::gather(train.images, order, start, B);
            std::vector<int> by(static_cast<std::size_t>(B));
            for (int b = 0; b < B; ++b) by[b] = train.labels[static_cast<std::size_t>(order[start + b])];

            Tape<float> tape;
            {
                Tape<float>::Scope scope(tape);
                auto scores = batched_scores(res.tree, {bx});
                std::vector<const float*> rows(static_cast<std::size_t>(n_div));
                for (int i = 0; i < n_div; ++i) rows[i] = scores[i].data();
                auto grad = classification_routing_gradient(res.tree.depth, rows, B,
                                                            res.tree.leaf_values, by);
                // batch loss for the log (same leaf weights the gradient used)
                auto w = leaf_weights_from_scores<float>(res.tree.depth, rows, B);
                std::vector<double> lik(static_cast<std::size_t>(B), 0.0);
                for (int j = 0; j < res.tree.n_leaves(); ++j)
                    for (int b = 0; b < B; ++b)
                        lik[b] += static_cast<double>(w[static_cast<std::size_t>(j) * B + b]) *
                                  res.tree.leaf_values[j][static_cast<std::size_t>(by[b])];
                for (int b = 0; b < B; ++b)
                    loss_sum -= std::log(std::max(lik[b], kLikelihoodEps));
                loss_count += B;
                if (!std::isfinite(loss_sum))
                    throw TrainDivergence("loss diverged at epoch " + std::to_string(epoch) +
                                          ", batch " + std::to_string(start / cfg.batch_size));
                for (int i = 0; i < n_div; ++i) {
                    scores[i].ensure_grad();
                    std::copy(grad.per_sample.begin() + static_cast<std::size_t>(i) * B,
                              grad.per_sample.begin() + static_cast<std::size_t>(i + 1) * B,
                              scores[i].grad());
                }
                tape.replay();
            }
            opt.step();
            opt.zero_grad();
            ++iter;
            if (want_hist(iter)) res.histograms.push_back(emit_histogram(res.tree, hist_set, iter));
        }

        leaf_update(res.tree, train.images, train.labels, cfg.leaf_update_iterations);

        EpochMetrics m;
        m.epoch = epoch;
        m.train_loss = loss_sum / static_cast<double>(loss_count);
        m.test_metric_unpruned = classification_accuracy(res.tree, test.images, test.labels);
        PruneConfig prune{cfg.prune_threshold_eval};
        if (prune.threshold > 0) {
            auto pe = pruned_classification_eval(res.tree, test.images, test.labels, prune);
            m.test_metric_pruned = pe.accuracy;
            m.nom_pruned_mean = pe.nom_mean;
        } else {
            m.test_metric_pruned = m.test_metric_unpruned;
            m.nom_pruned_mean = static_cast<double>(nom_model(res.tree).total_unpruned);
        }
        res.log.push_back(m);
        if (progress)
            (*progress) << "epoch " << epoch << " loss " << m.train_loss << " acc "
                        << m.test_metric_unpruned << " pruned " << m.test_metric_pruned
                        << std::endl;
    }
    res.histograms.push_back(emit_histogram(res.tree, hist_set, iter));
    return res;
}

// ---------------------------------------------------------------- cascade

struct CascadeConfig {
    int stages = 10;
    int tree_depth = 5;
    int ensemble_size = 5;
    double learning_rate = 0.01;
    int epochs_per_stage = 10;
    int batch_size = 100;
    std::uint64_t seed = 1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::string gate_arch;  // architecture of each dividing node, on crop input

    void validate() const {
        if (stages < 0) throw ConfigError("stages must be >= 0");
        if (tree_depth < 1) throw ConfigError("tree_depth must be >= 1");
        if (ensemble_size < 1) throw ConfigError("ensemble_size must be >= 1");
        if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
        if (epochs_per_stage < 1) throw ConfigError("epochs_per_stage must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (gate_arch.empty()) throw ConfigError("cascade gate_arch must be set");
    }
};

// Crop side length scales with the image (receptive-field ratio ~0.27 of the
// side, rounded to even).
inline int cascade_crop_size(int image_size) {
    int c = static_cast<int>(std::llround(0.27 * image_size));
    if (c % 2) ++c;
    return std::max(4, c);
}

struct CascadeStageModel {
    std::vector<TreeTopology<float>> members;
    std::vector<std::vector<int>> node_landmark;  // [member][dividing node] -> landmark index
};

struct CascadeModel {
    int image_size = 0;
    int num_landmarks = 0;
    int crop = 0;
    std::vector<float> initial_shape;  // mean shape, the stage-0 estimate
    std::vector<CascadeStageModel> stages;
};

namespace detail_train {

// Zero-padded square crop centered (rounded) on (cx, cy) of one image plane.
inline void crop_into(const float* img, int size, double cx, double cy, int crop, float* dst) {
    const int x0 = static_cast<int>(std::lround(cx)) - crop / 2;
    const int y0 = static_cast<int>(std::lround(cy)) - crop / 2;
    for (int r = 0; r < crop; ++r) {
        const int y = y0 + r;
        for (int c = 0; c < crop; ++c) {
            const int x = x0 + c;
            dst[r * crop + c] =
                (x >= 0 && x < size && y >= 0 && y < size) ? img[y * size + x] : 0.0f;
        }
    }
}

// Per-node crop batches from current shape estimates est [N, 2L].
inline Tensor<float> crop_batch(const Tensor<float>& images, const std::vector<float>& est,
                                const std::vector<int>& idx, int start, int count, int landmark,
                                int num_landmarks, int crop) {
    const int size = images.dim(2);
    const std::size_t per = static_cast<std::size_t>(size) * size;
    Tensor<float> out({count, 1, crop, crop});
    for (int b = 0; b < count; ++b) {
        const int s = idx[static_cast<std::size_t>(start + b)];
        const float* img = images.data() + static_cast<std::size_t>(s) * per;
        const std::size_t off = static_cast<std::size_t>(s) * 2 * num_landmarks;
        crop_into(img, size, est[off + 2 * landmark], est[off + 2 * landmark + 1], crop,
                  out.data() + static_cast<std::size_t>(b) * crop * crop);
    }
    return out;
}

}  // namespace detail_train

// Mean ensemble prediction of one stage for samples [start, start+count) under
// the current estimates; optionally with pruned (per-sample) routing.
inline std::vector<float> cascade_stage_delta(const CascadeModel& model,
                                              const CascadeStageModel& stage,
                                              const Tensor<float>& images,
                                              const std::vector<float>& est,
                                              const PruneConfig* prune = nullptr) {
    const int n = images.dim(0);
    const int dim = 2 * model.num_landmarks;
    std::vector<int> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    std::vector<float> delta(static_cast<std::size_t>(n) * dim, 0.0f);

    for (std::size_t e = 0; e < stage.members.size(); ++e) {
        const auto& tree = stage.members[e];
        const auto& lms = stage.node_landmark[e];
        if (!prune) {
            const int chunk = 500;
            for (int start = 0; start < n; start += chunk) {
                const int B = std::min(chunk, n - start);
                std::vector<Tensor<float>> node_inputs;
                node_inputs.reserve(static_cast<std::size_t>(tree.n_div()));
                for (int i = 0; i < tree.n_div(); ++i)
                    node_inputs.push_back(detail_train::crop_batch(
                        images, est, all, start, B, lms[static_cast<std::size_t>(i)],
                        model.num_landmarks, model.crop));
                auto scores = batched_scores(tree, node_inputs);
                std::vector<float> flat(static_cast<std::size_t>(tree.n_div()) * B);
                std::vector<const float*> rows(static_cast<std::size_t>(tree.n_div()));
                for (int i = 0; i < tree.n_div(); ++i) {
                    std::copy(scores[i].data(), scores[i].data() + B,
                              flat.data() + static_cast<std::size_t>(i) * B);
                    rows[i] = flat.data() + static_cast<std::size_t>(i) * B;
                }
                auto pred = predictions_from_scores(tree, flat, B);
                for (int b = 0; b < B; ++b)
                    for (int k = 0; k < dim; ++k)
                        delta[static_cast<std::size_t>(start + b) * dim + k] +=
                            pred[static_cast<std::size_t>(b) * dim + k];
            }
        } else {
            const int size = images.dim(2);
            const std::size_t per = static_cast<std::size_t>(size) * size;
            for (int s = 0; s < n; ++s) {
                const float* img = images.data() + static_cast<std::size_t>(s) * per;
                const std::size_t off = static_cast<std::size_t>(s) * dim;
                NodeInputFn<float> input_fn = [&](int node) {
                    Tensor<float> x({1, 1, model.crop, model.crop});
                    const int lm = lms[static_cast<std::size_t>(node)];
                    detail_train::crop_into(img, size, est[off + 2 * lm], est[off + 2 * lm + 1],
                                            model.crop, x.data());
                    return x;
                };
                auto rs = route(tree, input_fn, prune);
                auto p = predict(tree, rs);
                for (int k = 0; k < dim; ++k) delta[off + k] += p[k];
            }
        }
    }
    const float inv = 1.0f / static_cast<float>(stage.members.size());
    for (auto& v : delta) v *= inv;
    return delta;
}

// Full-cascade prediction: initial shape plus each stage's mean update.
inline std::vector<float> cascade_predict(const CascadeModel& model, const Tensor<float>& images,
                                          const PruneConfig* prune = nullptr) {
    const int n = images.dim(0);
    const int dim = 2 * model.num_landmarks;
    std::vector<float> est(static_cast<std::size_t>(n) * dim);
    for (int s = 0; s < n; ++s)
        std::copy(model.initial_shape.begin(), model.initial_shape.end(),
                  est.begin() + static_cast<std::size_t>(s) * dim);
    for (const auto& stage : model.stages) {
        auto delta = cascade_stage_delta(model, stage, images, est, prune);
        for (std::size_t i = 0; i < est.size(); ++i) est[i] += delta[i];
    }
    return est;
}

struct CascadeResult {
    CascadeModel model;
    double baseline_error = 0.0;        // mean-shape predictor on the training set
    std::vector<double> stage_errors;   // training-set error after each stage
};

// Stage t trains an ensemble on the residuals y - current estimate, then all
// estimates advance by the stage's mean prediction.
inline CascadeResult train_cascade(const CascadeConfig& cfg, const LandmarkSet& train,
                                   std::ostream* progress = nullptr) {
    cfg.validate();
    const int n = train.images.dim(0);
    const int L = train.num_landmarks;
    const int dim = 2 * L;

    CascadeResult res;
    res.model.image_size = train.image_size;
    res.model.num_landmarks = L;
    res.model.crop = cascade_crop_size(train.image_size);
    res.model.initial_shape = train.mean_shape;

    std::vector<float> est(static_cast<std::size_t>(n) * dim);
    for (int s = 0; s < n; ++s)
        std::copy(train.mean_shape.begin(), train.mean_shape.end(),
                  est.begin() + static_cast<std::size_t>(s) * dim);
    res.baseline_error = landmark_error(est, train.shapes, L);

    const int crop = res.model.crop;
    ArchitectureSpec arch;
    arch.gate = cfg.gate_arch;

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::vector<int> all = order;

    for (int t = 0; t < cfg.stages; ++t) {
        // residual targets under the current estimates
        Tensor<float> resid({n, dim});
        for (std::size_t i = 0; i < resid.size(); ++i)
            resid.data()[i] = train.shapes.data()[i] - est[i];

        CascadeStageModel stage;
        for (int e = 0; e < cfg.ensemble_size; ++e) {
            const std::string tag = "stage/" + std::to_string(t) + "/member/" + std::to_string(e);
            auto tree = build_tree<float>(cfg.tree_depth, TreeMode::separated, arch,
                                          {1, crop, crop}, dim, derive_seed(cfg.seed, tag));
            for (auto& lf : tree.leaf_values) std::fill(lf.begin(), lf.end(), 0.0f);
            const int n_div = tree.n_div();

            auto lrng = make_rng(cfg.seed, tag + "/landmarks");
            std::vector<int> lms(static_cast<std::size_t>(n_div));
            std::uniform_int_distribution<int> pick(0, L - 1);
            for (auto& v : lms) v = pick(lrng);

            auto params = tree.parameters();
            Adam<float> opt(params,
                            {cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon});

            for (int epoch = 1; epoch <= cfg.epochs_per_stage; ++epoch) {
                auto erng = make_rng(cfg.seed, tag + "/epoch/" + std::to_string(epoch));
                std::shuffle(order.begin(), order.end(), erng);
                for (int start = 0; start < n; start += cfg.batch_size) {
                    const int B = std::min(cfg.batch_size, n - start);
                    std::vector<float> ty(static_cast<std::size_t>(B) * dim);
                    for (int b = 0; b < B; ++b)
                        std::copy(resid.data() + static_cast<std::size_t>(order[start + b]) * dim,
                                  resid.data() + static_cast<std::size_t>(order[start + b] + 1) * dim,
                                  ty.data() + static_cast<std::size_t>(b) * dim);
                    Tape<float> tape;
                    {
                        Tape<float>::Scope scope(tape);
                        std::vector<Tensor<float>> node_inputs;
                        node_inputs.reserve(static_cast<std::size_t>(n_div));
                        for (int i = 0; i < n_div; ++i)
                            node_inputs.push_back(detail_train::crop_batch(
                                train.images, est, order, start, B, lms[static_cast<std::size_t>(i)],
                                L, crop));
                        auto scores = batched_scores(tree, node_inputs);
                        std::vector<const float*> rows(static_cast<std::size_t>(n_div));
                        for (int i = 0; i < n_div; ++i) rows[i] = scores[i].data();
                        auto grad = regression_routing_gradient(tree.depth, rows, B,
                                                                tree.leaf_values, ty.data(), dim);
                        for (double g : grad.per_node)
                            if (!std::isfinite(g))
                                throw TrainDivergence("cascade gradient diverged at stage " +
                                                      std::to_string(t) + ", epoch " +
                                                      std::to_string(epoch));
                        for (int i = 0; i < n_div; ++i) {
                            scores[i].ensure_grad();
                            std::copy(grad.per_sample.begin() + static_cast<std::size_t>(i) * B,
                                      grad.per_sample.begin() + static_cast<std::size_t>(i + 1) * B,
                                      scores[i].grad());
                        }
                        tape.replay();
                    }
                    opt.step();
                    opt.zero_grad();
                }

                // closed-form leaf re-estimation over the full set
                const int chunk = 500;
                std::vector<float> flat(static_cast<std::size_t>(n_div) * n);
                for (int start = 0; start < n; start += chunk) {
                    const int B = std::min(chunk, n - start);
                    std::vector<Tensor<float>> node_inputs;
                    node_inputs.reserve(static_cast<std::size_t>(n_div));
                    for (int i = 0; i < n_div; ++i)
                        node_inputs.push_back(detail_train::crop_batch(
                            train.images, est, all, start, B, lms[static_cast<std::size_t>(i)], L,
                            crop));
                    auto scores = batched_scores(tree, node_inputs);
                    for (int i = 0; i < n_div; ++i)
                        std::copy(scores[i].data(), scores[i].data() + B,
                                  flat.data() + static_cast<std::size_t>(i) * n + start);
                }
                std::vector<const float*> rows(static_cast<std::size_t>(n_div));
                for (int i = 0; i < n_div; ++i)
                    rows[i] = flat.data() + static_cast<std::size_t>(i) * n;
                auto w = leaf_weights_from_scores<float>(tree.depth, rows, n);
                for (int j = 0; j < tree.n_leaves(); ++j) {
                    const float* wj = w.data() + static_cast<std::size_t>(j) * n;
                    std::vector<double> num(static_cast<std::size_t>(dim), 0.0);
                    double den = 0;
                    for (int b = 0; b < n; ++b) {
                        den += wj[b];
                        for (int k = 0; k < dim; ++k)
                            num[k] += static_cast<double>(wj[b]) *
                                      resid.data()[static_cast<std::size_t>(b) * dim + k];
                    }
                    if (den <= 0) continue;
                    for (int k = 0; k < dim; ++k)
                        tree.leaf_values[j][k] = static_cast<float>(num[k] / den);
                }
            }

            stage.members.push_back(std::move(tree));
            stage.node_landmark.push_back(std::move(lms));
        }

        auto delta = cascade_stage_delta(res.model, stage, train.images, est);
        for (std::size_t i = 0; i < est.size(); ++i) est[i] += delta[i];
        res.model.stages.push_back(std::move(stage));
        res.stage_errors.push_back(landmark_error(est, train.shapes, L));
        if (progress)
            (*progress) << "stage " << (t + 1) << " error " << res.stage_errors.back()
                        << std::endl;
    }
    return res;
}

// Normalized error of the full cascade on a landmark set.
inline double cascade_eval(const CascadeModel& model, const LandmarkSet& set,
                           const PruneConfig* prune = nullptr) {
    auto pred = cascade_predict(model, set.images, prune);
    return landmark_error(pred, set.shapes, model.num_landmarks);
}

}  // namespace dhm
