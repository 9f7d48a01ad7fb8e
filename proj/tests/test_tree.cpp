#include "doctest.h"

#include <cmath>

#include "dhm/tree.hpp"
#include "helpers.hpp"

using namespace dhm;
using namespace dhm::testing;

namespace {

ArchitectureSpec tiny_gate_arch() {
    ArchitectureSpec a;
    a.gate = "flatten|linear:1|sigmoid";
    return a;
}

ArchitectureSpec tiny_conv_arch() {
    ArchitectureSpec a;
    a.gate = "conv:2,3,3,1,0|relu|flatten|linear:1|sigmoid";
    return a;
}

// Independent of route(): evaluate every gate directly, then multiply the
// recommendation scores along each root-to-leaf path.
template <class T>
std::vector<T> brute_force_weights(const TreeTopology<T>& tree, const Tensor<T>& input) {
    const int n_div = tree.n_div();
    std::vector<T> s(n_div);
    for (int i = 0; i < n_div; ++i) {
        std::vector<int> b{1};
        b.insert(b.end(), tree.input_shape.begin(), tree.input_shape.end());
        s[i] = tree.gates[i].forward(input.reshaped(b)).data()[0];
    }
    std::vector<T> w(tree.n_leaves());
    for (int j = 0; j < tree.n_leaves(); ++j) {
        T prod = T(1);
        int h = n_div + j;
        while (h > 0) {
            const int p = (h - 1) / 2;
            prod *= (h == 2 * p + 1) ? s[p] : T(1) - s[p];
            h = p;
        }
        w[j] = prod;
    }
    return w;
}

}  // namespace

TEST_CASE("build_tree node counts") {
    auto t1 = build_tree<float>(1, TreeMode::separated, tiny_gate_arch(), {1, 2, 2}, 3, 0);
    CHECK(t1.n_div() == 1);
    CHECK(t1.n_leaves() == 2);
    CHECK(t1.gates.size() == 1);

    auto t7 = build_tree<float>(7, TreeMode::separated, tiny_gate_arch(), {1, 2, 2}, 10, 0);
    CHECK(t7.n_div() == 127);
    CHECK(t7.n_leaves() == 128);

    CHECK_THROWS_AS(build_tree<float>(0, TreeMode::separated, tiny_gate_arch(), {1, 2, 2}, 3, 0),
                    ConfigError);
    ArchitectureSpec bad;
    bad.gate = "flatten|linear:2";  // two outputs, no sigmoid score
    CHECK_THROWS_AS(build_tree<float>(2, TreeMode::separated, bad, {1, 2, 2}, 3, 0), ConfigError);
}

TEST_CASE("same seed gives identical initial parameters") {
    auto a = build_tree<float>(3, TreeMode::separated, tiny_conv_arch(), {1, 5, 5}, 4, 42);
    auto b = build_tree<float>(3, TreeMode::separated, tiny_conv_arch(), {1, 5, 5}, 4, 42);
    auto pa = a.parameters(), pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value.values() == pb[i]->value.values());

    auto c = build_tree<float>(3, TreeMode::separated, tiny_conv_arch(), {1, 5, 5}, 4, 43);
    CHECK(c.parameters()[0]->value.values() != pa[0]->value.values());
}

TEST_CASE("route: forced 0.5 scores give uniform leaf weights") {
    auto tree = build_tree<double>(2, TreeMode::separated, tiny_gate_arch(), {1, 3, 3}, 2, 1);
    for (auto* p : tree.parameters())
        std::fill(p->value.values().begin(), p->value.values().end(), 0.0);
    auto rng = test_rng();
    auto x = random_tensor<double>({1, 1, 3, 3}, rng);
    auto rs = route(tree, x);
    for (auto w : rs.weights) CHECK(w == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("route matches brute-force path products (depth <= 4, 1e-10)") {
    auto rng = test_rng(2);
    for (int depth = 1; depth <= 4; ++depth) {
        auto tree = build_tree<double>(depth, TreeMode::separated, tiny_conv_arch(), {1, 5, 5},
                                       3, 100 + depth);
        auto x = random_tensor<double>({1, 1, 5, 5}, rng);
        auto rs = route(tree, x);
        auto oracle = brute_force_weights(tree, x);
        double sum = 0;
        for (int j = 0; j < tree.n_leaves(); ++j) {
            CHECK(std::abs(rs.weights[j] - oracle[j]) <= 1e-10);
            CHECK(rs.weights[j] >= 0.0);
            sum += rs.weights[j];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("predict: convexity and midpoint") {
    auto tree = build_tree<double>(3, TreeMode::separated, tiny_gate_arch(), {1, 3, 3}, 4, 7);
    auto rng = test_rng(3);

    // identical leaves -> prediction equals that vector regardless of routing
    std::vector<double> v{0.1, 0.2, 0.3, 0.4};
    for (auto& lf : tree.leaf_values) lf = v;
    auto x = random_tensor<double>({1, 1, 3, 3}, rng);
    auto p = predict(tree, route(tree, x));
    for (int k = 0; k < 4; ++k) CHECK(p[k] == doctest::Approx(v[k]).epsilon(1e-12));

    // depth 1, s = 0.5 -> midpoint of the two leaves
    auto t1 = build_tree<double>(1, TreeMode::separated, tiny_gate_arch(), {1, 3, 3}, 2, 9);
    for (auto* par : t1.parameters())
        std::fill(par->value.values().begin(), par->value.values().end(), 0.0);
    t1.leaf_values[0] = {1.0, 0.0};
    t1.leaf_values[1] = {0.0, 1.0};
    auto pm = predict(t1, route(t1, x));
    CHECK(pm[0] == doctest::Approx(0.5));
    CHECK(pm[1] == doctest::Approx(0.5));

    // componentwise envelope of leaf predictors
    auto t3 = build_tree<double>(3, TreeMode::separated, tiny_conv_arch(), {1, 5, 5}, 3, 11);
    auto rng2 = test_rng(4);
    for (auto& lf : t3.leaf_values)
        for (auto& e : lf) e = std::uniform_real_distribution<double>(-2, 2)(rng2);
    auto x2 = random_tensor<double>({1, 1, 5, 5}, rng2);
    auto pr = predict(t3, route(t3, x2));
    for (int k = 0; k < 3; ++k) {
        double lo = 1e9, hi = -1e9;
        for (const auto& lf : t3.leaf_values) {
            lo = std::min(lo, lf[k]);
            hi = std::max(hi, lf[k]);
        }
        CHECK(pr[k] >= lo - 1e-12);
        CHECK(pr[k] <= hi + 1e-12);
    }
}

TEST_CASE("classification leaves on the simplex stay on the simplex") {
    auto tree = build_tree<double>(2, TreeMode::separated, tiny_gate_arch(), {1, 3, 3}, 5, 21);
    auto rng = test_rng(6);
    auto x = random_tensor<double>({1, 1, 3, 3}, rng);
    auto p = predict(tree, route(tree, x));
    double sum = 0;
    for (auto v : p) {
        CHECK(v >= 0.0);
        sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("connected mode routes and normalizes") {
    ArchitectureSpec a;
    a.root_map = "conv:2,3,3,2,0|relu";
    a.node_map = "conv:2,3,3,1,1|relu";
    a.gate_head = "flatten|linear:1|sigmoid";
    auto tree = build_tree<double>(3, TreeMode::connected, a, {1, 9, 9}, 3, 5);
    CHECK(tree.maps.size() == 7);
    auto rng = test_rng(8);
    auto x = random_tensor<double>({1, 1, 9, 9}, rng);
    auto rs = route(tree, x);
    double sum = 0;
    for (auto w : rs.weights) sum += w;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("ndf mode: predictions depend only on the trunk output") {
    ArchitectureSpec a;
    a.trunk = "flatten|linear:8|relu|linear:0|sigmoid";
    auto tree = build_tree<double>(3, TreeMode::ndf, a, {1, 4, 4}, 3, 9);
    CHECK(tree.trunk.output_shape() == std::vector<int>{7});

    // zero the trunk so every input maps to the same trunk output
    for (auto* p : tree.parameters())
        std::fill(p->value.values().begin(), p->value.values().end(), 0.0);
    auto rng = test_rng(10);
    for (auto& lf : tree.leaf_values)
        for (auto& e : lf) e = std::uniform_real_distribution<double>(0, 1)(rng);
    auto x1 = random_tensor<double>({1, 1, 4, 4}, rng);
    auto x2 = random_tensor<double>({1, 1, 4, 4}, rng);
    auto p1 = predict(tree, route(tree, x1));
    auto p2 = predict(tree, route(tree, x2));
    CHECK(p1 == p2);
}

TEST_CASE("batched_scores agrees with per-sample route") {
    for (auto mode : {TreeMode::separated, TreeMode::ndf}) {
        ArchitectureSpec a = tiny_conv_arch();
        a.trunk = "conv:2,3,3,1,0|relu|flatten|linear:0|sigmoid";
        auto tree = build_tree<double>(3, mode, a, {1, 5, 5}, 3, 13);
        auto rng = test_rng(11);
        const int B = 4;
        auto batch = random_tensor<double>({B, 1, 5, 5}, rng);
        auto scores = batched_scores(tree, {batch});
        REQUIRE(scores.size() == 7);
        for (int b = 0; b < B; ++b) {
            std::vector<double> sample(batch.data() + b * 25, batch.data() + (b + 1) * 25);
            auto x = Tensor<double>::from({1, 1, 5, 5}, sample);
            auto rs = route(tree, x);
            for (int i = 0; i < 7; ++i)
                CHECK(scores[i].data()[b] == doctest::Approx(rs.scores[i]).epsilon(1e-12));
        }
        // leaf weights from batched scores match route weights
        std::vector<const double*> sp;
        for (auto& s : scores) sp.push_back(s.data());
        auto w = leaf_weights_from_scores<double>(3, sp, B);
        for (int b = 0; b < B; ++b) {
            std::vector<double> sample(batch.data() + b * 25, batch.data() + (b + 1) * 25);
            auto rs = route(tree, Tensor<double>::from({1, 1, 5, 5}, sample));
            for (int j = 0; j < 8; ++j)
                CHECK(w[j * B + b] == doctest::Approx(rs.weights[j]).epsilon(1e-10));
        }
    }
}
