#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <numeric>

#include "gct/graph_context.hpp"
#include "testing.hpp"

using namespace gct;
using ad::Tensor;

namespace {

// Straightforward evaluation of the credible branch on the materialized edge
// tensor; oracle for the factored implementation.
Tensor cgc_direct(const net::KnnGraph& graph, const net::CgcParams& params) {
    const int d = graph.features.dim(1);
    Tensor edges = ad::reshape(net::edge_features(graph), {graph.n * graph.k, 2 * d});
    Tensor pre = ad::relu(params.pre(edges));
    Tensor pooled = ad::reduce_max(ad::reshape(pre, {graph.n, graph.k, d}), 1).values;
    return params.post(pooled);
}

Tensor sgc_direct(const net::KnnGraph& graph, const net::SgcParams& params) {
    const int d = graph.features.dim(1);
    const int groups = graph.k / params.p;
    Tensor edges = ad::reshape(net::edge_features(graph), {graph.n * groups, params.p * 2 * d});
    Tensor conv1 = ad::relu(params.conv1(edges));
    return params.conv2(ad::reshape(conv1, {graph.n, groups * d}));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i) {
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    }
    return worst;
}

}  // namespace

TEST_CASE("knn on collinear 1-d features") {
    Tensor f = Tensor::from_data({3, 1}, {0.0, 1.0, 10.0});
    net::KnnGraph g = net::build_knn_graph(f, 1);
    CHECK(g.neighbors == std::vector<int>{1, 0, 1});
}

TEST_CASE("knn matches a brute-force full sort") {
    Rng rng(41);
    const int n = 64, d = 8, k = 9;
    Tensor f = Tensor::randn({n, d}, rng, 1.0);
    net::KnnGraph g = net::build_knn_graph(f, k);
    for (int i = 0; i < n; ++i) {
        std::vector<std::pair<double, int>> dist;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            double sq = 0.0;
            for (int c = 0; c < d; ++c) {
                const double diff = f.at(i, c) - f.at(j, c);
                sq += diff * diff;
            }
            dist.emplace_back(sq, j);
        }
        std::sort(dist.begin(), dist.end());
        for (int j = 0; j < k; ++j) CHECK(g.neighbor(i, j) == dist[j].second);
        // Distances non-decreasing is implied by the oracle match.
    }
    CHECK_THROWS_AS(net::build_knn_graph(Tensor::zeros({3, 2}), 3), std::invalid_argument);
}

TEST_CASE("edge features concatenate the feature and its difference") {
    Rng rng(42);
    Tensor f = Tensor::randn({6, 4}, rng, 1.0);
    // Duplicate row 2 into row 5 so its nearest neighbor difference is zero.
    for (int c = 0; c < 4; ++c) f.data()[5 * 4 + c] = f.at(2, c);
    net::KnnGraph g = net::build_knn_graph(f, 2);
    Tensor edges = net::edge_features(g);
    REQUIRE(edges.shape() == ad::Shape{6, 2, 8});
    CHECK(g.neighbor(5, 0) == 2);
    for (int c = 0; c < 4; ++c) {
        CHECK(edges.data()[5 * 2 * 8 + c] == f.at(5, c));        // [f_i || ...]
        CHECK(edges.data()[5 * 2 * 8 + 4 + c] == 0.0);           // [... || f_i - f_j]
    }
}

TEST_CASE("credible branch equals the materialized edge-tensor path") {
    Rng rng(43);
    const int n = 20, d = 6, k = 4;
    Tensor f = Tensor::randn({n, d}, rng, 1.0, true);
    net::CgcParams params = net::make_cgc_params(d, rng);
    net::KnnGraph g = net::build_knn_graph(f, k);
    Tensor fast = net::credible_graph_context(g, params);
    Tensor direct = cgc_direct(g, params);
    REQUIRE(fast.shape() == ad::Shape{n, d});
    CHECK(max_abs_diff(fast, direct) < 1e-12);
}

TEST_CASE("structure branch equals the materialized edge-tensor path") {
    Rng rng(44);
    const int n = 20, d = 6, k = 4, p = 2;
    Tensor f = Tensor::randn({n, d}, rng, 1.0, true);
    net::SgcParams params = net::make_sgc_params(d, k, p, rng);
    net::KnnGraph g = net::build_knn_graph(f, k);
    Tensor fast = net::structure_graph_context(g, params);
    Tensor direct = sgc_direct(g, params);
    REQUIRE(fast.shape() == ad::Shape{n, d});
    CHECK(max_abs_diff(fast, direct) < 1e-12);
}

TEST_CASE("credible branch ignores neighbor order; structure branch does not") {
    Rng rng(45);
    const int n = 16, d = 6, k = 4, p = 2;
    Tensor f = Tensor::randn({n, d}, rng, 1.0);
    net::CgcParams cgc = net::make_cgc_params(d, rng);
    net::SgcParams sgc = net::make_sgc_params(d, k, p, rng);
    net::KnnGraph g = net::build_knn_graph(f, k);
    Tensor cgc_base = net::credible_graph_context(g, cgc);
    Tensor sgc_base = net::structure_graph_context(g, sgc);

    net::KnnGraph permuted = g;
    std::swap(permuted.neighbors[3 * k + 0], permuted.neighbors[3 * k + 1]);  // within group 0

    Tensor cgc_perm = net::credible_graph_context(permuted, cgc);
    CHECK(max_abs_diff(cgc_base, cgc_perm) < 1e-12);

    Tensor sgc_perm = net::structure_graph_context(permuted, sgc);
    double delta = 0.0;
    for (int c = 0; c < d; ++c) delta += std::abs(sgc_perm.at(3, c) - sgc_base.at(3, c));
    CHECK(delta > 1e-8);
}

TEST_CASE("k = 1 pooling is the identity over the single neighbor") {
    Rng rng(46);
    const int n = 8, d = 4;
    Tensor f = Tensor::randn({n, d}, rng, 1.0);
    net::CgcParams params = net::make_cgc_params(d, rng);
    net::KnnGraph g = net::build_knn_graph(f, 1);
    // With one neighbor the max-pool passes the single edge value through.
    Tensor out = net::credible_graph_context(g, params);
    Tensor w1 = ad::gather_rows(params.pre.weight, {0, 1, 2, 3});
    Tensor w2 = ad::gather_rows(params.pre.weight, {4, 5, 6, 7});
    Tensor self_term = ad::add(ad::matmul(f, ad::add(w1, w2)), params.pre.bias);
    Tensor nbr_term = ad::matmul(f, w2);
    Tensor single = ad::relu(ad::sub(self_term, ad::gather_rows(nbr_term, g.neighbors)));
    Tensor expect = params.post(single);
    CHECK(max_abs_diff(out, expect) < 1e-12);
}

TEST_CASE("p = k collapses the structure branch in one window") {
    Rng rng(47);
    const int n = 12, d = 4, k = 3;
    Tensor f = Tensor::randn({n, d}, rng, 1.0);
    net::SgcParams params = net::make_sgc_params(d, k, k, rng);
    net::KnnGraph g = net::build_knn_graph(f, k);
    Tensor out = net::structure_graph_context(g, params);
    REQUIRE(out.shape() == ad::Shape{n, d});
    CHECK(params.conv2.in_features() == d);  // width-1 second window

    net::SgcParams bad = params;
    bad.p = 2;  // 3 % 2 != 0
    CHECK_THROWS_AS(net::structure_graph_context(g, bad), std::invalid_argument);
}

TEST_CASE("row permutation permutes both branches identically") {
    Rng rng(48);
    const int n = 24, d = 6, k = 4, p = 2;
    Tensor f = Tensor::randn({n, d}, rng, 1.0);
    net::CgcParams cgc = net::make_cgc_params(d, rng);
    net::SgcParams sgc = net::make_sgc_params(d, k, p, rng);
    net::KnnGraph g = net::build_knn_graph(f, k);
    Tensor cgc_base = net::credible_graph_context(g, cgc);
    Tensor sgc_base = net::structure_graph_context(g, sgc);

    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<double> permuted(n * d);
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < d; ++c) permuted[i * d + c] = f.at(perm[i], c);
    }
    net::KnnGraph pg = net::build_knn_graph(Tensor::from_data({n, d}, permuted), k);
    Tensor cgc_perm = net::credible_graph_context(pg, cgc);
    Tensor sgc_perm = net::structure_graph_context(pg, sgc);
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < d; ++c) {
            CHECK(cgc_perm.at(i, c) == doctest::Approx(cgc_base.at(perm[i], c)).epsilon(1e-10));
            CHECK(sgc_perm.at(i, c) == doctest::Approx(sgc_base.at(perm[i], c)).epsilon(1e-10));
        }
    }
}

TEST_CASE("branch gradients pass finite differences") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        CAPTURE(seed);
        Rng rng(600 + seed);
        const int n = 14, d = 6, k = 4, p = 2;
        Tensor f = Tensor::randn({n, d}, rng, 1.0, true);
        net::CgcParams cgc = net::make_cgc_params(d, rng);
        net::SgcParams sgc = net::make_sgc_params(d, k, p, rng);

        // Neighbor selection is a non-differentiable index operation, so the
        // graph is frozen; gradients flow through gathered values only.
        net::KnnGraph g = net::build_knn_graph(f, k);
        auto loss = [&] {
            return ad::add(test::weighted_probe(net::credible_graph_context(g, cgc), 70 + seed),
                           test::weighted_probe(net::structure_graph_context(g, sgc), 80 + seed));
        };
        std::vector<std::pair<std::string, Tensor>> params = {
            {"features", f},
            {"cgc.pre.weight", cgc.pre.weight},
            {"cgc.pre.bias", cgc.pre.bias},
            {"cgc.post.weight", cgc.post.weight},
            {"sgc.conv1.weight", sgc.conv1.weight},
            {"sgc.conv2.weight", sgc.conv2.weight},
        };
        auto res = test::check_gradients(loss, params, 6, 700 + seed);
        CHECK(res.max_rel_err < 1e-4);
    }
}
