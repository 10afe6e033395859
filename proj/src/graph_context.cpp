#include "gct/graph_context.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace gct::net {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::vector<int> repeat_each(int n, int times) {
    std::vector<int> idx(static_cast<size_t>(n) * times);
    for (int i = 0; i < n; ++i) {
        std::fill(idx.begin() + static_cast<size_t>(i) * times,
                  idx.begin() + static_cast<size_t>(i + 1) * times, i);
    }
    return idx;
}

// Rows [start, start+count) of a weight matrix.
ad::Tensor weight_rows(const ad::Tensor& w, int start, int count) {
    std::vector<int> idx(count);
    std::iota(idx.begin(), idx.end(), start);
    return ad::gather_rows(w, idx);
}

}  // namespace

KnnGraph build_knn_graph(const ad::Tensor& features, int k) {
    if (features.rank() != 2) {
        throw std::invalid_argument("build_knn_graph: features must be (n,d), got " +
                                    ad::shape_str(features.shape()));
    }
    const int n = features.dim(0);
    const int d = features.dim(1);
    if (k < 1 || n <= k) {
        throw std::invalid_argument("build_knn_graph: need n > k >= 1, got n=" +
                                    std::to_string(n) + " k=" + std::to_string(k));
    }
    Eigen::Map<const RowMat> f(features.data().data(), n, d);
    const Eigen::VectorXd sq = f.rowwise().squaredNorm();
    RowMat gram = f * f.transpose();

    KnnGraph graph;
    graph.n = n;
    graph.k = k;
    graph.features = features;
    graph.neighbors.resize(static_cast<size_t>(n) * k);
    std::vector<std::pair<double, int>> cand(n - 1);
    for (int i = 0; i < n; ++i) {
        int c = 0;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            cand[c++] = {sq[i] + sq[j] - 2.0 * gram(i, j), j};
        }
        std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
        for (int j = 0; j < k; ++j) graph.neighbors[static_cast<size_t>(i) * k + j] = cand[j].second;
    }
    return graph;
}

ad::Tensor edge_features(const KnnGraph& graph) {
    const int d = graph.features.dim(1);
    const std::vector<int> self_idx = repeat_each(graph.n, graph.k);
    ad::Tensor self = ad::gather_rows(graph.features, self_idx);
    ad::Tensor nbr = ad::gather_rows(graph.features, graph.neighbors);
    ad::Tensor edges = ad::concat_cols(self, ad::sub(self, nbr));
    return ad::reshape(edges, {graph.n, graph.k, 2 * d});
}

ad::Tensor credible_graph_context(const KnnGraph& graph, const CgcParams& params) {
    const int d = graph.features.dim(1);
    if (params.pre.in_features() != 2 * d) {
        throw std::invalid_argument("credible_graph_context: pre map expects width " +
                                    std::to_string(params.pre.in_features()) + ", features give " +
                                    std::to_string(2 * d));
    }
    // pre([f_i || f_i - f_j]) = f_i (W1 + W2) - f_j W2 + b, evaluated with two
    // node-level products instead of one per edge.
    ad::Tensor w1 = weight_rows(params.pre.weight, 0, d);
    ad::Tensor w2 = weight_rows(params.pre.weight, d, d);
    ad::Tensor self_term = ad::add(ad::matmul(graph.features, ad::add(w1, w2)), params.pre.bias);
    ad::Tensor nbr_term = ad::matmul(graph.features, w2);

    const std::vector<int> self_idx = repeat_each(graph.n, graph.k);
    ad::Tensor per_edge = ad::relu(
        ad::sub(ad::gather_rows(self_term, self_idx), ad::gather_rows(nbr_term, graph.neighbors)));
    ad::Tensor pooled =
        ad::reduce_max(ad::reshape(per_edge, {graph.n, graph.k, d}), 1).values;
    return params.post(pooled);
}

ad::Tensor structure_graph_context(const KnnGraph& graph, const SgcParams& params) {
    const int d = graph.features.dim(1);
    const int k = graph.k;
    const int p = params.p;
    if (p < 1 || k % p != 0) {
        throw std::invalid_argument("structure_graph_context: k=" + std::to_string(k) +
                                    " is not divisible by p=" + std::to_string(p));
    }
    if (params.conv1.in_features() != p * 2 * d) {
        throw std::invalid_argument("structure_graph_context: conv1 expects width " +
                                    std::to_string(params.conv1.in_features()) + ", got " +
                                    std::to_string(p * 2 * d));
    }
    const int groups = k / p;

    // conv1 applies one (p * 2d -> d) kernel per window of p consecutive
    // neighbors. Same factoring as the credible branch, but with a distinct
    // neighbor map W_j2 per in-window position, which keeps the branch
    // sensitive to neighbor order.
    ad::Tensor wsum;
    std::vector<ad::Tensor> wj2(p);
    for (int j = 0; j < p; ++j) {
        ad::Tensor wj1 = weight_rows(params.conv1.weight, j * 2 * d, d);
        wj2[j] = weight_rows(params.conv1.weight, j * 2 * d + d, d);
        ad::Tensor s = ad::add(wj1, wj2[j]);
        wsum = j == 0 ? s : ad::add(wsum, s);
    }
    ad::Tensor grouped =
        ad::gather_rows(ad::add(ad::matmul(graph.features, wsum), params.conv1.bias),
                        repeat_each(graph.n, groups));
    for (int j = 0; j < p; ++j) {
        std::vector<int> idx(static_cast<size_t>(graph.n) * groups);
        for (int i = 0; i < graph.n; ++i) {
            for (int g = 0; g < groups; ++g) {
                idx[static_cast<size_t>(i) * groups + g] = graph.neighbor(i, g * p + j);
            }
        }
        grouped = ad::sub(grouped,
                          ad::gather_rows(ad::matmul(graph.features, wj2[j]), idx));
    }
    grouped = ad::relu(grouped);
    // conv2 covers all k/p groups in one window.
    return params.conv2(ad::reshape(grouped, {graph.n, groups * d}));
}

CgcParams make_cgc_params(int d, Rng& rng) {
    return {make_linear(2 * d, d, rng), make_linear(d, d, rng)};
}

SgcParams make_sgc_params(int d, int k, int p, Rng& rng) {
    SgcParams params;
    params.conv1 = make_linear(p * 2 * d, d, rng);
    params.conv2 = make_linear((k / p) * d, d, rng);
    params.p = p;
    return params;
}

void collect(ParamList& out, const std::string& prefix, const CgcParams& p) {
    collect(out, prefix + ".pre", p.pre);
    collect(out, prefix + ".post", p.post);
}

void collect(ParamList& out, const std::string& prefix, const SgcParams& p) {
    collect(out, prefix + ".conv1", p.conv1);
    collect(out, prefix + ".conv2", p.conv2);
}

}  // namespace gct::net
