#pragma once

#include <vector>

#include "gct/layers.hpp"
#include "gct/tensor.hpp"

namespace gct::net {

/// KNN graph over the current feature map. Neighbor lists exclude the query
/// node, are sorted ascending by Euclidean feature distance, and break ties
/// by smaller index.
struct KnnGraph {
    int n = 0;
    int k = 0;
    std::vector<int> neighbors;  // n*k row-major
    ad::Tensor features;         // (n,d) map the graph was built from

    int neighbor(int i, int j) const { return neighbors[static_cast<size_t>(i) * k + j]; }
};

KnnGraph build_knn_graph(const ad::Tensor& features, int k);

/// Edge tensor (n, k, 2d) with edge j of node i holding [f_i || f_i - f_j].
ad::Tensor edge_features(const KnnGraph& graph);

/// Credible branch: shared per-edge map, max-pool over neighbors, output map.
struct CgcParams {
    Linear pre;   // 2d -> d
    Linear post;  // d -> d
};
ad::Tensor credible_graph_context(const KnnGraph& graph, const CgcParams& params);

/// Structure branch: two grouped maps over the distance-ordered neighbor
/// axis, width p then width k/p.
struct SgcParams {
    Linear conv1;  // p*2d -> d
    Linear conv2;  // (k/p)*d -> d
    int p = 3;
};
ad::Tensor structure_graph_context(const KnnGraph& graph, const SgcParams& params);

CgcParams make_cgc_params(int d, Rng& rng);
SgcParams make_sgc_params(int d, int k, int p, Rng& rng);
void collect(ParamList& out, const std::string& prefix, const CgcParams& p);
void collect(ParamList& out, const std::string& prefix, const SgcParams& p);

}  // namespace gct::net
