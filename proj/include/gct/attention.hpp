#pragma once

#include <vector>

#include "gct/layers.hpp"
#include "gct/tensor.hpp"

namespace gct::net {

/// Multi-head scaled dot-product attention with pre-normalization and a
/// residual connection on the query source. No positional encoding: the
/// blocks operate on unordered sets.
struct AttentionParams {
    Linear query, key, value, out;
    int heads = 4;
};

ad::Tensor self_attention(const ad::Tensor& x, const AttentionParams& params,
                          std::vector<ad::Tensor>* head_weights = nullptr);
ad::Tensor cross_attention(const ad::Tensor& query_src, const ad::Tensor& kv_src,
                           const AttentionParams& params,
                           std::vector<ad::Tensor>* head_weights = nullptr);

/// Channel-attention fusion: gate = sigmoid(local(A+B) + global(mean(A+B)));
/// output = gate * A + (1 - gate) * B.
struct FusionParams {
    Linear local_squeeze, local_excite;    // d -> d/r -> d
    Linear global_squeeze, global_excite;  // d -> d/r -> d
};
ad::Tensor attentional_fusion(const ad::Tensor& a, const ad::Tensor& b,
                              const FusionParams& params);

/// Soft pooling to m cluster tokens. The assignment S is row-stochastic; the
/// pooled tokens are convex combinations of input rows.
struct ClusterParams {
    Linear assign;  // d -> m
};
struct ClusterResult {
    ad::Tensor clustered;   // (m, d)
    ad::Tensor assignment;  // (n, m)
};
ClusterResult cluster(const ad::Tensor& x, const ClusterParams& params);

/// Soft unpooling with the assignment of the paired cluster call.
ad::Tensor recover(const ad::Tensor& clustered, const ad::Tensor& assignment);

/// Learned unpooling of a sampled subset onto a fixed number of output
/// tokens, so the guiding source matches the guiding target's token count.
struct ExpandParams {
    ad::Tensor slots;  // (m, d) learned slot queries
    Linear key;        // d -> d
};
ad::Tensor expand(const ad::Tensor& sampled, const ExpandParams& params);

/// Vanilla transformer block: cross-attention then feed-forward, each with
/// residual and normalization.
struct TransformerParams {
    AttentionParams attention;
    Linear ff_in, ff_out;  // d -> 2d -> d
};
ad::Tensor transformer_guidance(const ad::Tensor& source, const ad::Tensor& target,
                                const TransformerParams& params);

/// Cluster-axis spatial filter: normalization across clusters, a learned
/// mixing map along the cluster axis added residually, then a pointwise MLP.
struct OaFilterParams {
    ad::Tensor mix;  // (m, m)
    Linear point_in, point_out;
};
ad::Tensor oafilter(const ad::Tensor& x, const OaFilterParams& params);

AttentionParams make_attention_params(int d, int heads, Rng& rng);
FusionParams make_fusion_params(int d, int reduction, Rng& rng);
ClusterParams make_cluster_params(int d, int m, Rng& rng);
ExpandParams make_expand_params(int d, int m, Rng& rng);
TransformerParams make_transformer_params(int d, int heads, Rng& rng);
OaFilterParams make_oafilter_params(int d, int m, Rng& rng);

void collect(ParamList& out, const std::string& prefix, const AttentionParams& p);
void collect(ParamList& out, const std::string& prefix, const FusionParams& p);
void collect(ParamList& out, const std::string& prefix, const ClusterParams& p);
void collect(ParamList& out, const std::string& prefix, const ExpandParams& p);
void collect(ParamList& out, const std::string& prefix, const TransformerParams& p);
void collect(ParamList& out, const std::string& prefix, const OaFilterParams& p);

}  // namespace gct::net
