#include "gct/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace gct::net {

namespace {

ad::Tensor attention_core(const ad::Tensor& query_src, const ad::Tensor& kv_src,
                          const AttentionParams& params, std::vector<ad::Tensor>* head_weights) {
    const int d = query_src.dim(1);
    const int h = params.heads;
    if (d % h != 0) {
        throw std::invalid_argument("attention: d=" + std::to_string(d) +
                                    " not divisible by heads=" + std::to_string(h));
    }
    const int dh = d / h;
    ad::Tensor qn = ad::layer_normalize(query_src, 1);
    ad::Tensor kn = kv_src.impl() == query_src.impl() ? qn : ad::layer_normalize(kv_src, 1);
    ad::Tensor q = params.query(qn);
    ad::Tensor k = params.key(kn);
    ad::Tensor v = params.value(kn);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ad::Tensor heads_out;
    for (int head = 0; head < h; ++head) {
        ad::Tensor qh = ad::slice_cols(q, head * dh, dh);
        ad::Tensor kh = ad::slice_cols(k, head * dh, dh);
        ad::Tensor vh = ad::slice_cols(v, head * dh, dh);
        ad::Tensor scores = ad::mul_scalar(ad::matmul(qh, ad::transpose(kh)), scale);
        ad::Tensor weights = ad::softmax(scores, 1);
        if (head_weights) head_weights->push_back(weights);
        ad::Tensor attended = ad::matmul(weights, vh);
        heads_out = head == 0 ? attended : ad::concat_cols(heads_out, attended);
    }
    return ad::add(query_src, params.out(heads_out));
}

}  // namespace

ad::Tensor self_attention(const ad::Tensor& x, const AttentionParams& params,
                          std::vector<ad::Tensor>* head_weights) {
    return attention_core(x, x, params, head_weights);
}

ad::Tensor cross_attention(const ad::Tensor& query_src, const ad::Tensor& kv_src,
                           const AttentionParams& params, std::vector<ad::Tensor>* head_weights) {
    return attention_core(query_src, kv_src, params, head_weights);
}

ad::Tensor attentional_fusion(const ad::Tensor& a, const ad::Tensor& b,
                              const FusionParams& params) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("attentional_fusion: shapes differ, " +
                                    ad::shape_str(a.shape()) + " vs " + ad::shape_str(b.shape()));
    }
    ad::Tensor u = ad::add(a, b);
    ad::Tensor local = params.local_excite(ad::relu(params.local_squeeze(u)));
    ad::Tensor global_in = ad::reduce_mean(u, 0, true);  // (1, d)
    ad::Tensor global = params.global_excite(ad::relu(params.global_squeeze(global_in)));
    ad::Tensor gate = ad::sigmoid(ad::add(local, global));
    ad::Tensor inverse_gate = ad::add_scalar(ad::neg(gate), 1.0);
    return ad::add(ad::mul(gate, a), ad::mul(inverse_gate, b));
}

ClusterResult cluster(const ad::Tensor& x, const ClusterParams& params) {
    const int m = params.assign.out_features();
    if (x.dim(0) < m) {
        throw std::invalid_argument("cluster: n=" + std::to_string(x.dim(0)) +
                                    " rows for m=" + std::to_string(m) + " clusters");
    }
    ad::Tensor assignment = ad::softmax(params.assign(x), 1);  // (n, m), rows sum to 1
    ad::Tensor column_mass = ad::reduce_sum(assignment, 0, true);
    ad::Tensor normalized = ad::div(assignment, column_mass);
    ad::Tensor clustered = ad::matmul(ad::transpose(normalized), x);
    return {clustered, assignment};
}

ad::Tensor recover(const ad::Tensor& clustered, const ad::Tensor& assignment) {
    if (assignment.dim(1) != clustered.dim(0)) {
        throw std::invalid_argument("recover: assignment " + ad::shape_str(assignment.shape()) +
                                    " does not match clustered " +
                                    ad::shape_str(clustered.shape()));
    }
    return ad::matmul(assignment, clustered);
}

ad::Tensor expand(const ad::Tensor& sampled, const ExpandParams& params) {
    if (sampled.dim(0) < 1) throw std::invalid_argument("expand: empty sample");
    const int d = sampled.dim(1);
    ad::Tensor keys = params.key(sampled);  // (n_s, d)
    ad::Tensor scores = ad::mul_scalar(ad::matmul(params.slots, ad::transpose(keys)),
                                       1.0 / std::sqrt(static_cast<double>(d)));
    ad::Tensor assignment = ad::softmax(scores, 1);  // (m, n_s)
    return ad::matmul(assignment, sampled);
}

ad::Tensor transformer_guidance(const ad::Tensor& source, const ad::Tensor& target,
                                const TransformerParams& params) {
    if (source.shape() != target.shape()) {
        throw std::invalid_argument("transformer_guidance: shapes differ, " +
                                    ad::shape_str(source.shape()) + " vs " +
                                    ad::shape_str(target.shape()));
    }
    ad::Tensor attended = cross_attention(source, target, params.attention);
    ad::Tensor ff = params.ff_out(ad::relu(params.ff_in(ad::layer_normalize(attended, 1))));
    return ad::add(attended, ff);
}

ad::Tensor oafilter(const ad::Tensor& x, const OaFilterParams& params) {
    if (x.dim(0) < 2) throw std::invalid_argument("oafilter: needs at least 2 cluster rows");
    ad::Tensor normalized = ad::context_normalize(x, 0);
    // Mix along the cluster axis: transpose, (m x m) map, transpose back.
    ad::Tensor mixed = ad::transpose(ad::matmul(ad::transpose(normalized), params.mix));
    ad::Tensor residual = ad::add(x, mixed);
    return params.point_out(ad::relu(params.point_in(residual)));
}

AttentionParams make_attention_params(int d, int heads, Rng& rng) {
    AttentionParams p;
    p.query = make_linear(d, d, rng);
    p.key = make_linear(d, d, rng);
    p.value = make_linear(d, d, rng);
    p.out = make_linear(d, d, rng);
    p.heads = heads;
    return p;
}

FusionParams make_fusion_params(int d, int reduction, Rng& rng) {
    if (reduction < 1 || d % reduction != 0) {
        throw std::invalid_argument("fusion: d=" + std::to_string(d) +
                                    " not divisible by reduction=" + std::to_string(reduction));
    }
    FusionParams p;
    p.local_squeeze = make_linear(d, d / reduction, rng);
    p.local_excite = make_linear(d / reduction, d, rng);
    p.global_squeeze = make_linear(d, d / reduction, rng);
    p.global_excite = make_linear(d / reduction, d, rng);
    return p;
}

ClusterParams make_cluster_params(int d, int m, Rng& rng) {
    if (m < 2) throw std::invalid_argument("cluster: m must be >= 2");
    return {make_linear(d, m, rng)};
}

ExpandParams make_expand_params(int d, int m, Rng& rng) {
    ExpandParams p;
    p.slots = ad::Tensor::randn({m, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
    p.key = make_linear(d, d, rng);
    return p;
}

TransformerParams make_transformer_params(int d, int heads, Rng& rng) {
    TransformerParams p;
    p.attention = make_attention_params(d, heads, rng);
    p.ff_in = make_linear(d, 2 * d, rng);
    p.ff_out = make_linear(2 * d, d, rng);
    return p;
}

OaFilterParams make_oafilter_params(int d, int m, Rng& rng) {
    OaFilterParams p;
    p.mix = ad::Tensor::randn({m, m}, rng, std::sqrt(1.0 / m), true);
    p.point_in = make_linear(d, d, rng);
    p.point_out = make_linear(d, d, rng);
    return p;
}

void collect(ParamList& out, const std::string& prefix, const AttentionParams& p) {
    collect(out, prefix + ".query", p.query);
    collect(out, prefix + ".key", p.key);
    collect(out, prefix + ".value", p.value);
    collect(out, prefix + ".out", p.out);
}

void collect(ParamList& out, const std::string& prefix, const FusionParams& p) {
    collect(out, prefix + ".local_squeeze", p.local_squeeze);
    collect(out, prefix + ".local_excite", p.local_excite);
    collect(out, prefix + ".global_squeeze", p.global_squeeze);
    collect(out, prefix + ".global_excite", p.global_excite);
}

void collect(ParamList& out, const std::string& prefix, const ClusterParams& p) {
    collect(out, prefix + ".assign", p.assign);
}

void collect(ParamList& out, const std::string& prefix, const ExpandParams& p) {
    collect(out, prefix + ".slots", p.slots);
    collect(out, prefix + ".key", p.key);
}

void collect(ParamList& out, const std::string& prefix, const TransformerParams& p) {
    collect(out, prefix + ".attention", p.attention);
    collect(out, prefix + ".ff_in", p.ff_in);
    collect(out, prefix + ".ff_out", p.ff_out);
}

void collect(ParamList& out, const std::string& prefix, const OaFilterParams& p) {
    collect(out, prefix + ".mix", p.mix);
    collect(out, prefix + ".point_in", p.point_in);
    collect(out, prefix + ".point_out", p.point_out);
}

}  // namespace gct::net
