#include "gct/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace gct::net {

namespace {

std::vector<int> order_by_score_desc(const std::vector<double>& scores) {
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;  // ties broken by lower index
    });
    return order;
}

ResnetBlockParams make_resnet_params(int d, Rng& rng) {
    return {make_linear(d, d, rng), make_linear(d, d, rng)};
}

void collect(ParamList& out, const std::string& prefix, const ResnetBlockParams& p) {
    collect(out, prefix + ".first", p.first);
    collect(out, prefix + ".second", p.second);
}

GcetParams make_gcet_params(const NetConfig& cfg, int m, Rng& rng) {
    GcetParams p;
    p.cgc = make_cgc_params(cfg.d, rng);
    p.sgc = make_sgc_params(cfg.d, cfg.k, cfg.p, rng);
    p.cluster_cgc = make_cluster_params(cfg.d, m, rng);
    p.cluster_sgc = make_cluster_params(cfg.d, m, rng);
    p.sa_cgc = make_attention_params(cfg.d, cfg.heads, rng);
    p.sa_sgc = make_attention_params(cfg.d, cfg.heads, rng);
    p.ca_cgc = make_attention_params(cfg.d, cfg.heads, rng);
    p.ca_sgc = make_attention_params(cfg.d, cfg.heads, rng);
    p.fuse_cgc = make_fusion_params(cfg.d, cfg.reduction, rng);
    p.fuse_sgc = make_fusion_params(cfg.d, cfg.reduction, rng);
    p.fuse_out = make_fusion_params(cfg.d, cfg.reduction, rng);
    p.k = cfg.k;
    return p;
}

GcgtParams make_gcgt_params(const NetConfig& cfg, int m, Rng& rng) {
    GcgtParams p;
    p.clu = make_cluster_params(cfg.d, m, rng);
    p.exp = make_expand_params(cfg.d, m, rng);
    p.tf = make_transformer_params(cfg.d, cfg.heads, rng);
    if (cfg.gcgt == GcgtMode::kFull) {
        p.oa = make_oafilter_params(cfg.d, m, rng);
        p.fuse_guided = make_fusion_params(cfg.d, cfg.reduction, rng);
    }
    p.fuse_out = make_fusion_params(cfg.d, cfg.reduction, rng);
    return p;
}

void collect(ParamList& out, const std::string& prefix, const GcetParams& p) {
    collect(out, prefix + ".cgc", p.cgc);
    collect(out, prefix + ".sgc", p.sgc);
    collect(out, prefix + ".cluster_cgc", p.cluster_cgc);
    collect(out, prefix + ".cluster_sgc", p.cluster_sgc);
    collect(out, prefix + ".sa_cgc", p.sa_cgc);
    collect(out, prefix + ".sa_sgc", p.sa_sgc);
    collect(out, prefix + ".ca_cgc", p.ca_cgc);
    collect(out, prefix + ".ca_sgc", p.ca_sgc);
    collect(out, prefix + ".fuse_cgc", p.fuse_cgc);
    collect(out, prefix + ".fuse_sgc", p.fuse_sgc);
    collect(out, prefix + ".fuse_out", p.fuse_out);
}

void collect(ParamList& out, const std::string& prefix, const GcgtParams& p) {
    collect(out, prefix + ".cluster", p.clu);
    collect(out, prefix + ".expand", p.exp);
    collect(out, prefix + ".transformer", p.tf);
    if (p.oa) collect(out, prefix + ".oafilter", *p.oa);
    if (p.fuse_guided) collect(out, prefix + ".fuse_guided", *p.fuse_guided);
    collect(out, prefix + ".fuse_out", p.fuse_out);
}

void collect(ParamList& out, const std::string& prefix, const PruningModuleParams& p) {
    collect(out, prefix + ".embed", p.embed);
    if (p.fuse_in) collect(out, prefix + ".fuse_in", *p.fuse_in);
    for (size_t i = 0; i < p.pre.size(); ++i) {
        collect(out, prefix + ".pre" + std::to_string(i), p.pre[i]);
    }
    if (p.gcet) collect(out, prefix + ".gcet", *p.gcet);
    for (size_t i = 0; i < p.post.size(); ++i) {
        collect(out, prefix + ".post" + std::to_string(i), p.post[i]);
    }
    if (p.gcgt) collect(out, prefix + ".gcgt", *p.gcgt);
    collect(out, prefix + ".score_head", p.score_head);
}

}  // namespace

void NetConfig::validate() const {
    if (d < 4) throw std::invalid_argument("NetConfig: d must be >= 4");
    if (k < 1) throw std::invalid_argument("NetConfig: k must be >= 1");
    if (p < 1 || k % p != 0) throw std::invalid_argument("NetConfig: p must divide k");
    if (d % heads != 0) throw std::invalid_argument("NetConfig: heads must divide d");
    if (d % reduction != 0) throw std::invalid_argument("NetConfig: reduction must divide d");
    if (sample_rate <= 0.0 || sample_rate > 1.0) {
        throw std::invalid_argument("NetConfig: sample_rate must be in (0,1]");
    }
    if (prune_rate <= 0.0 || prune_rate >= 1.0) {
        throw std::invalid_argument("NetConfig: prune_rate must be in (0,1)");
    }
    if (n_modules < 1) throw std::invalid_argument("NetConfig: n_modules must be >= 1");
    if (cluster_count < 2) throw std::invalid_argument("NetConfig: cluster_count must be >= 2");
    if (label_threshold <= 0.0 || verify_threshold < 0.0) {
        throw std::invalid_argument("NetConfig: thresholds must be positive");
    }
    if (module_clusters(n_modules - 1) < 2) {
        throw std::invalid_argument("NetConfig: expected_n too small for the module count");
    }
}

int NetConfig::module_input(int i) const {
    double n = expected_n;
    for (int j = 0; j < i; ++j) n = std::floor(n * prune_rate);
    return static_cast<int>(n);
}

int NetConfig::module_clusters(int i) const {
    return std::min(cluster_count, module_input(i) / 2);
}

ad::Tensor context_normalization(const ad::Tensor& x) {
    if (x.rank() != 2 || x.dim(0) < 2) {
        throw std::invalid_argument("context_normalization: needs (n>=2, d) input, got " +
                                    ad::shape_str(x.shape()));
    }
    return ad::context_normalize(x, 0);
}

ad::Tensor resnet_block(const ad::Tensor& x, const ResnetBlockParams& params) {
    ad::Tensor h = ad::relu(ad::layer_normalize(context_normalization(params.first(x)), 1));
    h = ad::relu(ad::layer_normalize(context_normalization(params.second(h)), 1));
    return ad::add(x, h);
}

ad::Tensor gcet_forward(const ad::Tensor& features, const GcetParams& params,
                        bool bypass_attention) {
    KnnGraph graph = build_knn_graph(features, params.k);
    ad::Tensor credible = credible_graph_context(graph, params.cgc);
    ad::Tensor structure = structure_graph_context(graph, params.sgc);

    ClusterResult cc = cluster(credible, params.cluster_cgc);
    ClusterResult sc = cluster(structure, params.cluster_sgc);

    ad::Tensor credible_enh = cc.clustered;
    ad::Tensor structure_enh = sc.clustered;
    if (!bypass_attention) {
        // Each branch: self-attention on itself, cross-attention with the
        // other branch as query source, fused.
        credible_enh = attentional_fusion(self_attention(cc.clustered, params.sa_cgc),
                                          cross_attention(sc.clustered, cc.clustered, params.ca_cgc),
                                          params.fuse_cgc);
        structure_enh = attentional_fusion(self_attention(sc.clustered, params.sa_sgc),
                                           cross_attention(cc.clustered, sc.clustered, params.ca_sgc),
                                           params.fuse_sgc);
    }
    ad::Tensor credible_rec = recover(credible_enh, cc.assignment);
    ad::Tensor structure_rec = recover(structure_enh, sc.assignment);
    return attentional_fusion(credible_rec, structure_rec, params.fuse_out);
}

GcgtResult gcgt_forward(const ad::Tensor& gc, const Linear& score_head, const GcgtParams& params,
                        double sample_rate, GcgtMode mode) {
    if (mode == GcgtMode::kOff) {
        throw std::invalid_argument("gcgt_forward called with mode off");
    }
    const int n = gc.dim(0);
    ad::Tensor scores = score_head(gc);  // ST

    int n_sampled = static_cast<int>(std::floor(sample_rate * n));
    if (n_sampled == 0) {
        std::fprintf(stderr, "gcgt_forward: floor(sr*n) = 0 at n=%d, clamping sample to 1\n", n);
        n_sampled = 1;
    }
    std::vector<int> order = order_by_score_desc(scores.data());
    order.resize(n_sampled);

    ad::Tensor guiding_source = expand(ad::gather_rows(gc, order), params.exp);
    ClusterResult target = cluster(gc, params.clu);
    ad::Tensor guided =
        ad::add(transformer_guidance(guiding_source, target.clustered, params.tf), guiding_source);
    ad::Tensor merged = guided;
    if (mode == GcgtMode::kFull) {
        merged = attentional_fusion(guided, oafilter(target.clustered, *params.oa),
                                    *params.fuse_guided);
    }
    ad::Tensor out = attentional_fusion(recover(merged, target.assignment), gc, params.fuse_out);
    return {out, scores, std::move(order)};
}

ModuleResult pruning_module(const ad::Tensor& coords, const ad::Tensor* carried,
                            const PruningModuleParams& params, const NetConfig& config) {
    const int n = coords.dim(0);
    if (n < 2 * (config.k + 1)) {
        throw std::invalid_argument("pruning_module: n=" + std::to_string(n) +
                                    " is too small for k=" + std::to_string(config.k));
    }
    ad::Tensor h = params.embed(coords);
    if (carried) {
        if (!params.fuse_in) {
            throw std::invalid_argument("pruning_module: carried features without a fuse_in map");
        }
        h = (*params.fuse_in)(ad::concat_cols(h, *carried));
    }
    for (const auto& block : params.pre) h = resnet_block(h, block);
    if (params.gcet) h = gcet_forward(h, *params.gcet);
    for (const auto& block : params.post) h = resnet_block(h, block);

    ModuleResult result;
    if (params.gcgt) {
        GcgtResult g = gcgt_forward(h, params.score_head, *params.gcgt, config.sample_rate,
                                    config.gcgt);
        h = g.features;
        result.sampled = std::move(g.sampled);
    }
    result.logits = params.score_head(h);

    const int keep = static_cast<int>(std::floor(n * config.prune_rate));
    std::vector<int> order = order_by_score_desc(result.logits.data());
    order.resize(keep);
    std::sort(order.begin(), order.end());
    result.kept = std::move(order);
    result.kept_features = ad::gather_rows(h, result.kept);
    return result;
}

ParamList NetParams::parameters() const {
    ParamList out;
    for (size_t i = 0; i < modules.size(); ++i) {
        collect(out, "module" + std::to_string(i), modules[i]);
    }
    collect(out, "weight_head", weight_head);
    return out;
}

std::vector<ad::Tensor> NetParams::named_tensors() const {
    std::vector<ad::Tensor> out;
    for (auto& [name, tensor] : parameters()) {
        ad::Tensor t = tensor;
        t.set_name(name);
        out.push_back(t);
    }
    return out;
}

NetParams NetParams::init(const NetConfig& config, uint64_t seed) {
    config.validate();
    Rng rng(seed);
    NetParams params;
    for (int i = 0; i < config.n_modules; ++i) {
        PruningModuleParams m;
        m.embed = make_linear(4, config.d, rng);
        if (i > 0) m.fuse_in = make_linear(2 * config.d, config.d, rng);
        for (auto& block : m.pre) block = make_resnet_params(config.d, rng);
        for (auto& block : m.post) block = make_resnet_params(config.d, rng);
        m.clusters = config.module_clusters(i);
        if (config.use_gcet) m.gcet = make_gcet_params(config, m.clusters, rng);
        if (config.gcgt != GcgtMode::kOff) m.gcgt = make_gcgt_params(config, m.clusters, rng);
        m.score_head = make_linear(config.d, 1, rng);
        params.modules.push_back(std::move(m));
    }
    params.weight_head = make_linear(config.d, 1, rng);
    return params;
}

ad::Tensor coords_tensor(const geo::CorrespondenceSet& corrs) {
    return ad::Tensor::from_data({corrs.size(), 4}, corrs.coords);
}

namespace {

geo::CorrespondenceSet subset(const geo::CorrespondenceSet& corrs, const std::vector<int>& idx) {
    geo::CorrespondenceSet out;
    out.coords.reserve(idx.size() * 4);
    for (int i : idx) {
        const double* q = corrs.row(i);
        out.coords.insert(out.coords.end(), q, q + 4);
    }
    if (corrs.has_labels()) {
        out.labels.reserve(idx.size());
        for (int i : idx) out.labels.push_back(corrs.labels[i]);
    }
    out.pose = corrs.pose;
    return out;
}

}  // namespace

ad::Tensor inlier_weight_head(const ad::Tensor& features, const Linear& head) {
    const int n = features.dim(0);
    ad::Tensor raw = ad::relu(ad::tanh_act(head(features)));  // (n, 1)
    int positive = 0;
    for (double v : raw.data()) {
        if (v > 0.0) ++positive;
    }
    if (positive < 8) {
        return ad::Tensor::full({n, 1}, 1.0 / n);
    }
    return ad::div(raw, ad::sum_all(raw));
}

PipelineOutput forward_pipeline(const geo::CorrespondenceSet& corrs, const NetParams& params,
                                const NetConfig& config) {
    const int n = corrs.size();
    if (n < 4 * (config.k + 1)) {
        throw std::invalid_argument("forward_pipeline: need at least " +
                                    std::to_string(4 * (config.k + 1)) + " correspondences");
    }
    if (params.modules.size() != 2) {
        throw std::invalid_argument("forward_pipeline: expected two pruning modules");
    }
    ad::Tensor coords = coords_tensor(corrs);

    ModuleResult first = pruning_module(coords, nullptr, params.modules[0], config);
    ad::Tensor coords1 = ad::gather_rows(coords, first.kept);
    ModuleResult second = pruning_module(coords1, &first.kept_features, params.modules[1], config);

    PipelineOutput out;
    out.stage1_indices = first.kept;
    out.stage2_indices.reserve(second.kept.size());
    for (int local : second.kept) out.stage2_indices.push_back(first.kept[local]);
    out.sampled1 = first.sampled;
    for (int local : second.sampled) out.sampled2.push_back(first.kept[local]);
    out.q1 = subset(corrs, out.stage1_indices);
    out.q2 = subset(corrs, out.stage2_indices);
    out.logits1 = ad::gather_rows(first.logits, first.kept);
    out.logits2 = ad::gather_rows(second.logits, second.kept);

    out.weights = inlier_weight_head(second.kept_features, params.weight_head);
    ad::Tensor coords2 = ad::gather_rows(coords1, second.kept);
    out.e_hat = geo::weighted_eight_point_diff(coords2, out.weights);

    geo::VerificationResult ver =
        geo::full_size_verification(out.essential(), corrs, config.verify_threshold);
    out.epipolar_distances = std::move(ver.distances);
    out.final_mask = std::move(ver.inlier_mask);
    return out;
}

geo::EssentialMatrix PipelineOutput::essential() const {
    geo::EssentialMatrix e;
    const auto& d = e_hat.data();
    e.m << d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7], d[8];
    return e;
}

geo::EssentialMatrix PipelineOutput::essential_projected() const {
    return geo::project_to_essential(essential());
}

ad::Tensor classification_loss(const std::vector<StageSupervision>& stages) {
    if (stages.empty()) throw std::invalid_argument("classification_loss: no stages");
    ad::Tensor total;
    for (const auto& stage : stages) {
        const size_t n = stage.logits.numel();
        if (stage.labels.size() != n || stage.eta.size() != n) {
            throw std::invalid_argument("classification_loss: stage has " + std::to_string(n) +
                                        " logits, " + std::to_string(stage.labels.size()) +
                                        " labels, " + std::to_string(stage.eta.size()) + " eta");
        }
        double positives = 0;
        for (double y : stage.labels) positives += y;
        const double pos_frac = positives / static_cast<double>(n);
        const double w_pos = positives > 0 ? 0.5 / pos_frac : 0.0;
        const double w_neg = positives < static_cast<double>(n) ? 0.5 / (1.0 - pos_frac) : 0.0;
        std::vector<double> weights(n);
        for (size_t i = 0; i < n; ++i) {
            weights[i] = stage.labels[i] > 0.5 ? w_pos : w_neg;
        }
        ad::Tensor eta = ad::Tensor::from_data(stage.logits.shape(), stage.eta);
        ad::Tensor scaled = ad::clamp(ad::mul(stage.logits, eta), -15.0, 15.0);
        ad::Tensor stage_loss = ad::bce_with_logits_mean(scaled, stage.labels, weights);
        total = total.defined() ? ad::add(total, stage_loss) : stage_loss;
    }
    return total;
}

ad::Tensor regression_loss(const ad::Tensor& e9, const geo::CorrespondenceSet& corrs) {
    return ad::mean_all(geo::epipolar_residuals_diff(e9, corrs));
}

std::vector<double> dynamic_temperature(const scene::Scene& scene, double threshold) {
    const int n = scene.corrs.size();
    std::vector<double> eta(n);
    for (int i = 0; i < n; ++i) {
        const double ed = geo::symmetric_epipolar_residual(scene.e_true, scene.corrs, i);
        eta[i] = std::clamp(std::abs(ed - threshold) / threshold, 0.0, 1.0);
    }
    return eta;
}

ad::Tensor hybrid_loss(const PipelineOutput& out, const scene::Scene& scene, double delta,
                       const NetConfig& config) {
    if (!scene.corrs.has_labels()) {
        throw std::invalid_argument("hybrid_loss: scene has no ground-truth labels");
    }
    const std::vector<double> eta = dynamic_temperature(scene, config.label_threshold);

    auto stage_for = [&](const ad::Tensor& logits, const std::vector<int>& indices) {
        StageSupervision stage;
        stage.logits = logits;
        stage.labels.reserve(indices.size());
        stage.eta.reserve(indices.size());
        for (int i : indices) {
            stage.labels.push_back(scene.corrs.labels[i] ? 1.0 : 0.0);
            stage.eta.push_back(eta[i]);
        }
        return stage;
    };
    std::vector<StageSupervision> stages;
    stages.push_back(stage_for(out.logits1, out.stage1_indices));
    stages.push_back(stage_for(out.logits2, out.stage2_indices));
    ad::Tensor loss = classification_loss(stages);

    if (delta != 0.0) {
        std::vector<int> inliers;
        for (int i = 0; i < scene.corrs.size(); ++i) {
            if (scene.corrs.labels[i]) inliers.push_back(i);
        }
        if (!inliers.empty()) {
            geo::CorrespondenceSet gt;
            gt.coords.reserve(inliers.size() * 4);
            for (int i : inliers) {
                const double* q = scene.corrs.row(i);
                gt.coords.insert(gt.coords.end(), q, q + 4);
            }
            loss = ad::add(loss, ad::mul_scalar(regression_loss(out.e_hat, gt), delta));
        }
    }
    return loss;
}

}  // namespace gct::net
