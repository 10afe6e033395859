#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gct/attention.hpp"
#include "gct/geometry.hpp"
#include "gct/graph_context.hpp"
#include "gct/layers.hpp"
#include "gct/synthetic_scene.hpp"
#include "gct/tensor.hpp"

namespace gct::net {

enum class GcgtMode { kOff, kPartial, kFull };

struct NetConfig {
    int d = 128;                    // channel width
    int k = 9;                      // KNN neighbors
    int p = 3;                      // structure-branch group width
    int heads = 4;                  // attention heads
    int reduction = 4;              // fusion channel reduction
    double sample_rate = 0.2;       // guidance sampling rate
    int cluster_count = 128;        // cluster cap; per module m = min(cap, n/2)
    double prune_rate = 0.5;        // kept fraction per pruning module
    int n_modules = 2;
    double delta = 0.5;             // regression weight after warm-up
    double warmup_fraction = 0.04;  // fraction of steps with delta = 0
    double label_threshold = 1e-4;
    double verify_threshold = 1e-4;  // tied to label_threshold by default
    bool use_gcet = true;
    GcgtMode gcgt = GcgtMode::kFull;
    int expected_n = 500;  // pipeline input size used to size clusters

    void validate() const;
    /// Expected input size of module `i` (0-based) under the prune rate.
    int module_input(int i) const;
    /// Cluster count used by module `i`.
    int module_clusters(int i) const;
};

/// Per-channel standardization across the correspondence axis; injects
/// global context while staying permutation-equivariant.
ad::Tensor context_normalization(const ad::Tensor& x);

/// PointCN-style residual unit: two stages of
/// linear -> context norm -> per-token norm -> ReLU around an identity skip.
struct ResnetBlockParams {
    Linear first, second;
};
ad::Tensor resnet_block(const ad::Tensor& x, const ResnetBlockParams& params);

struct GcetParams {
    CgcParams cgc;
    SgcParams sgc;
    ClusterParams cluster_cgc, cluster_sgc;
    AttentionParams sa_cgc, sa_sgc, ca_cgc, ca_sgc;
    FusionParams fuse_cgc, fuse_sgc, fuse_out;
    int k = 9;
};
/// Graph-context enhancement: KNN graph, credible + structure branches,
/// cluster, self/cross attention per branch, recover, fuse.
/// `bypass_attention` routes the clustered branches straight to recovery and
/// exists for ablation probes.
ad::Tensor gcet_forward(const ad::Tensor& features, const GcetParams& params,
                        bool bypass_attention = false);

struct GcgtParams {
    ClusterParams clu;
    ExpandParams exp;
    TransformerParams tf;
    std::optional<OaFilterParams> oa;  // absent in partial mode
    std::optional<FusionParams> fuse_guided;
    FusionParams fuse_out;
};
struct GcgtResult {
    ad::Tensor features;        // (n, d)
    ad::Tensor scores;          // ST, (n, 1)
    std::vector<int> sampled;   // high-confidence rows, descending score
};
/// Consensus guidance: score, sample top floor(sr*n) rows, expand to the
/// cluster token count, guide the clustered map with a transformer (plus
/// OAFilter in full mode), recover, fuse with the input.
GcgtResult gcgt_forward(const ad::Tensor& gc, const Linear& score_head, const GcgtParams& params,
                        double sample_rate, GcgtMode mode);

struct PruningModuleParams {
    Linear embed;                   // 4 -> d
    std::optional<Linear> fuse_in;  // 2d -> d when carrying features forward
    std::array<ResnetBlockParams, 3> pre, post;
    std::optional<GcetParams> gcet;
    std::optional<GcgtParams> gcgt;
    Linear score_head;  // d -> 1; shared between ST and the output logits
    int clusters = 128;
};

struct ModuleResult {
    std::vector<int> kept;     // ascending input-local indices
    ad::Tensor logits;         // (n, 1), full input
    ad::Tensor kept_features;  // (kept, d)
    std::vector<int> sampled;  // guidance sample (input-local), empty if GCGT off
};
ModuleResult pruning_module(const ad::Tensor& coords, const ad::Tensor* carried,
                            const PruningModuleParams& params, const NetConfig& config);

struct NetParams {
    std::vector<PruningModuleParams> modules;
    Linear weight_head;  // d -> 1

    ParamList parameters() const;
    std::vector<ad::Tensor> named_tensors() const;
    static NetParams init(const NetConfig& config, uint64_t seed);
};

struct PipelineOutput {
    geo::CorrespondenceSet q1, q2;
    std::vector<int> stage1_indices, stage2_indices;  // into the initial set
    ad::Tensor logits1, logits2;                      // survivors per stage
    ad::Tensor weights;                               // (n2, 1), sums to 1
    ad::Tensor e_hat;                                 // unit-norm 9-vector
    std::vector<double> epipolar_distances;           // full set
    std::vector<uint8_t> final_mask;
    std::vector<int> sampled1, sampled2;

    geo::EssentialMatrix essential() const;
    geo::EssentialMatrix essential_projected() const;
};
PipelineOutput forward_pipeline(const geo::CorrespondenceSet& corrs, const NetParams& params,
                                const NetConfig& config);

/// relu(tanh(linear)) normalized to unit sum; falls back to uniform when
/// fewer than 8 weights are strictly positive.
ad::Tensor inlier_weight_head(const ad::Tensor& features, const Linear& head);

struct StageSupervision {
    ad::Tensor logits;           // (n, 1)
    std::vector<double> labels;  // 0/1
    std::vector<double> eta;     // dynamic temperature
};
/// Sum over stages of balanced BCE on temperature-scaled, clamped logits.
ad::Tensor classification_loss(const std::vector<StageSupervision>& stages);

/// Mean symmetric epipolar residual of the estimate over `corrs`.
ad::Tensor regression_loss(const ad::Tensor& e9, const geo::CorrespondenceSet& corrs);

/// eta_j = clamp(|ed_j - t| / t, 0, 1) with residuals under the true E.
std::vector<double> dynamic_temperature(const scene::Scene& scene, double threshold);

/// L = L_cls + delta * L_reg; the regression term is evaluated on the
/// ground-truth inlier rows.
ad::Tensor hybrid_loss(const PipelineOutput& out, const scene::Scene& scene, double delta,
                       const NetConfig& config);

ad::Tensor coords_tensor(const geo::CorrespondenceSet& corrs);

}  // namespace gct::net
