#pragma once

#include <cstdint>
#include <vector>

#include "panoptiq/pointcloud.hpp"
#include "panoptiq/seghead.hpp"
#include "panoptiq/tape.hpp"
#include "panoptiq/tensor.hpp"
#include "panoptiq/voxelizer.hpp"

namespace panoptiq {

// Term weights (default ratio 1:1:2:0.2) plus focal constants. lce is an
// optional binary cross-entropy mask term kept at 0 unless configured.
struct LossWeights {
    double lf = 1.0;    // classification focal
    double lbf = 1.0;   // mask binary focal
    double ldf = 2.0;   // mask dice
    double lfp = 0.2;   // position-mask dice
    double lce = 0.0;   // mask binary cross-entropy
    double gamma = 2.0;
    double alpha = 0.25;
    double dice_eps = 1.0;
    bool cost_position = true;      // position-dice term in the matching cost
    bool cost_focal_class = false;  // focal instead of -log prob in the cost
    bool position_things_only = false;

    static LossWeights from_config(const Config& cfg);
    void apply_to(Config& cfg) const;
};

// Mean over elements of -alpha * (1-p_t)^gamma * log(p_t), with p_t = p for
// target 1 and (1-p) for target 0. Probabilities are clipped to
// [1e-12, 1-1e-12] first.
double focal_loss(const std::vector<double>& probabilities,
                  const std::vector<std::uint8_t>& targets, double gamma, double alpha);

// 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)
double dice_loss(const std::vector<double>& probabilities,
                 const std::vector<std::uint8_t>& target, double eps);

// Ground-truth segments of one scene flattened for matching and loss.
struct SceneTargets {
    Tensor masks;                // T x V binary
    std::vector<int> class_ids;  // per target
    std::vector<std::uint8_t> is_thing;
    std::size_t count = 0;
    std::size_t voxels = 0;

    static SceneTargets from_scene(const VoxelScene& scene, const ClassCatalog& catalog);
};

// Detached per-layer predictions for cost computation.
struct LayerView {
    const Tensor* class_logits = nullptr;    // N x (K+1)
    const Tensor* mask_logits = nullptr;     // N x V combined
    const Tensor* position_logits = nullptr; // N x V, may be null
};

// targets x queries cost matrix assembled from the same terms as the loss.
Tensor matching_cost(const LayerView& layer, const SceneTargets& targets,
                     const HeadConfig& head, const LossWeights& weights);

struct Assignment {
    std::vector<int> target_to_query;  // injective
    double total_cost = 0.0;
};

// Minimum-cost injective assignment of targets to queries; requires
// targets <= queries. Ties resolve to the lexicographically smallest
// assignment vector.
Assignment hungarian(const Tensor& cost);

struct LayerLossTerms {
    double classification = 0.0;
    double mask_focal = 0.0;
    double mask_dice = 0.0;
    double mask_bce = 0.0;
    double position_dice = 0.0;
    Assignment assignment;
};

struct TotalLoss {
    Var total;
    std::vector<LayerLossTerms> per_layer;
};

// Per-layer matching + supervision summed over all outputs. Matched queries
// contribute every term; unmatched queries contribute classification toward
// no-object; the pre-interaction output omits classification entirely.
// frozen_assignments, when given, bypasses matching (used by gradient checks,
// which must differentiate at a fixed matching).
TotalLoss total_loss(Tape& tape, const HeadForward& forward, const SceneTargets& targets,
                     const HeadConfig& head, const LossWeights& weights,
                     const std::vector<Assignment>* frozen_assignments = nullptr);

}  // namespace panoptiq
