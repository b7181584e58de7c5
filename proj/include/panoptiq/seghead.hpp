#pragma once

#include <vector>

#include "panoptiq/embedding.hpp"
#include "panoptiq/params.hpp"
#include "panoptiq/tape.hpp"
#include "panoptiq/voxelizer.hpp"

namespace panoptiq {

// Query-based head sizes and ablation toggles. Class ids are expected to be
// contiguous 1..num_classes with 0 reserved for ignore; classifier logits
// use slot class_id-1 and append one no-object slot.
struct HeadConfig {
    int queries = 32;
    int layers = 3;
    int dim = 64;
    int heads = 1;
    int num_classes = 4;
    bool use_pa_seg = true;
    bool use_mfa = true;
    EmbedConfig embed;

    static HeadConfig from_config(const Config& cfg);
    void apply_to(Config& cfg) const;

    int class_slot(int class_id) const { return class_id - 1; }
    int slot_class(int slot) const { return slot + 1; }
    int no_object_slot() const { return num_classes; }
    std::size_t logit_width() const { return static_cast<std::size_t>(num_classes) + 1; }
};

// Per-layer prediction variables. M equals MF + MP elementwise (MF alone
// when the position branch is disabled, in which case MP is invalid).
struct LayerVars {
    Var C;   // N x (K+1) class logits
    Var MF;  // N x V feature mask logits
    Var MP;  // N x V position mask logits
    Var M;   // combined mask logits
    Var Q;   // N x D queries producing this output
};

struct HeadForward {
    std::vector<LayerVars> layers;  // layers + 1 entries; [0] is pre-interaction
    Var features;                   // encoded voxel features F (V x D)
    Var fused;                      // F + MPE
    Var embedding;                  // MPE (V x D)
    std::size_t voxels = 0;
};

void init_head_params(ParamStore& store, const HeadConfig& cfg, std::uint64_t seed);

// Two-layer per-voxel MLP with relu, then layer norm. Permutation
// equivariant over voxels.
Var encode_voxels(Tape& tape, ParamBinding& params, const Tensor& raw_features);

// One-go prediction from queries: class logits plus feature/position masks.
LayerVars predict_heads(Tape& tape, ParamBinding& params, Var queries, Var fused,
                        Var embedding, const HeadConfig& cfg);

// Additive attention gate derived from the previous combined mask: 0 where
// the mask logit is positive, a large negative sentinel otherwise. Rows with
// no positive entry fall back to an all-zero gate.
Tensor attention_gate(const Tensor& mask_prev);

// Cross-attention guided by the previous combined mask. Positions with
// non-positive mask logits are hard-masked; rows with no positive entry fall
// back to a plain softmax over the mask logits. With use_mfa disabled the
// content term is the scaled q.k^T map instead of the mask itself.
Var masked_focal_attention(Tape& tape, ParamBinding& params, Var queries_prev, Var mask_prev,
                           Var fused, int layer, const HeadConfig& cfg);

// Cross-attention, self-attention and FFN with residuals and norms.
Var decoder_layer(Tape& tape, ParamBinding& params, Var queries_prev, Var mask_prev,
                  Var fused, int layer, const HeadConfig& cfg);

// Full pass: embedding, encoder, pre-interaction output, and one output per
// refinement layer. Layer l consumes the combined mask of output l-1.
HeadForward head_forward(Tape& tape, ParamBinding& params, const VoxelScene& scene,
                         const HeadConfig& cfg);

}  // namespace panoptiq
