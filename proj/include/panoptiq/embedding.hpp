#pragma once

#include <string>

#include "panoptiq/params.hpp"
#include "panoptiq/tape.hpp"
#include "panoptiq/voxelizer.hpp"

namespace panoptiq {

enum class EmbedMode { Cartesian, Polar, Mixed };

EmbedMode parse_embed_mode(const std::string& name);
std::string embed_mode_name(EmbedMode mode);

struct EmbedConfig {
    EmbedMode mode = EmbedMode::Mixed;
    int dim = 64;
    bool normalize = true;     // layer norm + affine after each linear map
    bool prescale = true;      // coordinates scaled to [-1,1] via clip ranges
    bool theta_sincos = false; // optional (sin,cos) lift of the angle

    std::size_t polar_in_dim() const { return theta_sincos ? 4 : 3; }
};

// Registers embed.cart.* / embed.pol.* parameters.
void init_embed_params(ParamStore& store, const EmbedConfig& cfg, std::uint64_t seed);

// Per-voxel coordinate matrices fed to the two branches; prescaling maps
// each axis into [-1,1] using the voxel clip ranges.
Tensor cartesian_coords(const VoxelScene& scene, const EmbedConfig& cfg);
Tensor polar_coords(const VoxelScene& scene, const EmbedConfig& cfg);

// V x D positional embedding: cartesian branch, polar branch, or their sum.
Var positional_embed(Tape& tape, ParamBinding& params, const VoxelScene& scene,
                     const EmbedConfig& cfg);

// F + MPE, elementwise.
Var fuse_features(Tape& tape, Var features, Var embedding);

}  // namespace panoptiq
