#include "panoptiq/embedding.hpp"

#include <cmath>
#include <stdexcept>

namespace panoptiq {

namespace {

void check_scaled(const Tensor& coords, const char* branch) {
    for (double v : coords.v)
        if (std::abs(v) > 1.0 + 1e-9)
            throw std::runtime_error(std::string("positional_embed: ") + branch +
                                     " coordinate outside clip range after scaling");
}

double scale_to_unit(double v, double lo, double hi) {
    return (v - lo) / (hi - lo) * 2.0 - 1.0;
}

Var branch_embed(Tape& tape, ParamBinding& params, const Tensor& coords,
                 const EmbedConfig& cfg, const std::string& prefix) {
    Var x = tape.constant(coords);
    Var y = tape.linear(x, params.use(prefix + ".w"), params.use(prefix + ".b"));
    if (cfg.normalize) y = layer_norm_affine(tape, params, y, prefix + ".ln");
    return y;
}

}  // namespace

EmbedMode parse_embed_mode(const std::string& name) {
    if (name == "cartesian") return EmbedMode::Cartesian;
    if (name == "polar") return EmbedMode::Polar;
    if (name == "mixed") return EmbedMode::Mixed;
    throw std::runtime_error("embed: unknown mode '" + name + "'");
}

std::string embed_mode_name(EmbedMode mode) {
    switch (mode) {
        case EmbedMode::Cartesian: return "cartesian";
        case EmbedMode::Polar: return "polar";
        default: return "mixed";
    }
}

void init_embed_params(ParamStore& store, const EmbedConfig& cfg, std::uint64_t seed) {
    const std::size_t d = static_cast<std::size_t>(cfg.dim);
    store.add_linear("embed.cart", 3, d, seed);
    store.add_layer_norm("embed.cart.ln", d);
    store.add_linear("embed.pol", cfg.polar_in_dim(), d, seed);
    store.add_layer_norm("embed.pol.ln", d);
}

Tensor cartesian_coords(const VoxelScene& scene, const EmbedConfig& cfg) {
    const std::size_t V = scene.voxel_count();
    const VoxelConfig& vc = scene.config;
    Tensor out({V, 3});
    for (std::size_t i = 0; i < V; ++i) {
        const double x = scene.mean_cart.at(i, 0);
        const double y = scene.mean_cart.at(i, 1);
        const double z = scene.mean_cart.at(i, 2);
        if (cfg.prescale) {
            out.at(i, 0) = x / vc.rho_max;
            out.at(i, 1) = y / vc.rho_max;
            out.at(i, 2) = scale_to_unit(z, vc.z_min, vc.z_max);
        } else {
            out.at(i, 0) = x;
            out.at(i, 1) = y;
            out.at(i, 2) = z;
        }
    }
    return out;
}

Tensor polar_coords(const VoxelScene& scene, const EmbedConfig& cfg) {
    const std::size_t V = scene.voxel_count();
    const VoxelConfig& vc = scene.config;
    Tensor out({V, cfg.polar_in_dim()});
    for (std::size_t i = 0; i < V; ++i) {
        const double rho = scene.mean_cyl.at(i, 0);
        const double theta = scene.mean_cyl.at(i, 1);
        const double z = scene.mean_cyl.at(i, 2);
        std::size_t col = 0;
        out.at(i, col++) = cfg.prescale ? scale_to_unit(rho, vc.rho_min, vc.rho_max) : rho;
        if (cfg.theta_sincos) {
            out.at(i, col++) = std::sin(theta);
            out.at(i, col++) = std::cos(theta);
        } else {
            out.at(i, col++) = cfg.prescale ? theta / M_PI : theta;
        }
        out.at(i, col++) = cfg.prescale ? scale_to_unit(z, vc.z_min, vc.z_max) : z;
    }
    return out;
}

Var positional_embed(Tape& tape, ParamBinding& params, const VoxelScene& scene,
                     const EmbedConfig& cfg) {
    if (scene.voxel_count() == 0)
        throw std::invalid_argument("positional_embed: empty scene");

    if (cfg.mode == EmbedMode::Cartesian || cfg.mode == EmbedMode::Mixed) {
        // defensive: voxel aggregation clamps into the clip ranges already
        if (cfg.prescale) check_scaled(cartesian_coords(scene, cfg), "cartesian");
    }
    if (cfg.mode == EmbedMode::Polar || cfg.mode == EmbedMode::Mixed) {
        if (cfg.prescale) check_scaled(polar_coords(scene, cfg), "polar");
    }

    switch (cfg.mode) {
        case EmbedMode::Cartesian:
            return branch_embed(tape, params, cartesian_coords(scene, cfg), cfg, "embed.cart");
        case EmbedMode::Polar:
            return branch_embed(tape, params, polar_coords(scene, cfg), cfg, "embed.pol");
        default: {
            Var cart = branch_embed(tape, params, cartesian_coords(scene, cfg), cfg, "embed.cart");
            Var pol = branch_embed(tape, params, polar_coords(scene, cfg), cfg, "embed.pol");
            return tape.add(pol, cart);
        }
    }
}

Var fuse_features(Tape& tape, Var features, Var embedding) {
    return tape.add(features, embedding);
}

}  // namespace panoptiq
