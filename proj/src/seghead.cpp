#include "panoptiq/seghead.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace panoptiq {

namespace {

constexpr double kMaskSentinel = -1e30;

std::string dec(int layer, const char* tail) {
    return "dec" + std::to_string(layer) + "." + tail;
}

// Scaled dot-product attention over rows of q/k/v, optionally split into
// heads along the feature dimension.
Var dot_attention(Tape& t, Var q, Var k, Var v, int heads, Var bias_or_invalid) {
    const std::size_t d = t.val(q).cols();
    const std::size_t dh = d / static_cast<std::size_t>(heads);
    Var out;
    for (int h = 0; h < heads; ++h) {
        Var qh = heads == 1 ? q : t.slice_cols(q, h * dh, dh);
        Var kh = heads == 1 ? k : t.slice_cols(k, h * dh, dh);
        Var vh = heads == 1 ? v : t.slice_cols(v, h * dh, dh);
        Var logits = t.affine(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(double(dh)), 0.0);
        if (bias_or_invalid.valid()) logits = t.add(logits, bias_or_invalid);
        Var oh = t.matmul(t.row_softmax(logits), vh);
        out = h == 0 ? oh : t.concat_cols(out, oh);
    }
    return out;
}

}  // namespace

HeadConfig HeadConfig::from_config(const Config& cfg) {
    HeadConfig h;
    h.queries = cfg.get_int("head.queries", h.queries);
    h.layers = cfg.get_int("head.layers", h.layers);
    h.dim = cfg.get_int("head.dim", h.dim);
    h.heads = cfg.get_int("head.heads", h.heads);
    h.num_classes = cfg.get_int("head.classes", h.num_classes);
    h.use_pa_seg = cfg.get_bool("head.use_pa_seg", h.use_pa_seg);
    h.use_mfa = cfg.get_bool("head.use_mfa", h.use_mfa);
    h.embed.mode = parse_embed_mode(cfg.get_str("embed.mode", embed_mode_name(h.embed.mode)));
    h.embed.dim = h.dim;
    h.embed.normalize = cfg.get_bool("embed.normalize", h.embed.normalize);
    h.embed.prescale = cfg.get_bool("embed.prescale", h.embed.prescale);
    h.embed.theta_sincos = cfg.get_bool("embed.theta_sincos", h.embed.theta_sincos);
    if (h.queries <= 0 || h.layers < 0 || h.dim <= 0 || h.heads <= 0 || h.num_classes <= 0)
        throw std::runtime_error("head: sizes must be positive");
    if (h.dim % h.heads != 0) throw std::runtime_error("head: dim must divide by heads");
    return h;
}

void HeadConfig::apply_to(Config& cfg) const {
    cfg.set("head.queries", queries);
    cfg.set("head.layers", layers);
    cfg.set("head.dim", dim);
    cfg.set("head.heads", heads);
    cfg.set("head.classes", num_classes);
    cfg.set("head.use_pa_seg", use_pa_seg);
    cfg.set("head.use_mfa", use_mfa);
    cfg.set("embed.mode", embed_mode_name(embed.mode));
    cfg.set("embed.normalize", embed.normalize);
    cfg.set("embed.prescale", embed.prescale);
    cfg.set("embed.theta_sincos", embed.theta_sincos);
}

void init_head_params(ParamStore& store, const HeadConfig& cfg, std::uint64_t seed) {
    const std::size_t d = static_cast<std::size_t>(cfg.dim);
    init_embed_params(store, cfg.embed, seed);

    store.add_linear("enc.l1", kRawFeatureDim, d, seed);
    store.add_linear("enc.l2", d, d, seed);
    store.add_layer_norm("enc.ln", d);

    store.add_gaussian("queries", static_cast<std::size_t>(cfg.queries), d, 0.02, seed);

    for (int l = 1; l <= cfg.layers; ++l) {
        store.add_linear(dec(l, "q"), d, d, seed);
        store.add_linear(dec(l, "k"), d, d, seed);
        store.add_linear(dec(l, "v"), d, d, seed);
        store.add_layer_norm(dec(l, "ln1"), d);
        store.add_linear(dec(l, "sa.q"), d, d, seed);
        store.add_linear(dec(l, "sa.k"), d, d, seed);
        store.add_linear(dec(l, "sa.v"), d, d, seed);
        store.add_linear(dec(l, "sa.o"), d, d, seed);
        store.add_layer_norm(dec(l, "ln2"), d);
        store.add_linear(dec(l, "ffn.l1"), d, 4 * d, seed);
        store.add_linear(dec(l, "ffn.l2"), 4 * d, d, seed);
        store.add_layer_norm(dec(l, "ln3"), d);
    }

    store.add_linear("head.cls", d, cfg.logit_width(), seed);
    store.add_linear("head.mf", d, d, seed);
    store.add_linear("head.mp", d, d, seed);
}

Var encode_voxels(Tape& tape, ParamBinding& params, const Tensor& raw_features) {
    if (raw_features.size() == 0 || raw_features.rows() < 1)
        throw std::invalid_argument("encode_voxels: empty scene");
    Var x = tape.constant(raw_features);
    Var h = tape.relu(linear_layer(tape, params, x, "enc.l1"));
    Var y = linear_layer(tape, params, h, "enc.l2");
    return layer_norm_affine(tape, params, y, "enc.ln");
}

LayerVars predict_heads(Tape& tape, ParamBinding& params, Var queries, Var fused,
                        Var embedding, const HeadConfig& cfg) {
    LayerVars out;
    out.Q = queries;
    out.C = linear_layer(tape, params, queries, "head.cls");
    out.MF = tape.matmul(linear_layer(tape, params, queries, "head.mf"),
                         tape.transpose(fused));
    if (cfg.use_pa_seg) {
        out.MP = tape.matmul(linear_layer(tape, params, queries, "head.mp"),
                             tape.transpose(embedding));
        out.M = tape.add(out.MF, out.MP);
    } else {
        out.M = out.MF;
    }
    return out;
}

Tensor attention_gate(const Tensor& mask_prev) {
    const std::size_t n = mask_prev.rows(), v = mask_prev.cols();
    Tensor gate({n, v});
    for (std::size_t i = 0; i < n; ++i) {
        bool any = false;
        for (std::size_t j = 0; j < v; ++j)
            if (mask_prev.at(i, j) > 0.0) {
                any = true;
                break;
            }
        for (std::size_t j = 0; j < v; ++j)
            gate.at(i, j) = (!any || mask_prev.at(i, j) > 0.0) ? 0.0 : kMaskSentinel;
    }
    return gate;
}

Var masked_focal_attention(Tape& tape, ParamBinding& params, Var queries_prev, Var mask_prev,
                           Var fused, int layer, const HeadConfig& cfg) {
    Var mask_bias = tape.constant(attention_gate(tape.val(mask_prev)));

    Var values = linear_layer(tape, params, fused, dec(layer, "v"));
    Var attended;
    if (cfg.use_mfa) {
        Var logits = tape.add(mask_bias, mask_prev);
        attended = tape.matmul(tape.row_softmax(logits), values);
    } else {
        Var q = linear_layer(tape, params, queries_prev, dec(layer, "q"));
        Var k = linear_layer(tape, params, fused, dec(layer, "k"));
        attended = dot_attention(tape, q, k, values, cfg.heads, mask_bias);
    }
    return tape.add(attended, queries_prev);
}

Var decoder_layer(Tape& tape, ParamBinding& params, Var queries_prev, Var mask_prev,
                  Var fused, int layer, const HeadConfig& cfg) {
    Var x = masked_focal_attention(tape, params, queries_prev, mask_prev, fused, layer, cfg);
    x = layer_norm_affine(tape, params, x, dec(layer, "ln1"));

    Var sq = linear_layer(tape, params, x, dec(layer, "sa.q"));
    Var sk = linear_layer(tape, params, x, dec(layer, "sa.k"));
    Var sv = linear_layer(tape, params, x, dec(layer, "sa.v"));
    Var sa = dot_attention(tape, sq, sk, sv, cfg.heads, Var{});
    sa = linear_layer(tape, params, sa, dec(layer, "sa.o"));
    x = layer_norm_affine(tape, params, tape.add(x, sa), dec(layer, "ln2"));

    Var ff = tape.relu(linear_layer(tape, params, x, dec(layer, "ffn.l1")));
    ff = linear_layer(tape, params, ff, dec(layer, "ffn.l2"));
    return layer_norm_affine(tape, params, tape.add(x, ff), dec(layer, "ln3"));
}

HeadForward head_forward(Tape& tape, ParamBinding& params, const VoxelScene& scene,
                         const HeadConfig& cfg) {
    if (scene.voxel_count() == 0)
        throw std::invalid_argument("head_forward: empty scene");

    HeadForward fwd;
    fwd.voxels = scene.voxel_count();
    fwd.embedding = positional_embed(tape, params, scene, cfg.embed);
    fwd.features = encode_voxels(tape, params, scene.raw_features);
    fwd.fused = fuse_features(tape, fwd.features, fwd.embedding);

    Var queries = params.use("queries");
    fwd.layers.push_back(predict_heads(tape, params, queries, fwd.fused, fwd.embedding, cfg));

    for (int l = 1; l <= cfg.layers; ++l) {
        queries = decoder_layer(tape, params, queries, fwd.layers.back().M, fwd.fused, l, cfg);
        fwd.layers.push_back(
            predict_heads(tape, params, queries, fwd.fused, fwd.embedding, cfg));
    }
    return fwd;
}

}  // namespace panoptiq
