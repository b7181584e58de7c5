#include "panoptiq/voxelizer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <unordered_map>

namespace panoptiq {

namespace {

int bin_index(double coord, double lo, double hi, int n, bool* in_range) {
    const int raw = static_cast<int>(std::floor((coord - lo) / (hi - lo) * n));
    *in_range = raw >= 0 && raw < n;
    return std::min(std::max(raw, 0), n - 1);
}

// majority value with ties toward the smallest key
int majority(const std::map<int, int>& counts) {
    int best = 0, best_count = -1;
    for (const auto& [key, count] : counts) {
        if (count > best_count) {
            best = key;
            best_count = count;
        }
    }
    return best;
}

}  // namespace

VoxelConfig VoxelConfig::from_config(const Config& cfg) {
    VoxelConfig c;
    const auto rho = cfg.get_list("rho", {c.rho_min, c.rho_max});
    const auto theta = cfg.get_list("theta", {c.theta_min, c.theta_max});
    const auto z = cfg.get_list("z", {c.z_min, c.z_max});
    const auto grid = cfg.get_list("grid", {static_cast<double>(c.n_rho),
                                            static_cast<double>(c.n_theta),
                                            static_cast<double>(c.n_z)});
    if (rho.size() != 2 || theta.size() != 2 || z.size() != 2 || grid.size() != 3)
        throw std::runtime_error("voxel: rho/theta/z need 2 values, grid needs 3");
    c.rho_min = rho[0];
    c.rho_max = rho[1];
    c.theta_min = theta[0];
    c.theta_max = theta[1];
    c.z_min = z[0];
    c.z_max = z[1];
    c.n_rho = static_cast<int>(grid[0]);
    c.n_theta = static_cast<int>(grid[1]);
    c.n_z = static_cast<int>(grid[2]);
    c.drop_out_of_range = cfg.get_bool("voxel.drop_out_of_range", c.drop_out_of_range);
    if (c.rho_min >= c.rho_max || c.theta_min >= c.theta_max || c.z_min >= c.z_max)
        throw std::runtime_error("voxel: degenerate range");
    if (c.n_rho <= 0 || c.n_theta <= 0 || c.n_z <= 0)
        throw std::runtime_error("voxel: resolution must be positive");
    return c;
}

VoxelConfig VoxelConfig::full_preset() {
    VoxelConfig c;
    c.n_rho = 480;
    c.n_theta = 360;
    c.n_z = 32;
    return c;
}

CylCoord cart_to_cyl(double x, double y, double z) {
    CylCoord c;
    c.rho = std::hypot(x, y);
    c.theta = (x == 0.0 && y == 0.0) ? 0.0 : std::atan2(y, x);
    if (c.theta == -M_PI) c.theta = M_PI;  // theta in (-pi, pi]
    c.z = z;
    return c;
}

VoxelScene voxelize(const PointCloud& cloud, const VoxelConfig& config) {
    VoxelScene scene;
    scene.config = config;
    scene.point_voxel.assign(cloud.size(), -1);

    std::unordered_map<std::int64_t, std::size_t> slot_of;
    std::vector<std::int64_t> keys;
    std::vector<std::array<int, 3>> bins(cloud.size());

    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Point& p = cloud.points[i];
        const CylCoord c = cart_to_cyl(p.x, p.y, p.z);
        bool in_r = false, in_t = false, in_z = false;
        const int ir = bin_index(c.rho, config.rho_min, config.rho_max, config.n_rho, &in_r);
        const int it =
            bin_index(c.theta, config.theta_min, config.theta_max, config.n_theta, &in_t);
        const int iz = bin_index(c.z, config.z_min, config.z_max, config.n_z, &in_z);
        if (config.drop_out_of_range && !(in_r && in_t && in_z)) continue;
        bins[i] = {ir, it, iz};
        const std::int64_t key = config.linear_index(ir, it, iz);
        auto [iter, inserted] = slot_of.try_emplace(key, keys.size());
        if (inserted) keys.push_back(key);
        scene.point_voxel[i] = static_cast<int>(iter->second);
    }

    // ascending linear-index order
    std::vector<std::size_t> order(keys.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
    std::vector<std::size_t> rank(keys.size());
    for (std::size_t i = 0; i < order.size(); ++i) rank[order[i]] = i;

    const std::size_t V = keys.size();
    scene.indices.resize(V);
    scene.members.assign(V, {});
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (scene.point_voxel[i] < 0) continue;
        const std::size_t slot = rank[static_cast<std::size_t>(scene.point_voxel[i])];
        scene.point_voxel[i] = static_cast<int>(slot);
        scene.indices[slot] = bins[i];
        scene.members[slot].push_back(i);
    }

    if (V == 0) {
        scene.mean_cart = Tensor();
        scene.mean_cyl = Tensor();
        scene.raw_features = Tensor();
        return scene;
    }

    scene.mean_cart = Tensor({V, 3});
    scene.mean_cyl = Tensor({V, 3});
    scene.raw_features = Tensor({V, kRawFeatureDim});

    const double half_r = config.pitch_rho() / 2.0;
    const double half_t = config.pitch_theta() / 2.0;
    const double half_z = config.pitch_z() / 2.0;
    const double z_span = config.z_max - config.z_min;

    for (std::size_t vi = 0; vi < V; ++vi) {
        const auto& member = scene.members[vi];
        double sx = 0, sy = 0, sz = 0, sr = 0, srho = 0, stheta = 0;
        for (std::size_t pi : member) {
            const Point& p = cloud.points[pi];
            CylCoord c = cart_to_cyl(p.x, p.y, p.z);
            // clip into the configured ranges; Cartesian contributions come
            // from the clipped cylindrical coordinates so both stay consistent
            c.rho = std::min(std::max(c.rho, config.rho_min), config.rho_max);
            c.theta = std::min(std::max(c.theta, config.theta_min), config.theta_max);
            c.z = std::min(std::max(c.z, config.z_min), config.z_max);
            sx += c.rho * std::cos(c.theta);
            sy += c.rho * std::sin(c.theta);
            sz += c.z;
            sr += p.r;
            srho += c.rho;
            stheta += c.theta;
        }
        const double inv = 1.0 / static_cast<double>(member.size());
        scene.mean_cart.at(vi, 0) = sx * inv;
        scene.mean_cart.at(vi, 1) = sy * inv;
        scene.mean_cart.at(vi, 2) = sz * inv;
        scene.mean_cyl.at(vi, 0) = srho * inv;
        scene.mean_cyl.at(vi, 1) = stheta * inv;
        scene.mean_cyl.at(vi, 2) = sz * inv;

        const auto [ir, it, iz] = scene.indices[vi];
        const double center_rho = config.rho_min + (ir + 0.5) * config.pitch_rho();
        const double center_theta = config.theta_min + (it + 0.5) * config.pitch_theta();
        const double center_z = config.z_min + (iz + 0.5) * config.pitch_z();

        scene.raw_features.at(vi, 0) = sx * inv / config.rho_max;
        scene.raw_features.at(vi, 1) = sy * inv / config.rho_max;
        scene.raw_features.at(vi, 2) = (sz * inv - config.z_min) / z_span * 2.0 - 1.0;
        scene.raw_features.at(vi, 3) = sr * inv;
        scene.raw_features.at(vi, 4) = srho * inv / config.rho_max;
        scene.raw_features.at(vi, 5) = stheta * inv / M_PI;
        scene.raw_features.at(vi, 6) = std::log1p(static_cast<double>(member.size())) * 0.25;
        scene.raw_features.at(vi, 7) = (srho * inv - center_rho) / half_r;
        scene.raw_features.at(vi, 8) = (stheta * inv - center_theta) / half_t;
        scene.raw_features.at(vi, 9) = (sz * inv - center_z) / half_z;
    }
    return scene;
}

void build_targets(VoxelScene& scene, const PointCloud& cloud, const ClassCatalog& catalog) {
    const std::size_t V = scene.voxel_count();
    scene.voxel_semantic.assign(V, catalog.ignore_id);
    scene.segments.clear();

    // per-voxel majority semantic; for things voxels, majority instance among
    // points of the winning class
    std::vector<int> voxel_instance(V, 0);
    for (std::size_t vi = 0; vi < V; ++vi) {
        std::map<int, int> class_counts;
        for (std::size_t pi : scene.members[vi]) ++class_counts[cloud.semantic[pi]];
        const int cls = majority(class_counts);
        scene.voxel_semantic[vi] = cls;
        if (catalog.is_thing(cls)) {
            std::map<int, int> inst_counts;
            for (std::size_t pi : scene.members[vi])
                if (cloud.semantic[pi] == cls) ++inst_counts[cloud.instance[pi]];
            voxel_instance[vi] = majority(inst_counts);
        }
    }

    // things segments in ascending instance id, then stuff in ascending class id
    std::map<int, std::pair<int, std::vector<std::uint8_t>>> instance_masks;
    std::map<int, std::vector<std::uint8_t>> stuff_masks;
    for (std::size_t vi = 0; vi < V; ++vi) {
        const int cls = scene.voxel_semantic[vi];
        if (catalog.is_thing(cls) && voxel_instance[vi] > 0) {
            auto& entry = instance_masks[voxel_instance[vi]];
            if (entry.second.empty()) entry = {cls, std::vector<std::uint8_t>(V, 0)};
            entry.second[vi] = 1;
        } else if (catalog.is_stuff(cls)) {
            auto& mask = stuff_masks[cls];
            if (mask.empty()) mask.assign(V, 0);
            mask[vi] = 1;
        }
    }
    for (const auto& [inst, entry] : instance_masks) {
        VoxelSegment seg;
        seg.class_id = entry.first;
        seg.instance_id = inst;
        seg.mask = entry.second;
        seg.count = static_cast<std::size_t>(
            std::count(seg.mask.begin(), seg.mask.end(), std::uint8_t{1}));
        scene.segments.push_back(std::move(seg));
    }
    for (const auto& [cls, mask] : stuff_masks) {
        VoxelSegment seg;
        seg.class_id = cls;
        seg.instance_id = 0;
        seg.mask = mask;
        seg.count = static_cast<std::size_t>(
            std::count(seg.mask.begin(), seg.mask.end(), std::uint8_t{1}));
        scene.segments.push_back(std::move(seg));
    }
    scene.has_targets = true;
}

std::vector<std::pair<int, int>> devoxelize(
    const std::vector<std::pair<int, int>>& voxel_labels, const VoxelScene& scene,
    const PointCloud& cloud, int ignore_class) {
    if (voxel_labels.size() != scene.voxel_count())
        throw std::invalid_argument("devoxelize: label count != voxel count");
    std::vector<std::pair<int, int>> out(cloud.size(), {ignore_class, 0});
    for (std::size_t pi = 0; pi < cloud.size(); ++pi) {
        const int vi = scene.point_voxel[pi];
        if (vi >= 0) out[pi] = voxel_labels[static_cast<std::size_t>(vi)];
    }
    return out;
}

}  // namespace panoptiq
