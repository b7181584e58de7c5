#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "panoptiq/config.hpp"
#include "panoptiq/pointcloud.hpp"
#include "panoptiq/tensor.hpp"

namespace panoptiq {

struct VoxelConfig {
    double rho_min = 0.0, rho_max = 50.0;
    double theta_min = -M_PI, theta_max = M_PI;
    double z_min = -4.0, z_max = 2.0;
    int n_rho = 48, n_theta = 36, n_z = 8;
    bool drop_out_of_range = false;  // default clamps to boundary bins

    // Config block: `rho = 0,50`, `theta = -pi,pi`, `z = -4,2`, `grid = 48,36,8`.
    static VoxelConfig from_config(const Config& cfg);
    // Full-resolution preset: 480x360x32 over the same ranges.
    static VoxelConfig full_preset();

    double pitch_rho() const { return (rho_max - rho_min) / n_rho; }
    double pitch_theta() const { return (theta_max - theta_min) / n_theta; }
    double pitch_z() const { return (z_max - z_min) / n_z; }
    std::int64_t linear_index(int ir, int it, int iz) const {
        return (static_cast<std::int64_t>(ir) * n_theta + it) * n_z + iz;
    }
};

struct CylCoord {
    double rho, theta, z;
};

// Full-quadrant angle; theta in (-pi, pi], (0,0,z) maps to theta = 0.
CylCoord cart_to_cyl(double x, double y, double z);

// A ground-truth segment at voxel resolution: one per things instance and
// one per stuff class present. instance_id is 0 for stuff.
struct VoxelSegment {
    int class_id = 0;
    int instance_id = 0;
    std::vector<std::uint8_t> mask;  // binary over occupied voxels
    std::size_t count = 0;
};

// Sparse cylindrical voxel grid with per-voxel aggregates. Raw features are
// a fixed 10-dim point-statistics vector per voxel: scaled mean (x,y,z,r),
// scaled mean (rho,theta), log-scaled point count, and offsets of the mean
// from the voxel center per cylindrical axis.
struct VoxelScene {
    VoxelConfig config;
    std::vector<std::array<int, 3>> indices;  // ascending linear order
    Tensor mean_cart;                         // V x 3
    Tensor mean_cyl;                          // V x 3
    Tensor raw_features;                      // V x 10
    std::vector<std::vector<std::size_t>> members;
    std::vector<int> point_voxel;  // per point; -1 when dropped

    std::vector<int> voxel_semantic;     // filled by build_targets
    std::vector<VoxelSegment> segments;  // filled by build_targets
    bool has_targets = false;

    std::size_t voxel_count() const { return indices.size(); }
};

constexpr std::size_t kRawFeatureDim = 10;

VoxelScene voxelize(const PointCloud& cloud, const VoxelConfig& config);

// Majority-vote targets: per-voxel semantic label (ties toward the smaller
// class id), one mask per things instance and per stuff class present.
void build_targets(VoxelScene& scene, const PointCloud& cloud, const ClassCatalog& catalog);

// Projects per-voxel (class, segment) labels back to points. Dropped points
// receive (ignore_class, 0).
std::vector<std::pair<int, int>> devoxelize(
    const std::vector<std::pair<int, int>>& voxel_labels, const VoxelScene& scene,
    const PointCloud& cloud, int ignore_class = 0);

}  // namespace panoptiq
