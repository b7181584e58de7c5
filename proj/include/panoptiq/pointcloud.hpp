#pragma once

#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <set>
#include <string>
#include <vector>

#include "panoptiq/config.hpp"

namespace panoptiq {

struct Point {
    double x = 0.0, y = 0.0, z = 0.0;
    double r = 0.0;  // reflectance in [0,1]
};

struct PointCloud {
    std::vector<Point> points;
    std::vector<int> semantic;  // class id per point
    std::vector<int> instance;  // 0 = stuff / no instance
    std::string frame_id;

    std::size_t size() const { return points.size(); }
};

// Class ids used across the pipeline. Things and stuff are disjoint; the
// ignore id is excluded from every metric.
struct ClassCatalog {
    std::vector<std::string> names;
    std::set<int> things;
    std::set<int> stuff;
    int ignore_id = 0;

    bool is_thing(int c) const { return things.count(c) > 0; }
    bool is_stuff(int c) const { return stuff.count(c) > 0; }
    bool is_evaluated(int c) const { return is_thing(c) || is_stuff(c); }
    int num_classes() const { return static_cast<int>(names.size()); }
    const std::string& name(int c) const { return names.at(static_cast<std::size_t>(c)); }

    // 0 unlabeled (ignore), 1 ground, 2 wall (stuff), 3 car, 4 pedestrian (things)
    static ClassCatalog desk_default();
};

// Synthetic scene layout. The seed fully determines the output.
struct SceneSpec {
    enum class Layout { Ring, Crowd, Mixed };

    Layout layout = Layout::Ring;
    double box_l = 4.2, box_w = 1.9, box_h = 1.6;  // instance template, meters
    double density = 3.0;                          // template points per m^2
    int instance_count = 8;
    std::vector<double> ring_radii = {12.0};
    double grid_pitch = 3.5;
    double crowd_distance = 11.0;
    double ground_inner = 2.0;
    double ground_outer = 20.0;
    double ground_density = 1.0;  // points per m^2 before falloff
    double falloff = 0.05;        // radial density decay coefficient
    double noise_sigma = 0.0;
    double margin = 0.5;  // required bounding-box gap between instances
    bool wall = false;    // adds a second stuff class band at the outer edge
    std::uint64_t seed = 1;

    static SceneSpec from_config(const Config& cfg, const std::string& prefix = "scene.");
    static Layout parse_layout(const std::string& name);
    std::string layout_name() const;
};

struct AugmentParams {
    double rotation = 0.0;  // radians about z
    bool flip_x = false;
    bool flip_y = false;
    double scale = 1.0;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;

    static AugmentParams from_config(const Config& cfg,
                                     const std::string& prefix = "augment.");
};

// Ranges used when drawing random augmentations per training step.
struct AugmentRanges {
    bool enabled = false;
    double rotation_max = M_PI;  // uniform in [-max, max]
    double flip_prob = 0.5;      // per axis
    double scale_min = 0.95;
    double scale_max = 1.05;
    double noise_sigma = 0.02;

    static AugmentRanges from_config(const Config& cfg,
                                     const std::string& prefix = "augment.");
    AugmentParams draw(std::uint64_t seed) const;
};

PointCloud read_cloud(std::istream& in);
PointCloud read_cloud_file(const std::string& path);
void write_cloud(const PointCloud& cloud, std::ostream& out);
void write_cloud_file(const PointCloud& cloud, const std::string& path);

PointCloud generate_scene(const SceneSpec& spec);

// Geometry transform in the order rotate -> flip -> scale -> noise. Labels
// and reflectance pass through unchanged.
PointCloud augment(const PointCloud& cloud, const AugmentParams& params);

}  // namespace panoptiq
