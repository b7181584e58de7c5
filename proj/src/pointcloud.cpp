#include "panoptiq/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "panoptiq/rng.hpp"

namespace panoptiq {

namespace {

constexpr int kGroundClass = 1;
constexpr int kWallClass = 2;
constexpr int kCarClass = 3;

struct TemplatePoint {
    double x, y, z, r;
};

// Points sampled on the five exposed faces of an axis-aligned box shell
// (four sides plus top; the bottom is never visible to a sensor). Sampled
// once per scene so that equally thinned instances are congruent.
std::vector<TemplatePoint> sample_box_template(const SceneSpec& spec, Rng& rng) {
    const double l = spec.box_l, w = spec.box_w, h = spec.box_h;
    struct Face {
        double area;
        int kind;  // 0/1: +-x sides, 2/3: +-y sides, 4: top
    };
    const Face faces[5] = {
        {w * h, 0}, {w * h, 1}, {l * h, 2}, {l * h, 3}, {l * w, 4}};
    double total = 0.0;
    for (const Face& f : faces) total += f.area;
    const int n = std::max(16, static_cast<int>(std::lround(spec.density * total)));

    std::vector<TemplatePoint> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double pick = rng.uniform(0.0, total);
        int kind = 4;
        for (const Face& f : faces) {
            if (pick < f.area) {
                kind = f.kind;
                break;
            }
            pick -= f.area;
        }
        const double u = rng.uniform(), v = rng.uniform();
        TemplatePoint p{};
        switch (kind) {
            case 0: p = {l / 2, (u - 0.5) * w, v * h, 0.0}; break;
            case 1: p = {-l / 2, (u - 0.5) * w, v * h, 0.0}; break;
            case 2: p = {(u - 0.5) * l, w / 2, v * h, 0.0}; break;
            case 3: p = {(u - 0.5) * l, -w / 2, v * h, 0.0}; break;
            default: p = {(u - 0.5) * l, (v - 0.5) * w, h, 0.0}; break;
        }
        p.r = rng.uniform(0.3, 0.9);
        out.push_back(p);
    }
    return out;
}

struct Placement {
    double cx, cy;
};

bool boxes_collide(const Placement& a, const Placement& b, const SceneSpec& spec) {
    return std::abs(a.cx - b.cx) < spec.box_l + spec.margin &&
           std::abs(a.cy - b.cy) < spec.box_w + spec.margin;
}

std::vector<Placement> place_instances(const SceneSpec& spec, Rng& rng) {
    for (int attempt = 0; attempt < 32; ++attempt) {
        std::vector<Placement> centers;
        auto add_ring = [&](int count) {
            if (count <= 0) return;
            const std::size_t nr = spec.ring_radii.size();
            std::vector<int> per_radius(nr, count / static_cast<int>(nr));
            for (int i = 0; i < count % static_cast<int>(nr); ++i) ++per_radius[i];
            for (std::size_t ri = 0; ri < nr; ++ri) {
                const int m = per_radius[ri];
                if (m == 0) continue;
                const double phase = rng.uniform(0.0, 2.0 * M_PI);
                for (int j = 0; j < m; ++j) {
                    const double a = phase + 2.0 * M_PI * j / m;
                    centers.push_back(
                        {spec.ring_radii[ri] * std::cos(a), spec.ring_radii[ri] * std::sin(a)});
                }
            }
        };
        auto add_crowd = [&](int count) {
            if (count <= 0) return;
            const int side = static_cast<int>(std::ceil(std::sqrt(count)));
            const double jitter = rng.uniform(0.0, 2.0 * M_PI);
            const double cx0 = spec.crowd_distance * std::cos(jitter);
            const double cy0 = spec.crowd_distance * std::sin(jitter);
            // cars pack across their width; the long axis needs at least the
            // box length plus margin
            const double pitch_x = std::max(spec.grid_pitch, spec.box_l + spec.margin + 0.5);
            const double pitch_y = spec.grid_pitch;
            int placed = 0;
            for (int gy = 0; gy < side && placed < count; ++gy)
                for (int gx = 0; gx < side && placed < count; ++gx, ++placed)
                    centers.push_back({cx0 + (gx - (side - 1) / 2.0) * pitch_x,
                                       cy0 + (gy - (side - 1) / 2.0) * pitch_y});
        };

        switch (spec.layout) {
            case SceneSpec::Layout::Ring: add_ring(spec.instance_count); break;
            case SceneSpec::Layout::Crowd: add_crowd(spec.instance_count); break;
            case SceneSpec::Layout::Mixed:
                add_ring(spec.instance_count / 2);
                add_crowd(spec.instance_count - spec.instance_count / 2);
                break;
        }

        bool ok = true;
        for (std::size_t i = 0; i < centers.size() && ok; ++i)
            for (std::size_t j = i + 1; j < centers.size() && ok; ++j)
                if (boxes_collide(centers[i], centers[j], spec)) ok = false;
        if (ok) return centers;
    }
    throw std::runtime_error("generate_scene: instance placement collision after 32 retries");
}

}  // namespace

ClassCatalog ClassCatalog::desk_default() {
    ClassCatalog cat;
    cat.names = {"unlabeled", "ground", "wall", "car", "pedestrian"};
    cat.ignore_id = 0;
    cat.stuff = {1, 2};
    cat.things = {3, 4};
    return cat;
}

SceneSpec::Layout SceneSpec::parse_layout(const std::string& name) {
    if (name == "ring") return Layout::Ring;
    if (name == "crowd") return Layout::Crowd;
    if (name == "mixed") return Layout::Mixed;
    throw std::runtime_error("scene: unknown layout '" + name + "'");
}

std::string SceneSpec::layout_name() const {
    switch (layout) {
        case Layout::Ring: return "ring";
        case Layout::Crowd: return "crowd";
        default: return "mixed";
    }
}

SceneSpec SceneSpec::from_config(const Config& cfg, const std::string& prefix) {
    SceneSpec s;
    s.layout = parse_layout(cfg.get_str(prefix + "layout", s.layout_name()));
    const auto box = cfg.get_list(prefix + "box", {s.box_l, s.box_w, s.box_h});
    if (box.size() != 3) throw std::runtime_error("scene: box needs 3 values");
    s.box_l = box[0];
    s.box_w = box[1];
    s.box_h = box[2];
    s.density = cfg.get_double(prefix + "density", s.density);
    s.instance_count = cfg.get_int(prefix + "count", s.instance_count);
    s.ring_radii = cfg.get_list(prefix + "ring_radii", s.ring_radii);
    s.grid_pitch = cfg.get_double(prefix + "grid_pitch", s.grid_pitch);
    s.crowd_distance = cfg.get_double(prefix + "crowd_distance", s.crowd_distance);
    s.ground_inner = cfg.get_double(prefix + "ground_inner", s.ground_inner);
    s.ground_outer = cfg.get_double(prefix + "ground_outer", s.ground_outer);
    s.ground_density = cfg.get_double(prefix + "ground_density", s.ground_density);
    s.falloff = cfg.get_double(prefix + "falloff", s.falloff);
    s.noise_sigma = cfg.get_double(prefix + "noise_sigma", s.noise_sigma);
    s.margin = cfg.get_double(prefix + "margin", s.margin);
    s.wall = cfg.get_bool(prefix + "wall", s.wall);
    s.seed = cfg.get_u64(prefix + "seed", s.seed);

    if (s.instance_count < 0) throw std::runtime_error("scene: count must be >= 0");
    for (double v : {s.box_l, s.box_w, s.box_h, s.density, s.grid_pitch, s.ground_outer})
        if (v <= 0.0) throw std::runtime_error("scene: extents must be positive");
    return s;
}

AugmentParams AugmentParams::from_config(const Config& cfg, const std::string& prefix) {
    AugmentParams p;
    p.rotation = cfg.get_double(prefix + "rotation", p.rotation);
    p.flip_x = cfg.get_bool(prefix + "flip_x", p.flip_x);
    p.flip_y = cfg.get_bool(prefix + "flip_y", p.flip_y);
    p.scale = cfg.get_double(prefix + "scale", p.scale);
    p.noise_sigma = cfg.get_double(prefix + "noise_sigma", p.noise_sigma);
    p.seed = cfg.get_u64(prefix + "seed", p.seed);
    if (p.scale <= 0.0) throw std::runtime_error("augment: scale must be positive");
    return p;
}

AugmentRanges AugmentRanges::from_config(const Config& cfg, const std::string& prefix) {
    AugmentRanges r;
    r.enabled = cfg.get_bool(prefix + "enabled", r.enabled);
    r.rotation_max = cfg.get_double(prefix + "rotation_max", r.rotation_max);
    r.flip_prob = cfg.get_double(prefix + "flip_prob", r.flip_prob);
    r.scale_min = cfg.get_double(prefix + "scale_min", r.scale_min);
    r.scale_max = cfg.get_double(prefix + "scale_max", r.scale_max);
    r.noise_sigma = cfg.get_double(prefix + "noise_sigma", r.noise_sigma);
    return r;
}

AugmentParams AugmentRanges::draw(std::uint64_t seed) const {
    Rng rng(seed);
    AugmentParams p;
    p.rotation = rng.uniform(-rotation_max, rotation_max);
    p.flip_x = rng.bernoulli(flip_prob);
    p.flip_y = rng.bernoulli(flip_prob);
    p.scale = rng.uniform(scale_min, scale_max);
    p.noise_sigma = noise_sigma;
    p.seed = rng.next_u64();
    return p;
}

PointCloud read_cloud(std::istream& in) {
    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("cloud: empty stream at line 1");
    std::istringstream header(line);
    std::string magic, version, ntoken;
    header >> magic >> version >> ntoken;
    if (magic != "panoptiq-cloud" || version != "v1" || ntoken.rfind("n=", 0) != 0)
        throw std::runtime_error("cloud: malformed header at line 1");
    std::size_t count = 0;
    try {
        count = std::stoull(ntoken.substr(2));
    } catch (const std::exception&) {
        throw std::runtime_error("cloud: malformed header at line 1");
    }

    PointCloud cloud;
    cloud.points.reserve(count);
    cloud.semantic.reserve(count);
    cloud.instance.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const int lineno = static_cast<int>(i) + 2;
        if (!std::getline(in, line))
            throw std::runtime_error("cloud: unexpected end of file at line " +
                                     std::to_string(lineno));
        std::istringstream ls(line);
        Point p;
        int sem = 0, inst = 0;
        std::string extra;
        if (!(ls >> p.x >> p.y >> p.z >> p.r >> sem >> inst) || (ls >> extra))
            throw std::runtime_error("cloud: expected 6 columns at line " +
                                     std::to_string(lineno));
        if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) ||
            !std::isfinite(p.r))
            throw std::runtime_error("cloud: non-finite coordinate at line " +
                                     std::to_string(lineno));
        if (inst < 0)
            throw std::runtime_error("cloud: negative instance id at line " +
                                     std::to_string(lineno));
        cloud.points.push_back(p);
        cloud.semantic.push_back(sem);
        cloud.instance.push_back(inst);
    }
    return cloud;
}

PointCloud read_cloud_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cloud: cannot open " + path);
    PointCloud c = read_cloud(in);
    const auto slash = path.find_last_of('/');
    std::string stem = slash == std::string::npos ? path : path.substr(slash + 1);
    const auto dot = stem.find_last_of('.');
    if (dot != std::string::npos) stem.erase(dot);
    c.frame_id = stem;
    return c;
}

void write_cloud(const PointCloud& cloud, std::ostream& out) {
    out << "panoptiq-cloud v1 n=" << cloud.size() << "\n";
    char buf[128];
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Point& p = cloud.points[i];
        std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %.17g %d %d\n", p.x, p.y, p.z,
                      p.r, cloud.semantic[i], cloud.instance[i]);
        out << buf;
    }
}

void write_cloud_file(const PointCloud& cloud, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cloud: cannot write " + path);
    write_cloud(cloud, out);
}

PointCloud generate_scene(const SceneSpec& spec) {
    Rng rng(derive_seed(spec.seed, "scene"));
    PointCloud cloud;
    cloud.frame_id = "scene_" + std::to_string(spec.seed);

    const auto centers = place_instances(spec, rng);
    const auto tmpl = sample_box_template(spec, rng);

    // Instances: thinned copies of the shared template, translated only.
    for (std::size_t i = 0; i < centers.size(); ++i) {
        const double rho = std::hypot(centers[i].cx, centers[i].cy);
        const int keep = std::max(
            8, static_cast<int>(std::lround(static_cast<double>(tmpl.size()) *
                                            std::exp(-spec.falloff * rho))));
        const int k = std::min<int>(keep, static_cast<int>(tmpl.size()));
        for (int j = 0; j < k; ++j) {
            cloud.points.push_back(
                {tmpl[j].x + centers[i].cx, tmpl[j].y + centers[i].cy, tmpl[j].z, tmpl[j].r});
            cloud.semantic.push_back(kCarClass);
            cloud.instance.push_back(static_cast<int>(i) + 1);
        }
    }

    // Ground annulus with radial density falloff; holes carved under the
    // instance footprints.
    auto inside_footprint = [&](double x, double y) {
        for (const Placement& c : centers)
            if (std::abs(x - c.cx) < spec.box_l / 2 + 0.1 &&
                std::abs(y - c.cy) < spec.box_w / 2 + 0.1)
                return true;
        return false;
    };
    const double r1 = spec.ground_inner, r2 = spec.ground_outer;
    const double area = M_PI * (r2 * r2 - r1 * r1);
    const int n_ground = static_cast<int>(std::lround(spec.ground_density * area));
    for (int i = 0; i < n_ground; ++i) {
        double rho = r2, theta = 0.0;
        for (int tries = 0; tries < 64; ++tries) {
            const double u = rng.uniform();
            rho = std::sqrt(r1 * r1 + u * (r2 * r2 - r1 * r1));
            theta = rng.uniform(-M_PI, M_PI);
            if (rng.uniform() < std::exp(-spec.falloff * (rho - r1))) break;
        }
        const double x = rho * std::cos(theta);
        const double y = rho * std::sin(theta);
        if (inside_footprint(x, y)) continue;
        cloud.points.push_back({x, y, 0.0, rng.uniform(0.1, 0.5)});
        cloud.semantic.push_back(kGroundClass);
        cloud.instance.push_back(0);
    }

    if (spec.wall) {
        const double rho_wall = spec.ground_outer + 1.0;
        const double wall_h = 2.5;
        const int n_wall = static_cast<int>(std::lround(
            0.5 * spec.ground_density * 2.0 * M_PI * rho_wall * wall_h *
            std::exp(-spec.falloff * (rho_wall - r1))));
        for (int i = 0; i < n_wall; ++i) {
            const double theta = rng.uniform(-M_PI, M_PI);
            const double rho = rho_wall + rng.uniform(-0.05, 0.05);
            cloud.points.push_back({rho * std::cos(theta), rho * std::sin(theta),
                                    rng.uniform(0.0, wall_h), rng.uniform(0.2, 0.6)});
            cloud.semantic.push_back(kWallClass);
            cloud.instance.push_back(0);
        }
    }

    if (spec.noise_sigma > 0.0) {
        for (Point& p : cloud.points) {
            p.x += rng.normal(0.0, spec.noise_sigma);
            p.y += rng.normal(0.0, spec.noise_sigma);
            p.z += rng.normal(0.0, spec.noise_sigma);
        }
    }
    return cloud;
}

PointCloud augment(const PointCloud& cloud, const AugmentParams& params) {
    if (params.scale <= 0.0)
        throw std::invalid_argument("augment: scale must be positive");
    PointCloud out = cloud;
    const double c = std::cos(params.rotation), s = std::sin(params.rotation);
    for (Point& p : out.points) {
        const double x = p.x * c - p.y * s;
        const double y = p.x * s + p.y * c;
        p.x = params.flip_x ? -x : x;
        p.y = params.flip_y ? -y : y;
        p.x *= params.scale;
        p.y *= params.scale;
        p.z *= params.scale;
    }
    if (params.noise_sigma > 0.0) {
        Rng rng(derive_seed(params.seed, "augment-noise"));
        for (Point& p : out.points) {
            p.x += rng.normal(0.0, params.noise_sigma);
            p.y += rng.normal(0.0, params.noise_sigma);
            p.z += rng.normal(0.0, params.noise_sigma);
        }
    }
    return out;
}

}  // namespace panoptiq
