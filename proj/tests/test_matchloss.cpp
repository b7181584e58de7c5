#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "panoptiq/matchloss.hpp"
#include "panoptiq/rng.hpp"

using namespace panoptiq;

namespace {

// Exhaustive minimum over injective target->query maps, enumerated in
// lexicographic order so ties keep the smallest vector.
struct BruteResult {
    std::vector<int> map;
    double total = 0.0;
};

void brute_recurse(const Tensor& cost, std::size_t row, std::vector<int>& current,
                   std::vector<char>& used, double partial, BruteResult& best) {
    if (row == cost.rows()) {
        if (partial < best.total) {
            best.total = partial;
            best.map = current;
        }
        return;
    }
    for (std::size_t q = 0; q < cost.cols(); ++q) {
        if (used[q]) continue;
        used[q] = 1;
        current[row] = static_cast<int>(q);
        brute_recurse(cost, row + 1, current, used, partial + cost.at(row, q), best);
        used[q] = 0;
    }
}

BruteResult brute_force_assignment(const Tensor& cost) {
    BruteResult best;
    best.total = std::numeric_limits<double>::infinity();
    std::vector<int> current(cost.rows(), -1);
    std::vector<char> used(cost.cols(), 0);
    brute_recurse(cost, 0, current, used, 0.0, best);
    // recompute the total in row order exactly as the implementation does
    best.total = 0.0;
    for (std::size_t r = 0; r < cost.rows(); ++r) best.total += cost.at(r, best.map[r]);
    return best;
}

Tensor random_cost(Rng& rng, std::size_t t, std::size_t q, double lo = -5.0,
                   double hi = 5.0) {
    Tensor c({t, q});
    for (double& v : c.v) v = rng.uniform(lo, hi);
    return c;
}

ClassCatalog catalog() { return ClassCatalog::desk_default(); }

// Small synthetic prediction + targets for loss assembly tests.
struct LossFixture {
    HeadConfig head;
    ParamStore store;
    VoxelScene scene;
    SceneTargets targets;
    PointCloud cloud;

    explicit LossFixture(std::uint64_t seed, int queries = 4, int layers = 1) {
        head.queries = queries;
        head.layers = layers;
        head.dim = 8;
        head.num_classes = 4;
        head.embed.dim = 8;
        init_head_params(store, head, seed);

        SceneSpec spec;
        spec.layout = SceneSpec::Layout::Ring;
        spec.instance_count = 2;
        spec.ring_radii = {10.0};
        spec.ground_density = 0.2;
        spec.density = 1.0;
        spec.seed = seed;
        cloud = generate_scene(spec);
        scene = voxelize(cloud, VoxelConfig{});
        build_targets(scene, cloud, catalog());
        targets = SceneTargets::from_scene(scene, catalog());
    }
};

}  // namespace

TEST_CASE("focal loss hand values") {
    CHECK(focal_loss({0.5}, {1}, 0.0, 1.0) ==
          doctest::Approx(0.6931471805599453).epsilon(1e-12));
    CHECK(focal_loss({1.0 - 1e-9}, {1}, 2.0, 0.25) < 1e-18);
    CHECK(focal_loss({0.9}, {1}, 2.0, 0.25) ==
          doctest::Approx(0.25 * 0.01 * 0.10536051565782628).epsilon(1e-9));
    // clipping keeps exact 0/1 probabilities finite
    CHECK(std::isfinite(focal_loss({0.0, 1.0}, {1, 0}, 2.0, 0.25)));
}

TEST_CASE("dice loss hand values") {
    CHECK(dice_loss({1.0, 0.0, 1.0}, {1, 0, 1}, 1.0) == 0.0);
    // disjoint with equal mass a: 1 - eps/(2a+eps)
    CHECK(dice_loss({1.0, 0.0}, {0, 1}, 1.0) == doctest::Approx(1.0 - 1.0 / 3.0));
    CHECK(dice_loss({1.0, 1.0, 0.0, 0.0}, {1, 0, 0, 0}, 1.0) == doctest::Approx(0.25));
}

TEST_CASE("hungarian hand cases") {
    SUBCASE("2x2 with a tie-free minimum") {
        const Assignment a = hungarian(Tensor::matrix({{1.0, 2.0}, {2.0, 1.0}}));
        CHECK(a.target_to_query == std::vector<int>{0, 1});
        CHECK(a.total_cost == 2.0);
    }
    SUBCASE("1x1") {
        const Assignment a = hungarian(Tensor::matrix({{5.0}}));
        CHECK(a.target_to_query == std::vector<int>{0});
        CHECK(a.total_cost == 5.0);
    }
    SUBCASE("3x3 brute-force verified") {
        const Assignment a =
            hungarian(Tensor::matrix({{4.0, 1.0, 3.0}, {2.0, 0.0, 5.0}, {3.0, 2.0, 2.0}}));
        CHECK(a.target_to_query == std::vector<int>{1, 0, 2});
        CHECK(a.total_cost == 5.0);
    }
    SUBCASE("rectangular uses spare queries") {
        const Assignment a = hungarian(Tensor::matrix({{9.0, 1.0, 9.0, 0.5}}));
        CHECK(a.target_to_query == std::vector<int>{3});
    }
    SUBCASE("more targets than queries is rejected") {
        CHECK_THROWS_AS(hungarian(Tensor::matrix({{1.0}, {2.0}})), std::invalid_argument);
    }
    SUBCASE("ties resolve to the lexicographically smallest vector") {
        // all-equal costs: any permutation is optimal
        const Assignment a = hungarian(Tensor::full(3, 5, 1.0));
        CHECK(a.target_to_query == std::vector<int>{0, 1, 2});
    }
}

TEST_CASE("hungarian equals exhaustive brute force on 300 random matrices") {
    Rng rng(400);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t t = static_cast<std::size_t>(rng.uniform_int(1, 6));
        const std::size_t q =
            static_cast<std::size_t>(rng.uniform_int(static_cast<int>(t), 8));
        const Tensor cost = random_cost(rng, t, q);
        const Assignment fast = hungarian(cost);
        const BruteResult brute = brute_force_assignment(cost);
        CHECK(fast.total_cost == brute.total);
        CHECK(fast.target_to_query == brute.map);
    }
}

TEST_CASE("adding a constant to a cost row keeps the argmin assignment") {
    Rng rng(401);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor cost = random_cost(rng, 3, 5);
        Tensor shifted = cost;
        const std::size_t row = static_cast<std::size_t>(rng.uniform_int(0, 2));
        const double delta = rng.uniform(-3.0, 3.0);
        for (std::size_t qx = 0; qx < 5; ++qx) shifted.at(row, qx) += delta;
        CHECK(hungarian(cost).target_to_query == hungarian(shifted).target_to_query);
    }
}

TEST_CASE("matching cost: dominance, symmetry, and a term-by-term oracle") {
    LossWeights w;

    SUBCASE("identical queries give identical columns") {
        Tensor cls = Tensor::matrix({{2.0, -1.0, 0.0, 0.5, -0.5}, {2.0, -1.0, 0.0, 0.5, -0.5}});
        Tensor mask = Tensor::matrix({{1.0, -1.0, 0.5}, {1.0, -1.0, 0.5}});
        SceneTargets t;
        t.count = 2;
        t.voxels = 3;
        t.masks = Tensor::matrix({{1.0, 0.0, 0.0}, {0.0, 1.0, 1.0}});
        t.class_ids = {1, 2};
        t.is_thing = {0, 0};
        HeadConfig head;
        head.queries = 2;
        head.num_classes = 4;
        LayerView view{&cls, &mask, nullptr};
        const Tensor cost = matching_cost(view, t, head, w);
        for (std::size_t ti = 0; ti < 2; ++ti) CHECK(cost.at(ti, 0) == cost.at(ti, 1));
    }

    SUBCASE("a near-perfect prediction is its target's row minimum") {
        // query 0 nails target 0 (class 3, mask voxel 0); query 1 is noise
        Tensor cls = Tensor::matrix({{-9.0, -9.0, 9.0, -9.0, -9.0}, {0.1, 0.2, -0.1, 0.0, 0.3}});
        Tensor mask = Tensor::matrix({{9.0, -9.0, -9.0}, {0.2, 0.1, -0.2}});
        SceneTargets t;
        t.count = 1;
        t.voxels = 3;
        t.masks = Tensor::matrix({{1.0, 0.0, 0.0}});
        t.class_ids = {3};
        t.is_thing = {1};
        HeadConfig head;
        head.queries = 2;
        head.num_classes = 4;
        LayerView view{&cls, &mask, nullptr};
        const Tensor cost = matching_cost(view, t, head, w);
        CHECK(cost.at(0, 0) < cost.at(0, 1));
    }

    SUBCASE("2 targets x 3 queries matches an independent recomputation") {
        Rng rng(402);
        Tensor cls({3, 5});
        for (double& v : cls.v) v = rng.uniform(-2, 2);
        Tensor mask({3, 4}), pos({3, 4});
        for (double& v : mask.v) v = rng.uniform(-2, 2);
        for (double& v : pos.v) v = rng.uniform(-2, 2);
        SceneTargets t;
        t.count = 2;
        t.voxels = 4;
        t.masks = Tensor::matrix({{1.0, 1.0, 0.0, 0.0}, {0.0, 0.0, 1.0, 0.0}});
        t.class_ids = {3, 1};
        t.is_thing = {1, 0};
        HeadConfig head;
        head.queries = 3;
        head.num_classes = 4;
        LayerView view{&cls, &mask, &pos};
        const Tensor cost = matching_cost(view, t, head, w);

        for (std::size_t ti = 0; ti < 2; ++ti)
            for (std::size_t q = 0; q < 3; ++q) {
                // softmax class probability
                double mx = -1e300, sum = 0.0;
                for (std::size_t j = 0; j < 5; ++j) mx = std::max(mx, cls.at(q, j));
                for (std::size_t j = 0; j < 5; ++j) sum += std::exp(cls.at(q, j) - mx);
                const std::size_t slot = static_cast<std::size_t>(t.class_ids[ti] - 1);
                const double p_cls = std::exp(cls.at(q, slot) - mx) / sum;

                std::vector<double> pm, pp;
                std::vector<std::uint8_t> tm;
                for (std::size_t vi = 0; vi < 4; ++vi) {
                    pm.push_back(1.0 / (1.0 + std::exp(-mask.at(q, vi))));
                    pp.push_back(1.0 / (1.0 + std::exp(-pos.at(q, vi))));
                    tm.push_back(t.masks.at(ti, vi) > 0 ? 1 : 0);
                }
                const double expect = w.lf * -std::log(p_cls) +
                                      w.lbf * focal_loss(pm, tm, w.gamma, w.alpha) +
                                      w.ldf * dice_loss(pm, tm, w.dice_eps) +
                                      w.lfp * dice_loss(pp, tm, w.dice_eps);
                CHECK(cost.at(ti, q) == doctest::Approx(expect).epsilon(1e-12));
            }
    }
}

TEST_CASE("total loss: zero targets leaves only no-object classification") {
    LossFixture fx(500);
    // strip the targets
    SceneTargets empty;
    empty.count = 0;
    empty.voxels = fx.targets.voxels;

    Tape tape;
    ParamBinding params(tape, fx.store);
    const HeadForward fwd = head_forward(tape, params, fx.scene, fx.head);
    LossWeights w;
    const TotalLoss loss = total_loss(tape, fwd, empty, fx.head, w);

    REQUIRE(loss.per_layer.size() == 2);
    CHECK(loss.per_layer[0].classification == 0.0);  // layer 0 skips it
    CHECK(loss.per_layer[0].mask_focal == 0.0);
    CHECK(loss.per_layer[1].classification > 0.0);
    CHECK(loss.per_layer[1].mask_dice == 0.0);

    // the scalar equals lf * focal of the no-object probabilities at layer 1
    const Tensor& cls = tape.val(fwd.layers[1].C);
    std::vector<double> p;
    std::vector<std::uint8_t> t;
    for (std::size_t q = 0; q < cls.rows(); ++q) {
        double mx = -1e300, sum = 0.0;
        for (std::size_t j = 0; j < cls.cols(); ++j) mx = std::max(mx, cls.at(q, j));
        for (std::size_t j = 0; j < cls.cols(); ++j) sum += std::exp(cls.at(q, j) - mx);
        p.push_back(std::exp(cls.at(q, cls.cols() - 1) - mx) / sum);
        t.push_back(1);
    }
    CHECK(tape.val(loss.total).v[0] ==
          doctest::Approx(w.lf * focal_loss(p, t, w.gamma, w.alpha)).epsilon(1e-12));
}

TEST_CASE("total loss: near-perfect predictions leave only residual classification") {
    // hand-build a two-voxel scene with one target and force logits
    LossFixture fx(501, 2, 0);
    SceneTargets t;
    t.count = 1;
    t.voxels = fx.targets.voxels;
    t.masks = Tensor({1, t.voxels});
    for (std::size_t vi = 0; vi < t.voxels; ++vi) t.masks.at(0, vi) = vi % 2 == 0 ? 1.0 : 0.0;
    t.class_ids = {3};
    t.is_thing = {1};

    Tape tape;
    ParamBinding params(tape, fx.store);
    const HeadForward fwd = head_forward(tape, params, fx.scene, fx.head);
    LossWeights w;
    const TotalLoss loss = total_loss(tape, fwd, t, fx.head, w);
    // layer 0 has no classification; mask terms dominate and are finite
    CHECK(loss.per_layer[0].classification == 0.0);
    CHECK(std::isfinite(tape.val(loss.total).v[0]));
}

TEST_CASE("total loss: single-target numeric case matches a hand-assembled sum") {
    LossFixture fx(502, 2, 1);
    REQUIRE(fx.targets.count >= 1);
    // keep exactly one target so the assignment is unambiguous to recompute
    SceneTargets t;
    t.count = 1;
    t.voxels = fx.targets.voxels;
    t.masks = Tensor({1, t.voxels});
    for (std::size_t vi = 0; vi < t.voxels; ++vi)
        t.masks.at(0, vi) = fx.targets.masks.at(0, vi);
    t.class_ids = {fx.targets.class_ids[0]};
    t.is_thing = {fx.targets.is_thing[0]};

    Tape tape;
    ParamBinding params(tape, fx.store);
    const HeadForward fwd = head_forward(tape, params, fx.scene, fx.head);
    LossWeights w;
    const TotalLoss loss = total_loss(tape, fwd, t, fx.head, w);

    double expect = 0.0;
    for (std::size_t l = 0; l < fwd.layers.size(); ++l) {
        const Tensor& cls = tape.val(fwd.layers[l].C);
        const Tensor& mask = tape.val(fwd.layers[l].M);
        const Tensor& pos = tape.val(fwd.layers[l].MP);
        LayerView view{&cls, &mask, &pos};
        const Tensor cost = matching_cost(view, t, fx.head, w);
        const Assignment assign = hungarian(cost);
        const std::size_t mq = static_cast<std::size_t>(assign.target_to_query[0]);

        std::vector<double> pm, pp;
        std::vector<std::uint8_t> tm;
        for (std::size_t vi = 0; vi < t.voxels; ++vi) {
            pm.push_back(1.0 / (1.0 + std::exp(-mask.at(mq, vi))));
            pp.push_back(1.0 / (1.0 + std::exp(-pos.at(mq, vi))));
            tm.push_back(t.masks.at(0, vi) > 0 ? 1 : 0);
        }
        expect += w.lbf * focal_loss(pm, tm, w.gamma, w.alpha) +
                  w.ldf * dice_loss(pm, tm, w.dice_eps) +
                  w.lfp * dice_loss(pp, tm, w.dice_eps);

        if (l > 0) {
            std::vector<double> pc;
            std::vector<std::uint8_t> tc;
            for (std::size_t q = 0; q < cls.rows(); ++q) {
                double mx = -1e300, sum = 0.0;
                for (std::size_t j = 0; j < cls.cols(); ++j) mx = std::max(mx, cls.at(q, j));
                for (std::size_t j = 0; j < cls.cols(); ++j)
                    sum += std::exp(cls.at(q, j) - mx);
                const std::size_t slot =
                    q == mq ? static_cast<std::size_t>(t.class_ids[0] - 1) : cls.cols() - 1;
                pc.push_back(std::exp(cls.at(q, slot) - mx) / sum);
                tc.push_back(1);
            }
            expect += w.lf * focal_loss(pc, tc, w.gamma, w.alpha);
        }
    }
    CHECK(tape.val(loss.total).v[0] == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("total loss is invariant to query and target permutations") {
    LossFixture fx(503, 6, 1);
    REQUIRE(fx.targets.count >= 2);

    Tape base_tape;
    ParamBinding base_params(base_tape, fx.store);
    const HeadForward base_fwd = head_forward(base_tape, base_params, fx.scene, fx.head);
    LossWeights w;
    const double base = base_tape.val(
        total_loss(base_tape, base_fwd, fx.targets, fx.head, w).total).v[0];

    SUBCASE("query order") {
        ParamStore permuted = fx.store;
        Tensor& q = permuted.at("queries");
        const Tensor orig = q;
        const std::size_t n = q.rows();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t d = 0; d < q.cols(); ++d)
                q.at(i, d) = orig.at((i + 3) % n, d);
        Tape tape;
        ParamBinding params(tape, permuted);
        const HeadForward fwd = head_forward(tape, params, fx.scene, fx.head);
        const double shuffled =
            tape.val(total_loss(tape, fwd, fx.targets, fx.head, w).total).v[0];
        CHECK(shuffled == doctest::Approx(base).epsilon(1e-10));
    }

    SUBCASE("target order") {
        SceneTargets rev;
        rev.count = fx.targets.count;
        rev.voxels = fx.targets.voxels;
        rev.masks = Tensor({rev.count, rev.voxels});
        for (std::size_t ti = 0; ti < rev.count; ++ti) {
            const std::size_t src = rev.count - 1 - ti;
            rev.class_ids.push_back(fx.targets.class_ids[src]);
            rev.is_thing.push_back(fx.targets.is_thing[src]);
            for (std::size_t vi = 0; vi < rev.voxels; ++vi)
                rev.masks.at(ti, vi) = fx.targets.masks.at(src, vi);
        }
        Tape tape;
        ParamBinding params(tape, fx.store);
        const HeadForward fwd = head_forward(tape, params, fx.scene, fx.head);
        const double shuffled = tape.val(total_loss(tape, fwd, rev, fx.head, w).total).v[0];
        CHECK(shuffled == doctest::Approx(base).epsilon(1e-10));
    }
}

TEST_CASE("loss term weight combinations assemble exactly the configured terms") {
    LossFixture fx(504);
    struct Row {
        double lce, lbf, ldf;
    };
    for (const Row& row : {Row{1, 0, 1}, Row{0, 1, 1}, Row{0, 1, 2}}) {
        LossWeights w;
        w.lce = row.lce;
        w.lbf = row.lbf;
        w.ldf = row.ldf;
        Tape tape;
        ParamBinding params(tape, fx.store);
        const HeadForward fwd = head_forward(tape, params, fx.scene, fx.head);
        const TotalLoss loss = total_loss(tape, fwd, fx.targets, fx.head, w);
        for (const LayerLossTerms& terms : loss.per_layer) {
            if (row.lce == 0) CHECK(terms.mask_bce == 0.0);
            if (row.lbf == 0) CHECK(terms.mask_focal == 0.0);
            if (row.lce > 0) CHECK(terms.mask_bce > 0.0);
            if (row.lbf > 0) CHECK(terms.mask_focal > 0.0);
            CHECK(terms.mask_dice > 0.0);
        }
    }
}

TEST_CASE("loss terms pass gradient checks") {
    Rng rng(505);

    SUBCASE("binary focal via the tape") {
        Tensor target({2, 5});
        for (double& v : target.v) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
        auto graph = [&](Tape& t, const std::vector<Var>& in) {
            Var p = t.clamp(t.sigmoid(in[0]), 1e-12, 1.0 - 1e-12);
            Var pt = t.where(target, p, t.affine(p, -1.0, 1.0));
            Var onem = t.affine(pt, -1.0, 1.0);
            Var elems = t.affine(t.mul(t.mul(onem, onem), t.log(pt)), -0.25, 0.0);
            return t.mean_all(elems);
        };
        Tensor point({2, 5});
        for (double& v : point.v) v = rng.uniform(-2, 2);
        CHECK(grad_check(graph, {point}, 1e-5).max_rel_err < 1e-4);
    }

    SUBCASE("dice via the tape") {
        Tensor target({3, 4});
        for (double& v : target.v) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        auto graph = [&](Tape& t, const std::vector<Var>& in) {
            Var p = t.sigmoid(in[0]);
            Var tgt = t.constant(target);
            Var inter = t.sum_axis(t.mul(p, tgt), 1);
            Var num = t.affine(inter, 2.0, 1.0);
            Var den = t.affine(t.add(t.sum_axis(p, 1), t.sum_axis(tgt, 1)), 1.0, 1.0);
            return t.mean_all(t.affine(t.div(num, den), -1.0, 1.0));
        };
        Tensor point({3, 4});
        for (double& v : point.v) v = rng.uniform(-2, 2);
        CHECK(grad_check(graph, {point}, 1e-5).max_rel_err < 1e-4);
    }

    SUBCASE("full loss with frozen assignment, over query parameters") {
        // seed chosen so every mask-gate entry clears the finite-difference
        // step by a wide margin (the gate is a hard threshold on M)
        LossFixture fx(510, 3, 1);
        LossWeights w;

        // assignments fixed at the base point; the matching itself is a
        // detached, piecewise-constant choice
        std::vector<Assignment> frozen;
        {
            Tape t;
            ParamBinding pb(t, fx.store);
            const HeadForward fwd = head_forward(t, pb, fx.scene, fx.head);
            for (const LayerLossTerms& lt :
                 total_loss(t, fwd, fx.targets, fx.head, w).per_layer)
                frozen.push_back(lt.assignment);
        }

        auto graph = [&](Tape& t, const std::vector<Var>& in) {
            ParamBinding pb(t, fx.store);
            pb.bind("queries", in[0]);
            const HeadForward fwd = head_forward(t, pb, fx.scene, fx.head);
            return total_loss(t, fwd, fx.targets, fx.head, w, &frozen).total;
        };
        CHECK(grad_check(graph, {fx.store.at("queries")}, 1e-5).max_rel_err < 1e-4);
    }
}
