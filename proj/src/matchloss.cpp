#include "panoptiq/matchloss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace panoptiq {

namespace {

constexpr double kProbClip = 1e-12;

double clip_prob(double p) { return std::min(std::max(p, kProbClip), 1.0 - kProbClip); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double focal_element(double p_t, double gamma, double alpha) {
    p_t = clip_prob(p_t);
    return -alpha * std::pow(1.0 - p_t, gamma) * std::log(p_t);
}

// Shortest-augmenting-path solver; rows <= cols. Returns row -> col.
std::vector<int> jv_solve(const std::vector<double>& a, int n, int m) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, kInf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = 0;
            double delta = kInf;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = a[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= m; ++j)
        if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

// Minimum completion cost for rows >= first_row over the free columns,
// summed in row order together with the fixed prefix.
double best_total_with_prefix(const Tensor& cost, const std::vector<int>& prefix,
                              int first_row, const std::vector<char>& col_used) {
    const int t = static_cast<int>(cost.rows());
    const int q = static_cast<int>(cost.cols());
    const int rows_left = t - first_row;

    std::vector<int> full(prefix.begin(), prefix.begin() + first_row);
    if (rows_left > 0) {
        std::vector<int> free_cols;
        for (int c = 0; c < q; ++c)
            if (!col_used[c]) free_cols.push_back(c);
        std::vector<double> reduced(static_cast<std::size_t>(rows_left) * free_cols.size());
        for (int r = 0; r < rows_left; ++r)
            for (std::size_t c = 0; c < free_cols.size(); ++c)
                reduced[r * free_cols.size() + c] = cost.at(first_row + r, free_cols[c]);
        const auto sub =
            jv_solve(reduced, rows_left, static_cast<int>(free_cols.size()));
        for (int r = 0; r < rows_left; ++r) full.push_back(free_cols[sub[r]]);
    }

    double total = 0.0;
    for (int r = 0; r < t; ++r) total += cost.at(r, full[r]);
    return total;
}

}  // namespace

LossWeights LossWeights::from_config(const Config& cfg) {
    LossWeights w;
    w.lf = cfg.get_double("loss.lf", w.lf);
    w.lbf = cfg.get_double("loss.lbf", w.lbf);
    w.ldf = cfg.get_double("loss.ldf", w.ldf);
    w.lfp = cfg.get_double("loss.lfp", w.lfp);
    w.lce = cfg.get_double("loss.lce", w.lce);
    w.gamma = cfg.get_double("loss.gamma", w.gamma);
    w.alpha = cfg.get_double("loss.alpha", w.alpha);
    w.dice_eps = cfg.get_double("loss.dice_eps", w.dice_eps);
    w.cost_position = cfg.get_bool("loss.cost_position", w.cost_position);
    w.cost_focal_class = cfg.get_bool("loss.cost_focal_class", w.cost_focal_class);
    w.position_things_only = cfg.get_bool("loss.position_things_only", w.position_things_only);
    for (double x : {w.lf, w.lbf, w.ldf, w.lfp, w.lce})
        if (x < 0.0) throw std::runtime_error("loss: weights must be >= 0");
    return w;
}

void LossWeights::apply_to(Config& cfg) const {
    cfg.set("loss.lf", lf);
    cfg.set("loss.lbf", lbf);
    cfg.set("loss.ldf", ldf);
    cfg.set("loss.lfp", lfp);
    cfg.set("loss.lce", lce);
    cfg.set("loss.gamma", gamma);
    cfg.set("loss.alpha", alpha);
    cfg.set("loss.dice_eps", dice_eps);
    cfg.set("loss.cost_position", cost_position);
    cfg.set("loss.cost_focal_class", cost_focal_class);
    cfg.set("loss.position_things_only", position_things_only);
}

double focal_loss(const std::vector<double>& probabilities,
                  const std::vector<std::uint8_t>& targets, double gamma, double alpha) {
    if (probabilities.size() != targets.size())
        throw std::invalid_argument("focal_loss: size mismatch");
    if (probabilities.empty()) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        const double p_t = targets[i] ? probabilities[i] : 1.0 - probabilities[i];
        sum += focal_element(p_t, gamma, alpha);
    }
    return sum / static_cast<double>(probabilities.size());
}

double dice_loss(const std::vector<double>& probabilities,
                 const std::vector<std::uint8_t>& target, double eps) {
    if (probabilities.size() != target.size())
        throw std::invalid_argument("dice_loss: size mismatch");
    double inter = 0.0, psum = 0.0, tsum = 0.0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        inter += probabilities[i] * target[i];
        psum += probabilities[i];
        tsum += target[i];
    }
    return 1.0 - (2.0 * inter + eps) / (psum + tsum + eps);
}

SceneTargets SceneTargets::from_scene(const VoxelScene& scene, const ClassCatalog& catalog) {
    if (!scene.has_targets)
        throw std::invalid_argument("targets: scene has no ground truth");
    SceneTargets t;
    t.count = scene.segments.size();
    t.voxels = scene.voxel_count();
    if (t.count > 0) {
        t.masks = Tensor({t.count, t.voxels});
        for (std::size_t s = 0; s < t.count; ++s) {
            const VoxelSegment& seg = scene.segments[s];
            t.class_ids.push_back(seg.class_id);
            t.is_thing.push_back(catalog.is_thing(seg.class_id) ? 1 : 0);
            for (std::size_t vi = 0; vi < t.voxels; ++vi)
                t.masks.at(s, vi) = seg.mask[vi] ? 1.0 : 0.0;
        }
    }
    return t;
}

Tensor matching_cost(const LayerView& layer, const SceneTargets& targets,
                     const HeadConfig& head, const LossWeights& weights) {
    const Tensor& cls = *layer.class_logits;
    const Tensor& msk = *layer.mask_logits;
    const std::size_t n = cls.rows();
    const std::size_t v = msk.cols();
    const std::size_t t = targets.count;
    if (t == 0) throw std::invalid_argument("matching_cost: no targets");

    // softmax class probabilities and sigmoid mask probabilities, once
    Tensor cls_prob = cls;
    for (std::size_t q = 0; q < n; ++q) {
        double mx = -HUGE_VAL;
        for (std::size_t j = 0; j < cls.cols(); ++j) mx = std::max(mx, cls.at(q, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < cls.cols(); ++j) {
            cls_prob.at(q, j) = std::exp(cls.at(q, j) - mx);
            sum += cls_prob.at(q, j);
        }
        for (std::size_t j = 0; j < cls.cols(); ++j) cls_prob.at(q, j) /= sum;
    }
    Tensor mask_prob = msk;
    for (double& x : mask_prob.v) x = sigmoid(x);
    Tensor pos_prob;
    const bool use_pos = layer.position_logits != nullptr && weights.cost_position &&
                         weights.lfp > 0.0;
    if (use_pos) {
        pos_prob = *layer.position_logits;
        for (double& x : pos_prob.v) x = sigmoid(x);
    }

    Tensor cost({t, n});
    for (std::size_t ti = 0; ti < t; ++ti) {
        const int slot = head.class_slot(targets.class_ids[ti]);
        double tsum = 0.0;
        for (std::size_t vi = 0; vi < v; ++vi) tsum += targets.masks.at(ti, vi);
        for (std::size_t q = 0; q < n; ++q) {
            double entry = 0.0;
            if (weights.lf > 0.0) {
                const double p = clip_prob(cls_prob.at(q, static_cast<std::size_t>(slot)));
                entry += weights.lf * (weights.cost_focal_class
                                           ? focal_element(p, weights.gamma, weights.alpha)
                                           : -std::log(p));
            }
            double focal_sum = 0.0, bce_sum = 0.0, inter = 0.0, psum = 0.0;
            double pos_inter = 0.0, pos_psum = 0.0;
            for (std::size_t vi = 0; vi < v; ++vi) {
                const double p = mask_prob.at(q, vi);
                const double tv = targets.masks.at(ti, vi);
                const double p_t = clip_prob(tv > 0.0 ? p : 1.0 - p);
                if (weights.lbf > 0.0)
                    focal_sum += -weights.alpha *
                                 std::pow(1.0 - p_t, weights.gamma) * std::log(p_t);
                if (weights.lce > 0.0) bce_sum += -std::log(p_t);
                inter += p * tv;
                psum += p;
                if (use_pos) {
                    pos_inter += pos_prob.at(q, vi) * tv;
                    pos_psum += pos_prob.at(q, vi);
                }
            }
            const double dv = static_cast<double>(v);
            entry += weights.lbf * focal_sum / dv;
            entry += weights.lce * bce_sum / dv;
            entry += weights.ldf *
                     (1.0 - (2.0 * inter + weights.dice_eps) /
                                (psum + tsum + weights.dice_eps));
            if (use_pos)
                entry += weights.lfp *
                         (1.0 - (2.0 * pos_inter + weights.dice_eps) /
                                    (pos_psum + tsum + weights.dice_eps));
            cost.at(ti, q) = entry;
        }
    }
    return cost;
}

Assignment hungarian(const Tensor& cost) {
    const int t = static_cast<int>(cost.rows());
    const int q = static_cast<int>(cost.cols());
    if (t > q) throw std::invalid_argument("hungarian: more targets than queries");
    for (double x : cost.v)
        if (!std::isfinite(x)) throw std::invalid_argument("hungarian: non-finite cost");

    Assignment out;
    if (t == 0) return out;

    // Fix rows in order, choosing for each the smallest column index whose
    // optimal completion achieves the minimal total. This pins ties to the
    // lexicographically smallest assignment vector.
    std::vector<int> prefix(t, -1);
    std::vector<char> col_used(q, 0);
    for (int r = 0; r < t; ++r) {
        int best_col = -1;
        double best_total = std::numeric_limits<double>::infinity();
        for (int c = 0; c < q; ++c) {
            if (col_used[c]) continue;
            prefix[r] = c;
            col_used[c] = 1;
            const double total = best_total_with_prefix(cost, prefix, r + 1, col_used);
            col_used[c] = 0;
            if (total < best_total) {
                best_total = total;
                best_col = c;
            }
        }
        prefix[r] = best_col;
        col_used[best_col] = 1;
    }

    out.target_to_query = prefix;
    for (int r = 0; r < t; ++r) out.total_cost += cost.at(r, prefix[r]);
    return out;
}

namespace {

// focal elements for a probability tensor on the tape
Var focal_terms(Tape& tape, Var probs, const Tensor& target01, double gamma, double alpha) {
    Var p = tape.clamp(probs, kProbClip, 1.0 - kProbClip);
    Var one_minus = tape.affine(p, -1.0, 1.0);
    Var p_t = tape.where(target01, p, one_minus);
    Var pow_term = gamma == 2.0 ? tape.mul(tape.affine(p_t, -1.0, 1.0),
                                           tape.affine(p_t, -1.0, 1.0))
                                : tape.powc(tape.affine(p_t, -1.0, 1.0), gamma);
    return tape.affine(tape.mul(pow_term, tape.log(p_t)), -alpha, 0.0);
}

Var dice_vector(Tape& tape, Var probs, const Tensor& target, double eps) {
    Var tgt = tape.constant(target);
    Var inter = tape.sum_axis(tape.mul(probs, tgt), 1);
    Var psum = tape.sum_axis(probs, 1);
    Var tsum = tape.sum_axis(tgt, 1);
    Var num = tape.affine(inter, 2.0, eps);
    Var den = tape.affine(tape.add(psum, tsum), 1.0, eps);
    return tape.affine(tape.div(num, den), -1.0, 1.0);
}

}  // namespace

TotalLoss total_loss(Tape& tape, const HeadForward& forward, const SceneTargets& targets,
                     const HeadConfig& head, const LossWeights& weights,
                     const std::vector<Assignment>* frozen_assignments) {
    TotalLoss result;
    result.total = tape.constant(Tensor::scalar(0.0));

    const std::size_t n_queries = static_cast<std::size_t>(head.queries);
    if (targets.count > n_queries)
        throw std::invalid_argument("total_loss: more targets than queries");

    for (std::size_t l = 0; l < forward.layers.size(); ++l) {
        const LayerVars& layer = forward.layers[l];
        LayerLossTerms terms;

        LayerView view;
        view.class_logits = &tape.val(layer.C);
        view.mask_logits = &tape.val(layer.M);
        view.position_logits = layer.MP.valid() ? &tape.val(layer.MP) : nullptr;

        if (targets.count > 0) {
            if (frozen_assignments != nullptr) {
                terms.assignment = (*frozen_assignments)[l];
            } else {
                const Tensor cost = matching_cost(view, targets, head, weights);
                terms.assignment = hungarian(cost);
            }
        }

        auto add_term = [&](Var term, double weight, double* slot) {
            *slot = tape.val(term).v[0];
            if (weight > 0.0)
                result.total = tape.add(result.total, tape.affine(term, weight, 0.0));
        };

        // classification: matched queries toward their class, the rest toward
        // no-object; skipped entirely for the pre-interaction output
        if (l > 0 && weights.lf > 0.0) {
            std::vector<std::size_t> slots(n_queries,
                                           static_cast<std::size_t>(head.no_object_slot()));
            for (std::size_t ti = 0; ti < targets.count; ++ti)
                slots[static_cast<std::size_t>(terms.assignment.target_to_query[ti])] =
                    static_cast<std::size_t>(head.class_slot(targets.class_ids[ti]));
            Var probs = tape.row_softmax(layer.C);
            Var p_t = tape.clamp(tape.gather_col_per_row(probs, slots), kProbClip,
                                 1.0 - kProbClip);
            Var pow_term =
                weights.gamma == 2.0
                    ? tape.mul(tape.affine(p_t, -1.0, 1.0), tape.affine(p_t, -1.0, 1.0))
                    : tape.powc(tape.affine(p_t, -1.0, 1.0), weights.gamma);
            Var elems = tape.affine(tape.mul(pow_term, tape.log(p_t)), -weights.alpha, 0.0);
            add_term(tape.mean_all(elems), weights.lf, &terms.classification);
        }

        if (targets.count > 0) {
            std::vector<std::size_t> matched;
            for (int qi : terms.assignment.target_to_query)
                matched.push_back(static_cast<std::size_t>(qi));

            Var mask_rows = tape.gather_rows(layer.M, matched);
            Var mask_prob = tape.sigmoid(mask_rows);

            if (weights.lbf > 0.0) {
                Var elems =
                    focal_terms(tape, mask_prob, targets.masks, weights.gamma, weights.alpha);
                add_term(tape.mean_all(elems), weights.lbf, &terms.mask_focal);
            }
            if (weights.lce > 0.0) {
                Var p = tape.clamp(mask_prob, kProbClip, 1.0 - kProbClip);
                Var p_t = tape.where(targets.masks, p, tape.affine(p, -1.0, 1.0));
                Var elems = tape.affine(tape.log(p_t), -1.0, 0.0);
                add_term(tape.mean_all(elems), weights.lce, &terms.mask_bce);
            }
            if (weights.ldf > 0.0) {
                Var dice = dice_vector(tape, mask_prob, targets.masks, weights.dice_eps);
                add_term(tape.mean_all(dice), weights.ldf, &terms.mask_dice);
            }

            if (layer.MP.valid() && weights.lfp > 0.0) {
                std::vector<std::size_t> pos_targets;
                for (std::size_t ti = 0; ti < targets.count; ++ti)
                    if (!weights.position_things_only || targets.is_thing[ti])
                        pos_targets.push_back(ti);
                if (!pos_targets.empty()) {
                    std::vector<std::size_t> pos_queries;
                    Tensor pos_masks({pos_targets.size(), targets.voxels});
                    for (std::size_t i = 0; i < pos_targets.size(); ++i) {
                        const std::size_t ti = pos_targets[i];
                        pos_queries.push_back(
                            static_cast<std::size_t>(terms.assignment.target_to_query[ti]));
                        for (std::size_t vi = 0; vi < targets.voxels; ++vi)
                            pos_masks.at(i, vi) = targets.masks.at(ti, vi);
                    }
                    Var rows = tape.gather_rows(layer.MP, pos_queries);
                    Var prob = tape.sigmoid(rows);
                    Var dice = dice_vector(tape, prob, pos_masks, weights.dice_eps);
                    add_term(tape.mean_all(dice), weights.lfp, &terms.position_dice);
                }
            }
        }

        result.per_layer.push_back(std::move(terms));
    }
    return result;
}

}  // namespace panoptiq
