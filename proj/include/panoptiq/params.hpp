#pragma once

#include <map>
#include <string>

#include "panoptiq/rng.hpp"
#include "panoptiq/tape.hpp"
#include "panoptiq/tensor.hpp"

namespace panoptiq {

// Named model parameters with deterministic iteration order.
struct ParamStore {
    std::map<std::string, Tensor> values;

    bool has(const std::string& name) const { return values.count(name) > 0; }

    Tensor& at(const std::string& name) {
        const auto it = values.find(name);
        if (it == values.end()) throw std::runtime_error("params: unknown '" + name + "'");
        return it->second;
    }

    const Tensor& at(const std::string& name) const {
        const auto it = values.find(name);
        if (it == values.end()) throw std::runtime_error("params: unknown '" + name + "'");
        return it->second;
    }

    // Xavier-normal weight seeded per parameter name, so initialization does
    // not depend on creation order.
    void add_linear(const std::string& name, std::size_t fan_in, std::size_t fan_out,
                    std::uint64_t master_seed) {
        Tensor w({fan_in, fan_out});
        Rng rng(derive_seed(master_seed, name));
        const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
        for (double& v : w.v) v = rng.normal(0.0, sigma);
        values[name + ".w"] = std::move(w);
        values[name + ".b"] = Tensor({1, fan_out});
    }

    void add_layer_norm(const std::string& name, std::size_t dim) {
        values[name + ".g"] = Tensor::full(1, dim, 1.0);
        values[name + ".b"] = Tensor({1, dim});
    }

    void add_gaussian(const std::string& name, std::size_t rows, std::size_t cols,
                      double sigma, std::uint64_t master_seed) {
        Tensor t({rows, cols});
        Rng rng(derive_seed(master_seed, name));
        for (double& v : t.v) v = rng.normal(0.0, sigma);
        values[name] = std::move(t);
    }
};

// Lazily binds store parameters onto one tape for a forward/backward pass.
class ParamBinding {
public:
    ParamBinding(Tape& tape, const ParamStore& store) : tape_(&tape), store_(&store) {}

    Var use(const std::string& name) {
        const auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        const Var v = tape_->input(store_->at(name));
        bound_.emplace(name, v);
        return v;
    }

    // Pre-binds an existing tape variable under a parameter name (shadows the
    // store); used by gradient checks that feed parameters as graph inputs.
    void bind(const std::string& name, Var v) { bound_[name] = v; }

    // Gradients for every bound parameter; valid after tape.backward().
    std::map<std::string, Tensor> grads() const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, var] : bound_) out[name] = tape_->grad(var);
        return out;
    }

    const std::map<std::string, Var>& bound() const { return bound_; }
    Tape& tape() { return *tape_; }

private:
    Tape* tape_;
    const ParamStore* store_;
    std::map<std::string, Var> bound_;
};

// layer_norm followed by the learned affine pair `<prefix>.g` / `<prefix>.b`.
inline Var layer_norm_affine(Tape& t, ParamBinding& p, Var x, const std::string& prefix) {
    return t.add_rowvec(t.mul_rowvec(t.layer_norm(x), p.use(prefix + ".g")),
                        p.use(prefix + ".b"));
}

inline Var linear_layer(Tape& t, ParamBinding& p, Var x, const std::string& prefix) {
    return t.linear(x, p.use(prefix + ".w"), p.use(prefix + ".b"));
}

}  // namespace panoptiq
