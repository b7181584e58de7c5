#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace panoptiq {

// Dense row-major double tensor. The tape restricts structural operations to
// rank-2; vectors are stored as 1xN or Nx1 matrices.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> v;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s, double fill = 0.0) : shape(std::move(s)) {
        std::size_t n = 1;
        for (std::size_t d : shape) {
            if (d == 0) throw std::invalid_argument("Tensor: zero dimension");
            n *= d;
        }
        v.assign(n, fill);
    }

    static Tensor zeros(std::size_t r, std::size_t c) { return Tensor({r, c}); }

    static Tensor full(std::size_t r, std::size_t c, double value) {
        Tensor t({r, c});
        t.v.assign(t.v.size(), value);
        return t;
    }

    static Tensor scalar(double value) {
        Tensor t({1, 1});
        t.v[0] = value;
        return t;
    }

    static Tensor row(std::vector<double> values) {
        Tensor t;
        t.shape = {1, values.size()};
        t.v = std::move(values);
        return t;
    }

    static Tensor column(std::vector<double> values) {
        Tensor t;
        t.shape = {values.size(), 1};
        t.v = std::move(values);
        return t;
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        Tensor t;
        t.shape = {rows.size(), rows.begin()->size()};
        t.v.reserve(rows.size() * rows.begin()->size());
        for (const auto& r : rows) {
            if (r.size() != t.shape[1]) throw std::invalid_argument("Tensor: ragged rows");
            t.v.insert(t.v.end(), r.begin(), r.end());
        }
        return t;
    }

    std::size_t size() const { return v.size(); }

    bool is_matrix() const { return shape.size() == 2; }

    std::size_t rows() const {
        if (!is_matrix()) throw std::logic_error("Tensor: rows() on non-matrix");
        return shape[0];
    }

    std::size_t cols() const {
        if (!is_matrix()) throw std::logic_error("Tensor: cols() on non-matrix");
        return shape[1];
    }

    double& at(std::size_t i, std::size_t j) { return v[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return v[i * cols() + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }
};

}  // namespace panoptiq
