#pragma once

#include <agem/core.hpp>

#include <array>
#include <cstddef>
#include <initializer_list>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace agem {

struct Shape {
    std::size_t n = 1;
    std::size_t c = 1;
    std::size_t h = 1;
    std::size_t w = 1;

    constexpr std::size_t size() const { return n * c * h * w; }
    constexpr std::size_t spatial() const { return h * w; }
    constexpr std::size_t per_item() const { return c * h * w; }

    friend constexpr bool operator==(const Shape&, const Shape&) = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
               std::to_string(w) + ")";
    }
};

/// Dense (batch, channel, height, width) array, row-major.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, real fill = 0) : shape_(shape), data_(shape.size(), fill) {}

    Tensor(Shape shape, std::vector<real> data) : shape_(shape), data_(std::move(data)) {
        require_shape(data_.size() == shape_.size(),
                      "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                          shape_.str());
    }

    static Tensor scalar(real v) { return Tensor(Shape{1, 1, 1, 1}, v); }

    /// A (1, values.size(), 1, 1) tensor; the layout used for descriptors.
    static Tensor vector(std::vector<real> values) {
        const Shape s{1, values.size(), 1, 1};
        return Tensor(s, std::move(values));
    }

    static Tensor vector(std::initializer_list<real> values) {
        return vector(std::vector<real>(values));
    }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<const real> data() const { return data_; }
    std::span<real> data() { return data_; }
    const std::vector<real>& values() const { return data_; }

    real operator[](std::size_t i) const { return data_[i]; }
    real& operator[](std::size_t i) { return data_[i]; }

    std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }
    real at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[offset(n, c, h, w)];
    }
    real& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data_[offset(n, c, h, w)];
    }

    /// Scalar value of a single-element tensor.
    real item() const {
        require_shape(data_.size() == 1, "item() on tensor of shape " + shape_.str());
        return data_[0];
    }

    Tensor reshaped(Shape s) const {
        require_shape(s.size() == shape_.size(), "reshape " + shape_.str() + " -> " + s.str());
        return Tensor(s, data_);
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_{0, 0, 0, 0};
    std::vector<real> data_;
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), real(0)); }

template <class Rng>
Tensor random_normal(Shape shape, Rng& rng, real mean = 0, real stddev = 1) {
    std::normal_distribution<real> dist(mean, stddev);
    Tensor t(shape);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

template <class Rng>
Tensor random_uniform(Shape shape, Rng& rng, real lo = 0, real hi = 1) {
    std::uniform_real_distribution<real> dist(lo, hi);
    Tensor t(shape);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

/// Concatenates along the batch axis; all items must share (c, h, w).
inline Tensor stack_batch(std::span<const Tensor> items) {
    require_shape(!items.empty(), "stack_batch of zero tensors");
    const Shape first = items.front().shape();
    Shape out = first;
    out.n = 0;
    for (const auto& t : items) {
        require_shape(t.shape().c == first.c && t.shape().h == first.h && t.shape().w == first.w,
                      "stack_batch shape mismatch " + t.shape().str() + " vs " + first.str());
        out.n += t.shape().n;
    }
    std::vector<real> data;
    data.reserve(out.size());
    for (const auto& t : items) data.insert(data.end(), t.data().begin(), t.data().end());
    return Tensor(out, std::move(data));
}

} // namespace agem
