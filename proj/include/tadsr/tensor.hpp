#pragma once

// Dense rank-4 (batch, channel, height, width) tensors. Every array the
// library touches is one of these, including parameters and scalars
// (a scalar is shape {1,1,1,1}; a linear-layer activation is {B,F,1,1}).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tadsr {

struct Shape {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    [[nodiscard]] constexpr std::size_t size() const noexcept {
        return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) *
               static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }
    [[nodiscard]] constexpr std::size_t plane() const noexcept {
        return static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }
    [[nodiscard]] constexpr std::size_t per_sample() const noexcept {
        return static_cast<std::size_t>(c) * plane();
    }
    [[nodiscard]] std::array<int, 4> dims() const noexcept { return {n, c, h, w}; }

    friend constexpr bool operator==(const Shape&, const Shape&) = default;

    [[nodiscard]] std::string str() const {
        std::ostringstream os;
        os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
        return os.str();
    }
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* where) {
    if (a != b) {
        throw ShapeError(std::string(where) + ": shape mismatch " + a.str() + " vs " + b.str());
    }
}

/// 64-byte aligned storage. Vectorized reductions peel according to the
/// address, so fixed alignment keeps results bitwise reproducible.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}  // NOLINT(google-explicit-constructor)

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
        return true;
    }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <class S>
class Tensor {
public:
    using value_type = S;
    using Storage = AlignedVector<S>;

    Tensor() = default;
    explicit Tensor(Shape shape, S fill = S(0)) : shape_(shape), data_(shape.size(), fill) {
        if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
            throw ShapeError("negative tensor extent " + shape.str());
        }
    }
    Tensor(Shape shape, Storage data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != shape_.size()) {
            throw ShapeError("data length does not match shape " + shape_.str());
        }
    }
    Tensor(Shape shape, const std::vector<S>& data) : Tensor(shape, Storage(data.begin(), data.end())) {}
    Tensor(Shape shape, std::initializer_list<S> data) : Tensor(shape, Storage(data)) {}

    static Tensor scalar(S v) { return Tensor(Shape{1, 1, 1, 1}, v); }

    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    [[nodiscard]] S* data() noexcept { return data_.data(); }
    [[nodiscard]] const S* data() const noexcept { return data_.data(); }
    [[nodiscard]] std::span<S> span() noexcept { return data_; }
    [[nodiscard]] std::span<const S> span() const noexcept { return data_; }
    [[nodiscard]] const Storage& vec() const noexcept { return data_; }

    S& operator[](std::size_t i) noexcept { return data_[i]; }
    const S& operator[](std::size_t i) const noexcept { return data_[i]; }

    [[nodiscard]] std::size_t offset(int n, int c, int y, int x) const noexcept {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }
    S& at(int n, int c, int y, int x) noexcept { return data_[offset(n, c, y, x)]; }
    const S& at(int n, int c, int y, int x) const noexcept { return data_[offset(n, c, y, x)]; }

    [[nodiscard]] S item() const {
        if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_.str());
        return data_[0];
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    /// Same data, new extents with the same element count.
    [[nodiscard]] Tensor reshaped(Shape s) const {
        if (s.size() != size()) throw ShapeError("reshape " + shape_.str() + " -> " + s.str());
        return Tensor(s, data_);
    }

    /// Copies samples [first, first+count) along the batch axis.
    [[nodiscard]] Tensor batch_slice(int first, int count) const {
        if (first < 0 || count < 0 || first + count > shape_.n) {
            throw ShapeError("batch_slice out of range on " + shape_.str());
        }
        Shape s = shape_;
        s.n = count;
        const auto per = shape_.per_sample();
        Storage out(data_.begin() + static_cast<std::ptrdiff_t>(first * per),
                           data_.begin() + static_cast<std::ptrdiff_t>((first + count) * per));
        return Tensor(s, std::move(out));
    }

    Tensor& operator+=(const Tensor& o) {
        require_same_shape(shape_, o.shape_, "Tensor::+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        require_same_shape(shape_, o.shape_, "Tensor::-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Tensor& operator*=(S s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
    friend Tensor operator*(Tensor a, S s) { return a *= s; }
    friend Tensor operator*(S s, Tensor a) { return a *= s; }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_{};
    Storage data_;
};

/// Concatenates along the batch axis.
template <class S>
Tensor<S> stack_batch(std::span<const Tensor<S>> parts) {
    if (parts.empty()) return {};
    Shape s = parts.front().shape();
    s.n = 0;
    typename Tensor<S>::Storage out;
    for (const auto& p : parts) {
        if (p.shape().c != s.c || p.shape().h != s.h || p.shape().w != s.w) {
            throw ShapeError("stack_batch: inconsistent sample shape " + p.shape().str());
        }
        s.n += p.shape().n;
        out.insert(out.end(), p.vec().begin(), p.vec().end());
    }
    return Tensor<S>(s, std::move(out));
}

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    std::vector<To> out(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
    return Tensor<To>(t.shape(), std::move(out));
}

template <class S>
[[nodiscard]] bool all_finite(const Tensor<S>& t) {
    return std::all_of(t.vec().begin(), t.vec().end(), [](S v) { return std::isfinite(v); });
}

template <class S>
[[nodiscard]] S max_abs(const Tensor<S>& t) {
    S m = 0;
    for (S v : t.vec()) m = std::max(m, std::abs(v));
    return m;
}

template <class S>
[[nodiscard]] S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    require_same_shape(a.shape(), b.shape(), "max_abs_diff");
    S m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <class S>
[[nodiscard]] double mean_squared_diff(const Tensor<S>& a, const Tensor<S>& b) {
    require_same_shape(a.shape(), b.shape(), "mean_squared_diff");
    if (a.empty()) return 0.0;
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

using Rng = std::mt19937_64;

template <class S>
void fill_normal(Tensor<S>& t, Rng& rng, S stddev = S(1)) {
    std::normal_distribution<S> dist(S(0), stddev);
    for (auto& v : t.span()) v = dist(rng);
}

template <class S>
[[nodiscard]] Tensor<S> randn(Shape s, Rng& rng, S stddev = S(1)) {
    Tensor<S> t(s);
    fill_normal(t, rng, stddev);
    return t;
}

template <class S>
[[nodiscard]] Tensor<S> rand_uniform(Shape s, Rng& rng, S lo, S hi) {
    Tensor<S> t(s);
    std::uniform_real_distribution<S> dist(lo, hi);
    for (auto& v : t.span()) v = dist(rng);
    return t;
}

}  // namespace tadsr
