#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace msca {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Process-wide byte counters for tensor storage. Used by the attention
// benchmark to report peak allocation.
struct AllocStats {
    static std::atomic<int64_t> current;
    static std::atomic<int64_t> peak;
    static void reset_peak() { peak.store(current.load()); }
};

template <typename T>
struct TrackingAllocator {
    using value_type = T;
    TrackingAllocator() = default;
    template <typename U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        const auto bytes = static_cast<int64_t>(n * sizeof(T));
        const int64_t now = AllocStats::current.fetch_add(bytes) + bytes;
        int64_t prev = AllocStats::peak.load();
        while (now > prev && !AllocStats::peak.compare_exchange_weak(prev, now)) {
        }
        return static_cast<T*>(::operator new(n * sizeof(T)));
    }
    void deallocate(T* p, std::size_t n) noexcept {
        AllocStats::current.fetch_sub(static_cast<int64_t>(n * sizeof(T)));
        ::operator delete(p);
    }
    template <typename U>
    bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

/// Dense row-major array of rank 1..4 (C,H,W or N,C,H,W layouts).
///
/// Tensors are plain values: copies never alias, and nothing in the library
/// mutates a tensor after handing it out.
template <typename T>
class Tensor {
public:
    using Storage = std::vector<T, TrackingAllocator<T>>;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0));
    Tensor(Shape shape, std::span<const T> values);
    Tensor(Shape shape, std::initializer_list<T> values)
        : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

    const Shape& shape() const { return shape_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const;
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    std::span<const T> data() const { return {data_.data(), data_.size()}; }
    std::span<T> data() { return {data_.data(), data_.size()}; }
    const T* ptr() const { return data_.data(); }
    T* ptr() { return data_.data(); }

    T operator[](int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
    T& operator[](int64_t i) { return data_[static_cast<std::size_t>(i)]; }

    // (c, h, w) indexing for rank-3 tensors.
    T at(int64_t c, int64_t h, int64_t w) const { return data_[index3(c, h, w)]; }
    T& at(int64_t c, int64_t h, int64_t w) { return data_[index3(c, h, w)]; }

    Tensor reshaped(Shape shape) const;

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

    bool all_finite() const;
    T sum() const;

    Tensor& operator+=(const Tensor& other);
    Tensor& operator*=(T s);

    bool bit_equal(const Tensor& other) const;

private:
    std::size_t index3(int64_t c, int64_t h, int64_t w) const {
        return static_cast<std::size_t>((c * shape_[1] + h) * shape_[2] + w);
    }

    Shape shape_;
    Storage data_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

// max_i |a_i - b_i| / max(|b|_inf, floor)
template <typename T>
T max_rel_diff(const Tensor<T>& a, const Tensor<T>& b, T floor = T(1e-12));

void require_shape(bool ok, const std::string& what);

}  // namespace msca
