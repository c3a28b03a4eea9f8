#include "msca/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace msca {

std::atomic<int64_t> AllocStats::current{0};
std::atomic<int64_t> AllocStats::peak{0};

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (auto e : shape) {
        if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
        n *= e;
    }
    return n;
}

void require_shape(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::span<const T> values) : shape_(std::move(shape)) {
    require_shape(shape_numel(shape_) == static_cast<int64_t>(values.size()),
                  "tensor shape " + shape_str(shape_) + " does not match " +
                      std::to_string(values.size()) + " values");
    data_.assign(values.begin(), values.end());
}

template <typename T>
int64_t Tensor<T>::dim(int64_t i) const {
    if (i < 0) i += rank();
    require_shape(i >= 0 && i < rank(), "dim index out of range for " + shape_str(shape_));
    return shape_[static_cast<std::size_t>(i)];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    require_shape(shape_numel(shape) == numel(),
                  "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
}

template <typename T>
bool Tensor<T>::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T Tensor<T>::sum() const {
    T s = 0;
    for (T v : data_) s += v;
    return s;
}

template <typename T>
Tensor<T>& Tensor<T>::operator+=(const Tensor& other) {
    require_shape(other.shape_ == shape_,
                  "accumulate " + shape_str(other.shape_) + " into " + shape_str(shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

template <typename T>
Tensor<T>& Tensor<T>::operator*=(T s) {
    for (T& v : data_) v *= s;
    return *this;
}

template <typename T>
bool Tensor<T>::bit_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require_shape(a.shape() == b.shape(),
                  "compare " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    T m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
T max_rel_diff(const Tensor<T>& a, const Tensor<T>& b, T floor) {
    T scale = floor;
    for (int64_t i = 0; i < b.numel(); ++i) scale = std::max(scale, std::abs(b[i]));
    return max_abs_diff(a, b) / scale;
}

template class Tensor<float>;
template class Tensor<double>;
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);
template float max_rel_diff(const Tensor<float>&, const Tensor<float>&, float);
template double max_rel_diff(const Tensor<double>&, const Tensor<double>&, double);

}  // namespace msca
