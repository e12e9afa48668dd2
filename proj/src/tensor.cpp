#include "rescr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rescr {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void check_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > kMaxRank)
        throw ShapeError("tensor rank must be 1..5, got shape " + to_string(shape));
    for (auto d : shape)
        if (d == 0) throw ShapeError("zero extent in shape " + to_string(shape));
}

Shape strides_of(const Shape& shape) {
    Shape s(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(numel(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (numel(shape_) != data_.size())
        throw ShapeError("shape " + to_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " elements");
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size())
        throw ShapeError("index rank " + std::to_string(idx.size()) + " for shape " + to_string(shape_));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
        if (i >= shape_[axis]) throw ShapeError("index out of range for shape " + to_string(shape_));
        off = off * shape_[axis] + i;
        ++axis;
    }
    return off;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> idx) {
    return data_[offset(idx)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> idx) const {
    return data_[offset(idx)];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("max_abs_diff: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template class Tensor<float>;
template class Tensor<double>;
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace rescr
