#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ftn {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

// Dense N-dimensional array, row-major, value semantics. Copies are deep,
// so no two tensors ever alias through the public interface.
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor requires a floating point element type");

public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(shape_numel(shape_), T(0));
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (data_.size() != shape_numel(shape_)) {
            throw std::invalid_argument("Tensor: " + std::to_string(data_.size()) +
                                        " elements do not fill shape " + shape_str(shape_));
        }
    }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        for (T& x : t.data_) x = v;
        return t;
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
    const T& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

    // Same data, new shape; element counts must agree.
    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw std::invalid_argument("reshape: " + shape_str(shape_) + " has " +
                                        std::to_string(numel()) + " elements, target " +
                                        shape_str(shape) + " needs " +
                                        std::to_string(shape_numel(shape)));
        }
        return Tensor(std::move(shape), data_);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool same_shape(const Shape& s) const { return shape_ == s; }

    bool bitwise_equal(const Tensor& o) const {
        return shape_ == o.shape_ &&
               (data_.empty() ||
                std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0);
    }

    void fill(T v) {
        for (T& x : data_) x = v;
    }

    Tensor& operator+=(const Tensor& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Tensor& operator-=(const Tensor& o) {
        require_same_shape(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }

    Tensor& operator*=(T c) {
        for (T& x : data_) x *= c;
        return *this;
    }

    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }

    T sum() const {
        T s = 0;
        for (T x : data_) s += x;
        return s;
    }

    double frobenius_norm() const {
        double s = 0;
        for (T x : data_) s += static_cast<double>(x) * static_cast<double>(x);
        return std::sqrt(s);
    }

    T max_abs() const {
        T m = 0;
        for (T x : data_) m = std::max(m, std::abs(x));
        return m;
    }

    bool all_finite() const {
        for (T x : data_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

private:
    void validate_shape() const {
        for (std::size_t d : shape_) {
            if (d == 0) {
                throw std::invalid_argument("Tensor: zero-sized dimension in shape " +
                                            shape_str(shape_));
            }
        }
    }

    void require_same_shape(const Tensor& o, const char* what) const {
        if (shape_ != o.shape_) {
            throw std::invalid_argument(std::string("Tensor") + what + ": shape " +
                                        shape_str(shape_) + " vs " + shape_str(o.shape_));
        }
    }

    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        std::size_t off = 0, k = 0;
        for (std::size_t i : idx) off = off * shape_[k++] + i;
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

}  // namespace ftn
