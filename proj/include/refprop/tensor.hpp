// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace refprop {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

template <typename T>
struct TensorImpl {
    std::vector<T> data;
    bool requires_grad = false;
};

/**
 * Dense n-d array handle. Storage is shared between handles; the shape lives
 * on the handle, so reshape produces a view over the same buffer. Gradients
 * are owned by the Tape, keyed by the storage, which makes views and their
 * bases accumulate into the same gradient buffer.
 *
 * Scalar type T is float for training and double for derivative checks.
 */
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill_value = T(0), bool requires_grad = false)
        : impl_(std::make_shared<TensorImpl<T>>()), shape_(std::move(shape)) {
        impl_->data.assign(shape_numel(shape_), fill_value);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(std::move(shape), T(0), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (values.size() != shape_numel(shape))
            throw std::invalid_argument("Tensor::from: value count does not match shape " +
                                        shape_str(shape));
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->data = std::move(values);
        t.impl_->requires_grad = requires_grad;
        t.shape_ = std::move(shape);
        return t;
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return impl_ ? impl_->data.size() : 0; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    std::span<T> values() { return {impl_->data.data(), impl_->data.size()}; }
    std::span<const T> values() const { return {impl_->data.data(), impl_->data.size()}; }
    T* ptr() { return impl_->data.data(); }
    const T* ptr() const { return impl_->data.data(); }

    T& operator[](std::size_t i) { return impl_->data[i]; }
    const T& operator[](std::size_t i) const { return impl_->data[i]; }

    /// Row-major element access for 2-d and 3-d tensors (test convenience).
    T& at(std::size_t i, std::size_t j) { return impl_->data[i * shape_[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return impl_->data[i * shape_[1] + j]; }
    T& at(std::size_t c, std::size_t i, std::size_t j) {
        return impl_->data[(c * shape_[1] + i) * shape_[2] + j];
    }
    const T& at(std::size_t c, std::size_t i, std::size_t j) const {
        return impl_->data[(c * shape_[1] + i) * shape_[2] + j];
    }

    /// Same storage, new shape. Element count must match.
    Tensor reshape(Shape new_shape) const {
        if (shape_numel(new_shape) != numel())
            throw std::invalid_argument("reshape: element count mismatch " + shape_str(shape_) +
                                        " -> " + shape_str(new_shape));
        Tensor t;
        t.impl_ = impl_;
        t.shape_ = std::move(new_shape);
        return t;
    }

    /// Deep copy with its own storage.
    Tensor clone() const {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>(*impl_);
        t.shape_ = shape_;
        return t;
    }

    /// Identity of the underlying buffer; the Tape keys gradients on this.
    const TensorImpl<T>* storage() const { return impl_.get(); }
    TensorImpl<T>* storage() { return impl_.get(); }
    const std::shared_ptr<TensorImpl<T>>& storage_ref() const { return impl_; }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
    Shape shape_;
};

}  // namespace refprop
