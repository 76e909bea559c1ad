#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "smoe/common.hpp"

namespace smoe {

template <typename S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VectorX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;

// All tensor buffers share one alignment so Eigen picks identical kernel
// splits run after run; bitwise reproducibility depends on it.
template <typename S>
using AlignedVector = std::vector<S, Eigen::aligned_allocator<S>>;

// Row-major n-d array of scalars. Non-matrix shapes (conv activations,
// kernels) keep their extents here and expose flat 2-d Eigen maps for the
// actual math.
template <typename S>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<Index> shape) : shape_(std::move(shape)) {
        data_.assign(std::size_t(count(shape_)), S(0));
    }

    Tensor(std::initializer_list<Index> shape) : Tensor(std::vector<Index>(shape)) {}

    static Tensor from_rows(const MatrixRM<S>& m) {
        Tensor t({m.rows(), m.cols()});
        t.mat() = m;
        return t;
    }

    const std::vector<Index>& shape() const { return shape_; }
    Index dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    Index size() const { return Index(data_.size()); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    S& operator[](Index i) { return data_[std::size_t(i)]; }
    const S& operator[](Index i) const { return data_[std::size_t(i)]; }

    // Flat views. mat() with no arguments views a rank-2 tensor as is;
    // otherwise the caller picks the factorization.
    Eigen::Map<MatrixRM<S>> mat(Index rows, Index cols) {
        check_view(rows * cols);
        return {data_.data(), rows, cols};
    }
    Eigen::Map<const MatrixRM<S>> mat(Index rows, Index cols) const {
        check_view(rows * cols);
        return {data_.data(), rows, cols};
    }
    Eigen::Map<MatrixRM<S>> mat() { return mat(rows2d(), cols2d()); }
    Eigen::Map<const MatrixRM<S>> mat() const { return mat(rows2d(), cols2d()); }

    Eigen::Map<ArrayX<S>> array() { return {data_.data(), Index(data_.size())}; }
    Eigen::Map<const ArrayX<S>> array() const { return {data_.data(), Index(data_.size())}; }

    Eigen::Map<VectorX<S>> vec() { return {data_.data(), Index(data_.size())}; }
    Eigen::Map<const VectorX<S>> vec() const { return {data_.data(), Index(data_.size())}; }

    void set_zero() { std::fill(data_.begin(), data_.end(), S(0)); }

    // Same data, different extents.
    Tensor reshaped(std::vector<Index> shape) const& {
        Tensor t = *this;
        return std::move(t).reshaped(std::move(shape));
    }
    Tensor reshaped(std::vector<Index> shape) && {
        if (count(shape) != Index(data_.size()))
            throw DimensionError("reshape " + shape_string() + " -> " + shape_string(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(data_);
        return t;
    }

    bool all_finite() const {
        for (const S& v : data_)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out(shape_);
        for (Index i = 0; i < size(); ++i) out[i] = T(data_[std::size_t(i)]);
        return out;
    }

    static Index count(const std::vector<Index>& shape) {
        Index n = 1;
        for (Index e : shape) {
            if (e < 0) throw DimensionError("negative extent in tensor shape");
            n *= e;
        }
        return n;
    }

    static std::string shape_string(const std::vector<Index>& shape) {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
    std::string shape_string() const { return shape_string(shape_); }

private:
    Index rows2d() const {
        if (shape_.size() != 2) throw DimensionError("mat() view needs a rank-2 tensor, got " + shape_string());
        return shape_[0];
    }
    Index cols2d() const { return shape_[1]; }

    void check_view(Index n) const {
        if (n != Index(data_.size()))
            throw DimensionError("view of " + std::to_string(n) + " elements over tensor " + shape_string());
    }

    std::vector<Index> shape_;
    AlignedVector<S> data_;
};

template <typename S>
inline void require_shape(const Tensor<S>& t, const std::vector<Index>& want, const char* operand) {
    if (t.shape() != want)
        throw DimensionError(std::string(operand) + ": expected " + Tensor<S>::shape_string(want) +
                             ", got " + t.shape_string());
}

} // namespace smoe
