#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace vox4d {

/// Error kinds map to process exit codes at the CLI boundary:
/// Usage -> 1 (bad arguments, bad config), Io/Runtime -> 2.
class Error : public std::runtime_error {
public:
    enum class Kind { Usage, Io, Runtime };

    Error(Kind kind, std::string message)
        : std::runtime_error(std::move(message)), kind_(kind) {}

    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

[[noreturn]] inline void fail_usage(const std::string& msg) { throw Error(Error::Kind::Usage, msg); }
[[noreturn]] inline void fail_io(const std::string& msg) { throw Error(Error::Kind::Io, msg); }
[[noreturn]] inline void fail_runtime(const std::string& msg) { throw Error(Error::Kind::Runtime, msg); }

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

/// Dense row-major array. float is the training precision; the double
/// instantiation exists for gradient checking.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(Shape shape)
        : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), T(0)) {}

    TensorT(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
            fail_runtime("tensor: shape " + shape_str(shape_) + " does not match data length " +
                         std::to_string(data_.size()));
    }

    static TensorT full(Shape shape, T value) {
        TensorT t(std::move(shape));
        for (auto& v : t.data_) v = value;
        return t;
    }

    static TensorT scalar(T value) { return TensorT({1}, {value}); }

    const Shape& shape() const { return shape_; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    int64_t dim(size_t i) const { return shape_.at(i); }
    int64_t rows() const { return shape_.size() == 2 ? shape_[0] : (shape_.size() == 1 ? 1 : -1); }
    int64_t cols() const { return shape_.size() == 2 ? shape_[1] : (shape_.size() == 1 ? shape_[0] : -1); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    T operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    T& at2(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
    T at2(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> out(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return TensorT<U>(shape_, std::move(out));
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

bool all_finite(const float* p, int64_t n);
bool all_finite(const double* p, int64_t n);

// Row-major kernels. Each output element is produced by exactly one thread,
// so results are bit-identical regardless of thread count.
// c[m,n] = a[m,k] * b[k,n]        (matmul_nn)
// c[m,n] = a[m,k] * b[n,k]^T      (matmul_nt)
// c[m,n] = a[k,m]^T * b[k,n]      (matmul_tn)
// accumulate=true adds into c instead of overwriting.
template <typename T>
void matmul_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate);
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate);
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate);

} // namespace vox4d
