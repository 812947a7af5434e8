#include "numerics/tensor.hpp"

#include <cmath>
#include <sstream>

namespace vox4d {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) fail_runtime("tensor: negative extent in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

bool all_finite(const float* p, int64_t n) {
    for (int64_t i = 0; i < n; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

bool all_finite(const double* p, int64_t n) {
    for (int64_t i = 0; i < n; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

template <typename T>
void matmul_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        if (!accumulate)
            for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
        const T* arow = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            const T* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            if (accumulate)
                crow[j] += acc;
            else
                crow[j] = acc;
        }
    }
}

template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        if (!accumulate)
            for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
        for (int64_t kk = 0; kk < k; ++kk) {
            const T av = a[kk * m + i];
            const T* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template void matmul_nn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t, bool);
template void matmul_nn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);
template void matmul_nt<float>(const float*, const float*, float*, int64_t, int64_t, int64_t, bool);
template void matmul_nt<double>(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);
template void matmul_tn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t, bool);
template void matmul_tn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);

} // namespace vox4d
