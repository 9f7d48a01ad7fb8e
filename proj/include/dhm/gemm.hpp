#pragma once

#include <cstdint>

#include <cblas.h>

namespace dhm::detail {

// When non-null, every scalar multiply executed by the reference GEMM loops
// below is tallied here. The cost model's tests compare this tally against the
// analytic layer counts.
inline thread_local std::int64_t* multiply_counter = nullptr;

struct CountMultiplies {
    explicit CountMultiplies(std::int64_t& counter) : prev_(multiply_counter) {
        multiply_counter = &counter;
    }
    ~CountMultiplies() { multiply_counter = prev_; }
    CountMultiplies(const CountMultiplies&) = delete;
    CountMultiplies& operator=(const CountMultiplies&) = delete;

private:
    std::int64_t* prev_;
};

// Reference kernels. C[M,N] += op(A) * op(B); plain loops the counter can see.
template <class T>
void ref_gemm_nn(int M, int N, int K, const T* A, const T* B, T* C) {
    std::int64_t* cnt = multiply_counter;
    for (int i = 0; i < M; ++i) {
        for (int k = 0; k < K; ++k) {
            const T a = A[static_cast<std::size_t>(i) * K + k];
            const T* b = B + static_cast<std::size_t>(k) * N;
            T* c = C + static_cast<std::size_t>(i) * N;
            for (int j = 0; j < N; ++j) c[j] += a * b[j];
            if (cnt) *cnt += N;
        }
    }
}

// A[M,K] * B[N,K]^T
template <class T>
void ref_gemm_nt(int M, int N, int K, const T* A, const T* B, T* C) {
    std::int64_t* cnt = multiply_counter;
    for (int i = 0; i < M; ++i) {
        for (int j = 0; j < N; ++j) {
            const T* a = A + static_cast<std::size_t>(i) * K;
            const T* b = B + static_cast<std::size_t>(j) * K;
            T acc = T(0);
            for (int k = 0; k < K; ++k) acc += a[k] * b[k];
            if (cnt) *cnt += K;
            C[static_cast<std::size_t>(i) * N + j] += acc;
        }
    }
}

// A[K,M]^T * B[K,N]
template <class T>
void ref_gemm_tn(int M, int N, int K, const T* A, const T* B, T* C) {
    std::int64_t* cnt = multiply_counter;
    for (int k = 0; k < K; ++k) {
        const T* a = A + static_cast<std::size_t>(k) * M;
        const T* b = B + static_cast<std::size_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            const T ai = a[i];
            T* c = C + static_cast<std::size_t>(i) * N;
            for (int j = 0; j < N; ++j) c[j] += ai * b[j];
            if (cnt) *cnt += N;
        }
    }
}

// Single-threaded BLAS keeps results reproducible run to run.
inline void ensure_single_thread_blas() {
    static const bool once = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)once;
}

inline void blas_gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int M, int N, int K,
                      const float* A, int lda, const float* B, int ldb, float* C) {
    ensure_single_thread_blas();
    cblas_sgemm(CblasRowMajor, ta, tb, M, N, K, 1.0f, A, lda, B, ldb, 1.0f, C, N);
}
inline void blas_gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int M, int N, int K,
                      const double* A, int lda, const double* B, int ldb, double* C) {
    ensure_single_thread_blas();
    cblas_dgemm(CblasRowMajor, ta, tb, M, N, K, 1.0, A, lda, B, ldb, 1.0, C, N);
}

// Dispatchers: BLAS on the fast path, counted reference loops when a multiply
// counter is active.
template <class T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C) {
    if (multiply_counter) {
        ref_gemm_nn(M, N, K, A, B, C);
    } else {
        blas_gemm(CblasNoTrans, CblasNoTrans, M, N, K, A, K, B, N, C);
    }
}

template <class T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C) {
    if (multiply_counter) {
        ref_gemm_nt(M, N, K, A, B, C);
    } else {
        blas_gemm(CblasNoTrans, CblasTrans, M, N, K, A, K, B, K, C);
    }
}

template <class T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C) {
    if (multiply_counter) {
        ref_gemm_tn(M, N, K, A, B, C);
    } else {
        blas_gemm(CblasTrans, CblasNoTrans, M, N, K, A, M, B, N, C);
    }
}

}  // namespace dhm::detail
