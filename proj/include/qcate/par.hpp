#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace qcate::par {

inline int max_jobs() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// n <= 0 restores the hardware default.
inline void set_jobs(int n) {
#ifdef _OPENMP
    omp_set_num_threads(n > 0 ? n : omp_get_num_procs());
#else
    (void)n;
#endif
}

// Reductions are split into a fixed number of chunks that depends only on n,
// never on the thread count. Partial sums are combined in chunk order, so the
// result is bit-identical for any parallelism level (required for the
// seed-fixed reproducibility guarantees).
inline std::size_t chunk_count(std::size_t n) {
    if (n == 0) return 0;
    const std::size_t by_size = (n + 8191) / 8192;
    return by_size < 512 ? by_size : 512;
}

namespace serial {

// Straight-loop reference implementations. Kept for tests (the parallel
// kernels are checked against these) and for the kernel benchmark.

template <class F>
double sum(std::size_t n, F&& f) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += f(i);
    return acc;
}

template <class F>
void for_each(std::size_t n, F&& f) {
    for (std::size_t i = 0; i < n; ++i) f(i);
}

}  // namespace serial

template <class F>
double sum(std::size_t n, F&& f) {
    const std::size_t chunks = chunk_count(n);
    if (chunks <= 1) return serial::sum(n, f);
    std::vector<double> partial(chunks, 0.0);
    const std::size_t step = (n + chunks - 1) / chunks;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(chunks); ++c) {
        const std::size_t lo = static_cast<std::size_t>(c) * step;
        const std::size_t hi = lo + step < n ? lo + step : n;
        double acc = 0.0;
        for (std::size_t i = lo; i < hi; ++i) acc += f(i);
        partial[static_cast<std::size_t>(c)] = acc;
    }
    double total = 0.0;
    for (double p : partial) total += p;
    return total;
}

// Parallel loop over independent indices; f(i) must only touch slot i state.
template <class F>
void for_each(std::size_t n, F&& f) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
        f(static_cast<std::size_t>(i));
}

struct MeanVar {
    double mean = 0.0;
    double var = 0.0;  // Bessel-corrected sample variance
};

// Two-pass mean/variance built on the deterministic chunked sum.
template <class F>
MeanVar mean_var(std::size_t n, F&& f) {
    MeanVar mv;
    if (n == 0) return mv;
    mv.mean = sum(n, f) / static_cast<double>(n);
    if (n < 2) return mv;
    const double m = mv.mean;
    mv.var = sum(n, [&](std::size_t i) {
                 const double d = f(i) - m;
                 return d * d;
             }) /
             static_cast<double>(n - 1);
    return mv;
}

}  // namespace qcate::par
