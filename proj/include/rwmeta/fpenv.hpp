#pragma once

#if defined(__SSE2__)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif
#if defined(__GLIBC__) || defined(__linux__)
#include <malloc.h>
#endif

namespace rwmeta {

/// Flushes denormal doubles to zero for the calling thread. Gradient chains
/// underflow into the subnormal range as training converges, and subnormal
/// arithmetic runs orders of magnitude slower on x86; the values themselves
/// are far below every tolerance in use. Idempotent.
inline void flush_denormals() {
#if defined(__SSE2__)
    _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
    _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
}

/// Keeps tape-sized blocks inside the heap. Training allocates and frees a
/// few hundred KB per task record; with default glibc thresholds those blocks
/// round-trip through mmap/munmap and every reuse page-faults.
inline void retain_heap_blocks() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 64 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
}

inline void tune_runtime() {
    flush_denormals();
    retain_heap_blocks();
}

}  // namespace rwmeta
