#include "mvar/runtime.hpp"

#include <cstdlib>
#include <new>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

// Every heap block is cache-line aligned.
void* operator new(std::size_t n) {
  void* p = nullptr;
  if (posix_memalign(&p, mvar::kBufferAlignment, n == 0 ? 1 : n) != 0) throw std::bad_alloc();
  return p;
}

void* operator new[](std::size_t n) { return ::operator new(n); }

void* operator new(std::size_t n, const std::nothrow_t&) noexcept {
  void* p = nullptr;
  return posix_memalign(&p, mvar::kBufferAlignment, n == 0 ? 1 : n) == 0 ? p : nullptr;
}

void* operator new[](std::size_t n, const std::nothrow_t& t) noexcept { return ::operator new(n, t); }

void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }

namespace mvar {

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 512 * 1024 * 1024);
#endif
}

}  // namespace mvar
