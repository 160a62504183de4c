#pragma once

#include <cstddef>

namespace mvar {

// Alignment of every heap block handed out by the library's operator new.
inline constexpr std::size_t kBufferAlignment = 64;

// Keeps freed tensor buffers in the heap instead of returning them to the OS.
void tune_allocator();

}  // namespace mvar
