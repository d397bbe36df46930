// Copyright 2026 The AIM Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Process-level performance knobs. Neither affects results beyond flushing
// subnormal intermediates to zero.

#pragma once

#if defined(__SSE__) || defined(__x86_64__)
#include <xmmintrin.h>
#define AIM_HAS_MXCSR 1
#endif
#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace aim {

// Flushes subnormals to zero (FTZ + DAZ) on this thread while alive.
// Subnormal arithmetic stalls x86 cores by two orders of magnitude and
// attention/GELU backward passes produce plenty of them.
class DenormalGuard {
 public:
  DenormalGuard() {
#ifdef AIM_HAS_MXCSR
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040u);
#endif
  }
  ~DenormalGuard() {
#ifdef AIM_HAS_MXCSR
    _mm_setcsr(saved_);
#endif
  }
  DenormalGuard(const DenormalGuard&) = delete;
  DenormalGuard& operator=(const DenormalGuard&) = delete;

 private:
  unsigned saved_ = 0;
};

// Keeps large tensor buffers on the heap instead of fresh mmap regions so
// repeated training steps reuse pages rather than re-faulting them.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace aim
