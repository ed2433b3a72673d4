#pragma once

// Element type of every tensor. The library is float; MAT_REAL_DOUBLE builds a
// second copy whose only job is finite-difference gradient checking, where
// float32 rounding of the loss would swamp a 1e-3 step. The inline namespace
// lets both copies link into one test binary.
#ifdef MAT_REAL_DOUBLE
#define MAT_REAL_NS f64
#else
#define MAT_REAL_NS f32
#endif

namespace mat {
inline namespace MAT_REAL_NS {

#ifdef MAT_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

}  // namespace MAT_REAL_NS
}  // namespace mat
