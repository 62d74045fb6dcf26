#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace km {

#ifdef KM_FLOAT64
using real = double;
#else
using real = float;
#endif

// Largest finite-but-safe additive mask value. Using true -inf poisons
// softmax backward with 0 * inf, so masked attention scores use this instead.
inline constexpr double kMaskValue = -1e9;

// Relative tolerance the finite-difference checks are expected to meet at
// the build's float width, and the step that achieves it. At 32 bits the
// storage rounding of intermediates dominates below ~1e-3, so the step is
// wider than the 64-bit one.
inline constexpr double kGradCheckTol = (sizeof(real) == 8) ? 1e-6 : 1e-4;
inline constexpr double kGradCheckEps = (sizeof(real) == 8) ? 1e-5 : 6e-3;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace km
