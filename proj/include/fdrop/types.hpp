#pragma once

#include "fdrop/tape.hpp"
#include "fdrop/tensor.hpp"

namespace fdrop {

// Training runs at 32-bit; the 64-bit instantiations exist for the
// finite-difference gradient checks.
using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace fdrop
