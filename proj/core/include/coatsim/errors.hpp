#pragma once

#include <stdexcept>
#include <string>

namespace coatsim {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonFiniteInput : Error { using Error::Error; };
struct NonFiniteGradient : Error { using Error::Error; };
struct OutOfRange : Error { using Error::Error; };
struct GeometryMismatch : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct AllZeroGroup : Error { using Error::Error; };
struct InvalidSpec : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct BadMagic : Error { using Error::Error; };
struct TapeMismatch : Error { using Error::Error; };
struct MismatchBeyondBound : Error { using Error::Error; };

}  // namespace coatsim
