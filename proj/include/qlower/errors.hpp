#pragma once

#include <stdexcept>
#include <string>

namespace qlower {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define QLOWER_DEFINE_ERROR(Name)                                        \
    class Name : public Error {                                          \
    public:                                                              \
        explicit Name(const std::string& what) : Error(what) {}          \
    };

QLOWER_DEFINE_ERROR(OutOfRangeError)            // quantized value outside [lo, hi]
QLOWER_DEFINE_ERROR(ShapeMismatchError)         // tensor extents disagree
QLOWER_DEFINE_ERROR(KindMismatchError)          // real data where integer expected, or vice versa
QLOWER_DEFINE_ERROR(OverflowError)              // 64-bit integer arithmetic overflowed
QLOWER_DEFINE_ERROR(OverflowUnsatisfiableError) // no shift amount satisfies the error bound
QLOWER_DEFINE_ERROR(NotFoldableError)           // batch-norm folding preconditions unmet
QLOWER_DEFINE_ERROR(NonCanonicalError)          // graph violates the canonical layer form
QLOWER_DEFINE_ERROR(MissingQuantParamsError)    // node lacks quantization parameters for this stage
QLOWER_DEFINE_ERROR(NotCalibratedError)         // clip bounds were never calibrated
QLOWER_DEFINE_ERROR(EmptyCalibrationSetError)   // calibration requires at least one batch
QLOWER_DEFINE_ERROR(NoLeadingLinearError)       // input-bias absorption needs a leading linear op
QLOWER_DEFINE_ERROR(PassOrderError)             // pass applied at the wrong representation
QLOWER_DEFINE_ERROR(ParseError)                 // malformed manifest
QLOWER_DEFINE_ERROR(MissingBlobError)           // manifest references a blob that cannot be read
QLOWER_DEFINE_ERROR(GraphMismatchError)         // graphs cannot be compared node-by-node
QLOWER_DEFINE_ERROR(UnknownNodeError)           // node id not present in the graph
QLOWER_DEFINE_ERROR(UnsupportedOpError)         // operator not supported by this routine
QLOWER_DEFINE_ERROR(InvalidGraphError)          // structural validation failed
QLOWER_DEFINE_ERROR(NonMonotoneThresholdsError) // threshold table must be non-decreasing

#undef QLOWER_DEFINE_ERROR

} // namespace qlower
