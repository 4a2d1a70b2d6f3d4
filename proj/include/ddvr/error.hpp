#pragma once

#include <stdexcept>
#include <string>

namespace ddvr {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Volume manifest does not describe the referenced file.
struct ManifestError : Error {
    using Error::Error;
};

// Unknown encoding, bad header, malformed JSON document.
struct FormatError : Error {
    using Error::Error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// A file of one transfer-function kind was loaded into a slot of another.
struct TfKindError : Error {
    using Error::Error;
};

// Non-finite loss during optimization.
struct NumericalAbort : Error {
    using Error::Error;
};

} // namespace ddvr
