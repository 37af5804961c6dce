#pragma once

#include <stdexcept>
#include <string>

namespace dsmoe {

// Error taxonomy. The CLI maps these onto exit codes: config/usage -> 1,
// data/IO -> 2, numerical failure -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };       // dimension mismatch
struct ParamError : Error { using Error::Error; };       // invalid argument value
struct InputError : Error { using Error::Error; };       // bad user-supplied data
struct IoError : Error { using Error::Error; };          // filesystem failure
struct IntegrityError : Error { using Error::Error; };   // corrupt checkpoint blob
struct VersionError : Error { using Error::Error; };     // checkpoint format mismatch
struct ContractError : Error { using Error::Error; };    // stale cache / API misuse
struct NumericalError : Error { using Error::Error; };   // NaN/Inf surfaced
struct ConfigError : Error { using Error::Error; };      // bad config file

}  // namespace dsmoe
