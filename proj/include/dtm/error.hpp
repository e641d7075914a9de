// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>

namespace dtm {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// invalid arguments or unsatisfied preconditions
struct ValidationError : Error {
    using Error::Error;
};

// file system failures (open, read, write)
struct IoError : Error {
    using Error::Error;
};

// malformed file contents (corrupt container, bad JSON, bad JSONL line)
struct FormatError : Error {
    using Error::Error;
};

}  // namespace dtm
