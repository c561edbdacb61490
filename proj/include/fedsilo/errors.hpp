#pragma once

#include <stdexcept>
#include <string>

namespace fedsilo {

// Bad configuration or schema documents. CLI exit code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Data that cannot be reconciled with its schema (missing columns,
// unparseable cells, empty evaluations). CLI exit code 2.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A request beyond a hard algorithmic limit (e.g. exact enumeration over
// too many players). CLI exit code 3.
struct CapacityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fedsilo
