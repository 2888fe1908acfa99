#ifndef ADAPTSEG_ERRORS_HPP
#define ADAPTSEG_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace adaptseg {

/// Bad configuration or usage (maps to CLI exit code 2).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Dataset tree violates the documented layout.
struct IngestError : std::runtime_error {
    explicit IngestError(const std::string& what) : std::runtime_error(what) {}
};

/// Operation called in a state that does not admit it (e.g. add_domain twice).
struct StateError : std::runtime_error {
    explicit StateError(const std::string& what) : std::runtime_error(what) {}
};

/// Tensor arguments violate an operation's contract.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace adaptseg

#endif
