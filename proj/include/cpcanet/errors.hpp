#pragma once

#include <stdexcept>
#include <string>

namespace cpcanet {

// Contract violations carry a dedicated type so callers can map them to
// exit codes and tests can assert on the exact failure mode.

struct ShapeMismatch : std::invalid_argument {
    explicit ShapeMismatch(const std::string& what) : std::invalid_argument(what) {}
};

struct DimensionTooSmall : std::invalid_argument {
    explicit DimensionTooSmall(const std::string& what) : std::invalid_argument(what) {}
};

struct DegenerateBatch : std::invalid_argument {
    explicit DegenerateBatch(const std::string& what) : std::invalid_argument(what) {}
};

struct InvariantViolation : std::invalid_argument {
    explicit InvariantViolation(const std::string& what) : std::invalid_argument(what) {}
};

struct UnboundInput : std::invalid_argument {
    explicit UnboundInput(const std::string& what) : std::invalid_argument(what) {}
};

struct NotEvaluated : std::logic_error {
    explicit NotEvaluated(const std::string& what) : std::logic_error(what) {}
};

struct WrongDomainCount : std::invalid_argument {
    explicit WrongDomainCount(const std::string& what) : std::invalid_argument(what) {}
};

struct SchemaMismatch : std::runtime_error {
    explicit SchemaMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct SingularMatrix : std::runtime_error {
    explicit SingularMatrix(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace cpcanet
