#pragma once

#include <stdexcept>
#include <string>

namespace cropmap {

/// Broad failure class, used by the CLI to pick an exit code.
enum class ErrorKind { config, data, convergence };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define CROPMAP_DEFINE_ERROR(Name, Kind)                                            \
    class Name : public Error {                                                     \
    public:                                                                         \
        explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {}    \
    };

CROPMAP_DEFINE_ERROR(FormatError, data)
CROPMAP_DEFINE_ERROR(TruncationError, data)
CROPMAP_DEFINE_ERROR(SchemaError, data)
CROPMAP_DEFINE_ERROR(GeometryError, data)
CROPMAP_DEFINE_ERROR(ConflictError, data)
CROPMAP_DEFINE_ERROR(InvariantError, data)
CROPMAP_DEFINE_ERROR(IoError, data)
CROPMAP_DEFINE_ERROR(DomainError, data)
CROPMAP_DEFINE_ERROR(FoldError, data)
CROPMAP_DEFINE_ERROR(StaleInputError, data)
CROPMAP_DEFINE_ERROR(ConfigError, config)
CROPMAP_DEFINE_ERROR(ConvergenceError, convergence)

#undef CROPMAP_DEFINE_ERROR

} // namespace cropmap
