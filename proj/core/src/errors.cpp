#include "cytomix/errors.hpp"

namespace cytomix {

ValidationError::ValidationError(std::size_t row, const std::string& what)
    : InputError("row " + std::to_string(row) + ": " + what), row_{row} {}

}  // namespace cytomix
