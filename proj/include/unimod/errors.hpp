#pragma once

#include <stdexcept>
#include <string>

namespace unimod {

// Base class for all errors raised by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes are incompatible (messages name both shapes).
struct ShapeError : Error {
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
struct ContractError : Error {
  using Error::Error;
};

// A token id falls outside the configured vocabulary.
struct VocabularyError : Error {
  using Error::Error;
};

// A softmax row has no unmasked entries.
struct DegenerateRowError : Error {
  using Error::Error;
};

}  // namespace unimod
