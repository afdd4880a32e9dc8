#ifndef ALLOMLM_ERROR_HPP
#define ALLOMLM_ERROR_HPP

#include <stdexcept>
#include <string>

namespace allomlm {

/// Malformed or inconsistent input data (bad records, unknown tokens, ...).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller misuse: invalid arguments, precondition violations.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite losses and similar numeric breakdowns.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace allomlm

#endif
