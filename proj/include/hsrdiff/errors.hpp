#ifndef HSRDIFF_ERRORS_HPP
#define HSRDIFF_ERRORS_HPP

#include <sstream>
#include <stdexcept>
#include <string>

namespace hsrdiff {

// Error taxonomy mirrors the CLI exit codes: validation 2, I/O 3, numeric 4.
struct validation_error : std::runtime_error {
    explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct shape_error : validation_error {
    explicit shape_error(const std::string& msg) : validation_error(msg) {}
};

namespace detail {

template <class... Args>
std::string concat(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

}  // namespace detail

}  // namespace hsrdiff

#endif  // HSRDIFF_ERRORS_HPP
