#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace masv {

// Error taxonomy. CLI maps these to stable exit codes:
// usage/config/parse -> 2, numeric failures -> 3.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct StateError : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename A, typename... Rest>
void format_into(std::ostringstream& os, const A& a, const Rest&... rest) {
  os << a;
  format_into(os, rest...);
}
}  // namespace detail

template <typename E, typename... Args>
[[noreturn]] void raise(const Args&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  throw E(os.str());
}

#define MASV_CHECK(cond, Etype, ...)                   \
  do {                                                 \
    if (!(cond)) ::masv::raise<Etype>(__VA_ARGS__);    \
  } while (0)

}  // namespace masv
