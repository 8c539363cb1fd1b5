#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace cm {

// Invalid input, config, or file content. CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf or a tolerance breach. CLI maps this to exit code 2.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename... Args>
std::string str_cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

}  // namespace cm

#define CM_CHECK(cond, ...)                                 \
  do {                                                      \
    if (!(cond)) {                                          \
      throw ::cm::ValidationError(::cm::str_cat(__VA_ARGS__)); \
    }                                                       \
  } while (0)

#define CM_CHECK_NUMERIC(cond, ...)                       \
  do {                                                    \
    if (!(cond)) {                                        \
      throw ::cm::NumericError(::cm::str_cat(__VA_ARGS__)); \
    }                                                     \
  } while (0)
