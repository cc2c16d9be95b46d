#pragma once

#include <stdexcept>
#include <string>

namespace ck {

// Error families map one-to-one onto CLI exit codes:
// ConfigError -> 2, IoError -> 3, DomainError -> 4.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 17 significant digits: enough for a double to survive a text round trip.
std::string g17(double v);

}  // namespace ck
