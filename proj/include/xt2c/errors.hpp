#pragma once

#include <stdexcept>

namespace xt2c {

class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ModalityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegenerateBoxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VocabularyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed files: bad JSONL lines, corrupt checkpoints, version mismatches.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace xt2c
