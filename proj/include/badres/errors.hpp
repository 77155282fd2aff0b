#pragma once

#include <stdexcept>
#include <string>

namespace badres {

// Invalid configuration (bad shapes, out-of-range hyperparameters, malformed
// config files). CLI maps this to exit code 1.
class config_error : public std::runtime_error {
public:
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: violated preconditions on otherwise valid objects.
class usage_error : public std::runtime_error {
public:
    explicit usage_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required.
class numeric_error : public std::runtime_error {
public:
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dataset file parsing failures; message carries the byte offset.
class ingestion_error : public std::runtime_error {
public:
    explicit ingestion_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Training diverged (NaN loss); message carries epoch/batch indices.
class train_error : public std::runtime_error {
public:
    explicit train_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem / serialization failures.
class io_error : public std::runtime_error {
public:
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace badres
