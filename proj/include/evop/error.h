#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace evop {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid user-facing configuration (sizes, fractions, flag combinations).
class ConfigError : public Error {
public:
    using Error::Error;
};

// theta * m rounds to 0 or m pruned layers.
class DegenerateSparsity : public ConfigError {
public:
    using ConfigError::ConfigError;
};

class OverflowError : public Error {
public:
    using Error::Error;
};

// Pattern length / model layer count / sample length disagreement.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Exhaustive enumeration would exceed its evaluation budget.
class BudgetExceeded : public Error {
public:
    using Error::Error;
};

class DatasetError : public Error {
public:
    using Error::Error;
};

class EmbedderError : public Error {
public:
    EmbedderError(std::size_t chunk_index, const std::string& what)
        : Error("embedding chunk " + std::to_string(chunk_index) + ": " + what),
          chunk_index_(chunk_index) {}

    std::size_t chunk_index() const { return chunk_index_; }

private:
    std::size_t chunk_index_;
};

// Base of everything that can go wrong while talking to a fitness oracle.
class OracleError : public Error {
public:
    using Error::Error;
};

// Connection lost, peer died, malformed line.
class TransportError : public OracleError {
public:
    using OracleError::OracleError;
};

class TimeoutError : public TransportError {
public:
    using TransportError::TransportError;
};

class HandshakeError : public OracleError {
public:
    using OracleError::OracleError;
};

// The server answered a request with an "error" message.
class RemoteError : public OracleError {
public:
    using OracleError::OracleError;
};

// Operation not advertised by the oracle (e.g. embed without the capability).
class CapabilityError : public OracleError {
public:
    using OracleError::OracleError;
};

}  // namespace evop
