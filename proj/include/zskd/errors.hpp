#pragma once

#include <stdexcept>
#include <string>

namespace zskd {

// Root of all zskd failures. CLI maps subtypes to exit codes.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/layer shape disagreements.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Invalid argument values (tau <= 0, lr <= 0, out-of-set augmentation params, ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

// Invalid value domains (negative probabilities, un-normalized vectors).
class DomainError : public Error {
public:
    using Error::Error;
};

// Operation on an object in the wrong state (backward without a graph, ...).
class StateError : public Error {
public:
    using Error::Error;
};

// Non-finite values produced where finite math was required. Exit code 4.
class NumericError : public Error {
public:
    using Error::Error;
};

// Synthesis loop produced a non-finite loss; carries the iteration index.
class SynthesisDivergenceError : public NumericError {
public:
    SynthesisDivergenceError(const std::string& msg, int step)
        : NumericError(msg), step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

// Artifact chain mismatch (transfer set crafted from a different teacher, ...). Exit code 3.
class ProvenanceError : public Error {
public:
    using Error::Error;
};

// Config file violations. Exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

// File-format parse failures (IDX, checkpoints, transfer sets).
class ParseError : public Error {
public:
    using Error::Error;
};

class FormatError : public ParseError {  // bad magic / not our file
public:
    using ParseError::ParseError;
};

class VersionError : public ParseError {  // recognized file, unsupported version
public:
    using ParseError::ParseError;
};

class TruncatedError : public ParseError {  // payload shorter than the header promises
public:
    using ParseError::ParseError;
};

class ChecksumError : public ParseError {  // CRC mismatch
public:
    using ParseError::ParseError;
};

// Filesystem failures, annotated with the path.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace zskd
