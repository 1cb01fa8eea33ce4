#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace bias_audit {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// attribute-kb
class IllegalTransition : public Error { using Error::Error; };
class DuplicateId : public Error { using Error::Error; };
class KbLocked : public Error { using Error::Error; };
class UnknownAttribute : public Error { using Error::Error; };

// Input parsing.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};
class EmptyFile : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };

/// Caller violated an operation's precondition.
class PreconditionError : public Error { using Error::Error; };

// providers. Everything a backend can do wrong derives from ProviderError.
class ProviderError : public Error { using Error::Error; };
class AuthError : public ProviderError { using ProviderError::ProviderError; };
class RateLimited : public ProviderError { using ProviderError::ProviderError; };
class Timeout : public ProviderError { using ProviderError::ProviderError; };
class ContentRefused : public ProviderError { using ProviderError::ProviderError; };
/// A reply that does not match the structured form a caller asked for.
class SchemaError : public ProviderError {
public:
    explicit SchemaError(const std::string& what, std::string raw_reply = {})
        : ProviderError(what), raw_reply_(std::move(raw_reply)) {}
    const std::string& raw_reply() const noexcept { return raw_reply_; }

private:
    std::string raw_reply_;
};

// taskgen
class BadTemplate : public Error { using Error::Error; };
class IdenticalVariants : public Error { using Error::Error; };
class GenerationExhausted : public Error {
public:
    explicit GenerationExhausted(std::string attribute_id)
        : Error("task generation exhausted for attribute " + attribute_id),
          attribute_id_(std::move(attribute_id)) {}
    const std::string& attribute_id() const noexcept { return attribute_id_; }

private:
    std::string attribute_id_;
};

// evaluator
class MixedGroup : public Error { using Error::Error; };
class EmptyGroup : public Error { using Error::Error; };
class EmptyInput : public Error { using Error::Error; };
class AllZero : public Error { using Error::Error; };

// pipeline
class PredecessorIncomplete : public Error { using Error::Error; };
class DigestMismatch : public Error { using Error::Error; };
class StageFailed : public Error { using Error::Error; };
class EmptyMetrics : public Error { using Error::Error; };
class RunLocked : public Error { using Error::Error; };

// curation-service
class PortInUse : public Error { using Error::Error; };

}  // namespace bias_audit
