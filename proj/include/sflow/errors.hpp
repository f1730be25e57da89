#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sflow {

/// Argument outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Mismatched shapes or an invalid configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// API used out of order or with unusable arguments (empty batch, stale cache).
class UsageError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// A state went non-finite during integration.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, long step)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

    long step() const noexcept { return step_; }

private:
    long step_;
};

/// A guidance classifier threw while scoring candidate `candidate`.
class ClassifierError : public std::runtime_error {
public:
    ClassifierError(const std::string& what, std::size_t candidate)
        : std::runtime_error("candidate " + std::to_string(candidate) + ": " + what),
          candidate_(candidate) {}

    std::size_t candidate() const noexcept { return candidate_; }

private:
    std::size_t candidate_;
};

/// Wraps a failure with the pipeline phase it happened in.
class PhaseError : public std::runtime_error {
public:
    PhaseError(const std::string& phase, const std::string& what)
        : std::runtime_error(phase + ": " + what), phase_(phase) {}

    const std::string& phase() const noexcept { return phase_; }

private:
    std::string phase_;
};

}  // namespace sflow
