#pragma once

#include <stdexcept>
#include <string>

namespace tlfault {

/// Input or configuration rejected before any compute happens.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Phasor network could not be solved (singular or near-singular admittance matrix).
class SolverError : public std::runtime_error {
public:
    SolverError(const std::string& what, double rcond)
        : std::runtime_error(what), rcond_(rcond) {}
    double rcond() const noexcept { return rcond_; }

private:
    double rcond_;
};

/// Weight archive is malformed, truncated, corrupted or shape-incompatible.
class ArchiveError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training diverged.
class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& what, int epoch)
        : std::runtime_error(what), epoch_(epoch) {}
    int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

/// A pipeline stage failed; carries the stage name.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what)
        : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

} // namespace tlfault
