#pragma once

#include <stdexcept>
#include <string>

namespace posbd {

// Exception taxonomy. The CLI maps these to process exit codes:
// ConfigError -> 2, IoError/IntegrityError -> 3, JudgeError -> 4,
// TrainingError -> 5, OverlapError -> 6.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct JudgeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct OverlapError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ZeroNormVector : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TargetPolicyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct RatioError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptySetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptyTextError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TriggerContamination : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SequenceTooLong : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NonFiniteGradient : TrainingError {
    using TrainingError::TrainingError;
};
struct SingularCovariance : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DetectorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckerError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct UnknownToken : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace posbd
