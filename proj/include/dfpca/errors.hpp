#pragma once

#include <stdexcept>
#include <string>

namespace dfpca {

/// Coarse error classes. The CLI maps each class to a distinct exit code so
/// callers can tell usage mistakes, bad files, bad configuration, numeric
/// failures, and bundle version mismatches apart without parsing messages.
enum class ErrorClass {
  Usage = 1,       // command line misuse (reserved for the CLI layer)
  Parse = 2,       // unreadable or malformed input files
  Config = 3,      // structurally valid inputs that violate a precondition
  Numeric = 4,     // estimation failed on otherwise valid inputs
  Version = 5,     // persisted bundle written by an incompatible format
};

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, std::string name, const std::string& message)
      : std::runtime_error(name + ": " + message),
        cls_(cls),
        name_(std::move(name)) {}

  ErrorClass error_class() const noexcept { return cls_; }
  const std::string& name() const noexcept { return name_; }
  int exit_code() const noexcept { return static_cast<int>(cls_); }

 private:
  ErrorClass cls_;
  std::string name_;
};

namespace err {

inline Error parse(const std::string& msg) {
  return Error(ErrorClass::Parse, "ParseError", msg);
}
inline Error io(const std::string& msg) {
  return Error(ErrorClass::Parse, "IoError", msg);
}
inline Error observation_outside_grid(const std::string& msg) {
  return Error(ErrorClass::Config, "ObservationOutsideGrid", msg);
}
inline Error degenerate_axis(const std::string& msg) {
  return Error(ErrorClass::Config, "DegenerateAxis", msg);
}
inline Error grid_not_equispaced(const std::string& msg) {
  return Error(ErrorClass::Config, "GridNotEquispaced", msg);
}
inline Error invalid_bandwidth(const std::string& msg) {
  return Error(ErrorClass::Config, "InvalidBandwidth", msg);
}
inline Error invalid_argument(const std::string& msg) {
  return Error(ErrorClass::Config, "InvalidArgument", msg);
}
inline Error halo_too_small(const std::string& msg) {
  return Error(ErrorClass::Config, "HaloTooSmall", msg);
}
inline Error block_too_small(const std::string& msg) {
  return Error(ErrorClass::Config, "BlockTooSmall", msg);
}
inline Error sketch_too_small(const std::string& msg) {
  return Error(ErrorClass::Config, "SketchTooSmall", msg);
}
inline Error out_of_domain(const std::string& msg) {
  return Error(ErrorClass::Config, "OutOfDomain", msg);
}
inline Error too_sparse(const std::string& msg) {
  return Error(ErrorClass::Config, "TooSparseForIntegration", msg);
}
inline Error all_weights_zero(const std::string& msg) {
  return Error(ErrorClass::Numeric, "AllWeightsZero", msg);
}
inline Error bandwidth_too_small(const std::string& msg) {
  return Error(ErrorClass::Numeric, "BandwidthTooSmall", msg);
}
inline Error no_pairs(const std::string& msg) {
  return Error(ErrorClass::Numeric, "NoPairs", msg);
}
inline Error singular_covariance(const std::string& msg) {
  return Error(ErrorClass::Numeric, "SingularCovariance", msg);
}
inline Error eig_failure(const std::string& msg) {
  return Error(ErrorClass::Numeric, "EigFailure", msg);
}
inline Error version_mismatch(const std::string& msg) {
  return Error(ErrorClass::Version, "VersionMismatch", msg);
}

}  // namespace err
}  // namespace dfpca
