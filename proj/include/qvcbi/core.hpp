#ifndef QVCBI_CORE_HPP
#define QVCBI_CORE_HPP

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace qvcbi {

/// Upper bound on the number of states of a latent node (M_i + 1).
inline constexpr int kMaxStates = 8;

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Small fixed-capacity vectors over the states of one node; these never touch the heap.
template <typename Scalar>
using StateVectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1, 0, kMaxStates, 1>;
template <typename Scalar>
using StateMatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxStates, kMaxStates>;
using StateVector = StateVectorX<double>;
using StateMatrix = StateMatrixX<double>;

/// The three latent hazard/impact nodes. The numeric order is the E-step sweep order.
enum class HazardKind : int { LS = 0, LF = 1, BD = 2 };
inline constexpr int kHazardCount = 3;
inline constexpr std::array<HazardKind, kHazardCount> kAllHazards{HazardKind::LS, HazardKind::LF,
                                                                  HazardKind::BD};

constexpr int idx(HazardKind h) { return static_cast<int>(h); }

std::string_view to_string(HazardKind h);
HazardKind hazard_from_string(std::string_view name);

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or network definition.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (grids, CSV, XML).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure during fitting (NaN ELBO, NaN posterior).
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int epoch, int batch, Index location)
      : Error(what), epoch_(epoch), batch_(batch), location_(location) {}
  int epoch() const { return epoch_; }
  int batch() const { return batch_; }
  Index location() const { return location_; }

 private:
  int epoch_;
  int batch_;
  Index location_;
};

}  // namespace qvcbi

#endif  // QVCBI_CORE_HPP
