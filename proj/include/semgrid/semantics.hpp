#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace semgrid {

inline constexpr std::size_t kNumClasses = 16;
inline constexpr std::size_t kMaxClasses = 16;
inline constexpr double kProbFloor = 1e-9;
inline constexpr double kLogStoreMin = -700.0;  // keeps stored log probabilities finite

inline constexpr int kPersonClass = 0;
inline constexpr int kFloorClass = 1;
inline constexpr int kWallClass = 2;
inline constexpr int kCeilingClass = 3;

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Ordered semantic label set. Index order is part of the wire format.
struct ClassSet {
  std::vector<std::string> names;
  std::vector<Rgb> colors;

  std::size_t size() const { return names.size(); }
  int index_of(const std::string& name) const;  // -1 when unknown
  /// FNV-1a 64 over the canonical `index name r g b\n` lines.
  std::uint64_t fingerprint() const;
  void validate() const;
};

ClassSet default_class_set();
ClassSet parse_class_set(std::istream& in, const std::string& source_name = "<stream>");
ClassSet load_class_set(const std::string& path);
void write_class_set(std::ostream& out, const ClassSet& classes);

/// Probability vector over up to kMaxClasses labels, stored as exact normalized natural logs.
/// Reads apply the floor: every probability read is at least kProbFloor and the read vector
/// sums to one. Fusion works on the stored values, so it stays associative.
class ClassDistribution {
 public:
  /// Uniform over kNumClasses.
  ClassDistribution();

  static ClassDistribution uniform(std::size_t num_classes = kNumClasses);
  /// Normalizes arbitrary non-negative weights (at least one positive).
  static ClassDistribution from_probabilities(std::span<const double> weights);
  /// Normalizes unnormalized log weights.
  static ClassDistribution from_log_weights(std::span<const double> log_weights);

  std::size_t size() const { return size_; }
  /// Stored log probability, before the floor.
  double raw_log_p(std::size_t i) const { return log_p_[i]; }
  /// Floored probabilities.
  double log_p(std::size_t i) const { return std::log(prob(i)); }
  double prob(std::size_t i) const;
  std::vector<double> probabilities() const;
  std::array<double, kMaxClasses> floored() const;
  bool is_uniform(double tol = 1e-12) const;

  friend bool operator==(const ClassDistribution&, const ClassDistribution&) = default;

 private:
  std::uint8_t size_ = 0;
  std::array<double, kMaxClasses> log_p_{};
};

/// Numerically stable soft-max of raw class scores.
ClassDistribution softmax(std::span<const double> scores);

/// Detector score on the detected class, the remaining mass spread evenly over the others.
/// Requires 0 < score < 1.
ClassDistribution max_entropy_detection(int class_idx, double score, std::size_t num_classes = kNumClasses);

/// Pulls a raw detector score into the open interval accepted by max_entropy_detection.
double clamp_detector_score(double score, std::size_t num_classes = kNumClasses);

/// Normalized coefficient-wise product, computed in the log domain.
ClassDistribution bayes_fuse(const ClassDistribution& a, const ClassDistribution& b);

struct ClassScore {
  int class_idx = 0;
  double probability = 0.0;
};

/// Most probable class; ties go to the lowest index.
ClassScore argmax_class(const ClassDistribution& d);

}  // namespace semgrid
