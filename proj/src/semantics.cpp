#include "semgrid/semantics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace semgrid {

namespace {

void check_size(std::size_t n) {
  if (n < 1 || n > kMaxClasses) throw std::invalid_argument("class distribution: unsupported class count");
}

// Floors every probability at kProbFloor while keeping the sum at one.
void apply_floor(std::span<double> p) {
  const std::size_t n = p.size();
  std::array<bool, kMaxClasses> floored{};
  for (std::size_t iter = 0; iter <= n; ++iter) {
    std::size_t nfloored = 0;
    double free_mass = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!floored[i] && p[i] < kProbFloor) floored[i] = true;
      if (floored[i]) {
        ++nfloored;
      } else {
        free_mass += p[i];
      }
    }
    if (nfloored == 0) return;
    const double scale = (1.0 - static_cast<double>(nfloored) * kProbFloor) / free_mass;
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (floored[i]) {
        p[i] = kProbFloor;
      } else {
        p[i] *= scale;
        changed |= p[i] < kProbFloor;
      }
    }
    if (!changed) return;
  }
}

}  // namespace

ClassDistribution::ClassDistribution() : size_(static_cast<std::uint8_t>(kNumClasses)) {
  log_p_.fill(-std::log(static_cast<double>(kNumClasses)));
}

std::array<double, kMaxClasses> ClassDistribution::floored() const {
  std::array<double, kMaxClasses> p{};
  bool low = false;
  for (std::size_t i = 0; i < size_; ++i) {
    p[i] = std::exp(log_p_[i]);
    low |= p[i] < kProbFloor;
  }
  if (low) apply_floor(std::span<double>(p.data(), size_));
  return p;
}

double ClassDistribution::prob(std::size_t i) const {
  const double p = std::exp(log_p_[i]);
  if (p < kProbFloor) return floored()[i];
  for (std::size_t j = 0; j < size_; ++j)
    if (log_p_[j] < std::log(kProbFloor)) return floored()[i];
  return p;
}

std::vector<double> ClassDistribution::probabilities() const {
  const auto p = floored();
  return std::vector<double>(p.begin(), p.begin() + size_);
}

bool ClassDistribution::is_uniform(double tol) const {
  const double target = 1.0 / static_cast<double>(size_);
  const auto p = floored();
  for (std::size_t i = 0; i < size_; ++i)
    if (std::abs(p[i] - target) > tol) return false;
  return true;
}

ClassDistribution ClassDistribution::uniform(std::size_t num_classes) {
  check_size(num_classes);
  ClassDistribution d;
  d.size_ = static_cast<std::uint8_t>(num_classes);
  d.log_p_.fill(0.0);
  const double lp = -std::log(static_cast<double>(num_classes));
  for (std::size_t i = 0; i < num_classes; ++i) d.log_p_[i] = lp;
  return d;
}

ClassDistribution ClassDistribution::from_log_weights(std::span<const double> log_weights) {
  check_size(log_weights.size());
  double m = -INFINITY;
  for (double w : log_weights) {
    if (std::isnan(w) || w == INFINITY) throw std::invalid_argument("class distribution: invalid log weight");
    m = std::max(m, w);
  }
  if (m == -INFINITY) throw std::invalid_argument("class distribution: all weights are zero");
  const std::size_t n = log_weights.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(log_weights[i] - m);
  const double log_z = m + std::log(s);
  ClassDistribution d;
  d.size_ = static_cast<std::uint8_t>(n);
  d.log_p_.fill(0.0);
  for (std::size_t i = 0; i < n; ++i) d.log_p_[i] = std::max(log_weights[i] - log_z, kLogStoreMin);
  return d;
}

ClassDistribution ClassDistribution::from_probabilities(std::span<const double> weights) {
  check_size(weights.size());
  std::array<double, kMaxClasses> lw{};
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!(weights[i] >= 0.0) || !std::isfinite(weights[i]))
      throw std::invalid_argument("class distribution: weights must be finite and non-negative");
    lw[i] = weights[i] > 0.0 ? std::log(weights[i]) : -INFINITY;
  }
  return from_log_weights(std::span<const double>(lw.data(), weights.size()));
}

ClassDistribution softmax(std::span<const double> scores) {
  for (double c : scores)
    if (!std::isfinite(c)) throw std::invalid_argument("softmax: non-finite score");
  return ClassDistribution::from_log_weights(scores);
}

ClassDistribution max_entropy_detection(int class_idx, double score, std::size_t num_classes) {
  check_size(num_classes);
  if (num_classes < 2) throw std::invalid_argument("max_entropy_detection: need at least two classes");
  if (class_idx < 0 || static_cast<std::size_t>(class_idx) >= num_classes)
    throw std::invalid_argument("max_entropy_detection: class index out of range");
  if (!(score > 0.0 && score < 1.0)) throw std::invalid_argument("max_entropy_detection: score must be in (0,1)");
  std::array<double, kMaxClasses> p{};
  const double rest = (1.0 - score) / static_cast<double>(num_classes - 1);
  for (std::size_t i = 0; i < num_classes; ++i) p[i] = rest;
  p[static_cast<std::size_t>(class_idx)] = score;
  return ClassDistribution::from_probabilities(std::span<const double>(p.data(), num_classes));
}

double clamp_detector_score(double score, std::size_t num_classes) {
  const double hi = 1.0 - static_cast<double>(num_classes - 1) * kProbFloor;
  return std::clamp(score, kProbFloor, hi);
}

ClassDistribution bayes_fuse(const ClassDistribution& a, const ClassDistribution& b) {
  if (a.size() != b.size()) throw std::invalid_argument("bayes_fuse: class count mismatch");
  std::array<double, kMaxClasses> s{};
  for (std::size_t i = 0; i < a.size(); ++i) s[i] = a.raw_log_p(i) + b.raw_log_p(i);
  return ClassDistribution::from_log_weights(std::span<const double>(s.data(), a.size()));
}

ClassScore argmax_class(const ClassDistribution& d) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < d.size(); ++i)
    if (d.raw_log_p(i) > d.raw_log_p(best)) best = i;
  return ClassScore{static_cast<int>(best), d.prob(best)};
}

int ClassSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  return -1;
}

std::uint64_t ClassSet::fingerprint() const {
  std::ostringstream canon;
  write_class_set(canon, *this);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canon.str()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void ClassSet::validate() const {
  if (names.size() != kNumClasses) throw std::invalid_argument("class set: expected 16 classes");
  if (colors.size() != names.size()) throw std::invalid_argument("class set: colors/names size mismatch");
  std::set<std::string> unique(names.begin(), names.end());
  if (unique.size() != names.size()) throw std::invalid_argument("class set: duplicate class names");
  if (names[kPersonClass] != "person" || names[kFloorClass] != "floor")
    throw std::invalid_argument("class set: index 0 must be person and index 1 floor");
}

ClassSet default_class_set() {
  ClassSet cs;
  cs.names = {"person", "floor",   "wall",  "ceiling", "door",    "window", "table", "chair",
              "sofa",   "cabinet", "shelf", "monitor", "plant",   "lamp",   "bed",   "clutter"};
  cs.colors = {{220, 20, 60},  {128, 64, 128}, {70, 70, 70},    {180, 180, 180}, {140, 90, 40},  {100, 180, 230},
               {230, 160, 40}, {140, 60, 200}, {200, 100, 120}, {90, 120, 60},   {160, 110, 70}, {30, 30, 200},
               {40, 160, 40},  {250, 230, 90}, {120, 200, 200}, {128, 128, 0}};
  return cs;
}

ClassSet parse_class_set(std::istream& in, const std::string& source_name) {
  ClassSet cs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    long idx = 0;
    if (!(ls >> idx)) continue;
    std::string name;
    int r = 0, g = 0, b = 0;
    ls >> name >> r >> g >> b;
    auto fail = [&](const std::string& msg) {
      throw std::runtime_error(source_name + ":" + std::to_string(lineno) + ": " + msg);
    };
    if (!ls) fail("expected `index name r g b`");
    if (idx != static_cast<long>(cs.names.size())) fail("class indices must be consecutive from 0");
    if (r < 0 || r > 255 || g < 0 || g > 255 || b < 0 || b > 255) fail("color component out of range");
    cs.names.push_back(name);
    cs.colors.push_back(Rgb{static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)});
  }
  try {
    cs.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(source_name + ": " + e.what());
  }
  return cs;
}

ClassSet load_class_set(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open class file " + path);
  return parse_class_set(f, path);
}

void write_class_set(std::ostream& out, const ClassSet& classes) {
  for (std::size_t i = 0; i < classes.names.size(); ++i) {
    const Rgb c = i < classes.colors.size() ? classes.colors[i] : Rgb{};
    out << i << ' ' << classes.names[i] << ' ' << int{c.r} << ' ' << int{c.g} << ' ' << int{c.b} << '\n';
  }
}

}  // namespace semgrid
