#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace bml {

// counts[i][j] = frames of true class i predicted as class j.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n = 0) : n_(n), counts_(n * n, 0) {}

  std::size_t size() const noexcept { return n_; }
  std::uint64_t operator()(std::size_t i, std::size_t j) const { return counts_[i * n_ + j]; }
  std::uint64_t& operator()(std::size_t i, std::size_t j) { return counts_[i * n_ + j]; }
  std::uint64_t total() const;
  std::uint64_t trace() const;
  std::uint64_t row_sum(std::size_t i) const;
  std::uint64_t col_sum(std::size_t j) const;

  void merge(const ConfusionMatrix& other);

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix build_confusion(std::span<const int> y_true, std::span<const int> y_pred, std::size_t n);

struct ClassCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

// Which one-vs-rest ratios hit 0/0 for a class (and were reported as 0).
struct UndefinedFlags {
  bool precision = false;
  bool recall = false;
  bool f1 = false;

  bool any() const { return precision || recall || f1; }
};

struct ClassStats {
  ClassCounts counts;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  UndefinedFlags undefined;
};

std::vector<ClassStats> per_class_stats(const ConfusionMatrix& c);

struct MicroMacro {
  double micro = 0.0;
  double macro = 0.0;
  // Population standard deviation of the per-class rates entering `macro`.
  double macro_std = 0.0;
  // Classes with an empty row; they are left out of macro and macro_std.
  std::vector<std::size_t> excluded;
};

MicroMacro micro_macro(const ConfusionMatrix& c);

// Unweighted mean of class F1 values; flagged classes contribute 0.
double macro_f1(std::span<const ClassStats> stats);

struct EvaluationReport {
  ConfusionMatrix confusion;
  std::vector<ClassStats> per_class;
  double micro = 0.0;
  double macro = 0.0;
  double macro_std = 0.0;
  double macro_precision = 0.0;
  double precision_std = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::vector<std::size_t> macro_excluded;

  // Key-value text summary.
  std::string summary() const;
  // Confusion grid as CSV, raw counts or row-normalised.
  std::string confusion_csv(bool normalized = false) const;
  std::string per_class_csv() const;
};

EvaluationReport evaluate(const ConfusionMatrix& c);

}  // namespace bml
