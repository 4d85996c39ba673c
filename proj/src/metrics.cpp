#include "bml/metrics.hpp"

#include <cmath>
#include <sstream>

#include "bml/errors.hpp"
#include "bml/text.hpp"

namespace bml {

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t s = 0;
  for (auto v : counts_) s += v;
  return s;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t s = 0;
  for (std::size_t i = 0; i < n_; ++i) s += (*this)(i, i);
  return s;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t i) const {
  std::uint64_t s = 0;
  for (std::size_t j = 0; j < n_; ++j) s += (*this)(i, j);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t j) const {
  std::uint64_t s = 0;
  for (std::size_t i = 0; i < n_; ++i) s += (*this)(i, j);
  return s;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw DimensionError("cannot merge confusion matrices of different sizes");
  for (std::size_t k = 0; k < counts_.size(); ++k) counts_[k] += other.counts_[k];
}

ConfusionMatrix build_confusion(std::span<const int> y_true, std::span<const int> y_pred, std::size_t n) {
  if (y_true.size() != y_pred.size()) {
    throw DimensionError("build_confusion: " + std::to_string(y_true.size()) + " true labels vs " +
                         std::to_string(y_pred.size()) + " predictions");
  }
  ConfusionMatrix c(n);
  for (std::size_t k = 0; k < y_true.size(); ++k) {
    for (int v : {y_true[k], y_pred[k]}) {
      if (v < 0 || static_cast<std::size_t>(v) >= n) {
        throw LabelError("label " + std::to_string(v) + " at index " + std::to_string(k) + " outside [0, " +
                         std::to_string(n) + ")");
      }
    }
    ++c(static_cast<std::size_t>(y_true[k]), static_cast<std::size_t>(y_pred[k]));
  }
  return c;
}

std::vector<ClassStats> per_class_stats(const ConfusionMatrix& c) {
  const std::size_t n = c.size();
  const std::uint64_t total = c.total();
  std::vector<ClassStats> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = out[i];
    s.counts.tp = c(i, i);
    s.counts.fp = c.col_sum(i) - s.counts.tp;
    s.counts.fn = c.row_sum(i) - s.counts.tp;
    s.counts.tn = total - s.counts.tp - s.counts.fp - s.counts.fn;
    const auto [tp, fp, fn, tn] = s.counts;
    s.accuracy = total ? static_cast<double>(tp + tn) / static_cast<double>(total) : 0.0;
    if (tp + fp) {
      s.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    } else {
      s.undefined.precision = true;
    }
    if (tp + fn) {
      s.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    } else {
      s.undefined.recall = true;
    }
    if (s.precision > 0.0 && s.recall > 0.0) {
      s.f1 = 2.0 / (1.0 / s.precision + 1.0 / s.recall);
    } else if (tp + fp + fn == 0) {
      s.undefined.f1 = true;
    }
  }
  return out;
}

MicroMacro micro_macro(const ConfusionMatrix& c) {
  const std::uint64_t total = c.total();
  if (total == 0) throw EmptyEvaluationError("confusion matrix is empty; nothing was scored");
  MicroMacro r;
  r.micro = static_cast<double>(c.trace()) / static_cast<double>(total);
  std::vector<double> rates;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto row = c.row_sum(i);
    if (row == 0) {
      r.excluded.push_back(i);
      continue;
    }
    rates.push_back(static_cast<double>(c(i, i)) / static_cast<double>(row));
  }
  double sum = 0.0;
  for (double v : rates) sum += v;
  r.macro = sum / static_cast<double>(rates.size());
  double var = 0.0;
  for (double v : rates) var += (v - r.macro) * (v - r.macro);
  r.macro_std = std::sqrt(var / static_cast<double>(rates.size()));
  return r;
}

double macro_f1(std::span<const ClassStats> stats) {
  if (stats.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : stats) s += c.f1;
  return s / static_cast<double>(stats.size());
}

EvaluationReport evaluate(const ConfusionMatrix& c) {
  EvaluationReport r;
  r.confusion = c;
  r.per_class = per_class_stats(c);
  const auto mm = micro_macro(c);
  r.micro = mm.micro;
  r.macro = mm.macro;
  r.macro_std = mm.macro_std;
  r.macro_excluded = mm.excluded;
  const double n = static_cast<double>(r.per_class.size());
  for (const auto& s : r.per_class) {
    r.macro_precision += s.precision;
    r.macro_recall += s.recall;
  }
  r.macro_precision /= n;
  r.macro_recall /= n;
  double var = 0.0;
  for (const auto& s : r.per_class) var += (s.precision - r.macro_precision) * (s.precision - r.macro_precision);
  r.precision_std = std::sqrt(var / n);
  r.macro_f1 = macro_f1(r.per_class);
  return r;
}

std::string EvaluationReport::summary() const {
  std::ostringstream os;
  os << "frames=" << confusion.total() << '\n';
  os << "classes=" << confusion.size() << '\n';
  os << "micro=" << format_double(micro) << '\n';
  os << "macro=" << format_double(macro) << '\n';
  os << "macro_std=" << format_double(macro_std) << '\n';
  os << "macro_precision=" << format_double(macro_precision) << '\n';
  os << "precision_std=" << format_double(precision_std) << '\n';
  os << "macro_recall=" << format_double(macro_recall) << '\n';
  os << "macro_f1=" << format_double(macro_f1) << '\n';
  os << "macro_excluded=";
  for (std::size_t i = 0; i < macro_excluded.size(); ++i) os << (i ? "," : "") << macro_excluded[i];
  os << '\n';
  os << "undefined_classes=";
  bool first = true;
  for (std::size_t i = 0; i < per_class.size(); ++i) {
    if (!per_class[i].undefined.any()) continue;
    os << (first ? "" : ",") << i;
    first = false;
  }
  os << '\n';
  return os.str();
}

std::string EvaluationReport::confusion_csv(bool normalized) const {
  std::ostringstream os;
  const std::size_t n = confusion.size();
  os << "true\\pred";
  for (std::size_t j = 0; j < n; ++j) os << ',' << j;
  os << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    os << i;
    const auto row = confusion.row_sum(i);
    for (std::size_t j = 0; j < n; ++j) {
      os << ',';
      if (normalized) {
        os << format_double(row ? static_cast<double>(confusion(i, j)) / static_cast<double>(row) : 0.0);
      } else {
        os << confusion(i, j);
      }
    }
    os << '\n';
  }
  return os.str();
}

std::string EvaluationReport::per_class_csv() const {
  std::ostringstream os;
  os << "class,tp,fp,fn,tn,accuracy,precision,recall,f1,undefined\n";
  for (std::size_t i = 0; i < per_class.size(); ++i) {
    const auto& s = per_class[i];
    os << i << ',' << s.counts.tp << ',' << s.counts.fp << ',' << s.counts.fn << ',' << s.counts.tn << ','
       << format_double(s.accuracy) << ',' << format_double(s.precision) << ',' << format_double(s.recall) << ','
       << format_double(s.f1) << ',';
    std::string flags;
    if (s.undefined.precision) flags += "P";
    if (s.undefined.recall) flags += "R";
    if (s.undefined.f1) flags += "F";
    os << flags << '\n';
  }
  return os.str();
}

}  // namespace bml
