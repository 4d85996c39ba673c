#include "bml/ribbon.hpp"

#include <array>
#include <sstream>

#include "bml/errors.hpp"

namespace bml {

std::vector<LabelRun> run_length_encode(std::span<const int> labels) {
  std::vector<LabelRun> runs;
  for (std::size_t i = 0; i < labels.size();) {
    std::size_t j = i + 1;
    while (j < labels.size() && labels[j] == labels[i]) ++j;
    runs.push_back({i, j - i, labels[i]});
    i = j;
  }
  return runs;
}

std::span<const std::string> default_palette() {
  static const std::array<std::string, 10> palette{"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                                   "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return palette;
}

namespace {

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

void emit_bar(std::ostream& os, const char* id, const char* y, std::span<const int> labels,
              std::span<const std::string> palette) {
  os << "  <g id=\"" << id << "\">\n";
  for (const auto& run : run_length_encode(labels)) {
    os << "    <rect x=\"" << run.start << "\" y=\"" << y << "\" width=\"" << run.length
       << "\" height=\"1\" fill=\"" << palette[static_cast<std::size_t>(run.label) % palette.size()]
       << "\"><title>class " << run.label << ", frames " << run.start << "-" << run.start + run.length - 1
       << "</title></rect>\n";
  }
  os << "  </g>\n";
}

}  // namespace

std::string emit_ribbon(std::span<const int> truth, std::span<const int> predicted,
                        std::span<const std::string> palette, const std::string& title) {
  if (truth.size() != predicted.size()) {
    throw DimensionError("ribbon: " + std::to_string(truth.size()) + " ground-truth labels but " +
                         std::to_string(predicted.size()) + " predictions");
  }
  if (palette.empty()) throw ConfigError("ribbon palette is empty");
  for (auto seq : {truth, predicted})
    for (int v : seq)
      if (v < 0) throw LabelError("ribbon label " + std::to_string(v) + " is negative");
  const std::size_t n = truth.size();
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" viewBox=\"0 0 " << (n ? n : 1)
     << " 2.5\" width=\"1000\" height=\"100\" preserveAspectRatio=\"none\" shape-rendering=\"crispEdges\">\n";
  if (!title.empty()) os << "  <title>" << escape_xml(title) << "</title>\n";
  emit_bar(os, "ground-truth", "0", truth, palette);
  emit_bar(os, "prediction", "1.5", predicted, palette);
  os << "</svg>\n";
  return os.str();
}

}  // namespace bml
