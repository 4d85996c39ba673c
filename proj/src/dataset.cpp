#include "bml/dataset.hpp"

#include <algorithm>
#include <sstream>

#include "bml/data.hpp"
#include "bml/errors.hpp"
#include "bml/tensor_io.hpp"
#include "bml/text.hpp"

namespace bml {

namespace fs = std::filesystem;

std::string_view to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::features:
      return "features";
    case DatasetKind::frames:
      return "frames";
    case DatasetKind::images:
      return "images";
  }
  return "?";
}

DatasetKind parse_dataset_kind(std::string_view name) {
  if (name == "features") return DatasetKind::features;
  if (name == "frames") return DatasetKind::frames;
  if (name == "images") return DatasetKind::images;
  throw ParseError("unknown dataset kind '" + std::string(name) + "'");
}

bool is_valid_trial_id(std::string_view id) {
  if (id.empty() || id.front() == '.') return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-' ||
           c == '.';
  });
}

std::string DatasetManifest::serialize() const {
  std::ostringstream os;
  os << "format " << format << '\n'
     << "kind " << to_string(kind) << '\n'
     << "frame_stride " << frame_stride << '\n'
     << "num_classes " << num_classes << '\n';
  for (const auto& t : trials) os << "trial " << t.id << ' ' << t.rows << '\n';
  return os.str();
}

DatasetManifest DatasetManifest::parse(std::string_view text) {
  DatasetManifest m;
  bool have_kind = false;
  std::size_t line_no = 0;
  for (auto raw : split(text, '\n')) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto f = split_whitespace(line);
    const std::string where = "manifest line " + std::to_string(line_no);
    auto need = [&](std::size_t n) {
      if (f.size() != n) throw ParseError(where + ": expected " + std::to_string(n) + " fields");
    };
    auto positive = [&](std::string_view v) {
      const long long x = parse_int(v);
      if (x < 0) throw ParseError(where + ": negative value");
      return static_cast<std::size_t>(x);
    };
    if (f[0] == "format") {
      need(2);
      m.format = static_cast<int>(parse_int(f[1]));
      if (m.format != 1) throw ParseError(where + ": unsupported manifest format " + std::string(f[1]));
    } else if (f[0] == "kind") {
      need(2);
      m.kind = parse_dataset_kind(f[1]);
      have_kind = true;
    } else if (f[0] == "frame_stride") {
      need(2);
      m.frame_stride = positive(f[1]);
      if (m.frame_stride == 0) throw ParseError(where + ": frame_stride must be positive");
    } else if (f[0] == "num_classes") {
      need(2);
      m.num_classes = positive(f[1]);
    } else if (f[0] == "trial") {
      need(3);
      if (!is_valid_trial_id(f[1])) throw ParseError(where + ": invalid trial id '" + std::string(f[1]) + "'");
      m.trials.push_back({std::string(f[1]), positive(f[2])});
    } else {
      throw ParseError(where + ": unknown key '" + std::string(f[0]) + "'");
    }
  }
  if (!have_kind) throw ParseError("manifest has no 'kind' line");
  return m;
}

DatasetManifest read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.txt";
  try {
    return DatasetManifest::parse(read_text_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

namespace {

void prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

template <typename Trial>
void write_common(const fs::path& dir, const Trial& t, std::size_t stride, std::size_t num_classes,
                  DatasetManifest& m) {
  if (!is_valid_trial_id(t.trial_id)) throw ConfigError("invalid trial id '" + t.trial_id + "'");
  for (int l : t.labels)
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw LabelError("trial '" + t.trial_id + "' has label " + std::to_string(l) + " outside [0, " +
                       std::to_string(num_classes) + ")");
    }
  write_text_file(dir / (t.trial_id + ".txt"), serialize_transcript(labels_to_transcript(t.labels, stride)));
  m.trials.push_back({t.trial_id, t.labels.size()});
}

struct RawTrial {
  std::string id;
  Tensor data;
  std::vector<std::size_t> rows;  // kept row indices
  std::vector<int> labels;
  std::vector<long long> frames;
};

std::vector<RawTrial> load_raw(const fs::path& dir, DatasetKind expected, LoadStats* stats) {
  const auto m = read_manifest(dir);
  if (m.kind != expected) {
    throw StructureError((dir / "manifest.txt").string() + " describes a " + std::string(to_string(m.kind)) +
                         " dataset, expected " + std::string(to_string(expected)));
  }
  auto trials = m.trials;
  std::sort(trials.begin(), trials.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  std::vector<RawTrial> out;
  const char* ext = expected == DatasetKind::features ? ".features" : ".frames";
  for (const auto& t : trials) {
    const fs::path tensor_path = dir / (t.id + ext);
    const fs::path transcript_path = dir / (t.id + ".txt");
    RawTrial r;
    r.id = t.id;
    r.data = load_tensor(tensor_path);
    const std::size_t want_rank = expected == DatasetKind::features ? 2 : 4;
    if (r.data.rank() != want_rank || r.data.dim(0) != t.rows) {
      throw DimensionError(tensor_path.string() + ": shape " + shape_to_string(r.data.shape()) +
                           " does not match manifest (" + std::to_string(t.rows) + " rows, rank " +
                           std::to_string(want_rank) + ")");
    }
    std::vector<TranscriptEntry> transcript;
    try {
      transcript = parse_transcript(read_text_file(transcript_path));
    } catch (const ParseError& e) {
      throw ParseError(transcript_path.string() + ": " + e.what());
    }
    PreprocessConfig pc;
    pc.downsample_r = m.frame_stride;
    pc.crop_width = pc.crop_height = pc.resize_width = pc.resize_height = 1;
    const auto ds = downsample_and_label(transcript, static_cast<long long>(t.rows * m.frame_stride), pc);
    for (std::size_t i = 0; i < ds.kept_frames.size(); ++i) {
      if (static_cast<std::size_t>(ds.labels[i]) >= m.num_classes) {
        throw LabelError(transcript_path.string() + ": gesture G" + std::to_string(ds.labels[i] + 1) +
                         " exceeds num_classes " + std::to_string(m.num_classes));
      }
      r.rows.push_back(static_cast<std::size_t>(ds.kept_frames[i]) / m.frame_stride);
      r.labels.push_back(ds.labels[i]);
      r.frames.push_back(ds.kept_frames[i]);
    }
    if (stats) stats->dropped_unlabeled += ds.dropped_unlabeled.size();
    out.push_back(std::move(r));
  }
  return out;
}

Tensor select_rows(const Tensor& data, const std::vector<std::size_t>& rows) {
  Shape shape = data.shape();
  const std::size_t stride = data.size() / shape[0];
  if (rows.size() == shape[0]) return data;
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(data.data() + rows[i] * stride, stride, out.data() + i * stride);
  return out;
}

}  // namespace

void write_feature_dataset(const fs::path& dir, std::span<const SequenceSample> samples, std::size_t frame_stride,
                           std::size_t num_classes) {
  prepare_dir(dir);
  DatasetManifest m;
  m.kind = DatasetKind::features;
  m.frame_stride = frame_stride;
  m.num_classes = num_classes;
  for (const auto& s : samples) {
    s.validate();
    write_common(dir, s, frame_stride, num_classes, m);
    save_tensor(dir / (s.trial_id + ".features"), s.features);
  }
  write_text_file(dir / "manifest.txt", m.serialize());
}

void write_frame_dataset(const fs::path& dir, std::span<const FrameTrial> trials, std::size_t frame_stride,
                         std::size_t num_classes) {
  prepare_dir(dir);
  DatasetManifest m;
  m.kind = DatasetKind::frames;
  m.frame_stride = frame_stride;
  m.num_classes = num_classes;
  for (const auto& t : trials) {
    if (t.frames.rank() != 4 || t.frames.dim(0) != t.labels.size()) {
      throw DimensionError("trial '" + t.trial_id + "': frames " + shape_to_string(t.frames.shape()) + " for " +
                           std::to_string(t.labels.size()) + " labels");
    }
    write_common(dir, t, frame_stride, num_classes, m);
    save_tensor(dir / (t.trial_id + ".frames"), t.frames);
  }
  write_text_file(dir / "manifest.txt", m.serialize());
}

std::vector<SequenceSample> load_feature_dataset(const fs::path& dir, LoadStats* stats) {
  std::vector<SequenceSample> out;
  for (auto& r : load_raw(dir, DatasetKind::features, stats)) {
    SequenceSample s;
    s.trial_id = r.id;
    s.features = select_rows(r.data, r.rows);
    s.labels = std::move(r.labels);
    s.frame_indices = std::move(r.frames);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<FrameTrial> load_frame_dataset(const fs::path& dir, LoadStats* stats) {
  std::vector<FrameTrial> out;
  for (auto& r : load_raw(dir, DatasetKind::frames, stats)) {
    FrameTrial t;
    t.trial_id = r.id;
    t.frames = select_rows(r.data, r.rows);
    t.labels = std::move(r.labels);
    t.frame_indices = std::move(r.frames);
    out.push_back(std::move(t));
  }
  return out;
}

namespace {
constexpr const char* kImageEntry = "images";
}

void write_image_dataset(const fs::path& dir, std::span<const ImageSample> images, std::size_t num_classes) {
  prepare_dir(dir);
  Shape shape{images.size(), 0, 0, 0};
  if (!images.empty()) {
    const Tensor& first = images.front().pixels;
    if (first.rank() != 3) throw DimensionError("images must be H x W x C");
    shape = {images.size(), first.dim(0), first.dim(1), first.dim(2)};
  }
  Tensor all(shape);
  std::ostringstream labels;
  const std::size_t px = images.empty() ? 0 : images.front().pixels.size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    if (img.pixels.shape() != images.front().pixels.shape()) {
      throw DimensionError("image " + std::to_string(i) + " has shape " + shape_to_string(img.pixels.shape()) +
                           ", expected " + shape_to_string(images.front().pixels.shape()));
    }
    if (img.label < 0 || static_cast<std::size_t>(img.label) >= num_classes) {
      throw LabelError("image " + std::to_string(i) + " has label " + std::to_string(img.label) + " outside [0, " +
                       std::to_string(num_classes) + ")");
    }
    std::copy_n(img.pixels.data(), px, all.data() + i * px);
    labels << img.label;
    if (img.box) labels << ' ' << img.box->x0 << ' ' << img.box->y0 << ' ' << img.box->x1 << ' ' << img.box->y1;
    labels << '\n';
  }
  save_tensor(dir / (std::string(kImageEntry) + ".frames"), all);
  write_text_file(dir / (std::string(kImageEntry) + ".labels"), labels.str());
  DatasetManifest m;
  m.kind = DatasetKind::images;
  m.num_classes = num_classes;
  m.trials.push_back({kImageEntry, images.size()});
  write_text_file(dir / "manifest.txt", m.serialize());
}

std::vector<ImageSample> load_image_dataset(const fs::path& dir, std::size_t* num_classes) {
  const auto m = read_manifest(dir);
  if (m.kind != DatasetKind::images) {
    throw StructureError((dir / "manifest.txt").string() + " describes a " + std::string(to_string(m.kind)) +
                         " dataset, expected images");
  }
  if (m.trials.size() != 1 || m.trials[0].id != kImageEntry) {
    throw StructureError((dir / "manifest.txt").string() + ": an image dataset has exactly one entry named images");
  }
  const std::size_t n = m.trials[0].rows;
  const fs::path tensor_path = dir / (std::string(kImageEntry) + ".frames");
  const fs::path labels_path = dir / (std::string(kImageEntry) + ".labels");
  const Tensor all = load_tensor(tensor_path);
  if (all.rank() != 4 || all.dim(0) != n) {
    throw DimensionError(tensor_path.string() + ": shape " + shape_to_string(all.shape()) + " does not match " +
                         std::to_string(n) + " images");
  }
  std::vector<ImageSample> out;
  const std::string label_text = read_text_file(labels_path);
  std::size_t line_no = 0;
  for (auto raw : split(label_text, '\n')) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty()) continue;
    const std::string where = labels_path.string() + " line " + std::to_string(line_no);
    const auto f = split_whitespace(line);
    if (f.size() != 1 && f.size() != 5) throw ParseError(where + ": expected 'label' or 'label x0 y0 x1 y1'");
    ImageSample s;
    s.label = static_cast<int>(parse_int(f[0]));
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= m.num_classes) {
      throw LabelError(where + ": label " + std::string(f[0]) + " outside [0, " + std::to_string(m.num_classes) + ")");
    }
    if (f.size() == 5) {
      BoundingBox b;
      b.x0 = static_cast<std::size_t>(parse_int(f[1]));
      b.y0 = static_cast<std::size_t>(parse_int(f[2]));
      b.x1 = static_cast<std::size_t>(parse_int(f[3]));
      b.y1 = static_cast<std::size_t>(parse_int(f[4]));
      if (b.x1 < b.x0 || b.y1 < b.y0 || b.x1 > all.dim(2) || b.y1 > all.dim(1)) {
        throw ParseError(where + ": box outside the image");
      }
      s.box = b;
    }
    out.push_back(std::move(s));
  }
  if (out.size() != n) {
    throw StructureError(labels_path.string() + " has " + std::to_string(out.size()) + " labels for " +
                         std::to_string(n) + " images");
  }
  const std::size_t h = all.dim(1), w = all.dim(2), c = all.dim(3), px = h * w * c;
  for (std::size_t i = 0; i < n; ++i) {
    out[i].pixels = Tensor({h, w, c});
    std::copy_n(all.data() + i * px, px, out[i].pixels.data());
  }
  if (num_classes) *num_classes = m.num_classes;
  return out;
}

DatasetKind dataset_kind(const fs::path& dir) { return read_manifest(dir).kind; }

std::vector<ImageSample> frames_to_images(std::span<const FrameTrial> trials) {
  std::vector<ImageSample> out;
  for (const auto& t : trials) {
    if (t.frames.rank() != 4) throw DimensionError("trial '" + t.trial_id + "' frames must be T x H x W x C");
    const std::size_t h = t.frames.dim(1), w = t.frames.dim(2), c = t.frames.dim(3), px = h * w * c;
    for (std::size_t i = 0; i < t.labels.size(); ++i) {
      Tensor img({h, w, c});
      std::copy_n(t.frames.data() + i * px, px, img.data());
      out.push_back(ImageSample{std::move(img), t.labels[i], std::nullopt});
    }
  }
  return out;
}

}  // namespace bml
