#include "bml/config.hpp"

#include <functional>
#include <sstream>

#include "bml/errors.hpp"
#include "bml/tensor_io.hpp"
#include "bml/text.hpp"

namespace bml {

KeyValueConfig KeyValueConfig::parse(std::string_view text) {
  KeyValueConfig kv;
  std::size_t line_no = 0;
  for (auto raw : split(text, '\n')) {
    ++line_no;
    auto line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ParseError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError("config line " + std::to_string(line_no) + ": empty key");
    kv.set(std::string(key), std::string(value));
  }
  return kv;
}

void KeyValueConfig::set(const std::string& key, const std::string& value) { entries_[key] = value; }

std::optional<std::string> KeyValueConfig::get(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

namespace {

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

std::size_t to_size(std::string_view v) {
  const long long x = parse_int(v);
  if (x < 0) throw ParseError("expected a non-negative integer, got '" + std::string(v) + "'");
  return static_cast<std::size_t>(x);
}

bool to_bool(std::string_view v) {
  v = trim(v);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ParseError("expected true or false, got '" + std::string(v) + "'");
}

std::string from_bool(bool b) { return b ? "true" : "false"; }

std::vector<std::size_t> to_size_list(std::string_view v) {
  std::vector<std::size_t> out;
  for (auto part : split(v, ',')) out.push_back(to_size(part));
  return out;
}

std::vector<double> to_double_list(std::string_view v) {
  std::vector<double> out;
  for (auto part : split(v, ',')) out.push_back(parse_double(part));
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F&& fmt) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ',';
    s += fmt(xs[i]);
  }
  return s;
}

std::string size_list(const std::vector<std::size_t>& xs) {
  return join(xs, [](std::size_t x) { return std::to_string(x); });
}

#define BML_SIZE(key, member) \
  Field { key, [](const RunConfig& c) { return std::to_string(c.member); }, [](RunConfig& c, std::string_view v) { c.member = to_size(v); } }
#define BML_DOUBLE(key, member) \
  Field { key, [](const RunConfig& c) { return format_double(c.member); }, [](RunConfig& c, std::string_view v) { c.member = parse_double(v); } }
#define BML_BOOL(key, member) \
  Field { key, [](const RunConfig& c) { return from_bool(c.member); }, [](RunConfig& c, std::string_view v) { c.member = to_bool(v); } }
#define BML_SIZES(key, member) \
  Field { key, [](const RunConfig& c) { return size_list(c.member); }, [](RunConfig& c, std::string_view v) { c.member = to_size_list(v); } }

#define BML_TRAIN(prefix, member)                    \
  BML_DOUBLE(prefix ".lr0", member.lr0),             \
  BML_DOUBLE(prefix ".decay", member.decay),         \
  BML_SIZE(prefix ".batch_size", member.batch_size), \
  BML_SIZE(prefix ".epochs", member.epochs),         \
  BML_DOUBLE(prefix ".clip_norm", member.clip_norm), \
  BML_BOOL(prefix ".shuffle", member.shuffle)

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
            [](RunConfig& c, std::string_view v) { c.seed = to_size(v); }},
      BML_SIZE("threads", threads),

      BML_SIZE("synth.trials", trials),
      BML_SIZE("synth.frame_stride", frame_stride),
      Field{"synth.num_classes", [](const RunConfig& c) { return std::to_string(c.task.num_classes); },
            [](RunConfig& c, std::string_view v) { c.task.num_classes = c.image.num_classes = to_size(v); }},
      BML_SIZE("synth.feature_dim", task.feature_dim),
      Field{"synth.duration_mean",
            [](const RunConfig& c) { return join(c.task.duration_mean, [](double d) { return format_double(d); }); },
            [](RunConfig& c, std::string_view v) { c.task.duration_mean = to_double_list(v); }},
      BML_DOUBLE("synth.noise_sigma", task.noise_sigma),
      BML_SIZE("synth.future_offset", task.future_offset),
      BML_SIZE("synth.min_length", task.min_length),
      BML_SIZE("synth.max_length", task.max_length),

      BML_SIZE("image.size", image.size),
      BML_SIZE("image.grid", image.grid),
      BML_SIZE("image.blob", image.blob),
      BML_DOUBLE("image.background_noise", image.background_noise),
      BML_DOUBLE("image.intensity_low", image.intensity_low),
      BML_DOUBLE("image.intensity_high", image.intensity_high),

      BML_SIZE("source.classes", source_classes),
      BML_SIZE("source.images", source_images),

      BML_SIZES("cnn.block_channels", cnn.block_channels),
      BML_SIZES("cnn.block_convs", cnn.block_convs),
      BML_SIZE("cnn.feature_dim", cnn.feature_dim),
      BML_TRAIN("cnn", cnn_train),

      BML_SIZE("finetune.freeze_blocks", freeze_blocks),
      BML_BOOL("finetune.freeze_fc1", freeze_fc1),
      BML_TRAIN("finetune", finetune_train),

      BML_SIZES("rnn.hidden", rnn.hidden),
      Field{"rnn.activation", [](const RunConfig& c) { return std::string(to_string(c.rnn.activation)); },
            [](RunConfig& c, std::string_view v) { c.rnn.activation = parse_activation(trim(v)); }},
      Field{"rnn.fusion", [](const RunConfig& c) { return std::string(to_string(c.rnn.fusion)); },
            [](RunConfig& c, std::string_view v) { c.rnn.fusion = parse_fusion(trim(v)); }},
      BML_DOUBLE("rnn.u_max", rnn.u_max),
      BML_TRAIN("rnn", rnn_train),

      BML_DOUBLE("split.train_fraction", train_fraction),
      BML_DOUBLE("gradcam.alpha", gradcam_alpha),
  };
  return table;
}

#undef BML_SIZE
#undef BML_DOUBLE
#undef BML_BOOL
#undef BML_SIZES
#undef BML_TRAIN

}  // namespace

RunConfig::RunConfig() {
  task.duration_mean = {12.0};
  task.min_length = 60;
  task.max_length = 100;

  // Blobs fill their grid cell, and two blocks leave 16 x 16 final maps, so a
  // blob covers 4 x 4 Grad-CAM cells. A third block shrinks that to 2 x 2 and
  // its receptive field lets edge detectors next to the blob carry the class.
  image.blob = 8;
  cnn.block_channels = {16, 32};
  cnn.block_convs = {1, 1};

  cnn_train.lr0 = 0.05;
  cnn_train.epochs = 4;
  finetune_train.lr0 = 0.02;
  finetune_train.epochs = 3;

  rnn_train.lr0 = 0.1;
  rnn_train.epochs = 30;
  rnn_train.batch_size = 2;
  rnn_train.clip_norm = 5.0;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key != key) continue;
    try {
      f.set(*this, value);
    } catch (const Error& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::apply(const KeyValueConfig& kv) {
  for (const auto& [k, v] : kv.entries()) set(k, v);
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.key << " = " << f.get(*this) << '\n';
  return os.str();
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

void RunConfig::validate() const {
  task.validate();
  image.validate();
  if (task.num_classes != image.num_classes) {
    throw ConfigError("synth.num_classes " + std::to_string(task.num_classes) +
                      " does not fit the image grid (image classes " + std::to_string(image.num_classes) + ")");
  }
  source_image_spec().validate();
  cnn_config(source_classes).validate();
  if (freeze_blocks > cnn.block_channels.size()) {
    throw ConfigError("finetune.freeze_blocks exceeds the number of CNN blocks");
  }
  if (frame_stride == 0) throw ConfigError("synth.frame_stride must be positive");
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("split.train_fraction must lie in (0, 1]");
  if (!(gradcam_alpha >= 0.0 && gradcam_alpha <= 1.0)) throw ConfigError("gradcam.alpha must lie in [0, 1]");
  cnn_train.validate();
  finetune_train.validate();
  rnn_train.validate();
  if (rnn.hidden.empty()) throw ConfigError("rnn.hidden needs at least one layer");
  for (auto n : rnn.hidden)
    if (n == 0) throw ConfigError("rnn.hidden sizes must be positive");
  if (!(rnn.u_max > 0.0)) throw ConfigError("rnn.u_max must be positive");
}

SyntheticImageSpec RunConfig::source_image_spec() const {
  SyntheticImageSpec s = image;
  s.num_classes = source_classes;
  return s;
}

ConvNetConfig RunConfig::cnn_config(std::size_t num_classes) const {
  ConvNetConfig c = cnn;
  c.height = c.width = image.size;
  c.channels = 1;
  c.num_classes = num_classes;
  return c;
}

ModelConfig RunConfig::rnn_config(std::size_t input_dim) const {
  ModelConfig m = rnn;
  m.input_dim = input_dim;
  m.num_classes = task.num_classes;
  return m;
}

RunConfig load_run_config(const std::string& path) {
  RunConfig cfg;
  try {
    cfg.apply(KeyValueConfig::parse(read_text_file(path)));
  } catch (const ParseError& e) {
    throw ConfigError(path + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return cfg;
}

}  // namespace bml
