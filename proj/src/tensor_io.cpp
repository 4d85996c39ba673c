#include "bml/tensor_io.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "bml/errors.hpp"
#include "bml/text.hpp"

namespace bml {

namespace {

template <typename U>
void put_le(std::ostream& os, U value) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xffU);
  os.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& is, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw IoError(std::string("truncated stream while reading ") + what);
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 34;

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("TNSR", 4);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint64_t>(os, d);
  for (double v : t.values()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_le<std::uint64_t>(os, bits);
  }
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "TNSR", 4) != 0) throw IoError("missing TNSR magic");
  const auto rank = get_le<std::uint32_t>(is, "tensor rank");
  if (rank > 8) throw IoError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& d : shape) {
    d = get_le<std::uint64_t>(is, "tensor dimension");
    count *= d;
    if (count > kMaxElements) throw IoError("tensor too large");
  }
  std::vector<double> data(count);
  for (auto& v : data) {
    const auto bits = get_le<std::uint64_t>(is, "tensor payload");
    std::memcpy(&v, &bits, sizeof v);
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
  if (!os) throw IoError("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_tensor(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void Checkpoint::set(const std::string& key, const std::string& value) {
  if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
    throw ConfigError("invalid checkpoint header entry '" + key + "'");
  }
  for (auto& [k, v] : header) {
    if (k == key) {
      v = value;
      return;
    }
  }
  header.emplace_back(key, value);
}

std::optional<std::string> Checkpoint::find(const std::string& key) const {
  for (const auto& [k, v] : header)
    if (k == key) return v;
  return std::nullopt;
}

const std::string& Checkpoint::get(const std::string& key) const {
  for (const auto& [k, v] : header)
    if (k == key) return v;
  throw StructureError("checkpoint header lacks '" + key + "'");
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw StructureError("checkpoint lacks tensor '" + name + "'");
}

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os << "BMLCKPT " << Checkpoint::kVersion << '\n';
  for (const auto& [k, v] : ckpt.header) os << k << '=' << v << '\n';
  os << '\n';
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
}

Checkpoint read_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("BMLCKPT ", 0) != 0) throw IoError("not a checkpoint (bad magic)");
  const auto version = parse_int(std::string_view(line).substr(8));
  if (version != Checkpoint::kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  for (;;) {
    if (!std::getline(is, line)) throw IoError("truncated checkpoint header");
    if (line.empty()) break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("malformed checkpoint header line '" + line + "'");
    ckpt.header.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  const auto count = get_le<std::uint32_t>(is, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint32_t>(is, "tensor name length");
    if (len > 4096) throw IoError("implausible tensor name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("truncated tensor name");
    ckpt.tensors.emplace_back(std::move(name), read_tensor(is));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, ckpt);
  if (!os) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_checkpoint(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace bml
