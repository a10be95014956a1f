#include "glab/checkpoint.hpp"

#include "json.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace glab {

namespace {

constexpr char kMagic[] = "GLAB1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

void put_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>(bits & 0xffu));
    bits >>= 8;
  }
}

double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | static_cast<unsigned char>(p[i]);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::string encode_checkpoint(const NamedTensors& tensors) {
  nlohmann::json header;
  header["names"] = nlohmann::json::array();
  header["shapes"] = nlohmann::json::array();
  header["dtype"] = "f64";
  for (const auto& [name, t] : tensors) {
    header["names"].push_back(name);
    header["shapes"].push_back(t.shape());
  }
  std::string out(kMagic);
  out += header.dump();
  out.push_back('\n');
  for (const auto& [name, t] : tensors) {
    for (double v : t.data()) put_le(out, v);
  }
  return out;
}

NamedTensors decode_checkpoint(const std::string& bytes) {
  if (bytes.compare(0, kMagicLen, kMagic) != 0) {
    throw std::runtime_error("checkpoint: missing GLAB1 magic");
  }
  const auto eol = bytes.find('\n', kMagicLen);
  if (eol == std::string::npos) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(bytes.substr(kMagicLen, eol - kMagicLen));
  if (header.at("dtype") != "f64") throw std::runtime_error("checkpoint: unsupported dtype");
  const auto& names = header.at("names");
  const auto& shapes = header.at("shapes");
  if (names.size() != shapes.size()) throw std::runtime_error("checkpoint: header mismatch");
  NamedTensors out;
  std::size_t pos = eol + 1;
  for (std::size_t i = 0; i < names.size(); ++i) {
    Shape shape = shapes[i].get<Shape>();
    const auto n = shape_numel(shape);
    if (pos + 8 * n > bytes.size()) throw std::runtime_error("checkpoint: truncated payload");
    std::vector<double> values(n);
    for (std::size_t j = 0; j < n; ++j) values[j] = get_le(bytes.data() + pos + 8 * j);
    pos += 8 * n;
    out.emplace_back(names[i].get<std::string>(), Tensor(std::move(shape), std::move(values)));
  }
  if (pos != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path.string());
  const auto bytes = encode_checkpoint(tensors);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode_checkpoint(ss.str());
}

const Tensor& find_tensor(const NamedTensors& tensors, const std::string& name) {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw std::out_of_range("checkpoint: no tensor named " + name);
}

}  // namespace glab
