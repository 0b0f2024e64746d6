#include "latentedit/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "binio.hpp"
#include "latentedit/error.hpp"

namespace latentedit {

namespace {
constexpr char kLatentMagic[4] = {'L', 'T', 'N', 'T'};
constexpr std::uint32_t kLatentVersion = 1;
}  // namespace

std::string LatentShape::to_string() const {
  return "[" + std::to_string(layers) + " x " + std::to_string(dims) + "]";
}

LatentTensor::LatentTensor(LatentShape shape, double fill) : shape_(shape), values_(shape.size(), fill) {
  if (shape.layers <= 0 || shape.dims <= 0) throw ShapeError("latent shape must be positive, got " + shape.to_string());
}

LatentTensor::LatentTensor(LatentShape shape, std::vector<double> values) : shape_(shape), values_(std::move(values)) {
  if (shape.layers <= 0 || shape.dims <= 0) throw ShapeError("latent shape must be positive, got " + shape.to_string());
  if (values_.size() != shape.size()) {
    throw ShapeError("latent value count " + std::to_string(values_.size()) + " does not match shape " + shape.to_string());
  }
}

bool LatentTensor::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void write_latent(const std::filesystem::path& path, const LatentTensor& tensor, LatentSpace space) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kLatentMagic, 4);
  binio::put<std::uint32_t>(out, kLatentVersion);
  binio::put<std::uint8_t>(out, static_cast<std::uint8_t>(space));
  binio::put<std::int32_t>(out, tensor.shape().layers);
  binio::put<std::int32_t>(out, tensor.shape().dims);
  binio::put_doubles(out, tensor.vector());
  if (!out) throw IoError("failed writing " + path.string());
}

void write_latent(const std::filesystem::path& path, const LatentCode& code) { write_latent(path, code, code.space()); }

LatentCode read_latent(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::string(magic, 4) != std::string(kLatentMagic, 4)) {
    throw CorruptFileError(path.string() + " is not a latent container");
  }
  auto version = binio::get<std::uint32_t>(in, "version");
  if (version != kLatentVersion) throw VersionError("unsupported latent container version " + std::to_string(version));
  auto space = binio::get<std::uint8_t>(in, "space tag");
  if (space > 1) throw CorruptFileError("bad latent space tag");
  auto layers = binio::get<std::int32_t>(in, "layers");
  auto dims = binio::get<std::int32_t>(in, "dims");
  if (layers <= 0 || dims <= 0 || static_cast<long long>(layers) * dims > (1LL << 26)) {
    throw CorruptFileError("bad latent shape in " + path.string());
  }
  LatentShape shape{layers, dims};
  auto values = binio::get_doubles(in, shape.size(), "latent values");
  return LatentCode(shape, std::move(values), static_cast<LatentSpace>(space));
}

void export_latent_text(const std::filesystem::path& path, const LatentTensor& tensor) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  char buf[64];
  for (double v : tensor.values()) {
    std::snprintf(buf, sizeof(buf), "%.17g\n", v);
    out << buf;
  }
}

std::vector<double> import_latent_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<double> values;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    double v = 0.0;
    if (!(ss >> v)) throw ParseError("bad value '" + line + "' in " + path.string());
    values.push_back(v);
  }
  return values;
}

}  // namespace latentedit
