#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace latentedit {

/// Shape of a per-layer latent code: `layers` rows of `dims` values.
struct LatentShape {
  int layers = 0;
  int dims = 0;

  std::size_t size() const { return static_cast<std::size_t>(layers) * static_cast<std::size_t>(dims); }
  bool operator==(const LatentShape&) const = default;
  std::string to_string() const;
};

enum class LatentSpace : std::uint8_t { W = 0, WPlus = 1 };

/// Dense row-major [layers x dims] block of doubles shared by latent codes,
/// offsets and normalized offsets.
class LatentTensor {
 public:
  LatentTensor() = default;
  explicit LatentTensor(LatentShape shape, double fill = 0.0);
  LatentTensor(LatentShape shape, std::vector<double> values);

  const LatentShape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  const std::vector<double>& vector() const { return values_; }

  double& at(int layer, int dim) { return values_[index(layer, dim)]; }
  double at(int layer, int dim) const { return values_[index(layer, dim)]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  bool all_finite() const;

 protected:
  std::size_t index(int layer, int dim) const {
    return static_cast<std::size_t>(layer) * static_cast<std::size_t>(shape_.dims) + static_cast<std::size_t>(dim);
  }

  LatentShape shape_;
  std::vector<double> values_;
};

/// A point w in the generator's learned latent space.
class LatentCode : public LatentTensor {
 public:
  LatentCode() = default;
  explicit LatentCode(LatentShape shape, LatentSpace space = LatentSpace::WPlus) : LatentTensor(shape), space_(space) {}
  LatentCode(LatentShape shape, std::vector<double> values, LatentSpace space = LatentSpace::WPlus)
      : LatentTensor(shape, std::move(values)), space_(space) {}

  LatentSpace space() const { return space_; }
  void set_space(LatentSpace space) { space_ = space; }

  bool operator==(const LatentCode& other) const {
    return shape_ == other.shape_ && space_ == other.space_ && values_ == other.values_;
  }

 private:
  LatentSpace space_ = LatentSpace::WPlus;
};

/// An additive edit to a latent code.
class OffsetDelta : public LatentTensor {
 public:
  using LatentTensor::LatentTensor;
  bool operator==(const OffsetDelta& other) const { return shape_ == other.shape_ && values_ == other.values_; }
};

/// |delta| / max|delta|, every entry in [0, 1].
class NormalizedOffset : public LatentTensor {
 public:
  using LatentTensor::LatentTensor;
};

// Binary container: "LTNT" magic, u32 version, u8 space tag, i32 layers,
// i32 dims, then layers*dims little-endian float64 values.
void write_latent(const std::filesystem::path& path, const LatentTensor& tensor, LatentSpace space);
void write_latent(const std::filesystem::path& path, const LatentCode& code);
LatentCode read_latent(const std::filesystem::path& path);

// One value per line, row-major, 17 significant digits.
void export_latent_text(const std::filesystem::path& path, const LatentTensor& tensor);
std::vector<double> import_latent_text(const std::filesystem::path& path);

}  // namespace latentedit
