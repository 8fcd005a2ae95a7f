#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "matrix.hpp"

namespace lba {

/// Immutable labelled feature set; features are in [0, 1].
struct Dataset {
  Matrix<float> features;  // samples x dimension
  std::vector<int> labels;
  int num_classes = 0;
  std::string name;

  std::size_t size() const { return labels.size(); }
  std::size_t dimension() const { return features.cols(); }

  /// First `count` samples (all if count exceeds size).
  Dataset head(std::size_t count) const;
  /// Rows listed in `indices`, in that order.
  Dataset select(const std::vector<std::size_t>& indices) const;
  void validate() const;
};

class IdxError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, Truncated, CountMismatch };
  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Reads an IDX image/label pair (plain or gzip-compressed). Pixels are
/// scaled by 1/255.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

struct SyntheticSpec {
  enum class Kind { GaussianBlobs, LinearlySeparable };
  Kind kind = Kind::GaussianBlobs;
  std::size_t dimension = 16;
  int classes = 2;
  std::size_t samples = 100;
  std::uint64_t seed = 1;
  double spread = 0.05;  // blob standard deviation
  double margin = 0.05;  // minimum score gap for the separable kind
};

/// Pure function of the spec.
Dataset generate(const SyntheticSpec& spec);

/// One dense layer as stored on disk: weights are out x in, row-major.
struct CheckpointLayer {
  Matrix<float> weights;
  std::optional<std::vector<float>> bias;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Little-endian: "LBA1", u32 version, u32 layer count, then per layer
/// u32 out, u32 in, out*in f32 weights, u8 bias flag, [out f32 bias].
void save_checkpoint(const std::string& path, const std::vector<CheckpointLayer>& layers);
std::vector<CheckpointLayer> load_checkpoint(const std::string& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace lba
