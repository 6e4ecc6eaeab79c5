#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lap/tensor.hpp"

namespace lap {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Affine input normalization applied at load time: (x - mean) / std.
struct Normalization {
  double mean = 0.0;
  double std = 1.0;
};

struct Dataset {
  std::string name;
  Tensor inputs;            // [N, ...]
  std::vector<int> labels;  // N entries in [0, num_classes)
  std::size_t num_classes = 0;
  Normalization normalization{};

  std::size_t size() const noexcept { return labels.size(); }
  Shape sample_shape() const;

  /// Rows selected by `indices`, in that order.
  Dataset subset(std::span<const std::size_t> indices) const;
  Tensor gather_inputs(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_counts() const;

  /// Throws if labels are out of range or inputs are non-finite.
  void validate() const;
};

/// Two concentric circles: class 0 on the unit circle, class 1 on the circle
/// of radius `radius_ratio`, n/2 points each, uniform random angles, then
/// i.i.d. Gaussian noise of std `noise_std` on each coordinate. Samples are
/// returned shuffled.
Dataset make_circles(std::size_t n, double noise_std, double radius_ratio, std::uint64_t seed);

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
inline constexpr Normalization kMnistNormalization{0.1307, 0.3081};

/// Parses an IDX image/label file pair. Pixels are scaled to [0,1] and then
/// normalized with `kMnistNormalization`; inputs have shape [N,1,rows,cols].
/// Throws FormatError on a wrong magic number, mismatched counts or a
/// truncated file (the message carries the byte offset).
Dataset load_mnist_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path);
Dataset load_mnist_idx(std::istream& images, std::istream& labels);

struct MnistFiles {
  std::filesystem::path train_images, train_labels, test_images, test_labels;

  /// Standard file names under `dir`.
  static MnistFiles in(const std::filesystem::path& dir);
  /// Paths that do not exist, empty when all are present.
  std::vector<std::filesystem::path> missing() const;
};

/// Directory named by $LAP_DATA_DIR, if set.
std::optional<std::filesystem::path> data_dir_from_env();

/// Seeded draw of `size` rows without replacement. Stratified draws give
/// every class floor(size/C) or ceil(size/C) rows whenever the class sizes
/// allow it.
Dataset subsample(const Dataset& data, std::size_t size, std::uint64_t seed, bool stratified);
std::vector<std::size_t> subsample_indices(const Dataset& data, std::size_t size,
                                           std::uint64_t seed, bool stratified);

struct SplitSpec {
  double train_fraction = 0.8;
  std::optional<std::size_t> train_size;  // overrides train_fraction
  std::uint64_t seed = 0;
  bool stratified = false;
};

struct Split {
  Dataset train, test;
  std::vector<std::size_t> train_indices, test_indices;
};

/// Disjoint train/test partition of `data`.
Split split_dataset(const Dataset& data, const SplitSpec& spec);

/// CSV with header "x1,x2,label".
void write_circles_csv(const Dataset& data, std::ostream& out);
Dataset read_circles_csv(std::istream& in);

}  // namespace lap
