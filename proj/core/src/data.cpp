#include "lap/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace lap {

Shape Dataset::sample_shape() const {
  return Shape(inputs.shape().begin() + 1, inputs.shape().end());
}

Tensor Dataset::gather_inputs(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw std::invalid_argument("gather of zero rows");
  const std::size_t row = inputs.size() / size();
  Shape s = inputs.shape();
  s[0] = indices.size();
  std::vector<double> data(indices.size() * row);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw std::out_of_range("dataset row index out of range");
    std::copy_n(inputs.ptr() + indices[i] * row, row, data.begin() + i * row);
  }
  return Tensor(std::move(s), std::move(data));
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.name = name;
  out.num_classes = num_classes;
  out.normalization = normalization;
  out.inputs = gather_inputs(indices);
  out.labels = gather_labels(indices);
  return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int l : labels) ++counts.at(static_cast<std::size_t>(l));
  return counts;
}

void Dataset::validate() const {
  if (inputs.empty() || inputs.dim(0) != labels.size())
    throw std::invalid_argument("dataset '" + name + "': " + std::to_string(labels.size()) +
                                " labels for inputs " + shape_str(inputs.shape()));
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes)
      throw std::invalid_argument("dataset '" + name + "': label " + std::to_string(l) +
                                  " outside [0," + std::to_string(num_classes) + ")");
  require_finite(inputs, "dataset '" + name + "' inputs");
}

Dataset make_circles(std::size_t n, double noise_std, double radius_ratio, std::uint64_t seed) {
  if (n == 0 || n % 2 != 0)
    throw std::invalid_argument("make_circles needs a positive even n, got " + std::to_string(n));
  if (!(radius_ratio > 0.0 && radius_ratio < 1.0))
    throw std::invalid_argument("make_circles radius_ratio must lie in (0,1)");
  if (noise_std < 0.0) throw std::invalid_argument("make_circles noise_std must be >= 0");

  std::seed_seq seq{seed, std::uint64_t{0xC1C1E5}};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);

  const std::size_t half = n / 2;
  std::vector<double> xy(2 * n);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = i < half ? 0 : 1;
    const double r = cls == 0 ? 1.0 : radius_ratio;
    const double t = angle(rng);
    xy[2 * i] = r * std::cos(t);
    xy[2 * i + 1] = r * std::sin(t);
    labels[i] = cls;
  }
  if (noise_std > 0.0)
    for (auto& v : xy) v += noise_std * noise(rng);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  Dataset full;
  full.name = "circles";
  full.num_classes = 2;
  full.inputs = Tensor(Shape{n, 2}, std::move(xy));
  full.labels = std::move(labels);
  return full.subset(order);
}

namespace {

class ByteReader {
 public:
  ByteReader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}

  std::uint32_t u32be() {
    unsigned char b[4];
    read(b, 4);
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
           std::uint32_t{b[3]};
  }

  void read(unsigned char* dst, std::size_t n) {
    in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(in_.gcount());
    if (got != n)
      throw FormatError(what_ + ": truncated at byte offset " + std::to_string(offset_ + got) +
                        " (needed " + std::to_string(n) + " more bytes from offset " +
                        std::to_string(offset_) + ")");
    offset_ += n;
  }

 private:
  std::istream& in_;
  std::string what_;
  std::size_t offset_ = 0;
};

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::uppercase;
  os.width(8);
  os.fill('0');
  os << v;
  return os.str();
}

}  // namespace

Dataset load_mnist_idx(std::istream& images, std::istream& labels) {
  ByteReader img(images, "IDX images");
  ByteReader lab(labels, "IDX labels");

  if (const auto m = img.u32be(); m != kIdxImagesMagic)
    throw FormatError("IDX images: bad magic " + hex32(m) + ", expected " + hex32(kIdxImagesMagic));
  if (const auto m = lab.u32be(); m != kIdxLabelsMagic)
    throw FormatError("IDX labels: bad magic " + hex32(m) + ", expected " + hex32(kIdxLabelsMagic));

  const std::size_t n = img.u32be();
  const std::size_t rows = img.u32be();
  const std::size_t cols = img.u32be();
  const std::size_t n_labels = lab.u32be();
  if (n != n_labels)
    throw FormatError("IDX image count " + std::to_string(n) + " differs from label count " +
                      std::to_string(n_labels));
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("IDX file describes an empty dataset");

  const std::size_t plane = rows * cols;
  std::vector<unsigned char> raw(n * plane);
  img.read(raw.data(), raw.size());
  std::vector<unsigned char> raw_labels(n);
  lab.read(raw_labels.data(), n);

  const auto norm = kMnistNormalization;
  std::vector<double> pixels(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    pixels[i] = (static_cast<double>(raw[i]) / 255.0 - norm.mean) / norm.std;

  Dataset out;
  out.name = "mnist";
  out.num_classes = 10;
  out.normalization = norm;
  out.inputs = Tensor(Shape{n, 1, rows, cols}, std::move(pixels));
  out.labels.assign(raw_labels.begin(), raw_labels.end());
  for (int l : out.labels)
    if (l > 9) throw FormatError("IDX labels: value " + std::to_string(l) + " is not a digit");
  return out;
}

Dataset load_mnist_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path) {
  std::ifstream images(images_path, std::ios::binary);
  if (!images) throw std::runtime_error("cannot open " + images_path.string());
  std::ifstream labels(labels_path, std::ios::binary);
  if (!labels) throw std::runtime_error("cannot open " + labels_path.string());
  return load_mnist_idx(images, labels);
}

MnistFiles MnistFiles::in(const std::filesystem::path& dir) {
  return {dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte",
          dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte"};
}

std::vector<std::filesystem::path> MnistFiles::missing() const {
  std::vector<std::filesystem::path> out;
  for (const auto* p : {&train_images, &train_labels, &test_images, &test_labels})
    if (!std::filesystem::exists(*p)) out.push_back(*p);
  return out;
}

std::optional<std::filesystem::path> data_dir_from_env() {
  if (const char* v = std::getenv("LAP_DATA_DIR"); v && *v) return std::filesystem::path(v);
  return std::nullopt;
}

std::vector<std::size_t> subsample_indices(const Dataset& data, std::size_t size,
                                           std::uint64_t seed, bool stratified) {
  const std::size_t n = data.size();
  if (size > n)
    throw std::invalid_argument("subsample of " + std::to_string(size) + " rows from a dataset of " +
                                std::to_string(n));
  std::seed_seq seq{seed, std::uint64_t{0x5AB5}};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  if (!stratified || data.num_classes == 0) {
    perm.resize(size);
    return perm;
  }

  // Water-fill per-class quotas, then take each class's first rows in the
  // shuffled order; the result keeps the shuffled order.
  const auto counts = data.class_counts();
  const std::size_t C = counts.size();
  std::vector<std::size_t> quota(C, 0);
  std::size_t remaining = size;
  while (remaining > 0) {
    std::size_t open = 0;
    for (std::size_t c = 0; c < C; ++c) open += quota[c] < counts[c];
    const std::size_t share = std::max<std::size_t>(1, remaining / std::max<std::size_t>(open, 1));
    for (std::size_t c = 0; c < C && remaining > 0; ++c) {
      const std::size_t add = std::min({share, counts[c] - quota[c], remaining});
      quota[c] += add;
      remaining -= add;
    }
  }
  std::vector<std::size_t> taken(C, 0);
  std::vector<std::size_t> out;
  out.reserve(size);
  for (auto i : perm) {
    const auto c = static_cast<std::size_t>(data.labels[i]);
    if (taken[c] < quota[c]) {
      ++taken[c];
      out.push_back(i);
    }
  }
  return out;
}

Dataset subsample(const Dataset& data, std::size_t size, std::uint64_t seed, bool stratified) {
  if (size == 0) throw std::invalid_argument("subsample size must be positive");
  return data.subset(subsample_indices(data, size, seed, stratified));
}

Split split_dataset(const Dataset& data, const SplitSpec& spec) {
  const std::size_t n = data.size();
  std::size_t n_train = spec.train_size.value_or(
      static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(n))));
  if (n_train == 0 || n_train >= n)
    throw std::invalid_argument("split leaves an empty side: " + std::to_string(n_train) +
                                " of " + std::to_string(n) + " rows for training");
  Split out;
  out.train_indices = subsample_indices(data, n_train, spec.seed, spec.stratified);
  std::vector<bool> used(n, false);
  for (auto i : out.train_indices) used[i] = true;
  // Test rows follow the same seeded permutation as the training draw.
  std::seed_seq seq{spec.seed, std::uint64_t{0x7E57}};
  std::mt19937_64 rng(seq);
  for (std::size_t i = 0; i < n; ++i)
    if (!used[i]) out.test_indices.push_back(i);
  std::shuffle(out.test_indices.begin(), out.test_indices.end(), rng);
  out.train = data.subset(out.train_indices);
  out.test = data.subset(out.test_indices);
  return out;
}

void write_circles_csv(const Dataset& data, std::ostream& out) {
  if (data.sample_shape() != Shape{2})
    throw ShapeError("circles CSV needs 2-D samples, got " + shape_str(data.sample_shape()));
  out << "x1,x2,label\n";
  out.precision(17);
  for (std::size_t i = 0; i < data.size(); ++i)
    out << data.inputs[2 * i] << ',' << data.inputs[2 * i + 1] << ',' << data.labels[i] << '\n';
}

Dataset read_circles_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("x1,x2,label", 0) != 0)
    throw FormatError("circles CSV must start with the header x1,x2,label");
  std::vector<double> xy;
  std::vector<int> labels;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    double x1 = 0, x2 = 0;
    int label = 0;
    char c1 = 0, c2 = 0;
    if (!(row >> x1 >> c1 >> x2 >> c2 >> label) || c1 != ',' || c2 != ',')
      throw FormatError("circles CSV: malformed line " + std::to_string(lineno));
    xy.push_back(x1);
    xy.push_back(x2);
    labels.push_back(label);
  }
  if (labels.empty()) throw FormatError("circles CSV has no rows");
  Dataset out;
  out.name = "circles";
  out.num_classes = 2;
  out.inputs = Tensor(Shape{labels.size(), 2}, std::move(xy));
  out.labels = std::move(labels);
  out.validate();
  return out;
}

}  // namespace lap
