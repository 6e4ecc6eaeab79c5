#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <lap/data.hpp>

using namespace lap;

namespace {

void put_u32(std::string& s, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) s.push_back(static_cast<char>((v >> shift) & 0xFF));
}

// Two 2x3 images and their labels in IDX layout.
std::pair<std::string, std::string> tiny_idx(std::uint32_t image_magic = 0x803) {
  std::string img, lab;
  put_u32(img, image_magic);
  put_u32(img, 2);
  put_u32(img, 2);
  put_u32(img, 3);
  for (int i = 0; i < 6; ++i) img.push_back(0);
  for (int i = 0; i < 6; ++i) img.push_back(static_cast<char>(255));
  put_u32(lab, 0x801);
  put_u32(lab, 2);
  lab.push_back(7);
  lab.push_back(2);
  return {img, lab};
}

Dataset parse(const std::string& img, const std::string& lab) {
  std::istringstream a(img), b(lab);
  return load_mnist_idx(a, b);
}

}  // namespace

TEST_CASE("noiseless circles lie exactly on their radii") {
  const Dataset d = make_circles(200, 0.0, 0.5, 3);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double r = std::hypot(d.inputs[2 * i], d.inputs[2 * i + 1]);
    CHECK(r == doctest::Approx(d.labels[i] == 0 ? 1.0 : 0.5).epsilon(1e-15));
  }
}

TEST_CASE("circles are balanced, deterministic and validated") {
  const Dataset d = make_circles(1000, 0.08, 0.5, 1);
  CHECK(d.class_counts() == std::vector<std::size_t>{500, 500});
  CHECK(d.inputs == make_circles(1000, 0.08, 0.5, 1).inputs);
  CHECK_FALSE(d.inputs == make_circles(1000, 0.08, 0.5, 2).inputs);
  CHECK_THROWS_AS(make_circles(51, 0.08, 0.5, 0), std::invalid_argument);
  CHECK_THROWS_AS(make_circles(0, 0.08, 0.5, 0), std::invalid_argument);
  CHECK_THROWS_AS(make_circles(10, 0.08, 1.5, 0), std::invalid_argument);
  CHECK_NOTHROW(d.validate());
}

TEST_CASE("default circles are separable by the radius-0.75 circle for 99% of points") {
  std::size_t good = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Dataset d = make_circles(200, 0.08, 0.5, seed);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const bool outside = std::hypot(d.inputs[2 * i], d.inputs[2 * i + 1]) > 0.75;
      good += outside == (d.labels[i] == 0);
      ++total;
    }
  }
  CHECK(static_cast<double>(good) / static_cast<double>(total) >= 0.99);
}

TEST_CASE("circles class means approach the origin") {
  const Dataset d = make_circles(10000, 0.08, 0.5, 4);
  for (int cls : {0, 1}) {
    double mx = 0, my = 0, n = 0;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (d.labels[i] == cls) mx += d.inputs[2 * i], my += d.inputs[2 * i + 1], n += 1;
    CHECK(std::hypot(mx / n, my / n) < 0.05);
  }
}

TEST_CASE("circles CSV round trip") {
  const Dataset d = make_circles(20, 0.08, 0.5, 5);
  std::stringstream buf;
  write_circles_csv(d, buf);
  CHECK(buf.str().rfind("x1,x2,label\n", 0) == 0);
  const Dataset r = read_circles_csv(buf);
  CHECK(r.inputs == d.inputs);
  CHECK(r.labels == d.labels);

  std::istringstream bad("x1,x2,label\n0.1;0.2;1\n");
  CHECK_THROWS_AS(read_circles_csv(bad), FormatError);
  std::istringstream headerless("0.1,0.2,1\n");
  CHECK_THROWS_AS(read_circles_csv(headerless), FormatError);
}

TEST_CASE("IDX parsing normalizes pixels and keeps labels") {
  auto [img, lab] = tiny_idx();
  const Dataset d = parse(img, lab);
  CHECK(d.inputs.shape() == Shape{2, 1, 2, 3});
  CHECK(d.labels == std::vector<int>{7, 2});
  CHECK(d.inputs[0] == doctest::Approx(-0.1307 / 0.3081).epsilon(1e-15));
  CHECK(d.inputs[6] == doctest::Approx((1.0 - 0.1307) / 0.3081).epsilon(1e-15));
}

TEST_CASE("IDX format errors") {
  auto [img, lab] = tiny_idx(0xDEADBEEF);
  CHECK_THROWS_WITH_AS(parse(img, lab), doctest::Contains("0xDEADBEEF"), FormatError);

  auto [good_img, good_lab] = tiny_idx();
  const std::string cut = good_img.substr(0, good_img.size() - 4);
  CHECK_THROWS_WITH_AS(parse(cut, good_lab), doctest::Contains("byte offset 24"), FormatError);

  std::string more_labels;
  put_u32(more_labels, 0x801);
  put_u32(more_labels, 3);
  more_labels += std::string(3, '\1');
  CHECK_THROWS_AS(parse(good_img, more_labels), FormatError);
}

TEST_CASE("stratified and plain subsampling") {
  Dataset d;
  d.num_classes = 10;
  d.name = "synthetic";
  const std::size_t n = 6000;
  d.inputs = Tensor({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    d.inputs[i] = static_cast<double>(i);
    d.labels.push_back(static_cast<int>(i < 3000 ? i % 10 : i % 2));  // classes 0 and 1 dominate
  }
  const Dataset s = subsample(d, 100, 1, true);
  for (auto c : s.class_counts()) CHECK(c == 10);

  const auto a = subsample_indices(d, 100, 1, false);
  const auto b = subsample_indices(d, 100, 2, false);
  CHECK(a != b);
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 100);

  auto all = subsample_indices(d, n, 3, false);
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < n; ++i) CHECK(all[i] == i);

  CHECK_THROWS_AS(subsample(d, n + 1, 0, false), std::invalid_argument);
}

TEST_CASE("stratified quotas stay within one when a class runs short") {
  Dataset d;
  d.num_classes = 3;
  d.inputs = Tensor({12, 1});
  d.labels = {0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2};
  const auto counts = subsample(d, 9, 4, true).class_counts();
  CHECK(counts == std::vector<std::size_t>{2, 4, 3});  // class 0 exhausted, rest filled
  const auto even = subsample(d, 6, 4, true).class_counts();
  CHECK(even == std::vector<std::size_t>{2, 2, 2});
}

TEST_CASE("splits are disjoint and deterministic") {
  const Dataset d = make_circles(50, 0.08, 0.5, 6);
  const Split s = split_dataset(d, {0.8, std::nullopt, 9, false});
  CHECK(s.train.size() == 40);
  CHECK(s.test.size() == 10);
  std::set<std::size_t> seen(s.train_indices.begin(), s.train_indices.end());
  for (auto i : s.test_indices) CHECK(seen.insert(i).second);
  CHECK(seen.size() == 50);
  const Split again = split_dataset(d, {0.8, std::nullopt, 9, false});
  CHECK(again.test_indices == s.test_indices);

  const Split fixed = split_dataset(d, {0.5, 30, 9, true});
  CHECK(fixed.train.size() == 30);
  CHECK(fixed.train.class_counts() == std::vector<std::size_t>{15, 15});
  CHECK_THROWS_AS(split_dataset(d, {1.0, std::nullopt, 0, false}), std::invalid_argument);
}

TEST_CASE("official MNIST files when available") {
  const auto dir = data_dir_from_env();
  if (!dir || !MnistFiles::in(*dir).missing().empty()) {
    MESSAGE("LAP_DATA_DIR not set or incomplete; skipping the official-file check");
    return;
  }
  const auto files = MnistFiles::in(*dir);
  const Dataset train = load_mnist_idx(files.train_images, files.train_labels);
  CHECK(train.inputs.shape() == Shape{60000, 1, 28, 28});
  CHECK(train.class_counts() ==
        std::vector<std::size_t>{5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949});
  const Dataset test = load_mnist_idx(files.test_images, files.test_labels);
  CHECK(test.size() == 10000);
}

TEST_CASE("missing MNIST files are named") {
  const auto files = MnistFiles::in("/nonexistent/lap-data");
  CHECK(files.missing().size() == 4);
  CHECK(files.missing()[0].string().find("train-images-idx3-ubyte") != std::string::npos);
}
