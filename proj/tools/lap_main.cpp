#include <CLI11.hpp>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <lap/data.hpp>
#include <lap/experiments.hpp>
#include <lap/gradcheck.hpp>
#include <lap/ot.hpp>

namespace fs = std::filesystem;
using namespace lap;

namespace {

std::uint64_t parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size())
    throw CLI::ValidationError("--seeds", "'" + std::string(s) + "' is not a seed");
  return v;
}

// "0-29", "3,5,8" or a mix such as "0-4,10".
std::vector<std::uint64_t> parse_seeds(const std::string& spec) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto dash = item.find('-');
    if (dash == std::string::npos) {
      seeds.push_back(parse_u64(item));
      continue;
    }
    const auto lo = parse_u64(std::string_view(item).substr(0, dash));
    const auto hi = parse_u64(std::string_view(item).substr(dash + 1));
    if (hi < lo) throw CLI::ValidationError("--seeds", "empty range " + item);
    for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
  }
  return seeds;
}

void print_line(const std::string& s) { std::cout << s << std::endl; }

struct CommonFlags {
  std::string seeds;
  std::string out;
  std::size_t jobs = 0;

  void add_to(CLI::App* app) {
    app->add_option("--seeds", seeds, "seed list, e.g. 0-9 or 1,4,7");
    app->add_option("--out", out, "output directory");
    app->add_option("--jobs", jobs, "parallel training runs")->check(CLI::PositiveNumber);
  }
  void apply(exp::ExperimentConfig& cfg) const {
    if (!seeds.empty()) cfg.seeds = parse_seeds(seeds);
    if (!out.empty()) cfg.output = out;
    if (jobs > 0) cfg.jobs = jobs;
  }
};

// lambda < 0 picks the balanced weight for each model.
int gradcheck_command(double lambda, double gain, std::uint64_t seed, std::size_t max_coordinates) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  auto random_inputs = [&](Shape shape) {
    Tensor t(shape);
    for (auto& v : t.data()) v = normal(rng);
    return t;
  };
  constexpr double kLimit = 1e-4;
  bool ok = true;
  auto report = [&](const std::string& name, double weight, const GradCheckResult& r) {
    const bool pass = r.max_rel_error < kLimit;
    ok = ok && pass;
    std::cout << std::left << std::setw(22) << name << " lambda " << std::setprecision(3)
              << std::setw(10) << weight << " coordinates " << std::setw(5) << r.coordinates
              << " kinks " << std::setw(4) << r.kink_crossings << " max rel error " << std::scientific << std::setprecision(3)
              << r.max_rel_error << std::defaultfloat << (pass ? "  ok" : "  TOO LARGE") << '\n';
    if (!pass)
      std::cout << "  worst: leaf " << r.worst_leaf << " index " << r.worst_index << " analytic "
                << r.worst_analytic << " numeric " << r.worst_numeric << '\n';
  };

  for (bool bn : {false, true}) {
    Architecture a;
    a.kind = ArchKind::circles2d;
    a.blocks = 9;
    a.batch_norm = bn;
    Model m = build_model(a, {InitKind::orthogonal, gain}, seed);
    const Tensor x = random_inputs({8, 2});
    const std::vector<int> y{0, 1, 0, 1, 1, 0, 0, 1};
    const double w = lambda < 0 ? balanced_cost_weight(m, x, y) : lambda;
    report(bn ? "circles2d 9 blocks bn" : "circles2d 9 blocks", w, model_grad_check(m, x, y, w));
  }
  {
    Architecture a;
    a.kind = ArchKind::mnist;
    a.blocks = 9;
    Model m = build_model(a, {InitKind::orthogonal, gain}, seed);
    const Tensor x = random_inputs({4, 1, 28, 28});
    const std::vector<int> y{3, 7, 1, 0};
    const double w = lambda < 0 ? balanced_cost_weight(m, x, y) : lambda;
    report("mnist resnet9", w, model_grad_check(m, x, y, w, {1e-5, max_coordinates, seed}));
  }
  return ok ? 0 : 1;
}

int oracle_command(const fs::path& checkpoint, const fs::path& dataset, std::size_t rows,
                   const std::string& out) {
  Model model = load_checkpoint(checkpoint);
  const Tensor batch = exp::load_check_batch(dataset, rows);
  std::string text;
  try {
    text = ot::network_cost_bound_check(model, batch).to_json();
  } catch (const ot::BoundViolation& e) {
    std::cerr << "bound violated: " << e.what() << '\n';
    return 1;
  }
  std::cout << text << '\n';
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out);
    f << text << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Large tensors stay on the heap between layers.
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Residual networks trained with a transport-cost (least action) penalty"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(LAP_VERSION));

  auto* run = app.add_subcommand("run", "run an experiment described by a JSON config");
  std::string config_path, run_data_dir;
  CommonFlags run_flags;
  run->add_option("config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
  run->add_option("--data-dir", run_data_dir, "MNIST IDX directory (default $LAP_DATA_DIR)");
  run_flags.add_to(run);

  auto* oracle = app.add_subcommand("oracle-check", "check K*cost >= msd >= W2^2 on a checkpoint");
  std::string ckpt, dataset, oracle_out;
  std::size_t rows = 256;
  oracle->add_option("checkpoint", ckpt, "checkpoint JSON")->required()->check(CLI::ExistingFile);
  oracle->add_option("dataset", dataset, "circles CSV or MNIST directory")
      ->required()
      ->check(CLI::ExistingPath);
  oracle->add_option("--rows", rows, "batch size of the check")->check(CLI::Range(2, 512));
  oracle->add_option("--out", oracle_out, "also write the report to this file");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of both architectures");
  double lambda = -1.0, gain = 0.5;
  std::uint64_t grad_seed = 0;
  std::size_t max_coordinates = 300;
  grad->add_option("--lambda", lambda, "weight of the transport cost (default: loss / cost)");
  grad->add_option("--gain", gain, "orthogonal init gain of the checked models");
  grad->add_option("--seed", grad_seed);
  grad->add_option("--max-coordinates", max_coordinates, "sampled coordinates for large models");

  auto* mnist = app.add_subcommand("mnist", "small-training-set MNIST table, vanilla vs LAP");
  std::string mnist_dir, sizes;
  int mnist_epochs = 0;
  CommonFlags mnist_flags;
  mnist->add_option("--data-dir", mnist_dir, "MNIST IDX directory (default $LAP_DATA_DIR)");
  mnist->add_option("--sizes", sizes, "training set sizes, e.g. 100,200,300");
  mnist->add_option("--epochs", mnist_epochs, "override the 30 training epochs");
  mnist_flags.add_to(mnist);

  auto* circles = app.add_subcommand("circles-csv", "write a circles dataset as x1,x2,label");
  std::size_t points = 1000;
  double noise = 0.08, ratio = 0.5;
  std::uint64_t circles_seed = 0;
  std::string circles_out;
  circles->add_option("--points", points)->check(CLI::PositiveNumber);
  circles->add_option("--noise", noise);
  circles->add_option("--ratio", ratio);
  circles->add_option("--seed", circles_seed);
  circles->add_option("--out", circles_out, "file (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      auto cfg = exp::load_config(config_path);
      run_flags.apply(cfg);
      if (!run_data_dir.empty()) cfg.mnist.data_dir = run_data_dir;
      exp::run_experiment(cfg, print_line);
      return 0;
    }
    if (*oracle) return oracle_command(ckpt, dataset, rows, oracle_out);
    if (*grad) return gradcheck_command(lambda, gain, grad_seed, max_coordinates);
    if (*mnist) {
      auto cfg = exp::default_config(exp::ExperimentKind::mnist_table);
      mnist_flags.apply(cfg);
      if (!mnist_dir.empty()) cfg.mnist.data_dir = mnist_dir;
      if (mnist_epochs > 0) cfg.train.epochs = mnist_epochs;
      if (!sizes.empty()) {
        cfg.mnist.sizes.clear();
        for (auto s : parse_seeds(sizes)) cfg.mnist.sizes.push_back(static_cast<std::size_t>(s));
      }
      exp::run_experiment(cfg, print_line);
      return 0;
    }
    if (*circles) {
      const Dataset d = make_circles(points, noise, ratio, circles_seed);
      if (circles_out.empty()) {
        write_circles_csv(d, std::cout);
      } else {
        std::ofstream f(circles_out);
        if (!f) throw std::runtime_error("cannot write " + circles_out);
        write_circles_csv(d, f);
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
