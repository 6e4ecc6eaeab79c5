// Acceptance run: one PASS/FAIL line per criterion on stdout, copied to DIR/report.txt.
//
//   lap_acceptance [--out DIR] [--only 1,4,...] [--data-dir DIR] [--jobs N] [--strict]
//
// The exit status is nonzero when a criterion could not be evaluated at all
// (crash, missing data). With --strict it is also nonzero when any evaluated
// criterion fails.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <lap/experiments.hpp>
#include <lap/gradcheck.hpp>
#include <lap/ot.hpp>

#include "oracles.hpp"

using namespace lap;
using namespace lap::exp;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

void note(const std::string& s) { std::cerr << s << std::endl; }

double mean_of(const SuiteResult& r, std::string_view group, Regime regime) {
  const ResultRow* row = r.table.find(group, regime);
  if (!row) throw std::runtime_error("no " + std::string(to_string(regime)) + " row for " +
                                     std::string(group));
  // Every seed diverged: the criterion is evaluated and fails.
  return row->summary.n == 0 ? std::nan("") : row->summary.mean;
}

std::string row_text(const SuiteResult& r, std::string_view group, Regime regime) {
  const ResultRow* row = r.table.find(group, regime);
  if (!row) return std::string(to_string(regime)) + " missing";
  return std::string(to_string(regime)) + " " + fmt(row->summary.mean) + " [" +
         fmt(row->summary.ci_low) + ", " + fmt(row->summary.ci_high) + "] n=" +
         std::to_string(row->summary.n) +
         (row->failed ? " failed=" + std::to_string(row->failed) : "");
}

// Every trained network of the suites, for the bound-chain and multiplier criteria.
struct Ledger {
  std::size_t checkpoints = 0, bound_missing = 0, diverged = 0, lap_runs = 0, lambda_bad = 0;
  double worst_slack = INFINITY;  // smallest margin in either inequality
  std::vector<std::string> problems;

  void add(const std::vector<CellResult>& cells, bool count_lambda) {
    for (const auto& c : cells) {
      const bool violated = c.error.rfind("bound violation", 0) == 0;
      if (!c.bound && !violated && c.lambda_nondecreasing) {
        ++diverged;
        continue;
      }
      if (c.bound) {
        ++checkpoints;
        worst_slack = std::min({worst_slack, c.bound->k_times_cost - c.bound->endpoint_msd,
                                c.bound->endpoint_msd - c.bound->w2_squared});
      } else if (violated) {
        ++checkpoints;
        ++bound_missing;
        problems.push_back(c.id + ": " + c.error);
      }
      if (count_lambda && c.regime == Regime::lap) {
        ++lap_runs;
        if (!c.lambda_nondecreasing) {
          ++lambda_bad;
          problems.push_back(c.id + ": lambda decreased");
        }
      }
    }
  }
};

Verdict criterion_gradients() {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal;
  auto inputs = [&](Shape s) {
    Tensor t(s);
    for (auto& v : t.data()) v = normal(rng);
    return t;
  };
  Verdict v{true, ""};
  auto check = [&](const std::string& name, Model& m, const Tensor& x, const std::vector<int>& y,
                   std::size_t cap) {
    const double w = balanced_cost_weight(m, x, y);
    const auto r = model_grad_check(m, x, y, w, {1e-5, cap, 0});
    v.pass = v.pass && r.max_rel_error < 1e-4 && r.coordinates > 0;
    v.detail += name + " " + sci(r.max_rel_error) + " over " + std::to_string(r.coordinates) +
                " coords (" + std::to_string(r.kink_crossings) + " kink crossings left out); ";
  };
  for (bool bn : {false, true}) {
    Architecture a;
    a.kind = ArchKind::circles2d;
    a.blocks = 9;
    a.batch_norm = bn;
    Model m = build_model(a, {InitKind::orthogonal, 0.5}, 1);
    check(bn ? "circles2d-9 bn" : "circles2d-9", m, inputs({8, 2}), {0, 1, 1, 0, 1, 0, 0, 1}, 10000);
  }
  Architecture a;
  a.kind = ArchKind::mnist;
  a.blocks = 9;
  Model m = build_model(a, {InitKind::orthogonal, 0.5}, 1);
  check("mnist resnet9", m, inputs({4, 1, 28, 28}), {3, 7, 1, 0}, 300);
  v.detail += "limit 1e-4";
  return v;
}

Verdict criterion_hungarian() {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> size(1, 7), dim(1, 4);
  const double powers[] = {1.0, 2.0, 1.5};
  double worst = 0.0;
  std::size_t perm_mismatch = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t M = size(rng), d = dim(rng);
    const double p = powers[trial % 3];
    const Tensor x = oracle::random_tensor({M, d}, rng, -3, 3);
    const Tensor y = oracle::random_tensor({M, d}, rng, -3, 3);
    const auto fast = ot::hungarian_wp(x, y, p);
    const auto slow = oracle::brute_force_assignment(x, y, p);
    worst = std::max(worst, std::abs(fast.cost - slow.cost));
    perm_mismatch += fast.permutation != slow.permutation;
  }
  return {worst <= 1e-12 && perm_mismatch == 0,
          "100 instances, max |cost difference| " + sci(worst) + ", permutation mismatches " +
              std::to_string(perm_mismatch) + ", limit 1e-12"};
}

SuiteResult circles_run(const std::string& scenario, bool bn, const fs::path& out,
                        std::size_t jobs) {
  auto cfg = default_config(ExperimentKind::circles_table);
  cfg.circles.scenarios = {scenario};
  cfg.circles.batch_norm = {bn};
  cfg.output = out;
  cfg.jobs = jobs;
  note("circles " + scenario + (bn ? " bn" : " no bn") + ": " + std::to_string(cfg.seeds.size()) +
       " seeds, config " + config_hash(cfg));
  return run_circles_suite(cfg, note);
}

Verdict criterion_fifty_points(const SuiteResult& r) {
  const std::string g = "fifty_points/no_bn";
  const double van = mean_of(r, g, Regime::vanilla), lap = mean_of(r, g, Regime::lap);
  return {lap - van >= 4.0 && lap >= 92.0,
          row_text(r, g, Regime::vanilla) + "; " + row_text(r, g, Regime::fixed_lambda) + "; " +
              row_text(r, g, Regime::lap) + "; gap " + fmt(lap - van) +
              " (need >= 4), LAP need >= 92"};
}

Verdict criterion_big_init(const SuiteResult& r) {
  const std::string g = "big_init/bn";
  const double van = mean_of(r, g, Regime::vanilla), lap = mean_of(r, g, Regime::lap);
  return {lap >= van && lap >= 99.0,
          row_text(r, g, Regime::vanilla) + "; " + row_text(r, g, Regime::fixed_lambda) + "; " +
              row_text(r, g, Regime::lap) + "; LAP - vanilla " + fmt(lap - van) +
              " (need >= 0), LAP need >= 99"};
}

struct Reference {
  std::size_t size;
  double vanilla, lap;
};
constexpr Reference kMnistReference[] = {{100, 56.4, 70.0}, {300, 83.5, 86.2}};

Verdict criterion_mnist(const SuiteResult& r) {
  Verdict v{true, ""};
  for (const auto& ref : kMnistReference) {
    const std::string g = "mnist_" + std::to_string(ref.size);
    const double van = mean_of(r, g, Regime::vanilla), lap = mean_of(r, g, Regime::lap);
    const double need = ref.size == 100 ? 8.0 : 1.0;
    const bool gap_ok = lap - van >= need;
    const bool abs_ok = std::abs(van - ref.vanilla) <= 5.0 && std::abs(lap - ref.lap) <= 5.0;
    v.pass = v.pass && gap_ok && abs_ok;
    v.detail += "size " + std::to_string(ref.size) + ": " + row_text(r, g, Regime::vanilla) + ", " +
                row_text(r, g, Regime::lap) + ", gap " + fmt(lap - van) + " (need >= " +
                fmt(need, 0) + "), reference " + fmt(ref.vanilla, 1) + "/" + fmt(ref.lap, 1) +
                " +-5 " + (abs_ok ? "ok" : "off") + "; ";
  }
  return v;
}

Verdict criterion_correlation(const CorrelationResult& r) {
  std::size_t failed = 0;
  for (const auto& c : r.cells) failed += c.ok() ? 0 : 1;
  std::string fits;
  for (const auto& [kind, fit] : r.fits)
    fits += std::string(to_string(kind)) + " slope " + sci(fit.slope) + " ";
  const bool enough = r.overall.n >= 24;
  return {enough && r.overall.defined && r.overall.r < -0.5,
          "pearson r " + (r.overall.defined ? fmt(r.overall.r, 3) : std::string("undefined")) +
              " over " + std::to_string(r.overall.n) + " runs (" + std::to_string(failed) +
              " diverged, excluded), need r < -0.5 with >= 24 runs; " + fits};
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Large tensors stay on the heap between layers.
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"acceptance criteria"};
  std::string out = "acceptance_out", only, data_dir;
  std::size_t jobs = 1;
  bool strict = false;
  app.add_option("--out", out, "directory for the result files");
  app.add_option("--only", only, "comma separated criterion numbers");
  app.add_option("--data-dir", data_dir, "MNIST IDX directory (default $LAP_DATA_DIR)");
  app.add_option("--jobs", jobs)->check(CLI::PositiveNumber);
  app.add_flag("--strict", strict, "exit nonzero when a criterion fails");
  CLI11_PARSE(app, argc, argv);

  std::set<int> wanted;
  {
    std::stringstream ss(only);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) wanted.insert(std::stoi(item));
  }
  auto want = [&](int n) { return wanted.empty() || wanted.count(n) > 0; };
  const fs::path root(out);

  fs::create_directories(root);
  std::ofstream report_file(root / "report.txt");
  auto emit = [&](const std::string& line) {
    std::cout << line << std::endl;
    report_file << line << std::endl;
  };

  int failures = 0, errors = 0;
  auto report = [&](int n, const std::string& name, const std::function<Verdict()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = body();
    } catch (const std::exception& e) {
      v = {false, std::string("could not be evaluated: ") + e.what()};
      ++errors;
    }
    failures += v.pass ? 0 : 1;
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    emit("CRITERION " + std::to_string(n) + " " + (v.pass ? "PASS" : "FAIL") + " " + name + ": " +
         v.detail + " (" + fmt(secs, 0) + " s)");
  };

  Ledger ledger;
  std::optional<SuiteResult> fifty, big, mnist;

  if (want(1)) report(1, "gradient check", criterion_gradients);
  if (want(2)) report(2, "Hungarian vs brute force", criterion_hungarian);

  if (want(4) || want(3) || want(8))
    report(4, "circles 50 points, 9 blocks, no BN", [&] {
      fifty = circles_run("fifty_points", false, root / "circles_fifty_points", jobs);
      ledger.add(fifty->cells, true);
      return criterion_fifty_points(*fifty);
    });
  if (want(5) || want(3) || want(8))
    report(5, "circles N(0,5) init, 9 blocks, BN", [&] {
      big = circles_run("big_init", true, root / "circles_big_init", jobs);
      ledger.add(big->cells, true);
      return criterion_big_init(*big);
    });
  if (want(6) || want(3) || want(8))
    report(6, "MNIST small training sets", [&] {
      auto cfg = default_config(ExperimentKind::mnist_table);
      cfg.mnist.sizes = {100, 300};
      cfg.output = root / "mnist_table";
      cfg.jobs = jobs;
      if (!data_dir.empty()) cfg.mnist.data_dir = data_dir;
      note("mnist table: config " + config_hash(cfg));
      mnist = run_mnist_table(cfg, note);
      ledger.add(mnist->cells, true);
      return criterion_mnist(*mnist);
    });
  if (want(7) || want(3))
    report(7, "transport cost vs accuracy correlation", [&] {
      auto cfg = default_config(ExperimentKind::correlation);
      cfg.output = root / "correlation";
      cfg.jobs = jobs;
      if (!data_dir.empty()) cfg.mnist.data_dir = data_dir;
      note("correlation: config " + config_hash(cfg));
      const auto r = run_correlation(cfg, note);
      ledger.add(r.cells, false);
      return criterion_correlation(r);
    });
  if (want(3))
    report(3, "cost bound chain on every trained network", [&] {
      std::string detail = std::to_string(ledger.checkpoints) + " trained networks (" +
                           std::to_string(ledger.diverged) + " runs diverged, nothing to check), " +
                           std::to_string(ledger.bound_missing) +
                           " violations, smallest margin " + sci(ledger.worst_slack) +
                           ", tolerance 1e-9";
      for (const auto& p : ledger.problems) detail += "; " + p;
      return Verdict{ledger.checkpoints > 0 && ledger.bound_missing == 0, detail};
    });
  if (want(8))
    report(8, "multiplier monotonicity", [&] {
      return Verdict{ledger.lap_runs > 0 && ledger.lambda_bad == 0,
                     std::to_string(ledger.lap_runs) + " completed LAP runs, " +
                         std::to_string(ledger.lambda_bad) + " with a decreasing lambda sequence"};
    });
  if (want(9))
    report(9, "scope statement", [] {
      return Verdict{true,
                     "not run at desk scale: the CIFAR10 and CIFAR100 tables and every ResNeXt-50 "
                     "result are out of scope; criteria 4 to 7 stand in for them"};
    });

  emit("SUMMARY " + std::to_string(failures) + " failed, " + std::to_string(errors) +
       " not evaluated");
  if (errors > 0) return 2;
  return strict && failures > 0 ? 1 : 0;
}
