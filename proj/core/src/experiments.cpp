#include "lap/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json_io.hpp"
#include "lap/data.hpp"

namespace lap::exp {

using nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::circles_table: return "circles_table";
    case ExperimentKind::mnist_table: return "mnist_table";
    case ExperimentKind::correlation: return "correlation";
    case ExperimentKind::oracle_check: return "oracle_check";
  }
  return "unknown";
}

ExperimentKind experiment_kind_from_string(std::string_view name) {
  for (auto k : {ExperimentKind::circles_table, ExperimentKind::mnist_table,
                 ExperimentKind::correlation, ExperimentKind::oracle_check})
    if (to_string(k) == name) return k;
  throw std::invalid_argument("unknown experiment kind '" + std::string(name) + "'");
}

const std::vector<CirclesScenario>& circles_scenarios() {
  static const std::vector<CirclesScenario> all{
      {"one_block", 1000, 1, {InitKind::orthogonal, 0.01}, 0.005},
      {"hundred_blocks", 1000, 100, {InitKind::orthogonal, 0.01}, 0.09},
      {"big_init", 1000, 9, {InitKind::normal, 5.0}, 0.04},
      {"fifty_points", 50, 9, {InitKind::orthogonal, 0.01}, 0.04},
  };
  return all;
}

const CirclesScenario& circles_scenario(std::string_view name) {
  for (const auto& s : circles_scenarios())
    if (s.name == name) return s;
  throw std::invalid_argument("unknown circles scenario '" + std::string(name) + "'");
}

namespace {

std::string_view to_string(Metric m) {
  return m == Metric::best_accuracy ? "best" : "final";
}

Metric metric_from_string(std::string_view s) {
  if (s == "best") return Metric::best_accuracy;
  if (s == "final") return Metric::final_accuracy;
  throw std::invalid_argument("metric must be 'best' or 'final', got '" + std::string(s) + "'");
}

void reject_unknown(const json& j, std::initializer_list<std::string_view> known,
                    std::string_view where) {
  if (!j.is_object()) throw std::invalid_argument(std::string(where) + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::invalid_argument("unknown key '" + key + "' in " + std::string(where));
}

}  // namespace

ExperimentConfig default_config(ExperimentKind kind) {
  ExperimentConfig c;
  c.kind = kind;
  c.train.batch_size = 128;
  c.train.sgd = {0.01, 0.9, 1e-4, {}};
  switch (kind) {
    case ExperimentKind::circles_table:
      for (std::uint64_t s = 0; s < 30; ++s) c.seeds.push_back(s);
      c.architecture.kind = ArchKind::circles2d;
      c.architecture.hidden = 4;
      c.train.epochs = 10000;
      c.lap = {0.1, 0.1, 5, false};
      c.metric = Metric::final_accuracy;
      break;
    case ExperimentKind::mnist_table:
      for (std::uint64_t s = 0; s < 10; ++s) c.seeds.push_back(s);
      c.architecture.kind = ArchKind::mnist;
      c.architecture.blocks = 9;
      c.architecture.batch_norm = true;
      c.regimes = {Regime::vanilla, Regime::lap};
      c.train.epochs = 30;
      c.train.sgd.schedule = {{120, 5.0}, {160, 5.0}, {200, 5.0}};
      c.lap = {5.0, 1.0, 5, false};
      c.metric = Metric::best_accuracy;
      break;
    case ExperimentKind::correlation:
      c.seeds = {0, 1};
      c.architecture.kind = ArchKind::mnist;
      c.architecture.blocks = 9;
      c.architecture.batch_norm = true;
      c.regimes = {Regime::vanilla};
      c.train.epochs = 10;
      c.lap = {5.0, 1.0, 5, false};
      c.metric = Metric::final_accuracy;
      break;
    case ExperimentKind::oracle_check:
      c.regimes.clear();
      break;
  }
  return c;
}

ExperimentConfig parse_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j,
                 {"kind", "seeds", "output", "jobs", "save_checkpoints", "architecture", "init",
                  "regimes", "train", "lap", "fixed_lambda", "metric", "bound_batch", "circles",
                  "mnist", "correlation", "oracle"},
                 "config");
  if (!j.contains("kind")) throw std::invalid_argument("config needs a \"kind\"");
  ExperimentConfig c = default_config(experiment_kind_from_string(j.at("kind").get<std::string>()));

  try {
    if (j.contains("seeds")) {
      const auto& s = j.at("seeds");
      c.seeds.clear();
      if (s.is_array()) {
        c.seeds = s.get<std::vector<std::uint64_t>>();
      } else {
        reject_unknown(s, {"count", "start"}, "seeds");
        const auto count = s.at("count").get<std::uint64_t>();
        const auto start = s.value("start", std::uint64_t{0});
        for (std::uint64_t i = 0; i < count; ++i) c.seeds.push_back(start + i);
      }
    }
    if (j.contains("output")) c.output = j.at("output").get<std::string>();
    c.jobs = j.value("jobs", c.jobs);
    c.save_checkpoints = j.value("save_checkpoints", c.save_checkpoints);
    if (j.contains("architecture")) {
      reject_unknown(j["architecture"],
                     {"kind", "blocks", "hidden", "batch_norm", "classifier_trainable", "channels",
                      "classifier_hidden"},
                     "architecture");
      c.architecture = architecture_from_json(j["architecture"], c.architecture);
    }
    if (j.contains("init")) {
      reject_unknown(j["init"], {"kind", "gain"}, "init");
      c.init = init_from_json(j["init"], c.init);
    }
    if (j.contains("regimes")) {
      c.regimes.clear();
      for (const auto& r : j["regimes"]) c.regimes.push_back(regime_from_string(r.get<std::string>()));
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      reject_unknown(t,
                     {"epochs", "batch_size", "eval_batch_size", "learning_rate", "momentum",
                      "weight_decay", "schedule"},
                     "train");
      c.train.epochs = t.value("epochs", c.train.epochs);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.eval_batch_size = t.value("eval_batch_size", c.train.eval_batch_size);
      c.train.sgd.learning_rate = t.value("learning_rate", c.train.sgd.learning_rate);
      c.train.sgd.momentum = t.value("momentum", c.train.sgd.momentum);
      c.train.sgd.weight_decay = t.value("weight_decay", c.train.sgd.weight_decay);
      if (t.contains("schedule"))
        c.train.sgd.schedule = t["schedule"].get<std::vector<std::pair<int, double>>>();
    }
    if (j.contains("lap")) {
      const auto& l = j["lap"];
      reject_unknown(l, {"lambda0", "tau", "steps", "full_train_loss"}, "lap");
      c.lap.lambda0 = l.value("lambda0", c.lap.lambda0);
      c.lap.tau = l.value("tau", c.lap.tau);
      c.lap.steps = l.value("steps", c.lap.steps);
      c.lap.full_train_loss = l.value("full_train_loss", c.lap.full_train_loss);
    }
    if (j.contains("fixed_lambda") && !j["fixed_lambda"].is_null())
      c.fixed_lambda = j["fixed_lambda"].get<double>();
    if (j.contains("metric")) c.metric = metric_from_string(j["metric"].get<std::string>());
    c.bound_batch = j.value("bound_batch", c.bound_batch);
    if (j.contains("circles")) {
      const auto& k = j["circles"];
      reject_unknown(k, {"noise", "ratio", "scenarios", "batch_norm"}, "circles");
      c.circles.noise = k.value("noise", c.circles.noise);
      c.circles.ratio = k.value("ratio", c.circles.ratio);
      if (k.contains("scenarios")) {
        c.circles.scenarios = k["scenarios"].get<std::vector<std::string>>();
        for (const auto& name : c.circles.scenarios) circles_scenario(name);
      }
      if (k.contains("batch_norm")) c.circles.batch_norm = k["batch_norm"].get<std::vector<bool>>();
    }
    if (j.contains("mnist")) {
      const auto& m = j["mnist"];
      reject_unknown(m, {"data_dir", "sizes", "eval_subset", "eval_seed", "stratified"}, "mnist");
      if (m.contains("data_dir") && !m["data_dir"].is_null())
        c.mnist.data_dir = m["data_dir"].get<std::string>();
      if (m.contains("sizes")) c.mnist.sizes = m["sizes"].get<std::vector<std::size_t>>();
      c.mnist.eval_subset = m.value("eval_subset", c.mnist.eval_subset);
      c.mnist.eval_seed = m.value("eval_seed", c.mnist.eval_seed);
      c.mnist.stratified = m.value("stratified", c.mnist.stratified);
    }
    if (j.contains("correlation")) {
      const auto& r = j["correlation"];
      reject_unknown(r, {"gains", "inits", "train_size"}, "correlation");
      if (r.contains("gains")) c.correlation.gains = r["gains"].get<std::vector<double>>();
      if (r.contains("inits")) {
        c.correlation.inits.clear();
        for (const auto& k : r["inits"])
          c.correlation.inits.push_back(init_kind_from_string(k.get<std::string>()));
      }
      c.correlation.train_size = r.value("train_size", c.correlation.train_size);
    }
    if (j.contains("oracle")) {
      const auto& o = j["oracle"];
      reject_unknown(o, {"checkpoints", "dataset"}, "oracle");
      if (o.contains("checkpoints")) {
        c.oracle.checkpoints.clear();
        for (const auto& p : o["checkpoints"]) c.oracle.checkpoints.emplace_back(p.get<std::string>());
      }
      if (o.contains("dataset")) c.oracle.dataset = o["dataset"].get<std::string>();
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("bad config value: ") + e.what());
  }
  if (c.jobs == 0) throw std::invalid_argument("jobs must be at least 1");
  if (c.train.epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string canonical_json(const ExperimentConfig& c) {
  json regimes = json::array();
  for (auto r : c.regimes) regimes.push_back(std::string(to_string(r)));
  json inits = json::array();
  for (auto k : c.correlation.inits) inits.push_back(std::string(to_string(k)));
  json checkpoints = json::array();
  for (const auto& p : c.oracle.checkpoints) checkpoints.push_back(p.generic_string());

  json j{
      {"kind", std::string(to_string(c.kind))},
      {"seeds", c.seeds},
      {"save_checkpoints", c.save_checkpoints},
      {"architecture", to_json(c.architecture)},
      {"init", to_json(c.init)},
      {"regimes", regimes},
      {"train",
       {{"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"eval_batch_size", c.train.eval_batch_size},
        {"learning_rate", c.train.sgd.learning_rate},
        {"momentum", c.train.sgd.momentum},
        {"weight_decay", c.train.sgd.weight_decay},
        {"schedule", c.train.sgd.schedule}}},
      {"lap",
       {{"lambda0", c.lap.lambda0},
        {"tau", c.lap.tau},
        {"steps", c.lap.steps},
        {"full_train_loss", c.lap.full_train_loss}}},
      {"fixed_lambda", c.fixed_lambda ? json(*c.fixed_lambda) : json(nullptr)},
      {"metric", std::string(to_string(c.metric))},
      {"bound_batch", c.bound_batch},
  };
  switch (c.kind) {
    case ExperimentKind::circles_table:
      j["circles"] = {{"noise", c.circles.noise},
                      {"ratio", c.circles.ratio},
                      {"scenarios", c.circles.scenarios},
                      {"batch_norm", c.circles.batch_norm}};
      break;
    case ExperimentKind::mnist_table:
      j["mnist"] = {{"sizes", c.mnist.sizes},
                    {"eval_subset", c.mnist.eval_subset},
                    {"eval_seed", c.mnist.eval_seed},
                    {"stratified", c.mnist.stratified}};
      break;
    case ExperimentKind::correlation:
      j["mnist"] = {{"eval_subset", c.mnist.eval_subset}, {"eval_seed", c.mnist.eval_seed}};
      j["correlation"] = {{"gains", c.correlation.gains},
                          {"inits", inits},
                          {"train_size", c.correlation.train_size}};
      break;
    case ExperimentKind::oracle_check:
      j["oracle"] = {{"checkpoints", checkpoints}, {"dataset", c.oracle.dataset.generic_string()}};
      break;
  }
  return j.dump();
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : canonical_json(cfg)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Summary summarize(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("summarize needs at least one value");
  Summary s;
  s.n = values.size();
  const double n = static_cast<double>(s.n);
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / (n - 1.0));
  }
  const double half = 1.96 * s.sd / std::sqrt(n);
  s.ci_low = s.mean - half;
  s.ci_high = s.mean + half;
  return s;
}

CorrelationStats pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: size mismatch");
  CorrelationStats out;
  out.n = x.size();
  if (out.n < 2) return out;
  const double n = static_cast<double>(out.n);
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < out.n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return out;
  out.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  out.defined = true;
  return out;
}

LinearFit least_squares(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("least_squares: size mismatch");
  LinearFit fit;
  fit.n = x.size();
  if (fit.n < 2) return fit;
  const double n = static_cast<double>(fit.n);
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < fit.n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx == 0.0) return fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  return fit;
}

const ResultRow* ResultTable::find(std::string_view config_id, Regime regime) const {
  for (const auto& r : rows)
    if (r.config_id == config_id && r.regime == regime) return &r;
  return nullptr;
}

void ResultTable::write_csv(std::ostream& out) const {
  out << "config_id,regime,train_size,mean,ci_low,ci_high,n_seeds,failed\n";
  const auto old = out.precision(17);
  for (const auto& r : rows)
    out << r.config_id << ',' << to_string(r.regime) << ',' << r.train_size << ','
        << r.summary.mean << ',' << r.summary.ci_low << ',' << r.summary.ci_high << ','
        << r.summary.n << ',' << r.failed << '\n';
  out.precision(old);
}

void parallel_for(std::size_t count, std::size_t jobs,
                  const std::function<void(std::size_t)>& task) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  if (jobs == 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> workers;
    for (std::size_t w = 0; w < jobs; ++w)
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try {
            task(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
  }
  if (failure) std::rethrow_exception(failure);
}

void write_provenance(std::ostream& out, const ExperimentConfig& cfg) {
  out << "# lapnet " << LAP_VERSION << '\n';
  out << "# config_hash " << config_hash(cfg) << '\n';
  out << "# seeds";
  for (auto s : cfg.seeds) out << ' ' << s;
  out << '\n';
  out << "# config " << canonical_json(cfg) << '\n';
}

namespace {

// One training run to perform: everything a worker needs besides shared data.
struct CellPlan {
  CellResult result;
  Architecture arch;
  InitScheme init;
  TrainConfig train;
  std::size_t data_points = 0;  // circles only
};

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::string file_stem(std::string id) {
  std::replace(id.begin(), id.end(), '/', '_');
  return id;
}

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void fill_from_history(CellResult& r, const TrainHistory& h, Metric metric) {
  r.final_accuracy = 100.0 * h.last().test_accuracy;
  r.best_accuracy = 100.0 * h.best_test_accuracy();
  r.metric = metric == Metric::best_accuracy ? r.best_accuracy : r.final_accuracy;
  r.final_test_cost = h.last().test_cost;
  r.final_train_loss = h.last().train_loss;
  r.final_lambda = h.last().lambda;
  if (!h.lambda_trace.empty()) {
    r.lambda_updates = h.lambda_trace.size() - 1;
    r.lambda_nondecreasing =
        std::is_sorted(h.lambda_trace.begin(), h.lambda_trace.end());
    if (!r.lambda_nondecreasing) r.error = "lambda sequence decreased";
  }
}

// Trains one planned cell and fills its result; failures are recorded, never thrown.
void run_cell(CellPlan& plan, const Dataset& train_set, const Dataset& test_set,
              const Tensor& bound_batch, const ExperimentConfig& cfg) {
  CellResult& r = plan.result;
  try {
    Model model = build_model(plan.arch, plan.init, plan.train.seed);
    const TrainHistory h = train(model, train_set, test_set, plan.train);
    fill_from_history(r, h, cfg.metric);
    if (!cfg.output.empty()) {
      auto out = open_out(cfg.output / "histories" / (file_stem(r.id) + ".csv"));
      h.write_csv(out);
    }
    try {
      r.bound = ot::network_cost_bound_check(model, bound_batch);
    } catch (const ot::BoundViolation& e) {
      r.error = std::string("bound violation: ") + e.what();
    }
    if (cfg.save_checkpoints && !cfg.output.empty()) {
      fs::create_directories(cfg.output / "checkpoints");
      save_checkpoint(model, cfg.output / "checkpoints" / (file_stem(r.id) + ".json"));
    }
  } catch (const std::exception& e) {
    r.error = e.what();
  }
}

ResultTable aggregate(const std::vector<CellResult>& cells) {
  ResultTable table;
  std::map<std::pair<std::string, Regime>, std::vector<const CellResult*>> groups;
  for (const auto& c : cells) {
    auto& g = groups[{c.group, c.regime}];
    if (g.empty())
      table.rows.push_back({c.group, c.regime, c.train_size, {}, 0});
    g.push_back(&c);
  }
  for (auto& row : table.rows) {
    std::vector<double> values;
    for (const auto* c : groups[{row.config_id, row.regime}]) {
      if (c->ok() && std::isfinite(c->metric))
        values.push_back(c->metric);
      else
        ++row.failed;
    }
    if (!values.empty()) row.summary = summarize(values);
  }
  return table;
}

void write_cells_csv(std::ostream& out, const std::vector<CellResult>& cells) {
  out << "id,group,regime,train_size,seed,init,gain,metric,final_acc,best_acc,final_test_cost,"
         "final_train_loss,final_lambda,lambda_updates,lambda_nondecreasing,k_times_cost,"
         "endpoint_msd,w2_squared,ratio,error\n";
  const auto old = out.precision(17);
  for (const auto& c : cells) {
    std::string err = c.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << c.id << ',' << c.group << ',' << to_string(c.regime) << ',' << c.train_size << ','
        << c.seed << ',' << to_string(c.init) << ',' << c.gain << ',' << c.metric << ','
        << c.final_accuracy << ',' << c.best_accuracy << ',' << c.final_test_cost << ','
        << c.final_train_loss << ',' << c.final_lambda << ',' << c.lambda_updates << ','
        << (c.lambda_nondecreasing ? 1 : 0) << ',';
    if (c.bound) {
      out << c.bound->k_times_cost << ',' << c.bound->endpoint_msd << ',' << c.bound->w2_squared
          << ',';
      if (c.bound->ratio) out << *c.bound->ratio;
    } else {
      out << ",,,";
    }
    out << ',' << err << '\n';
  }
  out.precision(old);
}

void write_suite_files(const ExperimentConfig& cfg, const SuiteResult& res) {
  if (cfg.output.empty()) return;
  {
    auto out = open_out(cfg.output / "table.csv");
    write_provenance(out, cfg);
    res.table.write_csv(out);
  }
  auto out = open_out(cfg.output / "cells.csv");
  write_provenance(out, cfg);
  write_cells_csv(out, res.cells);
}

std::string describe(const CellResult& r) {
  std::ostringstream os;
  os << r.id << ": ";
  if (!r.ok()) {
    os << "FAILED (" << r.error << ")";
  } else {
    os << std::fixed << std::setprecision(2) << "acc " << r.metric << " cost "
       << std::setprecision(4) << r.final_test_cost;
    if (r.regime == Regime::lap) os << " lambda " << r.final_lambda;
  }
  return os.str();
}

void run_plans(std::vector<CellPlan>& plans, const ExperimentConfig& cfg, const Logger& log,
               const std::function<void(CellPlan&)>& work) {
  std::mutex log_mutex;
  parallel_for(plans.size(), cfg.jobs, [&](std::size_t i) {
    work(plans[i]);
    if (log) {
      std::lock_guard lock(log_mutex);
      log("[" + std::to_string(i + 1) + "/" + std::to_string(plans.size()) + "] " +
          describe(plans[i].result));
    }
  });
}

TrainConfig cell_train_config(const ExperimentConfig& cfg, Regime regime, std::uint64_t seed,
                              double fixed_lambda) {
  TrainConfig t = cfg.train;
  t.regime = regime;
  t.seed = seed;
  t.lap = cfg.lap;
  t.lambda = regime == Regime::fixed_lambda ? fixed_lambda : 0.0;
  return t;
}

struct MnistData {
  Dataset train, test;
};

MnistData load_mnist(const ExperimentConfig& cfg) {
  std::optional<fs::path> dir = cfg.mnist.data_dir;
  if (!dir) dir = data_dir_from_env();
  if (!dir)
    throw std::runtime_error(
        "MNIST data directory not given: set mnist.data_dir, --data-dir or LAP_DATA_DIR");
  const auto files = MnistFiles::in(*dir);
  const auto missing = files.missing();
  if (!missing.empty()) {
    std::string msg = "missing MNIST files:";
    for (const auto& p : missing) msg += " " + p.string();
    throw std::runtime_error(msg);
  }
  MnistData d{load_mnist_idx(files.train_images, files.train_labels),
              load_mnist_idx(files.test_images, files.test_labels)};
  if (cfg.mnist.eval_subset > 0 && cfg.mnist.eval_subset < d.test.size())
    d.test = subsample(d.test, cfg.mnist.eval_subset, cfg.mnist.eval_seed, false);
  return d;
}

Tensor first_rows(const Dataset& d, std::size_t rows) {
  rows = std::min(rows, d.size());
  std::vector<std::size_t> idx(rows);
  std::iota(idx.begin(), idx.end(), 0);
  return d.gather_inputs(idx);
}

Architecture mnist_architecture(const ExperimentConfig& cfg) {
  Architecture a = cfg.architecture;
  a.kind = ArchKind::mnist;
  return a;
}

}  // namespace

SuiteResult run_circles_suite(const ExperimentConfig& cfg, const Logger& log) {
  if (cfg.bound_batch == 0 || cfg.bound_batch % 2 != 0 || cfg.bound_batch > ot::kMaxOracleSize)
    throw std::invalid_argument("circles bound batch must be even and at most " +
                                std::to_string(ot::kMaxOracleSize));
  std::vector<CellPlan> plans;
  for (const auto& name : cfg.circles.scenarios) {
    const CirclesScenario& sc = circles_scenario(name);
    for (bool bn : cfg.circles.batch_norm) {
      const std::string group = sc.name + (bn ? "/bn" : "/no_bn");
      for (Regime regime : cfg.regimes)
        for (std::uint64_t seed : cfg.seeds) {
          CellPlan p;
          p.arch = cfg.architecture;
          p.arch.kind = ArchKind::circles2d;
          p.arch.blocks = sc.blocks;
          p.arch.batch_norm = bn;
          p.init = sc.init;
          p.train = cell_train_config(cfg, regime, seed, cfg.fixed_lambda.value_or(sc.fixed_lambda));
          p.data_points = sc.points;
          auto& r = p.result;
          r.id = group + "/" + std::string(to_string(regime)) + "/seed" + std::to_string(seed);
          r.group = group;
          r.regime = regime;
          r.train_size = sc.points - sc.points / 5;
          r.seed = seed;
          r.init = sc.init.kind;
          r.gain = sc.init.gain;
          plans.push_back(std::move(p));
        }
    }
  }

  run_plans(plans, cfg, log, [&](CellPlan& p) {
    try {
      // Same seed, same data, split and initialization for every regime.
      const Dataset all = make_circles(p.data_points, cfg.circles.noise, cfg.circles.ratio, p.train.seed);
      const Split split = split_dataset(all, {0.8, std::nullopt, p.train.seed, false});
      const Dataset check = make_circles(cfg.bound_batch, cfg.circles.noise, cfg.circles.ratio,
                                         mix(p.train.seed));
      run_cell(p, split.train, split.test, check.inputs, cfg);
    } catch (const std::exception& e) {
      p.result.error = e.what();
    }
  });

  SuiteResult res;
  for (auto& p : plans) res.cells.push_back(std::move(p.result));
  res.table = aggregate(res.cells);
  write_suite_files(cfg, res);
  return res;
}

SuiteResult run_mnist_table(const ExperimentConfig& cfg, const Logger& log) {
  std::vector<CellPlan> plans;
  for (std::size_t size : cfg.mnist.sizes)
    for (Regime regime : cfg.regimes)
      for (std::uint64_t seed : cfg.seeds) {
        CellPlan p;
        p.arch = mnist_architecture(cfg);
        p.init = cfg.init;
        p.train = cell_train_config(cfg, regime, seed, cfg.fixed_lambda.value_or(0.0));
        auto& r = p.result;
        r.group = "mnist_" + std::to_string(size);
        r.id = r.group + "/" + std::string(to_string(regime)) + "/seed" + std::to_string(seed);
        r.regime = regime;
        r.train_size = size;
        r.seed = seed;
        r.init = cfg.init.kind;
        r.gain = cfg.init.gain;
        plans.push_back(std::move(p));
      }
  SuiteResult res;
  if (plans.empty()) {
    write_suite_files(cfg, res);
    return res;
  }

  const MnistData data = load_mnist(cfg);
  const Tensor check = first_rows(data.test, cfg.bound_batch);
  run_plans(plans, cfg, log, [&](CellPlan& p) {
    try {
      const Dataset subset =
          subsample(data.train, p.result.train_size, p.train.seed, cfg.mnist.stratified);
      run_cell(p, subset, data.test, check, cfg);
    } catch (const std::exception& e) {
      p.result.error = e.what();
    }
  });

  for (auto& p : plans) res.cells.push_back(std::move(p.result));
  res.table = aggregate(res.cells);
  write_suite_files(cfg, res);
  return res;
}

CorrelationResult run_correlation(const ExperimentConfig& cfg, const Logger& log) {
  std::vector<CellPlan> plans;
  for (InitKind kind : cfg.correlation.inits)
    for (double gain : cfg.correlation.gains)
      for (std::uint64_t seed : cfg.seeds) {
        CellPlan p;
        p.arch = mnist_architecture(cfg);
        p.init = {kind, gain};
        p.train = cell_train_config(cfg, Regime::vanilla, seed, 0.0);
        auto& r = p.result;
        std::ostringstream g;
        g << to_string(kind) << "_gain" << gain;
        r.group = g.str();
        r.id = r.group + "/seed" + std::to_string(seed);
        r.regime = Regime::vanilla;
        r.train_size = cfg.correlation.train_size;
        r.seed = seed;
        r.init = kind;
        r.gain = gain;
        plans.push_back(std::move(p));
      }

  CorrelationResult res;
  if (!plans.empty()) {
    const MnistData data = load_mnist(cfg);
    const Tensor check = first_rows(data.test, cfg.bound_batch);
    run_plans(plans, cfg, log, [&](CellPlan& p) {
      try {
        const Dataset subset = subsample(data.train, cfg.correlation.train_size, p.train.seed, true);
        run_cell(p, subset, data.test, check, cfg);
      } catch (const std::exception& e) {
        p.result.error = e.what();
      }
    });
  }
  for (auto& p : plans) res.cells.push_back(std::move(p.result));

  std::vector<double> cost, acc;
  std::map<InitKind, std::pair<std::vector<double>, std::vector<double>>> by_init;
  for (const auto& c : res.cells) {
    if (!c.ok() || !std::isfinite(c.final_test_cost) || !std::isfinite(c.metric)) continue;
    cost.push_back(c.final_test_cost);
    acc.push_back(c.metric);
    by_init[c.init].first.push_back(c.final_test_cost);
    by_init[c.init].second.push_back(c.metric);
  }
  res.overall = pearson(cost, acc);
  for (InitKind kind : cfg.correlation.inits) {
    const auto& [x, y] = by_init[kind];
    res.fits.emplace_back(kind, least_squares(x, y));
  }

  if (!cfg.output.empty()) {
    {
      auto out = open_out(cfg.output / "scatter.csv");
      write_provenance(out, cfg);
      out << "init,gain,seed,test_cost,test_acc,ok\n";
      out.precision(17);
      for (const auto& c : res.cells)
        out << to_string(c.init) << ',' << c.gain << ',' << c.seed << ',' << c.final_test_cost
            << ',' << c.metric << ',' << (c.ok() ? 1 : 0) << '\n';
    }
    {
      auto out = open_out(cfg.output / "cells.csv");
      write_provenance(out, cfg);
      write_cells_csv(out, res.cells);
    }
    json fits = json::object();
    for (const auto& [kind, fit] : res.fits)
      fits[std::string(to_string(kind))] = {
          {"slope", std::isfinite(fit.slope) ? json(fit.slope) : json(nullptr)},
          {"intercept", std::isfinite(fit.intercept) ? json(fit.intercept) : json(nullptr)},
          {"n", fit.n}};
    std::size_t failed = 0;
    for (const auto& c : res.cells) failed += c.ok() ? 0 : 1;
    const json summary{
        {"config_hash", config_hash(cfg)},
        {"pearson_r", res.overall.defined ? json(res.overall.r) : json(nullptr)},
        {"r_defined", res.overall.defined},
        {"n", res.overall.n},
        {"failed_runs", failed},
        {"fits", fits}};
    auto out = open_out(cfg.output / "correlation.json");
    out << summary.dump(2) << '\n';
  }
  return res;
}

Tensor load_check_batch(const fs::path& dataset, std::size_t rows) {
  if (fs::is_directory(dataset)) {
    const auto files = MnistFiles::in(dataset);
    for (const auto& p : {files.test_images, files.test_labels})
      if (!fs::exists(p)) throw std::runtime_error("missing MNIST file: " + p.string());
    return first_rows(load_mnist_idx(files.test_images, files.test_labels), rows);
  }
  std::ifstream in(dataset);
  if (!in) throw std::runtime_error("cannot open dataset " + dataset.string());
  return first_rows(read_circles_csv(in), rows);
}

std::vector<OracleCheckEntry> run_oracle_check(const ExperimentConfig& cfg) {
  std::vector<OracleCheckEntry> out;
  if (cfg.oracle.checkpoints.empty()) return out;
  const Tensor batch = load_check_batch(cfg.oracle.dataset, cfg.bound_batch);
  for (const auto& path : cfg.oracle.checkpoints) {
    Model model = load_checkpoint(path);
    out.push_back({path, ot::network_cost_bound_check(model, batch)});
  }
  return out;
}

void run_experiment(const ExperimentConfig& cfg, const Logger& log) {
  switch (cfg.kind) {
    case ExperimentKind::circles_table: {
      const auto res = run_circles_suite(cfg, log);
      if (log) {
        std::ostringstream os;
        res.table.write_csv(os);
        log(os.str());
      }
      break;
    }
    case ExperimentKind::mnist_table: {
      const auto res = run_mnist_table(cfg, log);
      if (log) {
        std::ostringstream os;
        res.table.write_csv(os);
        log(os.str());
      }
      break;
    }
    case ExperimentKind::correlation: {
      const auto res = run_correlation(cfg, log);
      if (log)
        log("pearson r = " + (res.overall.defined ? std::to_string(res.overall.r) : "undefined") +
            " over " + std::to_string(res.overall.n) + " runs");
      break;
    }
    case ExperimentKind::oracle_check: {
      const auto entries = run_oracle_check(cfg);
      json all = json::array();
      for (const auto& e : entries)
        all.push_back({{"checkpoint", e.checkpoint.generic_string()},
                       {"report", json::parse(e.report.to_json())}});
      if (!cfg.output.empty()) {
        auto out = open_out(cfg.output / "bounds.json");
        out << all.dump(2) << '\n';
      }
      if (log) log(all.dump(2));
      break;
    }
  }
}

}  // namespace lap::exp
