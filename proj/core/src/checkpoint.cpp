#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "json_io.hpp"
#include "lap/network.hpp"

namespace lap {

namespace {
constexpr const char* kFormat = "lapnet-checkpoint";
}

void save_checkpoint(const Model& model, std::ostream& out) {
  nlohmann::json doc;
  doc["format"] = kFormat;
  doc["version"] = kCheckpointVersion;
  doc["architecture"] = to_json(model.architecture());
  doc["init"] = to_json(model.init);
  doc["seed"] = model.seed;
  auto& params = doc["parameters"] = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    auto entry = to_json(p.value);
    entry["name"] = p.name;
    params.push_back(std::move(entry));
  }
  auto& norms = doc["batch_norm"] = nlohmann::json::array();
  for (std::size_t i = 0; i < model.norm_states().size(); ++i) {
    const auto& s = model.norm_states()[i];
    norms.push_back({{"name", model.norm_names()[i]},
                     {"running_mean", to_json(s.running_mean)},
                     {"running_var", to_json(s.running_var)},
                     {"momentum", s.momentum},
                     {"epsilon", s.epsilon}});
  }
  out << doc.dump() << '\n';
  if (!out) throw std::runtime_error("failed to write checkpoint");
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  save_checkpoint(model, out);
}

Model load_checkpoint(std::istream& in) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  if (doc.value("format", "") != kFormat)
    throw std::runtime_error("not a lapnet checkpoint (missing format tag)");
  const int version = doc.at("version").get<int>();
  if (version < 1 || version > kCheckpointVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) +
                             " is not supported (this build reads version " +
                             std::to_string(kCheckpointVersion) + ")");

  Model model(architecture_from_json(doc.at("architecture")));
  model.init = init_from_json(doc.value("init", nlohmann::json::object()));
  model.seed = doc.value("seed", std::uint64_t{0});

  std::size_t filled = 0;
  for (const auto& entry : doc.at("parameters")) {
    const auto name = entry.at("name").get<std::string>();
    auto& p = model.parameter(name);
    Tensor t = tensor_from_json(entry);
    if (t.shape() != p.value.shape())
      throw ShapeError("checkpoint parameter '" + name + "' has shape " + shape_str(t.shape()) +
                       ", architecture expects " + shape_str(p.value.shape()));
    p.value = std::move(t);
    ++filled;
  }
  if (filled != model.parameters().size())
    throw std::runtime_error("checkpoint is missing parameters: " + std::to_string(filled) +
                             " of " + std::to_string(model.parameters().size()) + " present");

  const auto& norms = doc.at("batch_norm");
  if (norms.size() != model.norm_states().size())
    throw std::runtime_error("checkpoint batch-norm count does not match the architecture");
  for (std::size_t i = 0; i < norms.size(); ++i) {
    auto& s = model.norm_states()[i];
    if (norms[i].at("name").get<std::string>() != model.norm_names()[i])
      throw std::runtime_error("checkpoint batch-norm order does not match the architecture");
    Tensor mean = tensor_from_json(norms[i].at("running_mean"));
    Tensor var = tensor_from_json(norms[i].at("running_var"));
    if (mean.shape() != s.running_mean.shape() || var.shape() != s.running_var.shape())
      throw ShapeError("checkpoint running statistics of '" + model.norm_names()[i] +
                       "' have the wrong channel count");
    s.running_mean = std::move(mean);
    s.running_var = std::move(var);
    s.momentum = norms[i].at("momentum").get<double>();
    s.epsilon = norms[i].at("epsilon").get<double>();
  }
  return model;
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return load_checkpoint(in);
}

}  // namespace lap
