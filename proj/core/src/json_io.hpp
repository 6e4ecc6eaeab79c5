#pragma once

#include <json.hpp>

#include "lap/network.hpp"

namespace lap {

inline nlohmann::json to_json(const Architecture& a) {
  return {{"kind", std::string(to_string(a.kind))},
          {"blocks", a.blocks},
          {"hidden", a.hidden},
          {"batch_norm", a.batch_norm},
          {"classifier_trainable", a.classifier_trainable},
          {"channels", a.channels},
          {"classifier_hidden", a.classifier_hidden}};
}

/// Missing keys keep the defaults of `base`.
inline Architecture architecture_from_json(const nlohmann::json& j, Architecture base = {}) {
  if (j.contains("kind")) base.kind = arch_kind_from_string(j.at("kind").get<std::string>());
  base.blocks = j.value("blocks", base.blocks);
  base.hidden = j.value("hidden", base.hidden);
  base.batch_norm = j.value("batch_norm", base.batch_norm);
  base.classifier_trainable = j.value("classifier_trainable", base.classifier_trainable);
  base.channels = j.value("channels", base.channels);
  base.classifier_hidden = j.value("classifier_hidden", base.classifier_hidden);
  return base;
}

inline nlohmann::json to_json(const InitScheme& s) {
  return {{"kind", std::string(to_string(s.kind))}, {"gain", s.gain}};
}

inline InitScheme init_from_json(const nlohmann::json& j, InitScheme base = {}) {
  if (j.contains("kind")) base.kind = init_kind_from_string(j.at("kind").get<std::string>());
  base.gain = j.value("gain", base.gain);
  return base;
}

inline nlohmann::json to_json(const Tensor& t) {
  return {{"shape", t.shape()},
          {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

}  // namespace lap
