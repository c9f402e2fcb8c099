#pragma once

// "tjson" tensor files: {"dims":[...],"data":[...]}, row-major.

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "sra/tensor.hpp"

namespace sra {

template <typename T>
nlohmann::json to_tjson(const Tensor<T>& t) {
  return nlohmann::json{{"dims", t.dims()}, {"data", t.storage()}};
}

template <typename T = double>
Tensor<T> from_tjson(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("dims") || !j.contains("data")) {
    throw ShapeError("tjson document needs \"dims\" and \"data\"");
  }
  return Tensor<T>(j.at("dims").get<Dims>(), j.at("data").get<std::vector<T>>());
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw UsageError("cannot open " + path.string() + " for writing");
  // nlohmann emits the shortest round-trip form, so doubles reload bit-exact
  os << j.dump() << '\n';
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open " + path.string());
  return nlohmann::json::parse(is);
}

template <typename T>
void save_tjson(const std::filesystem::path& path, const Tensor<T>& t) {
  write_json_file(path, to_tjson(t));
}

template <typename T = double>
Tensor<T> load_tjson(const std::filesystem::path& path) {
  return from_tjson<T>(read_json_file(path));
}

}  // namespace sra
