// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/nn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "evimelody/errors.hpp"
#include "json.hpp"

namespace evimelody::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr const char* kFormat = "evimelody-checkpoint";
constexpr int kVersion = 1;

}  // namespace

Checkpoint make_checkpoint(const Model& model, const Adam* optimizer, std::string config_digest, int epoch) {
  Checkpoint c;
  c.config = model.config();
  for (const auto& p : model.parameters()) c.parameter_names.push_back(p.name);
  for (const auto& b : const_cast<Model&>(model).buffers()) c.buffer_names.push_back(b.name);
  c.state = model.state();
  if (optimizer) c.optimizer = optimizer->state();
  c.config_digest = std::move(config_digest);
  c.epoch = epoch;
  return c;
}

void restore(Model& model, const Checkpoint& checkpoint) {
  if (model.config().task != checkpoint.config.task) {
    throw ConfigError("checkpoint task " + to_string(checkpoint.config.task) + " does not match configured task " +
                      to_string(model.config().task));
  }
  const auto& params = model.parameters();
  if (params.size() != checkpoint.parameter_names.size()) {
    throw ConfigError("checkpoint architecture does not match the model config");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != checkpoint.parameter_names[i]) {
      throw ConfigError("checkpoint parameter '" + checkpoint.parameter_names[i] + "' does not match model parameter '" +
                        params[i].name + "'");
    }
  }
  try {
    model.load_state(checkpoint.state);
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("checkpoint incompatible with model: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<const Tensor*> payload;
  auto add = [&](const std::string& name, const Tensor& t) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}});
    payload.push_back(&t);
  };
  if (c.parameter_names.size() != c.state.parameters.size() || c.buffer_names.size() != c.state.buffers.size()) {
    throw ArgumentError("checkpoint names and tensors differ in count");
  }
  for (std::size_t i = 0; i < c.state.parameters.size(); ++i) add("param:" + c.parameter_names[i], c.state.parameters[i]);
  for (std::size_t i = 0; i < c.state.buffers.size(); ++i) add("buffer:" + c.buffer_names[i], c.state.buffers[i]);
  nlohmann::json header = {
      {"format", kFormat},  {"version", kVersion}, {"config", to_json(c.config)},
      {"config_digest", c.config_digest}, {"epoch", c.epoch},
  };
  if (c.optimizer) {
    header["optimizer_step"] = c.optimizer->step;
    for (std::size_t i = 0; i < c.optimizer->m.size(); ++i) add("adam_m:" + c.parameter_names[i], c.optimizer->m[i]);
    for (std::size_t i = 0; i < c.optimizer->v.size(); ++i) add("adam_v:" + c.parameter_names[i], c.optimizer->v[i]);
  }
  header["tensors"] = tensors;

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out << header.dump() << '\n';
    for (const Tensor* t : payload) {
      out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->numel() * sizeof(double)));
    }
    if (!out) throw IoError("failed while writing checkpoint " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError("checkpoint " + path.string() + " is empty");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint header is not valid JSON: " + std::string(e.what()));
  }
  Checkpoint c;
  try {
    if (header.at("format").get<std::string>() != kFormat) throw FormatError("not an evimelody checkpoint");
    if (header.at("version").get<int>() != kVersion) throw FormatError("unsupported checkpoint version");
    c.config = model_config_from_json(header.at("config"));
    c.config_digest = header.at("config_digest").get<std::string>();
    c.epoch = header.at("epoch").get<int>();
    const bool has_opt = header.contains("optimizer_step");
    if (has_opt) c.optimizer = AdamState{{}, {}, header.at("optimizer_step").get<std::int64_t>()};
    for (const auto& entry : header.at("tensors")) {
      const std::string full = entry.at("name").get<std::string>();
      Tensor t(entry.at("shape").get<Shape>(), 0.0);
      in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
      if (!in) throw FormatError("checkpoint " + path.string() + " is truncated at tensor " + full);
      const auto colon = full.find(':');
      const std::string kind = full.substr(0, colon);
      const std::string name = full.substr(colon + 1);
      if (kind == "param") {
        c.parameter_names.push_back(name);
        c.state.parameters.push_back(std::move(t));
      } else if (kind == "buffer") {
        c.buffer_names.push_back(name);
        c.state.buffers.push_back(std::move(t));
      } else if (kind == "adam_m" && has_opt) {
        c.optimizer->m.push_back(std::move(t));
      } else if (kind == "adam_v" && has_opt) {
        c.optimizer->v.push_back(std::move(t));
      } else {
        throw FormatError("unknown checkpoint tensor " + full);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed checkpoint header: " + std::string(e.what()));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint payload");
  return c;
}

}  // namespace evimelody::nn
