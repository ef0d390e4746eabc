/* Copyright 2026 The moerepl Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

// Checkpoint file layout:
//   bytes 0..7    magic "MOERPLC1"
//   bytes 8..15   manifest length, uint64 little-endian
//   manifest      UTF-8 JSON {format_version, model, tensors: [{name, dtype, shape, offset, length}]}
//   payload       concatenated little-endian tensor bytes; offsets are relative to payload start

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "moerepl/errors.hpp"
#include "moerepl/model.hpp"

namespace moerepl {

inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'E', 'R', 'P', 'L', 'C', '1'};
inline constexpr int kCheckpointFormatVersion = 1;

struct TensorRecord {
  std::string name;
  std::string dtype;  // "f32" | "f64"
  std::vector<std::uint64_t> shape;
  std::vector<unsigned char> bytes;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

struct Checkpoint {
  nlohmann::json model;  // hyperparameters, beta and expert structure
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw CheckpointError(CheckpointError::Kind::schema, "unknown dtype '" + dtype + "'");
}

template <std::floating_point T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

namespace detail {

inline void append_u64_le(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

template <std::floating_point T>
std::vector<unsigned char> to_le_bytes(const Matrix<T>& m) {
  std::vector<unsigned char> out(m.size() * sizeof(T));
  std::memcpy(out.data(), m.data().data(), out.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < out.size(); i += sizeof(T)) std::reverse(out.begin() + i, out.begin() + i + sizeof(T));
  }
  return out;
}

template <std::floating_point T>
Matrix<T> from_le_bytes(const TensorRecord& rec) {
  if (rec.dtype != dtype_name<T>())
    throw CheckpointError(CheckpointError::Kind::schema, "tensor " + rec.name + " has dtype " + rec.dtype);
  if (rec.shape.size() != 2 || rec.shape[0] == 0 || rec.shape[1] == 0)
    throw CheckpointError(CheckpointError::Kind::schema, "tensor " + rec.name + " is not a 2-D matrix");
  std::vector<unsigned char> bytes = rec.bytes;
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < bytes.size(); i += sizeof(T)) std::reverse(bytes.begin() + i, bytes.begin() + i + sizeof(T));
  }
  std::vector<T> data(rec.element_count());
  std::memcpy(data.data(), bytes.data(), bytes.size());
  return Matrix<T>(rec.shape[0], rec.shape[1], std::move(data));
}

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    if (t.bytes.size() != t.element_count() * dtype_size(t.dtype))
      throw CheckpointError(CheckpointError::Kind::schema, "tensor " + t.name + " byte length mismatch");
    tensors.push_back({{"name", t.name}, {"dtype", t.dtype}, {"shape", t.shape}, {"offset", offset},
                       {"length", t.bytes.size()}});
    offset += t.bytes.size();
  }
  const nlohmann::json manifest = {{"format_version", kCheckpointFormatVersion}, {"model", ck.model}, {"tensors", tensors}};
  const std::string text = manifest.dump();
  std::vector<unsigned char> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::append_u64_le(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : ck.tensors) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  using Kind = CheckpointError::Kind;
  if (bytes.size() < 16) throw CheckpointError(Kind::bounds, "checkpoint shorter than its 16-byte header");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw CheckpointError(Kind::version, "unrecognized checkpoint magic/version");
  const std::uint64_t mlen = detail::read_u64_le(bytes.data() + 8);
  if (mlen > bytes.size() - 16) throw CheckpointError(Kind::bounds, "manifest length exceeds file size");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::schema, std::string("manifest is not valid JSON: ") + e.what());
  }
  const std::size_t payload_start = 16 + mlen;
  const std::uint64_t payload_size = bytes.size() - payload_start;
  Checkpoint ck;
  try {
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
      throw CheckpointError(Kind::version, "unsupported checkpoint format version");
    ck.model = manifest.at("model");
    std::uint64_t expected_offset = 0;
    for (const auto& t : manifest.at("tensors")) {
      TensorRecord rec;
      rec.name = t.at("name").get<std::string>();
      rec.dtype = t.at("dtype").get<std::string>();
      rec.shape = t.at("shape").get<std::vector<std::uint64_t>>();
      const std::uint64_t off = t.at("offset").get<std::uint64_t>();
      const std::uint64_t len = t.at("length").get<std::uint64_t>();
      if (off < expected_offset) throw CheckpointError(Kind::bounds, "tensor " + rec.name + " overlaps its predecessor");
      if (off > payload_size || len > payload_size - off)
        throw CheckpointError(Kind::bounds, "tensor " + rec.name + " extends past the payload");
      if (len != rec.element_count() * dtype_size(rec.dtype))
        throw CheckpointError(Kind::schema, "tensor " + rec.name + " length does not match shape");
      rec.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(payload_start + off),
                       bytes.begin() + static_cast<std::ptrdiff_t>(payload_start + off + len));
      expected_offset = off + len;
      ck.tensors.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::schema, std::string("malformed manifest: ") + e.what());
  }
  return ck;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(f), {});
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

inline nlohmann::json hyper_to_json(const ModelHyper& h) {
  return {{"input_dim", h.input_dim}, {"output_dim", h.output_dim}, {"d_model", h.d_model},
          {"d_hidden", h.d_hidden},   {"num_experts", h.num_experts}, {"top_k", h.top_k},
          {"num_layers", h.num_layers}};
}

inline ModelHyper hyper_from_json(const nlohmann::json& j) {
  ModelHyper h;
  h.input_dim = j.at("input_dim");
  h.output_dim = j.at("output_dim");
  h.d_model = j.at("d_model");
  h.d_hidden = j.at("d_hidden");
  h.num_experts = j.at("num_experts");
  h.top_k = j.at("top_k");
  h.num_layers = j.at("num_layers");
  return h;
}

template <std::floating_point T>
Checkpoint to_checkpoint(const MoEModel<T>& model) {
  Checkpoint ck;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : model.layers) {
    nlohmann::json experts = nlohmann::json::array();
    for (const auto& s : l.experts)
      experts.push_back({{"form", to_string(s.form)}, {"group", s.group}, {"has_weights", s.weights.has_value()},
                         {"has_adapter", s.adapter.has_value()}});
    nlohmann::json bases = nlohmann::json::array();
    for (const auto& b : l.bases) bases.push_back({{"group_id", b.group_id}, {"members", b.member_ids}});
    layers.push_back({{"experts", experts}, {"bases", bases}});
  }
  ck.model = {{"hyper", hyper_to_json(model.hyper)}, {"beta", model.beta}, {"layers", layers}};
  visit_parameters(model, [&](const std::string& name, const Matrix<T>& m, ParamClass) {
    ck.tensors.push_back({name, dtype_name<T>(), {m.rows(), m.cols()}, detail::to_le_bytes(m)});
  });
  return ck;
}

/// Rebuilds a model; every tensor the structure implies must be present with
/// the stored dtype, and no extra tensors are accepted.
template <std::floating_point T>
MoEModel<T> from_checkpoint(const Checkpoint& ck) {
  using Kind = CheckpointError::Kind;
  MoEModel<T> model;
  try {
    model.hyper = hyper_from_json(ck.model.at("hyper"));
    model.beta = ck.model.at("beta").get<double>();
    for (const auto& lj : ck.model.at("layers")) {
      MoELayer<T> layer;
      for (const auto& ej : lj.at("experts")) {
        ExpertSlot<T> s;
        s.form = expert_form_from_string(ej.at("form").get<std::string>());
        s.group = ej.at("group").get<int>();
        if (ej.at("has_weights").get<bool>()) s.weights = ExpertParams<T>{};
        if (ej.at("has_adapter").get<bool>()) s.adapter = AdapterPair<T>{};
        layer.experts.push_back(std::move(s));
      }
      for (const auto& bj : lj.at("bases")) {
        SharedBase<T> b;
        b.group_id = bj.at("group_id");
        b.member_ids = bj.at("members").get<std::vector<std::size_t>>();
        layer.bases.push_back(std::move(b));
      }
      model.layers.push_back(std::move(layer));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::schema, std::string("malformed model structure: ") + e.what());
  } catch (const ContractError& e) {
    throw CheckpointError(Kind::schema, e.what());
  }
  std::size_t used = 0;
  visit_parameters(model, [&](const std::string& name, Matrix<T>& m, ParamClass) {
    const TensorRecord* rec = ck.find(name);
    if (!rec) throw CheckpointError(Kind::schema, "missing tensor " + name);
    m = detail::from_le_bytes<T>(*rec);
    ++used;
  });
  if (used != ck.tensors.size()) throw CheckpointError(Kind::schema, "checkpoint holds unexpected tensors");
  return model;
}

}  // namespace moerepl
