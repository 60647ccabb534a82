#pragma once

// Model graphs to and from the binary container: graph structure, masks,
// and optimizer state go in the metadata block; every tensor payload is
// stored raw so a round trip is bit-exact.

#include <cstring>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "resrep/container.hpp"
#include "resrep/graph.hpp"
#include "resrep/train.hpp"

namespace resrep {

using nlohmann::json;

template <typename Scalar>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  return std::is_same_v<Scalar, float> ? DType::F32 : DType::F64;
}

namespace detail {

inline std::string model_kind_tag(ModelKind k) {
  switch (k) {
    case ModelKind::Base: return "base";
    case ModelKind::Reparam: return "reparam";
    case ModelKind::Converted: return "converted";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "base") return ModelKind::Base;
  if (s == "reparam") return ModelKind::Reparam;
  if (s == "converted") return ModelKind::Converted;
  throw CheckpointError("unknown model kind '" + s + "'");
}

inline NodeKind parse_node_kind(const std::string& s) {
  for (NodeKind k : {NodeKind::Conv, NodeKind::BatchNorm, NodeKind::Relu,
                     NodeKind::GlobalAvgPool, NodeKind::Add}) {
    if (s == node_kind_name(k)) return k;
  }
  throw CheckpointError("unknown node kind '" + s + "'");
}

template <typename Scalar>
TensorRecord vector_record(const std::string& name, const VectorX<Scalar>& v) {
  TensorRecord t;
  t.name = name;
  t.dtype = dtype_of<Scalar>();
  t.dims = {std::uint64_t(v.size())};
  t.payload.resize(std::size_t(v.size()) * sizeof(Scalar));
  std::memcpy(t.payload.data(), v.data(), t.payload.size());
  return t;
}

template <typename Scalar>
TensorRecord tensor_record(const std::string& name, const Tensor4<Scalar>& t4) {
  TensorRecord t = vector_record(name, t4.raw());
  const auto d = t4.dims();
  t.dims = {std::uint64_t(d.n), std::uint64_t(d.c), std::uint64_t(d.h), std::uint64_t(d.w)};
  return t;
}

template <typename Scalar>
const TensorRecord& need(const Container& c, const std::string& name) {
  const TensorRecord* t = c.find(name);
  if (!t) throw CheckpointError("missing tensor '" + name + "'");
  if (t->dtype != dtype_of<Scalar>()) {
    throw CheckpointError("tensor '" + name + "' holds " +
                          (t->dtype == DType::F32 ? std::string("f32") : std::string("f64")) +
                          " data, expected " +
                          (dtype_of<Scalar>() == DType::F32 ? "f32" : "f64"));
  }
  return *t;
}

template <typename Scalar>
VectorX<Scalar> read_vector(const Container& c, const std::string& name) {
  const TensorRecord& t = need<Scalar>(c, name);
  VectorX<Scalar> v(Index(t.element_count()));
  std::memcpy(v.data(), t.payload.data(), t.payload.size());
  return v;
}

template <typename Scalar>
Tensor4<Scalar> read_tensor(const Container& c, const std::string& name) {
  const TensorRecord& t = need<Scalar>(c, name);
  if (t.dims.size() != 4) {
    throw CheckpointError("tensor '" + name + "' has rank " +
                          std::to_string(t.dims.size()) + ", expected 4");
  }
  Tensor4<Scalar> out(Index(t.dims[0]), Index(t.dims[1]), Index(t.dims[2]), Index(t.dims[3]));
  std::memcpy(out.data(), t.payload.data(), t.payload.size());
  return out;
}

}  // namespace detail

template <typename Scalar>
Container to_container(const ModelGraph<Scalar>& m, const TrainState<Scalar>* state = nullptr,
                       const json& extra = json::object()) {
  Container c;
  json meta;
  meta["kind"] = detail::model_kind_tag(m.kind);
  meta["arch"] = m.arch_name;
  meta["dtype"] = dtype_of<Scalar>() == DType::F32 ? "f32" : "f64";
  meta["input"] = {{"channels", m.in_channels},
                   {"height", m.in_h},
                   {"width", m.in_w},
                   {"classes", m.num_classes}};

  json nodes = json::array();
  for (std::size_t i = 0; i < m.nodes.size(); ++i) {
    const auto& n = m.nodes[i];
    const std::string prefix = "n" + std::to_string(i);
    json jn;
    jn["kind"] = node_kind_name(n.kind);
    jn["name"] = n.name;
    jn["input"] = n.input;
    if (n.kind == NodeKind::Add) jn["input2"] = n.input2;
    if (n.kind == NodeKind::Conv) {
      jn["stride"] = n.conv.stride;
      jn["padding"] = n.conv.padding;
      jn["has_bias"] = bool(n.conv.bias);
      jn["target"] = n.target;
      jn["compactor"] = n.compactor;
      if (n.owner >= 0) jn["owner"] = n.owner;
      if (n.successor >= 0) jn["successor"] = n.successor;
      c.tensors.push_back(detail::tensor_record(prefix + ".kernel", n.conv.kernel));
      if (n.conv.bias) c.tensors.push_back(detail::vector_record(prefix + ".bias", *n.conv.bias));
    }
    if (n.kind == NodeKind::BatchNorm) {
      jn["epsilon"] = n.bn.epsilon;
      jn["momentum"] = n.bn.momentum;
      c.tensors.push_back(detail::vector_record(prefix + ".gamma", n.bn.gamma));
      c.tensors.push_back(detail::vector_record(prefix + ".beta", n.bn.beta));
      c.tensors.push_back(detail::vector_record(prefix + ".running_mean", n.bn.running_mean));
      c.tensors.push_back(detail::vector_record(prefix + ".running_var", n.bn.running_var));
    }
    if (!n.mask.empty()) jn["mask"] = n.mask;
    nodes.push_back(std::move(jn));
  }
  meta["nodes"] = std::move(nodes);

  if (state) {
    meta["train_state"] = {{"next_epoch", state->next_epoch},
                           {"iteration", state->iteration},
                           {"masks_frozen", state->masks_frozen}};
    for (const auto& [name, v] : state->sgd.velocity) {
      c.tensors.push_back(detail::vector_record("v." + name, v));
    }
  }
  meta["extra"] = extra;
  c.metadata = meta.dump();
  return c;
}

template <typename Scalar>
struct LoadedCheckpoint {
  ModelGraph<Scalar> model;
  TrainState<Scalar> state;
  bool has_train_state = false;
  json extra;
};

template <typename Scalar>
LoadedCheckpoint<Scalar> from_container(const Container& c) {
  json meta;
  try {
    meta = json::parse(c.metadata);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("metadata is not valid structured text: ") + e.what());
  }

  LoadedCheckpoint<Scalar> out;
  try {
    ModelGraph<Scalar>& m = out.model;
    m.kind = detail::parse_model_kind(meta.at("kind").get<std::string>());
    m.arch_name = meta.at("arch").get<std::string>();
    const json& in = meta.at("input");
    m.in_channels = in.at("channels").get<Index>();
    m.in_h = in.at("height").get<Index>();
    m.in_w = in.at("width").get<Index>();
    m.num_classes = in.at("classes").get<Index>();

    const json& nodes = meta.at("nodes");
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const json& jn = nodes[i];
      const std::string prefix = "n" + std::to_string(i);
      Node<Scalar> n;
      n.kind = detail::parse_node_kind(jn.at("kind").get<std::string>());
      n.name = jn.at("name").get<std::string>();
      n.input = jn.at("input").get<int>();
      if (n.kind == NodeKind::Add) n.input2 = jn.at("input2").get<int>();
      if (n.kind == NodeKind::Conv) {
        n.conv.kernel = detail::read_tensor<Scalar>(c, prefix + ".kernel");
        n.conv.stride = jn.at("stride").get<Index>();
        n.conv.padding = jn.at("padding").get<Index>();
        if (jn.at("has_bias").get<bool>())
          n.conv.bias = detail::read_vector<Scalar>(c, prefix + ".bias");
        n.target = jn.at("target").get<bool>();
        n.compactor = jn.at("compactor").get<bool>();
        n.owner = jn.value("owner", -1);
        n.successor = jn.value("successor", -1);
      }
      if (n.kind == NodeKind::BatchNorm) {
        n.bn.gamma = detail::read_vector<Scalar>(c, prefix + ".gamma");
        n.bn.beta = detail::read_vector<Scalar>(c, prefix + ".beta");
        n.bn.running_mean = detail::read_vector<Scalar>(c, prefix + ".running_mean");
        n.bn.running_var = detail::read_vector<Scalar>(c, prefix + ".running_var");
        n.bn.epsilon = jn.at("epsilon").get<Scalar>();
        n.bn.momentum = jn.at("momentum").get<Scalar>();
      }
      if (jn.contains("mask")) n.mask = jn.at("mask").get<std::vector<std::uint8_t>>();
      m.nodes.push_back(std::move(n));
    }

    if (meta.contains("train_state")) {
      out.has_train_state = true;
      const json& ts = meta.at("train_state");
      out.state.next_epoch = ts.at("next_epoch").get<Index>();
      out.state.iteration = ts.at("iteration").get<Index>();
      out.state.masks_frozen = ts.at("masks_frozen").get<bool>();
      for (const auto& t : c.tensors) {
        if (t.name.rfind("v.", 0) == 0) {
          out.state.sgd.velocity[t.name.substr(2)] =
              detail::read_vector<Scalar>(c, t.name);
        }
      }
    }
    out.extra = meta.value("extra", json::object());
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("metadata field error: ") + e.what());
  }

  out.model.init_grad_buffers();
  validate_graph(out.model);
  return out;
}

template <typename Scalar>
void save_checkpoint(const std::string& path, const ModelGraph<Scalar>& m,
                     const TrainState<Scalar>* state = nullptr,
                     const json& extra = json::object()) {
  write_container(path, to_container(m, state, extra));
}

template <typename Scalar>
LoadedCheckpoint<Scalar> load_checkpoint(const std::string& path) {
  return from_container<Scalar>(read_container(path));
}

}  // namespace resrep
