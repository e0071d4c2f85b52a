#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "psieve/common.hpp"

namespace psieve::net {

enum class LayerKind { input, conv, batchnorm, relu, maxpool, avgpool, concat, flatten, dense };

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::input: return "input";
    case LayerKind::conv: return "conv";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::concat: return "concat";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

inline LayerKind kind_from_name(const std::string& s) {
  for (auto k : {LayerKind::input, LayerKind::conv, LayerKind::batchnorm, LayerKind::relu,
                 LayerKind::maxpool, LayerKind::avgpool, LayerKind::concat, LayerKind::flatten,
                 LayerKind::dense})
    if (s == kind_name(k)) return k;
  throw FormatError("unknown layer kind \"" + s + "\" in checkpoint header");
}

struct LayerDef {
  LayerKind kind = LayerKind::relu;
  std::vector<int> inputs;  // producer layer ids, all smaller than this layer's id
  std::string name;
  // conv: k, c_in, c_out, stride, pad; pools: k, stride, pad; dense: d_in, d_out
  int k = 0, c_in = 0, c_out = 0, stride = 1, pad = 0;
  int d_in = 0, d_out = 0;
};

struct Shape {
  int c = 0, h = 0, w = 0;
  int count() const { return c * h * w; }
  bool operator==(const Shape& o) const { return c == o.c && h == o.h && w == o.w; }
};

struct NetworkSpec {
  std::vector<LayerDef> layers;  // topological order, layers[0] is the input
  int input_c = 3, input_h = 32, input_w = 32;
  int num_classes = 0;

  int layer_by_name(const std::string& name) const {
    for (size_t i = 0; i < layers.size(); ++i)
      if (layers[i].name == name) return int(i);
    throw ParameterError("no layer named \"" + name + "\"");
  }

  // Output shape of every layer; throws ParameterError on any chain mismatch.
  std::vector<Shape> shapes() const {
    std::vector<Shape> out(layers.size());
    for (size_t i = 0; i < layers.size(); ++i) {
      const LayerDef& L = layers[i];
      for (int in : L.inputs)
        if (in < 0 || in >= int(i))
          throw ParameterError("layer " + std::to_string(i) + " reads from invalid layer " +
                               std::to_string(in));
      auto one_input = [&]() -> const Shape& {
        if (L.inputs.size() != 1)
          throw ParameterError("layer " + std::to_string(i) + " needs exactly one input");
        return out[size_t(L.inputs[0])];
      };
      switch (L.kind) {
        case LayerKind::input:
          if (i != 0) throw ParameterError("input layer must be layer 0");
          out[i] = {input_c, input_h, input_w};
          break;
        case LayerKind::conv: {
          const Shape& s = one_input();
          if (s.c != L.c_in)
            throw ParameterError(L.name + ": conv expects " + std::to_string(L.c_in) +
                                 " channels, gets " + std::to_string(s.c));
          int oh = (s.h + 2 * L.pad - L.k) / L.stride + 1;
          int ow = (s.w + 2 * L.pad - L.k) / L.stride + 1;
          if (oh <= 0 || ow <= 0) throw ParameterError(L.name + ": conv output collapses");
          out[i] = {L.c_out, oh, ow};
          break;
        }
        case LayerKind::batchnorm: {
          const Shape& s = one_input();
          if (L.c_out != 0 && L.c_out != s.c)
            throw ParameterError(L.name + ": batchnorm width mismatch");
          out[i] = s;
          break;
        }
        case LayerKind::relu:
          out[i] = one_input();
          break;
        case LayerKind::maxpool:
        case LayerKind::avgpool: {
          const Shape& s = one_input();
          int oh = (s.h + 2 * L.pad - L.k) / L.stride + 1;
          int ow = (s.w + 2 * L.pad - L.k) / L.stride + 1;
          if (oh <= 0 || ow <= 0) throw ParameterError(L.name + ": pool output collapses");
          out[i] = {s.c, oh, ow};
          break;
        }
        case LayerKind::concat: {
          if (L.inputs.size() < 2)
            throw ParameterError(L.name + ": concat needs at least two branches");
          Shape s = out[size_t(L.inputs[0])];
          int c = s.c;
          for (size_t bi = 1; bi < L.inputs.size(); ++bi) {
            const Shape& b = out[size_t(L.inputs[bi])];
            if (b.h != s.h || b.w != s.w)
              throw ParameterError(L.name + ": concat branches disagree on spatial size");
            c += b.c;
          }
          out[i] = {c, s.h, s.w};
          break;
        }
        case LayerKind::flatten: {
          const Shape& s = one_input();
          out[i] = {s.count(), 1, 1};
          break;
        }
        case LayerKind::dense: {
          const Shape& s = one_input();
          if (s.count() != L.d_in)
            throw ParameterError(L.name + ": dense expects " + std::to_string(L.d_in) +
                                 " inputs, gets " + std::to_string(s.count()));
          out[i] = {L.d_out, 1, 1};
          break;
        }
      }
    }
    return out;
  }

  void validate() const {
    if (layers.empty() || layers[0].kind != LayerKind::input)
      throw ParameterError("network must start with an input layer");
    auto sh = shapes();
    int concats = 0;
    for (const auto& L : layers)
      if (L.kind == LayerKind::concat) ++concats;
    if (concats != 1) throw ParameterError("network must contain exactly one concat block");
    if (layers.back().kind != LayerKind::dense || sh.back().count() != num_classes)
      throw ParameterError("network must end in a dense layer with one output per class");
  }

  size_t param_count() const {
    size_t total = 0;
    auto sh = shapes();
    for (const auto& L : layers) {
      if (L.kind == LayerKind::conv)
        total += size_t(L.c_out) * L.c_in * L.k * L.k + size_t(L.c_out);
      else if (L.kind == LayerKind::dense)
        total += size_t(L.d_out) * L.d_in + size_t(L.d_out);
      else if (L.kind == LayerKind::batchnorm)
        total += 2 * size_t(sh[size_t(&L - layers.data())].c);
    }
    return total;
  }
};

// Stem conv + one four-branch inception block + average pooling + classifier.
inline NetworkSpec build_mini_inception(int num_classes) {
  if (num_classes < 2) throw ParameterError("need at least two classes");
  NetworkSpec s;
  s.num_classes = num_classes;
  auto add = [&](LayerDef d) {
    s.layers.push_back(std::move(d));
    return int(s.layers.size() - 1);
  };
  auto conv = [&](const std::string& name, int from, int k, int cin, int cout, int pad) {
    int c = add({LayerKind::conv, {from}, name, k, cin, cout, 1, pad});
    int b = add({LayerKind::batchnorm, {c}, name + ".bn", 0, 0, cout});
    return add({LayerKind::relu, {b}, name + ".relu"});
  };

  int input = add({LayerKind::input, {}, "input"});
  int stem = conv("stem", input, 3, 3, 16, 1);
  int pool = add({LayerKind::maxpool, {stem}, "stem.pool", 2, 0, 0, 2, 0});

  int b1 = conv("b1.c1", pool, 1, 16, 16, 0);
  int b2a = conv("b2.c1", pool, 1, 16, 16, 0);
  int b2 = conv("b2.c3", b2a, 3, 16, 24, 1);
  int b3a = conv("b3.c1", pool, 1, 16, 4, 0);
  int b3 = conv("b3.c5", b3a, 5, 4, 8, 2);
  int b4p = add({LayerKind::maxpool, {pool}, "b4.pool", 3, 0, 0, 1, 1});
  int b4 = conv("b4.c1", b4p, 1, 16, 8, 0);

  int cat = add({LayerKind::concat, {b1, b2, b3, b4}, "concat"});
  int avg = add({LayerKind::avgpool, {cat}, "avgpool", 4, 0, 0, 4, 0});
  int flat = add({LayerKind::flatten, {avg}, "flatten"});
  add({LayerKind::dense, {flat}, "fc", 0, 0, 0, 1, 0, 56 * 4 * 4, num_classes});

  s.validate();
  return s;
}

// Layer table as JSON, used inside the checkpoint header.
inline nlohmann::ordered_json spec_to_json(const NetworkSpec& s) {
  nlohmann::ordered_json j;
  j["input"] = {s.input_c, s.input_h, s.input_w};
  j["classes"] = s.num_classes;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& L : s.layers) {
    nlohmann::ordered_json e;
    e["kind"] = kind_name(L.kind);
    e["name"] = L.name;
    e["inputs"] = L.inputs;
    e["k"] = L.k;
    e["c_in"] = L.c_in;
    e["c_out"] = L.c_out;
    e["stride"] = L.stride;
    e["pad"] = L.pad;
    e["d_in"] = L.d_in;
    e["d_out"] = L.d_out;
    arr.push_back(e);
  }
  j["layers"] = arr;
  return j;
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  try {
    s.input_c = j.at("input").at(0);
    s.input_h = j.at("input").at(1);
    s.input_w = j.at("input").at(2);
    s.num_classes = j.at("classes");
    for (const auto& e : j.at("layers")) {
      LayerDef L;
      L.kind = kind_from_name(e.at("kind"));
      L.name = e.at("name");
      L.inputs = e.at("inputs").get<std::vector<int>>();
      L.k = e.at("k");
      L.c_in = e.at("c_in");
      L.c_out = e.at("c_out");
      L.stride = e.at("stride");
      L.pad = e.at("pad");
      L.d_in = e.at("d_in");
      L.d_out = e.at("d_out");
      s.layers.push_back(std::move(L));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what());
  }
  s.shapes();
  return s;
}

}  // namespace psieve::net
