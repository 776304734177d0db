#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "ilmcam/attention.hpp"
#include "ilmcam/checkpoint.hpp"
#include "ilmcam/graph.hpp"
#include "ilmcam/ops.hpp"
#include "ilmcam/tensor.hpp"

namespace ilmcam {

/// SIC: small convs + SimAM; MGIC: inception blocks + SE; MSIC: separable
/// residual flows + ECA.
enum class ChannelKind { SIC, MGIC, MSIC };

inline std::string_view to_string(ChannelKind k) {
  switch (k) {
    case ChannelKind::SIC: return "sic";
    case ChannelKind::MGIC: return "mgic";
    case ChannelKind::MSIC: return "msic";
  }
  return "?";
}

inline ChannelKind channel_kind_from_string(std::string_view s) {
  if (s == "sic") return ChannelKind::SIC;
  if (s == "mgic") return ChannelKind::MGIC;
  if (s == "msic") return ChannelKind::MSIC;
  throw ConfigError("unknown channel kind '" + std::string(s) + "'");
}

inline AttentionKind default_attention(ChannelKind k) {
  switch (k) {
    case ChannelKind::SIC: return AttentionKind::SimAM;
    case ChannelKind::MGIC: return AttentionKind::SE;
    case ChannelKind::MSIC: return AttentionKind::ECA;
  }
  return AttentionKind::Identity;
}

/// Which freeze group a parameter belongs to.
enum class ParamGroup { Backbone, Attention, Head };

inline std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Attention: return "attention";
    case ParamGroup::Head: return "head";
  }
  return "?";
}

struct Parameter {
  std::string name;
  ParamGroup group;
  Tensor value;
};

struct ChannelSpec {
  ChannelKind kind = ChannelKind::SIC;
  std::size_t num_classes = 2;
  double width_multiplier = 1.0;
  std::optional<AttentionKind> attention_override;
  std::size_t input_size = 64;
  std::uint64_t init_seed = 0;
  SimAMConfig simam{};
  SEConfig se{};
  ECAConfig eca{};

  AttentionKind attention() const { return attention_override.value_or(default_attention(kind)); }

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", to_string(kind)},
                     {"num_classes", num_classes},
                     {"width_multiplier", width_multiplier},
                     {"attention_override", nullptr},
                     {"input_size", input_size},
                     {"init_seed", init_seed},
                     {"simam_lambda", simam.lambda},
                     {"se_reduction", se.reduction_ratio},
                     {"eca_kernel", eca.kernel_size}};
    if (attention_override) j["attention_override"] = to_string(*attention_override);
    return j;
  }

  static ChannelSpec from_json(const nlohmann::json& j) {
    ChannelSpec s;
    s.kind = channel_kind_from_string(j.at("kind").get<std::string>());
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.width_multiplier = j.at("width_multiplier").get<double>();
    if (!j.at("attention_override").is_null()) {
      s.attention_override = attention_kind_from_string(j.at("attention_override").get<std::string>());
    }
    s.input_size = j.at("input_size").get<std::size_t>();
    s.init_seed = j.value("init_seed", std::uint64_t{0});
    s.simam.lambda = j.value("simam_lambda", 1e-4);
    s.se.reduction_ratio = j.value("se_reduction", std::size_t{4});
    s.eca.kernel_size = j.value("eca_kernel", std::size_t{3});
    return s;
  }
};

enum class LayerType { Conv, Inception, Flow, Attention, MaxPool, Flatten, FC, Softmax };

inline std::string_view to_string(LayerType t) {
  switch (t) {
    case LayerType::Conv: return "conv";
    case LayerType::Inception: return "inception";
    case LayerType::Flow: return "flow";
    case LayerType::Attention: return "attention";
    case LayerType::MaxPool: return "maxpool";
    case LayerType::Flatten: return "flatten";
    case LayerType::FC: return "fc";
    case LayerType::Softmax: return "softmax";
  }
  return "?";
}

struct Layer {
  LayerType type;
  std::string name;
  std::vector<std::size_t> params;  // indices into ChannelModel::params()
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  AttentionKind attention = AttentionKind::Identity;
  bool shortcut_conv = false;  // flow blocks only
};

struct LayerSummary {
  std::string name;
  std::string type;
  Shape output;
  std::size_t parameters = 0;
};

struct ModelSummary {
  std::vector<LayerSummary> layers;
  std::size_t total_parameters = 0;

  std::string str() const {
    std::ostringstream os;
    for (const auto& l : layers) {
      std::string name = l.name, type = l.type, out = shape_str(l.output);
      name.resize(std::max<std::size_t>(name.size(), 18), ' ');
      type.resize(std::max<std::size_t>(type.size(), 10), ' ');
      out.resize(std::max<std::size_t>(out.size(), 18), ' ');
      os << name << type << out << l.parameters << '\n';
    }
    os << "total parameters " << total_parameters << '\n';
    return os.str();
  }
};

/// Miniature attention-augmented CNN ending in maxpool, FC and softmax.
///
/// Parameters live in a vector that is never resized after construction,
/// so graphs may alias them for the duration of a pass.
class ChannelModel {
 public:
  explicit ChannelModel(ChannelSpec spec) : spec_(std::move(spec)) { build(); }

  const ChannelSpec& spec() const { return spec_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  Parameter& param(std::string_view name) {
    for (auto& p : params_)
      if (p.name == name) return p;
    throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  }

  /// Backbone and attention stack, then the head pool and flatten: [N, F].
  /// This is the input to the final FC layer.
  Var features(Graph& g, Var x) {
    const Shape& xs = g.shape(x);
    detail::require_rank(xs, 4, "channel_forward", "input");
    detail::require_dim(xs[1], 3, "channel_forward", "input channels (dim 1)");
    Var h = x;
    for (const Layer& l : layers_) {
      if (l.type == LayerType::FC) break;
      h = apply(g, l, h);
    }
    return h;
  }

  /// FC then softmax on head features: [N, classes] decision rows.
  Var head(Graph& g, Var feats) {
    Var logits = apply(g, layers_[layers_.size() - 2], feats);
    return softmax(g, logits);
  }

  Var forward(Graph& g, Var x) { return head(g, features(g, x)); }

  /// Decision rows for a batch, processed in chunks, without gradients.
  Tensor predict(const Tensor& batch, std::size_t chunk = 64) {
    return run_chunked(batch, chunk, [&](Graph& g, Var x) { return forward(g, x); });
  }

  Tensor extract_features(const Tensor& batch, std::size_t chunk = 64) {
    return run_chunked(batch, chunk, [&](Graph& g, Var x) { return features(g, x); });
  }

  Tensor predict_from_features(const Tensor& feats) {
    Graph g;
    NoGrad guard(*this);
    return g.value(head(g, g.input(feats)));
  }

  std::size_t feature_size() const {
    Shape s{1, 3, spec_.input_size, spec_.input_size};
    for (const Layer& l : layers_) {
      if (l.type == LayerType::FC) break;
      s = output_shape(l, s);
    }
    return s[1];
  }

  ModelSummary summarize() const {
    ModelSummary m;
    Shape s{1, 3, spec_.input_size, spec_.input_size};
    for (const Layer& l : layers_) {
      s = output_shape(l, s);
      std::size_t n = 0;
      for (std::size_t i : l.params) n += params_[i].value.numel();
      m.layers.push_back({l.name, std::string(to_string(l.type)), s, n});
      m.total_parameters += n;
    }
    return m;
  }

  NamedTensors state() const {
    NamedTensors out;
    for (const auto& p : params_) out.emplace_back(p.name, p.value);
    return out;
  }

  /// Copies values in by name; every parameter must be present with its shape.
  void load_state(const NamedTensors& tensors) {
    for (auto& p : params_) {
      bool found = false;
      for (const auto& [name, t] : tensors) {
        if (name != p.name) continue;
        if (t.shape() != p.value.shape()) {
          throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                           shape_str(p.value.shape()));
        }
        std::copy(t.data().begin(), t.data().end(), p.value.data().begin());
        found = true;
        break;
      }
      if (!found) throw CheckpointError("checkpoint lacks parameter '" + p.name + "'");
    }
  }

  std::uint64_t checksum_of(ParamGroup group) const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : params_) {
      if (p.group == group) h = (h ^ checksum(p.value)) * 1099511628211ull;
    }
    return h;
  }

 private:
  // Temporarily clears requires_grad so inference records no backward rules.
  class NoGrad {
   public:
    explicit NoGrad(ChannelModel& m) : m_(m) {
      for (auto& p : m_.params_) {
        saved_.push_back(p.value.requires_grad());
        p.value.set_requires_grad(false);
      }
    }
    ~NoGrad() {
      for (std::size_t i = 0; i < saved_.size(); ++i) m_.params_[i].value.set_requires_grad(saved_[i]);
    }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

   private:
    ChannelModel& m_;
    std::vector<bool> saved_;
  };

  template <typename F>
  Tensor run_chunked(const Tensor& batch, std::size_t chunk, F&& f) {
    detail::require_rank(batch.shape(), 4, "channel_forward", "input");
    NoGrad guard(*this);
    const std::size_t n = batch.dim(0), per = batch.numel() / n;
    Tensor out;
    std::size_t width = 0;
    for (std::size_t start = 0; start < n; start += chunk) {
      const std::size_t m = std::min(chunk, n - start);
      Shape s = batch.shape();
      s[0] = m;
      Tensor part(s, std::vector<float>(batch.data().begin() + start * per, batch.data().begin() + (start + m) * per));
      Graph g;
      const Tensor& r = g.value(f(g, g.input(std::move(part))));
      if (start == 0) {
        width = r.dim(1);
        out = Tensor({n, width});
      }
      std::copy(r.data().begin(), r.data().end(), out.data().begin() + start * width);
    }
    return out;
  }

  Var p(Graph& g, const Layer& l, std::size_t i) { return g.parameter(params_[l.params[i]].value); }

  Var apply(Graph& g, const Layer& l, Var x) {
    switch (l.type) {
      case LayerType::Conv: return relu(g, conv2d(g, x, p(g, l, 0), p(g, l, 1), 1, 1));
      case LayerType::Inception: {
        Var b1 = relu(g, conv2d(g, x, p(g, l, 0), p(g, l, 1), 1, 0));
        Var b3 = relu(g, conv2d(g, x, p(g, l, 2), p(g, l, 3), 1, 1));
        Var b5 = relu(g, conv2d(g, x, p(g, l, 4), p(g, l, 5), 1, 2));
        Var bp = relu(g, conv2d(g, maxpool2d(g, x, 3, 1, 1), p(g, l, 6), p(g, l, 7), 1, 0));
        const std::vector<Var> parts{b1, b3, b5, bp};
        return concat_channels(g, std::span<const Var>(parts));
      }
      case LayerType::Flow: {
        Var h = relu(g, depthwise_separable_conv2d(g, x, p(g, l, 0), p(g, l, 1), p(g, l, 2), 1));
        h = depthwise_separable_conv2d(g, h, p(g, l, 3), p(g, l, 4), p(g, l, 5), 1);
        Var shortcut = l.shortcut_conv ? conv2d(g, x, p(g, l, 6), p(g, l, 7), 1, 0) : x;
        return relu(g, add(g, h, shortcut));
      }
      case LayerType::Attention:
        switch (l.attention) {
          case AttentionKind::SimAM: return simam_forward(g, x, spec_.simam);
          case AttentionKind::SE: return se_forward(g, x, p(g, l, 0), p(g, l, 1), spec_.se);
          case AttentionKind::ECA: return eca_forward(g, x, p(g, l, 0), spec_.eca);
          case AttentionKind::Identity: return x;
        }
        return x;
      case LayerType::MaxPool: return maxpool2d(g, x, 2, 2);
      case LayerType::Flatten: return flatten(g, x);
      case LayerType::FC: return fully_connected(g, x, p(g, l, 0), p(g, l, 1));
      case LayerType::Softmax: return softmax(g, x);
    }
    throw std::logic_error("unhandled layer type");
  }

  Shape output_shape(const Layer& l, const Shape& s) const {
    switch (l.type) {
      case LayerType::Conv:
      case LayerType::Inception:
      case LayerType::Flow: return {s[0], l.out_channels, s[2], s[3]};
      case LayerType::Attention: return s;
      case LayerType::MaxPool: return {s[0], s[1], s[2] / 2, s[3] / 2};
      case LayerType::Flatten: return {s[0], s[1] * s[2] * s[3]};
      case LayerType::FC:
      case LayerType::Softmax: return {s[0], spec_.num_classes};
    }
    return s;
  }

  std::size_t scaled(std::size_t base, const char* what) const {
    const auto w = static_cast<std::size_t>(std::llround(static_cast<double>(base) * spec_.width_multiplier));
    if (w == 0) {
      throw ConfigError(std::string("width multiplier ") + std::to_string(spec_.width_multiplier) +
                        " leaves " + what + " with zero channels");
    }
    return w;
  }

  std::size_t add_param(std::string name, ParamGroup group, Shape shape, std::size_t fan_in) {
    Tensor t(std::move(shape));
    if (fan_in > 0) {
      std::normal_distribution<float> d(0.0f, static_cast<float>(std::sqrt(2.0 / static_cast<double>(fan_in))));
      for (float& v : t.data()) v = d(rng_);
    }
    params_.push_back({std::move(name), group, std::move(t)});
    return params_.size() - 1;
  }

  std::size_t add_conv_weight(const std::string& prefix, std::size_t in, std::size_t out, std::size_t k,
                              std::vector<std::size_t>& idx) {
    idx.push_back(add_param(prefix + ".weight", ParamGroup::Backbone, {out, in, k, k}, in * k * k));
    idx.push_back(add_param(prefix + ".bias", ParamGroup::Backbone, {out}, 0));
    return out;
  }

  void add_conv(const std::string& name, std::size_t in, std::size_t out) {
    Layer l{LayerType::Conv, name, {}, in, out};
    add_conv_weight(name + ".conv", in, out, 3, l.params);
    layers_.push_back(std::move(l));
  }

  void add_inception(const std::string& name, std::size_t in, std::size_t branch) {
    Layer l{LayerType::Inception, name, {}, in, 4 * branch};
    add_conv_weight(name + ".inception.b1x1", in, branch, 1, l.params);
    add_conv_weight(name + ".inception.b3x3", in, branch, 3, l.params);
    add_conv_weight(name + ".inception.b5x5", in, branch, 5, l.params);
    add_conv_weight(name + ".inception.pool1x1", in, branch, 1, l.params);
    layers_.push_back(std::move(l));
  }

  void add_flow(const std::string& name, std::size_t in, std::size_t out) {
    Layer l{LayerType::Flow, name, {}, in, out};
    const std::string f = name + ".flow";
    l.params.push_back(add_param(f + ".sep1.depthwise", ParamGroup::Backbone, {in, 1, 3, 3}, 9));
    l.params.push_back(add_param(f + ".sep1.pointwise", ParamGroup::Backbone, {out, in, 1, 1}, in));
    l.params.push_back(add_param(f + ".sep1.bias", ParamGroup::Backbone, {out}, 0));
    l.params.push_back(add_param(f + ".sep2.depthwise", ParamGroup::Backbone, {out, 1, 3, 3}, 9));
    l.params.push_back(add_param(f + ".sep2.pointwise", ParamGroup::Backbone, {out, out, 1, 1}, out));
    l.params.push_back(add_param(f + ".sep2.bias", ParamGroup::Backbone, {out}, 0));
    if (in != out) {
      l.shortcut_conv = true;
      add_conv_weight(f + ".shortcut", in, out, 1, l.params);
    }
    layers_.push_back(std::move(l));
  }

  void add_attention(const std::string& name, std::size_t c) {
    Layer l{LayerType::Attention, name, {}, c, c, spec_.attention()};
    switch (l.attention) {
      case AttentionKind::SimAM: spec_.simam.validate(); break;
      case AttentionKind::SE: {
        const std::size_t hidden = spec_.se.hidden(c);
        l.params.push_back(add_param(name + ".se.fc1", ParamGroup::Attention, {hidden, c}, c));
        l.params.push_back(add_param(name + ".se.fc2", ParamGroup::Attention, {c, hidden}, hidden));
        break;
      }
      case AttentionKind::ECA:
        spec_.eca.validate(c);
        l.params.push_back(
            add_param(name + ".eca.kernel", ParamGroup::Attention, {spec_.eca.kernel_size}, spec_.eca.kernel_size));
        break;
      case AttentionKind::Identity: break;
    }
    layers_.push_back(std::move(l));
  }

  void add_pool(const std::string& name, std::size_t c) { layers_.push_back({LayerType::MaxPool, name, {}, c, c}); }

  void build() {
    if (spec_.num_classes < 2) throw ConfigError("a channel needs at least 2 classes");
    if (!(spec_.width_multiplier > 0.0) || !std::isfinite(spec_.width_multiplier)) {
      throw ConfigError("width multiplier must be positive");
    }
    rng_.seed(spec_.init_seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(spec_.kind) + 1);
    // Spatial reductions before the head: SIC halves twice, MGIC/MSIC four times
    // counting the head pool.
    const std::size_t reduction = spec_.kind == ChannelKind::SIC ? 8 : 16;
    if (spec_.input_size < reduction || spec_.input_size % reduction != 0) {
      throw ConfigError("input size " + std::to_string(spec_.input_size) + " must be a positive multiple of " +
                        std::to_string(reduction) + " for " + std::string(to_string(spec_.kind)));
    }
    std::size_t c = 3;
    switch (spec_.kind) {
      case ChannelKind::SIC: {
        const std::size_t widths[] = {scaled(8, "stage 1"), scaled(16, "stage 2"), scaled(32, "stage 3"),
                                      scaled(32, "stage 4")};
        for (std::size_t i = 0; i < 4; ++i) {
          const std::string name = "block" + std::to_string(i + 1);
          add_conv(name, c, widths[i]);
          c = widths[i];
          add_attention(name, c);
          if (i < 2) add_pool(name + ".pool", c);
        }
        break;
      }
      case ChannelKind::MGIC: {
        add_conv("stem", c, scaled(8, "stem"));
        c = scaled(8, "stem");
        add_pool("stem.pool", c);
        const std::size_t branches[] = {scaled(4, "inception branch 1"), scaled(8, "inception branch 2"),
                                        scaled(8, "inception branch 3")};
        for (std::size_t i = 0; i < 3; ++i) {
          const std::string name = "block" + std::to_string(i + 1);
          add_inception(name, c, branches[i]);
          c = 4 * branches[i];
          add_attention(name, c);
          if (i < 2) add_pool(name + ".pool", c);
        }
        break;
      }
      case ChannelKind::MSIC: {
        add_conv("stem", c, scaled(8, "stem"));
        c = scaled(8, "stem");
        add_pool("stem.pool", c);
        const std::size_t widths[] = {scaled(16, "flow 1"), scaled(32, "flow 2"), scaled(32, "flow 3")};
        for (std::size_t i = 0; i < 3; ++i) {
          const std::string name = "block" + std::to_string(i + 1);
          add_flow(name, c, widths[i]);
          c = widths[i];
          add_attention(name, c);
          if (i < 2) add_pool(name + ".pool", c);
        }
        break;
      }
    }
    add_pool("head.pool", c);
    layers_.push_back({LayerType::Flatten, "head.flatten", {}, c, c});
    const std::size_t feats = feature_size();
    Layer fc{LayerType::FC, "head.fc", {}, feats, spec_.num_classes};
    fc.params.push_back(add_param("head.fc.weight", ParamGroup::Head, {spec_.num_classes, feats}, feats));
    fc.params.push_back(add_param("head.fc.bias", ParamGroup::Head, {spec_.num_classes}, 0));
    layers_.push_back(std::move(fc));
    layers_.push_back({LayerType::Softmax, "head.softmax", {}, spec_.num_classes, spec_.num_classes});
  }

  ChannelSpec spec_;
  std::vector<Layer> layers_;
  std::vector<Parameter> params_;
  std::mt19937_64 rng_;
};

inline ChannelModel build_channel(ChannelKind kind, std::size_t num_classes, double width_multiplier = 1.0,
                                  std::optional<AttentionKind> attention_override = std::nullopt,
                                  std::size_t input_size = 64, std::uint64_t init_seed = 0) {
  ChannelSpec s;
  s.kind = kind;
  s.num_classes = num_classes;
  s.width_multiplier = width_multiplier;
  s.attention_override = attention_override;
  s.input_size = input_size;
  s.init_seed = init_seed;
  return ChannelModel(std::move(s));
}

inline LayerType feature_block_type(ChannelKind k) {
  switch (k) {
    case ChannelKind::SIC: return LayerType::Conv;
    case ChannelKind::MGIC: return LayerType::Inception;
    case ChannelKind::MSIC: return LayerType::Flow;
  }
  return LayerType::Conv;
}

struct AuditResult {
  bool ok = true;
  std::vector<std::string> problems;
};

/// Checks the layer list: each feature block is followed by exactly one
/// attention layer, attention appears nowhere else, and the model ends in
/// maxpool, flatten, FC, softmax.
inline AuditResult structural_audit(const ChannelModel& m) {
  AuditResult r;
  const auto& ls = m.layers();
  const LayerType block = feature_block_type(m.spec().kind);
  auto fail = [&](std::string why) {
    r.ok = false;
    r.problems.push_back(std::move(why));
  };
  std::size_t blocks = 0;
  for (std::size_t i = 0; i < ls.size(); ++i) {
    const bool stem = ls[i].name == "stem";
    if (ls[i].type == block && !stem) {
      ++blocks;
      if (i + 1 >= ls.size() || ls[i + 1].type != LayerType::Attention) {
        fail(ls[i].name + " is not followed by an attention layer");
      } else if (i + 2 < ls.size() && ls[i + 2].type == LayerType::Attention) {
        fail(ls[i].name + " is followed by more than one attention layer");
      }
    }
    if (ls[i].type == LayerType::Attention && (i == 0 || ls[i - 1].type != block || ls[i - 1].name == "stem")) {
      fail(ls[i].name + " attention does not follow a feature block");
    }
  }
  if (blocks == 0) fail("no feature blocks");
  const std::size_t n = ls.size();
  if (n < 4 || ls[n - 4].type != LayerType::MaxPool || ls[n - 3].type != LayerType::Flatten ||
      ls[n - 2].type != LayerType::FC || ls[n - 1].type != LayerType::Softmax) {
    fail("head is not maxpool -> flatten -> fc -> softmax");
  }
  return r;
}

}  // namespace ilmcam
