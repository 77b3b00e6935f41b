#pragma once

// Small convolutional encoder: conv blocks -> global average pool -> dense
// embedding (the frozen "features"), followed by an MLP projection head that
// ends in L2 normalization, and an optional MLP predictor head.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "capsl/datamodel.hpp"
#include "capsl/error.hpp"
#include "capsl/layers.hpp"
#include "capsl/parallel.hpp"
#include "capsl/rng.hpp"
#include "capsl/tensor.hpp"

namespace capsl {

struct ConvBlockSpec {
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  bool relu = true;
  bool pool = false;
  bool operator==(const ConvBlockSpec&) const = default;
};

struct EncoderSpec {
  ImageShape input{3, 16, 16};
  std::vector<ConvBlockSpec> conv_blocks{{16, 3, 1, true, true}, {32, 3, 1, true, true}};
  std::size_t embed_dim = 64;
  std::vector<std::size_t> proj_dims{64, 32};
  std::vector<std::size_t> pred_dims{};
  // Per-sample normalization after each hidden projection layer.
  bool proj_layernorm = false;
  bool operator==(const EncoderSpec&) const = default;
};

inline void validate(const EncoderSpec& s) {
  if (s.conv_blocks.empty()) throw ConfigError("encoder needs at least one conv block");
  if (s.embed_dim < 8) throw ConfigError("embed_dim must be >= 8");
  if (s.proj_dims.empty()) throw ConfigError("projection head needs at least one layer");
  if (s.input.channels == 0 || s.input.height == 0 || s.input.width == 0) throw ConfigError("input shape must be positive");
  layers::Shape3 cur{s.input.channels, s.input.height, s.input.width};
  for (std::size_t i = 0; i < s.conv_blocks.size(); ++i) {
    const auto& b = s.conv_blocks[i];
    if (b.out_channels == 0) throw ConfigError("conv block " + std::to_string(i) + ": out_channels must be positive");
    if (b.kernel == 0 || b.kernel % 2 == 0) throw ConfigError("conv block " + std::to_string(i) + ": kernel must be odd");
    if (b.stride == 0) throw ConfigError("conv block " + std::to_string(i) + ": stride must be positive");
    cur = {b.out_channels, layers::conv_out_extent(cur.h, b.kernel, b.stride), layers::conv_out_extent(cur.w, b.kernel, b.stride)};
    if (b.pool) cur = layers::maxpool_out_shape(cur);
    if (cur.h == 0 || cur.w == 0) throw ConfigError("conv block " + std::to_string(i) + ": spatial size collapses to zero");
  }
  for (auto d : s.proj_dims)
    if (d == 0) throw ConfigError("projection dims must be positive");
  for (auto d : s.pred_dims)
    if (d == 0) throw ConfigError("predictor dims must be positive");
  if (!s.pred_dims.empty() && s.pred_dims.back() != s.proj_dims.back())
    throw ConfigError("predictor output must match projection output");
}

// Named parameters stored in one flat buffer, with a same-shape gradient
// buffer. `version` changes on every mutation through touch().
template <class T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
    bool operator==(const Entry&) const = default;
  };

  std::size_t add(std::string name, std::vector<std::size_t> shape) {
    for (const auto& e : entries_)
      if (e.name == name) throw ValidationError("duplicate parameter '" + name + "'");
    Entry e{std::move(name), std::move(shape), values_.size(), 0};
    e.size = Tensor<T>::element_count(e.shape);
    values_.resize(values_.size() + e.size, T{});
    grads_.resize(values_.size(), T{});
    entries_.push_back(std::move(e));
    touch();
    return entries_.size() - 1;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t count() const { return entries_.size(); }
  std::size_t total_size() const { return values_.size(); }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return i;
    throw ValidationError("unknown parameter '" + name + "'");
  }
  bool contains(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return true;
    return false;
  }

  std::span<T> value(std::size_t i) { return {values_.data() + entries_[i].offset, entries_[i].size}; }
  std::span<const T> value(std::size_t i) const { return {values_.data() + entries_[i].offset, entries_[i].size}; }
  std::span<T> grad(std::size_t i) { return {grads_.data() + entries_[i].offset, entries_[i].size}; }
  std::span<const T> grad(std::size_t i) const { return {grads_.data() + entries_[i].offset, entries_[i].size}; }
  std::span<T> value(const std::string& n) { return value(index_of(n)); }
  std::span<const T> value(const std::string& n) const { return value(index_of(n)); }
  std::span<T> grad(const std::string& n) { return grad(index_of(n)); }
  std::span<const T> grad(const std::string& n) const { return grad(index_of(n)); }

  std::vector<T>& values() { return values_; }
  const std::vector<T>& values() const { return values_; }
  std::vector<T>& grads() { return grads_; }
  const std::vector<T>& grads() const { return grads_; }

  void zero_grad() { std::fill(grads_.begin(), grads_.end(), T{}); }
  void touch() { ++version_; }
  std::uint64_t version() const { return version_; }

  std::uint64_t init_seed = 0;

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.shape);
    for (std::size_t i = 0; i < values_.size(); ++i) out.values()[i] = static_cast<U>(values_[i]);
    out.init_seed = init_seed;
    return out;
  }

  bool same_values(const ParamSet& o) const { return entries_ == o.entries_ && values_ == o.values_; }

 private:
  std::vector<Entry> entries_;
  std::vector<T> values_;
  std::vector<T> grads_;
  std::uint64_t version_ = 0;
};

namespace detail {

enum class OpKind { conv, relu, maxpool, gap, dense, layernorm, l2norm };

inline constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

struct Op {
  OpKind kind;
  layers::Shape3 in;
  layers::Shape3 out;
  std::size_t weight = npos;
  std::size_t bias = npos;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::string name;
};

}  // namespace detail

// Per-sample values saved by forward(). values[s][i] is the input of op i
// for sample s (values[s][ops] is the last output).
template <class T>
struct ForwardCache {
  const void* owner = nullptr;
  std::uint64_t version = 0;
  std::vector<std::vector<std::vector<T>>> values;
  std::vector<std::vector<std::vector<std::uint32_t>>> argmax;
  bool valid() const { return owner != nullptr; }
};

template <class T>
struct ForwardResult {
  Tensor<T> features;     // B x embed_dim
  Tensor<T> projections;  // B x proj_out, unit rows
  Tensor<T> predictions;  // B x pred_out, empty without a predictor
  ForwardCache<T> cache;
};

template <class T>
class Encoder {
 public:
  explicit Encoder(EncoderSpec spec) : spec_(std::move(spec)) {
    validate(spec_);
    build();
  }

  const EncoderSpec& spec() const { return spec_; }
  std::size_t input_size() const { return spec_.input.size(); }
  std::size_t feature_dim() const { return spec_.embed_dim; }
  std::size_t projection_dim() const { return spec_.proj_dims.back(); }
  bool has_predictor() const { return !spec_.pred_dims.empty(); }
  // Shape of the activation map GradCAM reads (output of the last conv block).
  layers::Shape3 tap_shape() const { return ops_[gap_op_].in; }

  // He-normal weights, zero biases, fully determined by `seed`.
  ParamSet<T> init_params(std::uint64_t seed) const {
    ParamSet<T> p = layout();
    p.init_seed = seed;
    for (std::size_t i = 0; i < p.count(); ++i) {
      const auto& e = p.entries()[i];
      if (e.shape.size() < 2) continue;
      const std::size_t fan_in = e.size / e.shape[0];
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      Rng rng(derive_seed(seed, {i}));
      for (T& v : p.value(i)) v = static_cast<T>(stddev * rng.normal());
    }
    return p;
  }

  ParamSet<T> layout() const {
    ParamSet<T> p;
    for (const auto& e : layout_) p.add(e.name, e.shape);
    return p;
  }

  ForwardResult<T> forward(const ParamSet<T>& params, std::span<const T> batch) const {
    check_params(params);
    const std::size_t per = input_size();
    if (batch.size() % per != 0)
      throw ShapeError("forward: batch of " + std::to_string(batch.size()) + " values does not match input shape " + shape_string());
    const std::size_t n = batch.size() / per;
    ForwardResult<T> r;
    r.cache.owner = &params;
    r.cache.version = params.version();
    r.cache.values.resize(n);
    r.cache.argmax.resize(n);
    parallel_for(n, [&](std::size_t s) {
      run_forward(params, batch.subspan(s * per, per), r.cache.values[s], r.cache.argmax[s], ops_.size());
    });
    r.features = matrix<T>(n, feature_dim());
    r.projections = matrix<T>(n, projection_dim());
    if (has_predictor()) r.predictions = matrix<T>(n, spec_.pred_dims.back());
    for (std::size_t s = 0; s < n; ++s) {
      const auto& v = r.cache.values[s];
      std::copy(v[feature_end_].begin(), v[feature_end_].end(), r.features.row(s).begin());
      std::copy(v[proj_end_].begin(), v[proj_end_].end(), r.projections.row(s).begin());
      if (has_predictor()) std::copy(v[ops_.size()].begin(), v[ops_.size()].end(), r.predictions.row(s).begin());
    }
    return r;
  }

  // Features only; no cache is kept.
  Tensor<T> features(const ParamSet<T>& params, std::span<const T> batch) const {
    check_params(params);
    const std::size_t per = input_size();
    if (batch.size() % per != 0) throw ShapeError("features: batch does not match input shape " + shape_string());
    const std::size_t n = batch.size() / per;
    auto out = matrix<T>(n, feature_dim());
    parallel_for(n, [&](std::size_t s) {
      std::vector<std::vector<T>> values;
      std::vector<std::vector<std::uint32_t>> argmax;
      run_forward(params, batch.subspan(s * per, per), values, argmax, feature_end_);
      std::copy(values[feature_end_].begin(), values[feature_end_].end(), out.row(s).begin());
    });
    return out;
  }

  // Accumulates d(loss)/d(params) into params' gradient buffer given upstream
  // gradients for any of the three outputs (null = zero). Per-sample
  // gradients are summed by a fixed pairwise tree so the result does not
  // depend on the worker count.
  void backward(const ForwardResult<T>& fwd, const Tensor<T>* grad_features, const Tensor<T>* grad_proj,
                const Tensor<T>* grad_pred, ParamSet<T>& params) const {
    const auto& cache = fwd.cache;
    if (!cache.valid()) throw ValidationError("backward: empty forward cache");
    if (cache.owner != &params || cache.version != params.version())
      throw ValidationError("backward: stale forward cache (parameters changed since forward)");
    const std::size_t n = cache.values.size();
    auto check = [&](const Tensor<T>* g, std::size_t cols, const char* what) {
      if (g && (g->rows() != n || g->cols() != cols)) throw ShapeError(std::string("backward: ") + what + " gradient shape mismatch");
    };
    check(grad_features, feature_dim(), "feature");
    check(grad_proj, projection_dim(), "projection");
    if (grad_pred && !has_predictor()) throw ShapeError("backward: predictor gradient given but encoder has no predictor");
    if (has_predictor()) check(grad_pred, spec_.pred_dims.back(), "predictor");

    const std::size_t total = params.total_size();
    std::vector<std::vector<T>> per_sample(n, std::vector<T>(total, T{}));
    parallel_for(n, [&](std::size_t s) {
      run_backward(params, cache.values[s], cache.argmax[s], grad_features ? grad_features->row(s) : std::span<const T>{},
                   grad_proj ? grad_proj->row(s) : std::span<const T>{}, grad_pred ? grad_pred->row(s) : std::span<const T>{},
                   per_sample[s], nullptr);
    });
    for (std::size_t stride = 1; stride < n; stride *= 2)
      for (std::size_t i = 0; i + stride < n; i += 2 * stride)
        for (std::size_t k = 0; k < total; ++k) per_sample[i][k] += per_sample[i + stride][k];
    if (n > 0) {
      auto& g = params.grads();
      for (std::size_t k = 0; k < total; ++k) g[k] += per_sample[0][k];
    }
  }

  struct Tap {
    std::vector<T> activation;  // C x h x w, output of the last conv block
    std::vector<T> gradient;    // d(feature_grad . features)/d(activation)
    layers::Shape3 shape;
  };

  // Activation map of the last conv block for one image together with the
  // gradient of the scalar <feature_grad, features> with respect to it.
  Tap tap(const ParamSet<T>& params, std::span<const T> image, std::span<const T> feature_grad) const {
    check_params(params);
    if (image.size() != input_size()) throw ShapeError("tap: image does not match input shape " + shape_string());
    if (feature_grad.size() != feature_dim()) throw ShapeError("tap: feature gradient has wrong length");
    std::vector<std::vector<T>> values;
    std::vector<std::vector<std::uint32_t>> argmax;
    run_forward(params, image, values, argmax, feature_end_);
    Tap t;
    t.shape = ops_[gap_op_].in;
    t.activation = values[gap_op_];
    std::vector<T> scratch;
    run_backward(params, values, argmax, feature_grad, {}, {}, scratch, &t.gradient);
    return t;
  }

 private:
  struct LayoutEntry {
    std::string name;
    std::vector<std::size_t> shape;
  };

  std::string shape_string() const {
    return std::to_string(spec_.input.channels) + "x" + std::to_string(spec_.input.height) + "x" + std::to_string(spec_.input.width);
  }

  std::size_t add_param(std::string name, std::vector<std::size_t> shape) {
    layout_.push_back({std::move(name), std::move(shape)});
    return layout_.size() - 1;
  }

  void add_dense(std::size_t& width, std::size_t out, const std::string& name) {
    detail::Op op{detail::OpKind::dense, {width, 1, 1}, {out, 1, 1}, detail::npos, detail::npos, 0, 1, name};
    op.weight = add_param(name + ".weight", {out, width});
    op.bias = add_param(name + ".bias", {out});
    ops_.push_back(op);
    width = out;
  }
  void add_vector_op(detail::OpKind kind, std::size_t width, const std::string& name) {
    detail::Op op{kind, {width, 1, 1}, {width, 1, 1}, detail::npos, detail::npos, 0, 1, name};
    ops_.push_back(op);
  }

  void build() {
    using detail::OpKind;
    layers::Shape3 cur{spec_.input.channels, spec_.input.height, spec_.input.width};
    for (std::size_t i = 0; i < spec_.conv_blocks.size(); ++i) {
      const auto& b = spec_.conv_blocks[i];
      const std::string name = "conv" + std::to_string(i);
      layers::Shape3 out{b.out_channels, layers::conv_out_extent(cur.h, b.kernel, b.stride), layers::conv_out_extent(cur.w, b.kernel, b.stride)};
      detail::Op conv{OpKind::conv, cur, out, detail::npos, detail::npos, 0, 1, name};
      conv.weight = add_param(name + ".weight", {b.out_channels, cur.c, b.kernel, b.kernel});
      conv.bias = add_param(name + ".bias", {b.out_channels});
      conv.kernel = b.kernel;
      conv.stride = b.stride;
      ops_.push_back(conv);
      cur = out;
      if (b.relu) ops_.push_back({OpKind::relu, cur, cur, detail::npos, detail::npos, 0, 1, name + ".relu"});
      if (b.pool) {
        const auto pooled = layers::maxpool_out_shape(cur);
        ops_.push_back({OpKind::maxpool, cur, pooled, detail::npos, detail::npos, 0, 1, name + ".pool"});
        cur = pooled;
      }
    }
    gap_op_ = ops_.size();
    ops_.push_back({OpKind::gap, cur, {cur.c, 1, 1}, detail::npos, detail::npos, 0, 1, "gap"});
    std::size_t width = cur.c;
    add_dense(width, spec_.embed_dim, "embed");
    feature_end_ = ops_.size();
    for (std::size_t i = 0; i < spec_.proj_dims.size(); ++i) {
      const std::string name = "proj" + std::to_string(i);
      add_dense(width, spec_.proj_dims[i], name);
      if (i + 1 < spec_.proj_dims.size()) {
        if (spec_.proj_layernorm) add_vector_op(OpKind::layernorm, width, name + ".norm");
        add_vector_op(OpKind::relu, width, name + ".relu");
      }
    }
    add_vector_op(OpKind::l2norm, width, "proj.l2");
    proj_end_ = ops_.size();
    for (std::size_t i = 0; i < spec_.pred_dims.size(); ++i) {
      const std::string name = "pred" + std::to_string(i);
      add_dense(width, spec_.pred_dims[i], name);
      if (i + 1 < spec_.pred_dims.size()) add_vector_op(OpKind::relu, width, name + ".relu");
    }
  }

  void check_params(const ParamSet<T>& params) const {
    if (params.count() < layout_.size()) throw ShapeError("parameter set is missing encoder parameters");
    for (std::size_t i = 0; i < layout_.size(); ++i) {
      const auto& e = params.entries()[i];
      if (e.name != layout_[i].name || e.shape != layout_[i].shape)
        throw ShapeError("parameter '" + e.name + "' does not match layer '" + layout_[i].name + "'");
    }
  }

  void run_forward(const ParamSet<T>& params, std::span<const T> input, std::vector<std::vector<T>>& values,
                   std::vector<std::vector<std::uint32_t>>& argmax, std::size_t stop) const {
    using detail::OpKind;
    values.assign(stop + 1, {});
    argmax.assign(stop, {});
    values[0].assign(input.begin(), input.end());
    for (std::size_t i = 0; i < stop; ++i) {
      const auto& op = ops_[i];
      const std::span<const T> in(values[i]);
      auto& out = values[i + 1];
      out.assign(op.out.size(), T{});
      switch (op.kind) {
        case OpKind::conv:
          layers::conv2d_forward<T>(in, op.in, params.value(op.weight), params.value(op.bias), op.out.c, op.kernel, op.stride, out);
          break;
        case OpKind::relu: layers::relu_forward<T>(in, out); break;
        case OpKind::maxpool:
          argmax[i].assign(op.out.size(), 0);
          layers::maxpool_forward<T>(in, op.in, out, argmax[i]);
          break;
        case OpKind::gap: layers::gap_forward<T>(in, op.in, out); break;
        case OpKind::dense: layers::dense_forward<T>(in, params.value(op.weight), params.value(op.bias), out); break;
        case OpKind::layernorm: layers::layernorm_forward<T>(in, out); break;
        case OpKind::l2norm: layers::l2norm_forward<T>(in, out); break;
      }
    }
  }

  // Walks the op list backwards from the deepest output that has an upstream
  // gradient. When `tap_grad` is set, stops at the GradCAM tap and stores the
  // gradient there instead of descending into the conv blocks.
  void run_backward(const ParamSet<T>& params, const std::vector<std::vector<T>>& values,
                    const std::vector<std::vector<std::uint32_t>>& argmax, std::span<const T> g_feat,
                    std::span<const T> g_proj, std::span<const T> g_pred, std::vector<T>& param_grads,
                    std::vector<T>* tap_grad) const {
    using detail::OpKind;
    std::size_t top = 0;
    if (!g_pred.empty()) top = ops_.size();
    else if (!g_proj.empty()) top = proj_end_;
    else if (!g_feat.empty()) top = feature_end_;
    if (top == 0) return;
    if (top >= values.size()) throw ValidationError("backward: forward cache does not reach the requested output");
    const bool want_params = tap_grad == nullptr;
    const std::size_t bottom = want_params ? 0 : gap_op_;

    std::vector<T> grad(values[top].size(), T{});
    auto inject = [&](std::size_t at, std::span<const T> g) {
      if (at == top && !g.empty())
        for (std::size_t k = 0; k < g.size(); ++k) grad[k] += g[k];
    };
    inject(ops_.size(), g_pred);
    inject(proj_end_, g_proj);
    inject(feature_end_, g_feat);

    std::vector<T> grad_in;
    for (std::size_t i = top; i-- > bottom;) {
      const auto& op = ops_[i];
      const std::span<const T> in(values[i]);
      const std::span<const T> out(values[i + 1]);
      grad_in.assign(op.in.size(), T{});
      const bool need_input = i > 0;
      auto pgrad = [&](std::size_t idx) -> std::span<T> {
        if (!want_params) return {};
        const auto& e = params.entries()[idx];
        return {param_grads.data() + e.offset, e.size};
      };
      switch (op.kind) {
        case OpKind::conv:
          layers::conv2d_backward<T>(in, op.in, params.value(op.weight), op.out.c, op.kernel, op.stride, grad,
                                     need_input ? std::span<T>(grad_in) : std::span<T>{}, pgrad(op.weight), pgrad(op.bias));
          break;
        case OpKind::relu: layers::relu_backward<T>(in, grad, grad_in); break;
        case OpKind::maxpool: layers::maxpool_backward<T>(argmax[i], grad, grad_in); break;
        case OpKind::gap: layers::gap_backward<T>(op.in, grad, grad_in); break;
        case OpKind::dense:
          layers::dense_backward<T>(in, params.value(op.weight), grad, grad_in, pgrad(op.weight), pgrad(op.bias));
          break;
        case OpKind::layernorm: layers::layernorm_backward<T>(in, out, grad, grad_in); break;
        case OpKind::l2norm: layers::l2norm_backward<T>(in, out, grad, grad_in); break;
      }
      grad.swap(grad_in);
      if (i == proj_end_ && top > proj_end_) inject_at(grad, g_proj);
      if (i == feature_end_ && top > feature_end_) inject_at(grad, g_feat);
    }
    if (tap_grad) *tap_grad = std::move(grad);
  }

  static void inject_at(std::vector<T>& grad, std::span<const T> g) {
    for (std::size_t k = 0; k < g.size(); ++k) grad[k] += g[k];
  }

  EncoderSpec spec_;
  std::vector<LayoutEntry> layout_;
  std::vector<detail::Op> ops_;
  std::size_t gap_op_ = 0;
  std::size_t feature_end_ = 0;
  std::size_t proj_end_ = 0;
};

}  // namespace capsl
