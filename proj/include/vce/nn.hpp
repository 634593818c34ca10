#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vce/autograd.hpp"
#include "vce/ops.hpp"
#include "vce/random.hpp"

namespace vce::nn {

using ag::Var;

template <class T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <class T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

/// Owner of trainable parameters, persistent buffers and child modules.
/// Children are registered by address, so modules are neither copyable nor movable.
template <class T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  std::vector<NamedParam<T>> named_parameters(const std::string& prefix = "") const {
    std::vector<NamedParam<T>> out;
    collect_params(prefix, out);
    return out;
  }

  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> out;
    for (auto& p : named_parameters()) out.push_back(p.var);
    return out;
  }

  std::vector<NamedBuffer<T>> named_buffers(const std::string& prefix = "") {
    std::vector<NamedBuffer<T>> out;
    collect_buffers(prefix, out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& p : named_parameters()) n += p.var.value().numel();
    return n;
  }

  void set_training(bool on) {
    training_ = on;
    for (auto& [name, child] : children_) child->set_training(on);
  }
  bool training() const noexcept { return training_; }

  void zero_grad() {
    for (auto& p : named_parameters()) p.var.zero_grad();
  }

  /// Visits every module in the tree, depth first.
  void apply(const std::function<void(Module&)>& fn) {
    fn(*this);
    for (auto& [name, child] : children_) child->apply(fn);
  }

 protected:
  Var<T> register_parameter(std::string name, Tensor<T> init) {
    Var<T> v(std::move(init), true);
    params_.push_back({std::move(name), v});
    return v;
  }
  void register_buffer(std::string name, Tensor<T>* t) { buffers_.push_back({std::move(name), t}); }
  template <class M>
  M& register_module(std::string name, M& child) {
    children_.emplace_back(std::move(name), &child);
    return child;
  }

 private:
  void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) const {
    for (const auto& p : params_) out.push_back({join(prefix, p.name), p.var});
    for (const auto& [name, child] : children_) child->collect_params(join(prefix, name), out);
  }
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out) {
    for (auto& b : buffers_) out.push_back({join(prefix, b.name), b.tensor});
    for (auto& [name, child] : children_) child->collect_buffers(join(prefix, name), out);
  }
  static std::string join(const std::string& a, const std::string& b) {
    return a.empty() ? b : a + "." + b;
  }

  std::vector<NamedParam<T>> params_;
  std::vector<NamedBuffer<T>> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
  bool training_ = true;
};

// ---------------------------------------------------------------------------

enum class Padding { zeros, reflect };

template <class T>
class Conv2d : public Module<T> {
 public:
  Conv2d(int in, int out, int kernel, int stride = 1, int pad = 0, bool bias = true,
         Padding mode = Padding::zeros)
      : in_(in), out_(out), kernel_(kernel), stride_(stride), pad_(pad), mode_(mode) {
    weight = this->register_parameter("weight", Tensor<T>(Shape{out, in, kernel, kernel}));
    if (bias) this->bias = this->register_parameter("bias", Tensor<T>(Shape{1, 1, 1, out}));
  }

  Var<T> forward(const Var<T>& x) const {
    if (mode_ == Padding::reflect && pad_ > 0) {
      return ops::conv2d(ops::reflection_pad2d(x, pad_), weight, bias, stride_, 0);
    }
    return ops::conv2d(x, weight, bias, stride_, pad_);
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return kernel_; }
  int stride() const { return stride_; }
  int pad() const { return pad_; }

  Var<T> weight;
  Var<T> bias;

 private:
  int in_, out_, kernel_, stride_, pad_;
  Padding mode_;
};

template <class T>
class ConvTranspose2d : public Module<T> {
 public:
  ConvTranspose2d(int in, int out, int kernel, int stride, int pad, int output_pad = 0,
                  bool bias = true)
      : stride_(stride), pad_(pad), output_pad_(output_pad) {
    weight = this->register_parameter("weight", Tensor<T>(Shape{in, out, kernel, kernel}));
    if (bias) this->bias = this->register_parameter("bias", Tensor<T>(Shape{1, 1, 1, out}));
  }

  Var<T> forward(const Var<T>& x) const {
    return ops::conv_transpose2d(x, weight, bias, stride_, pad_, output_pad_);
  }

  Var<T> weight;
  Var<T> bias;

 private:
  int stride_, pad_, output_pad_;
};

template <class T>
class BatchNorm2d : public Module<T> {
 public:
  explicit BatchNorm2d(int channels, T momentum = T(0.1), T eps = T(1e-5))
      : momentum_(momentum), eps_(eps),
        running_mean(Shape{1, 1, 1, channels}, T{0}),
        running_var(Shape{1, 1, 1, channels}, T{1}) {
    gamma = this->register_parameter("weight", Tensor<T>(Shape{1, 1, 1, channels}, T{1}));
    beta = this->register_parameter("bias", Tensor<T>(Shape{1, 1, 1, channels}, T{0}));
    this->register_buffer("running_mean", &running_mean);
    this->register_buffer("running_var", &running_var);
  }

  Var<T> forward(const Var<T>& x) {
    if (!this->training()) {
      return ops::batch_norm_eval(x, gamma, beta, running_mean, running_var, eps_);
    }
    ops::NormStats<T> st;
    Var<T> y = ops::batch_norm_train(x, gamma, beta, eps_, &st);
    if (ag::grad_enabled()) {
      const double count = static_cast<double>(x.shape().n) * x.shape().plane();
      const double unbias = count > 1 ? count / (count - 1) : 1.0;
      for (std::size_t c = 0; c < st.mean.size(); ++c) {
        const double var = 1.0 / (static_cast<double>(st.inv_std[c]) * st.inv_std[c]) - eps_;
        running_mean[c] = (1 - momentum_) * running_mean[c] + momentum_ * st.mean[c];
        running_var[c] =
            static_cast<T>((1 - momentum_) * running_var[c] + momentum_ * var * unbias);
      }
    }
    return y;
  }

  Var<T> gamma;
  Var<T> beta;
  T momentum_;
  T eps_;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <class T>
class InstanceNorm2d : public Module<T> {
 public:
  explicit InstanceNorm2d(int channels, bool affine = false, T eps = T(1e-5)) : eps_(eps) {
    if (affine) {
      gamma = this->register_parameter("weight", Tensor<T>(Shape{1, 1, 1, channels}, T{1}));
      beta = this->register_parameter("bias", Tensor<T>(Shape{1, 1, 1, channels}, T{0}));
    }
  }

  Var<T> forward(const Var<T>& x) const { return ops::instance_norm(x, gamma, beta, eps_); }

  Var<T> gamma;
  Var<T> beta;

 private:
  T eps_;
};

enum class NormKind { batch, instance, none };

/// Runtime-selected normalisation layer.
template <class T>
class Norm2d : public Module<T> {
 public:
  Norm2d(NormKind kind, int channels) : kind_(kind) {
    if (kind == NormKind::batch) {
      bn_ = std::make_unique<BatchNorm2d<T>>(channels);
      this->register_module("bn", *bn_);
    } else if (kind == NormKind::instance) {
      in_ = std::make_unique<InstanceNorm2d<T>>(channels);
      this->register_module("in", *in_);
    }
  }

  Var<T> forward(const Var<T>& x) {
    switch (kind_) {
      case NormKind::batch:
        return bn_->forward(x);
      case NormKind::instance:
        return in_->forward(x);
      case NormKind::none:
        break;
    }
    return x;
  }

  NormKind kind() const { return kind_; }

 private:
  NormKind kind_;
  std::unique_ptr<BatchNorm2d<T>> bn_;
  std::unique_ptr<InstanceNorm2d<T>> in_;
};

// ---------------------------------------------------------------------------
// Initialisation

/// N(0, std) convolution weights, N(1, std) batch-norm scales, zero biases.
template <class T>
void init_normal(Module<T>& root, Rng& rng, double stddev = 0.02) {
  root.apply([&](Module<T>& m) {
    if (auto* conv = dynamic_cast<Conv2d<T>*>(&m)) {
      for (auto& v : conv->weight.mutable_value().span()) v = static_cast<T>(rng.normal(0, stddev));
      if (conv->bias.defined()) conv->bias.mutable_value().fill(T{0});
    } else if (auto* convt = dynamic_cast<ConvTranspose2d<T>*>(&m)) {
      for (auto& v : convt->weight.mutable_value().span()) v = static_cast<T>(rng.normal(0, stddev));
      if (convt->bias.defined()) convt->bias.mutable_value().fill(T{0});
    } else if (auto* bn = dynamic_cast<BatchNorm2d<T>*>(&m)) {
      for (auto& v : bn->gamma.mutable_value().span()) v = static_cast<T>(rng.normal(1, stddev));
      bn->beta.mutable_value().fill(T{0});
    }
  });
}

/// He-normal (fan-in) convolution weights, unit batch-norm scales, zero biases.
template <class T>
void init_he(Module<T>& root, Rng& rng) {
  root.apply([&](Module<T>& m) {
    if (auto* conv = dynamic_cast<Conv2d<T>*>(&m)) {
      const Shape s = conv->weight.shape();
      const double sd = std::sqrt(2.0 / (static_cast<double>(s.c) * s.h * s.w));
      for (auto& v : conv->weight.mutable_value().span()) v = static_cast<T>(rng.normal(0, sd));
      if (conv->bias.defined()) conv->bias.mutable_value().fill(T{0});
    }
  });
}

}  // namespace vce::nn
