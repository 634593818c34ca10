#pragma once

#include <bit>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "vce/nn.hpp"
#include "vce/ops.hpp"

namespace vce::models {

using ag::Var;
using nn::NormKind;

enum class GeneratorKind { autoencoder, unet, resnet };

inline std::string to_string(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::autoencoder:
      return "autoencoder";
    case GeneratorKind::unet:
      return "unet";
    case GeneratorKind::resnet:
      return "resnet";
  }
  return "?";
}

inline GeneratorKind generator_kind_from_string(const std::string& s) {
  if (s == "autoencoder") return GeneratorKind::autoencoder;
  if (s == "unet") return GeneratorKind::unet;
  if (s == "resnet") return GeneratorKind::resnet;
  throw std::invalid_argument("unknown generator kind '" + s + "'");
}

struct GeneratorSpec {
  GeneratorKind kind = GeneratorKind::resnet;
  int in_size = 256;
  int base_channels = 64;
  int n_residual_blocks = 9;  // resnet only
  int in_channels = 1;
  int out_channels = 1;
  bool use_dropout = false;  // unet decoder dropout, off for deterministic training
};

struct DiscriminatorSpec {
  int in_channels = 1;  // 2 for the conditional (x, y) discriminator
  int base_channels = 64;
  int n_layers = 3;
  NormKind norm = NormKind::batch;
  bool sigmoid_output = true;  // probabilities for BCE; raw scores for least squares

  /// Side of the input window seen by one output unit.
  int receptive_field() const {
    // Two stride-1 k4 layers after n_layers stride-2 k4 layers, walked backwards.
    int r = 1;
    r = r - 1 + 4;
    r = r - 1 + 4;
    for (int i = 0; i < n_layers; ++i) r = (r - 1) * 2 + 4;
    return r;
  }
};

inline void validate(const GeneratorSpec& s) {
  if (s.in_size < 64 || !std::has_single_bit(static_cast<unsigned>(s.in_size))) {
    throw std::invalid_argument("GeneratorSpec.in_size must be a power of two >= 64, got " +
                                std::to_string(s.in_size));
  }
  if (s.base_channels < 1) throw std::invalid_argument("GeneratorSpec.base_channels must be >= 1");
  if (s.kind == GeneratorKind::resnet && s.n_residual_blocks < 0) {
    throw std::invalid_argument("GeneratorSpec.n_residual_blocks must be >= 0");
  }
}

template <class T>
class Generator : public nn::Module<T> {
 public:
  explicit Generator(GeneratorSpec spec) : spec_(spec) {}
  virtual Var<T> forward(const Var<T>& x) = 0;
  const GeneratorSpec& spec() const { return spec_; }

 protected:
  void check_input(const Var<T>& x) const {
    const Shape s = x.shape();
    if (s.c != spec_.in_channels || s.h != spec_.in_size || s.w != spec_.in_size) {
      throw ShapeError("generator expects N x " + std::to_string(spec_.in_channels) + " x " +
                       std::to_string(spec_.in_size) + " x " + std::to_string(spec_.in_size) +
                       ", got " + vce::to_string(s));
    }
  }

 private:
  GeneratorSpec spec_;
};

// ---------------------------------------------------------------------------
// Autoencoder
//
//   enc_i : three conv3x3-BN-ReLU layers, out = h1 + h3 (residual), then 2x2 max-pool
//   dec_i : 2x nearest upsampling, concat with enc_(5-i) output (bypass), conv block
//   dec_4 : upsampling, concat with enc_1 output, 1x1 conv, sigmoid
//
// Channel widths are base * {1, 2, 4, 8} on the encoder side.

template <class T>
class ConvBlock : public nn::Module<T> {
 public:
  ConvBlock(int in, int out)
      : c0(in, out, 3, 1, 1), c1(out, out, 3, 1, 1), c2(out, out, 3, 1, 1), n0(out), n1(out),
        n2(out) {
    this->register_module("conv0", c0);
    this->register_module("bn0", n0);
    this->register_module("conv1", c1);
    this->register_module("bn1", n1);
    this->register_module("conv2", c2);
    this->register_module("bn2", n2);
  }

  Var<T> forward(const Var<T>& x) {
    Var<T> h1 = ops::relu(n0.forward(c0.forward(x)));
    Var<T> h2 = ops::relu(n1.forward(c1.forward(h1)));
    Var<T> h3 = ops::relu(n2.forward(c2.forward(h2)));
    return ops::add(h1, h3);
  }

  nn::Conv2d<T> c0, c1, c2;
  nn::BatchNorm2d<T> n0, n1, n2;
};

template <class T>
class Autoencoder : public Generator<T> {
 public:
  explicit Autoencoder(const GeneratorSpec& spec)
      : Generator<T>(spec),
        enc1(spec.in_channels, spec.base_channels),
        enc2(spec.base_channels, spec.base_channels * 2),
        enc3(spec.base_channels * 2, spec.base_channels * 4),
        enc4(spec.base_channels * 4, spec.base_channels * 8),
        dec1(spec.base_channels * 16, spec.base_channels * 4),
        dec2(spec.base_channels * 8, spec.base_channels * 2),
        dec3(spec.base_channels * 4, spec.base_channels),
        head(spec.base_channels * 2, spec.out_channels, 1) {
    this->register_module("enc1", enc1);
    this->register_module("enc2", enc2);
    this->register_module("enc3", enc3);
    this->register_module("enc4", enc4);
    this->register_module("dec1", dec1);
    this->register_module("dec2", dec2);
    this->register_module("dec3", dec3);
    this->register_module("head", head);
  }

  Var<T> forward(const Var<T>& x) override {
    this->check_input(x);
    Var<T> e1 = enc1.forward(x);
    Var<T> e2 = enc2.forward(ops::max_pool2d(e1));
    Var<T> e3 = enc3.forward(ops::max_pool2d(e2));
    Var<T> e4 = enc4.forward(ops::max_pool2d(e3));
    Var<T> z = ops::max_pool2d(e4);
    Var<T> d1 = dec1.forward(ops::concat_channels(ops::upsample2x(z), e4));
    Var<T> d2 = dec2.forward(ops::concat_channels(ops::upsample2x(d1), e3));
    Var<T> d3 = dec3.forward(ops::concat_channels(ops::upsample2x(d2), e2));
    return ops::sigmoid(head.forward(ops::concat_channels(ops::upsample2x(d3), e1)));
  }

  ConvBlock<T> enc1, enc2, enc3, enc4, dec1, dec2, dec3;
  nn::Conv2d<T> head;
};

// ---------------------------------------------------------------------------
// U-Net generator (pix2pix layout): log2(in_size) stride-2 k4 encoder blocks
// down to 1x1, mirrored by transposed-conv decoder blocks; decoder block n-i
// consumes the concatenation with encoder block i.

template <class T>
class UnetGenerator : public Generator<T> {
 public:
  explicit UnetGenerator(const GeneratorSpec& spec) : Generator<T>(spec) {
    const int depth = std::countr_zero(static_cast<unsigned>(spec.in_size));
    auto width = [&](int level) { return spec.base_channels * (1 << std::min(level, 3)); };
    for (int i = 0; i < depth; ++i) {
      const int in = i == 0 ? spec.in_channels : width(i - 1);
      down_.push_back(std::make_unique<nn::Conv2d<T>>(in, width(i), 4, 2, 1, false));
      this->register_module("down" + std::to_string(i), *down_.back());
      // No norm on the outermost and innermost encoder blocks.
      const bool norm = i != 0 && i != depth - 1;
      down_norm_.push_back(
          std::make_unique<nn::Norm2d<T>>(norm ? NormKind::batch : NormKind::none, width(i)));
      this->register_module("down_norm" + std::to_string(i), *down_norm_.back());
    }
    // up_[j] restores the resolution of encoder level depth-1-j.
    for (int j = 0; j < depth; ++j) {
      const int level = depth - 1 - j;
      const int in = j == 0 ? width(level) : width(level) * 2;
      const bool last = level == 0;
      const int out = last ? spec.out_channels : width(level - 1);
      up_.push_back(std::make_unique<nn::ConvTranspose2d<T>>(in, out, 4, 2, 1, 0, last));
      this->register_module("up" + std::to_string(j), *up_.back());
      up_norm_.push_back(
          std::make_unique<nn::Norm2d<T>>(last ? NormKind::none : NormKind::batch, out));
      this->register_module("up_norm" + std::to_string(j), *up_norm_.back());
    }
  }

  Var<T> forward(const Var<T>& x) override {
    this->check_input(x);
    const std::size_t depth = down_.size();
    std::vector<Var<T>> skips;
    Var<T> h = x;
    for (std::size_t i = 0; i < depth; ++i) {
      if (i > 0) h = ops::leaky_relu(h, T(0.2));
      h = down_norm_[i]->forward(down_[i]->forward(h));
      skips.push_back(h);
    }
    for (std::size_t j = 0; j < depth; ++j) {
      if (j > 0) h = ops::concat_channels(h, skips[depth - 1 - j]);
      h = up_norm_[j]->forward(up_[j]->forward(ops::relu(h)));
    }
    return ops::affine(ops::tanh(h), T(0.5), T(0.5));
  }

  std::size_t depth() const { return down_.size(); }

 private:
  std::vector<std::unique_ptr<nn::Conv2d<T>>> down_;
  std::vector<std::unique_ptr<nn::Norm2d<T>>> down_norm_;
  std::vector<std::unique_ptr<nn::ConvTranspose2d<T>>> up_;
  std::vector<std::unique_ptr<nn::Norm2d<T>>> up_norm_;
};

// ---------------------------------------------------------------------------
// ResNet generator (CycleGAN layout): c7s1 + two stride-2 convs, residual
// blocks, two stride-2 transposed convs, final c7s1; instance norm throughout.

template <class T>
class ResidualBlock : public nn::Module<T> {
 public:
  explicit ResidualBlock(int ch)
      : c0(ch, ch, 3, 1, 1, true, nn::Padding::reflect),
        c1(ch, ch, 3, 1, 1, true, nn::Padding::reflect), n0(ch), n1(ch) {
    this->register_module("conv0", c0);
    this->register_module("norm0", n0);
    this->register_module("conv1", c1);
    this->register_module("norm1", n1);
  }

  Var<T> forward(const Var<T>& x) {
    Var<T> h = ops::relu(n0.forward(c0.forward(x)));
    return ops::add(x, n1.forward(c1.forward(h)));
  }

  nn::Conv2d<T> c0, c1;
  nn::InstanceNorm2d<T> n0, n1;
};

template <class T>
class ResnetGenerator : public Generator<T> {
 public:
  explicit ResnetGenerator(const GeneratorSpec& spec)
      : Generator<T>(spec),
        stem(spec.in_channels, spec.base_channels, 7, 1, 3, true, nn::Padding::reflect),
        down1(spec.base_channels, spec.base_channels * 2, 3, 2, 1),
        down2(spec.base_channels * 2, spec.base_channels * 4, 3, 2, 1),
        up1(spec.base_channels * 4, spec.base_channels * 2, 3, 2, 1, 1),
        up2(spec.base_channels * 2, spec.base_channels, 3, 2, 1, 1),
        head(spec.base_channels, spec.out_channels, 7, 1, 3, true, nn::Padding::reflect),
        n_stem(spec.base_channels), n_down1(spec.base_channels * 2),
        n_down2(spec.base_channels * 4), n_up1(spec.base_channels * 2),
        n_up2(spec.base_channels) {
    this->register_module("stem", stem);
    this->register_module("stem_norm", n_stem);
    this->register_module("down1", down1);
    this->register_module("down1_norm", n_down1);
    this->register_module("down2", down2);
    this->register_module("down2_norm", n_down2);
    for (int i = 0; i < spec.n_residual_blocks; ++i) {
      blocks.push_back(std::make_unique<ResidualBlock<T>>(spec.base_channels * 4));
      this->register_module("res" + std::to_string(i), *blocks.back());
    }
    this->register_module("up1", up1);
    this->register_module("up1_norm", n_up1);
    this->register_module("up2", up2);
    this->register_module("up2_norm", n_up2);
    this->register_module("head", head);
  }

  Var<T> forward(const Var<T>& x) override {
    this->check_input(x);
    Var<T> h = ops::relu(n_stem.forward(stem.forward(x)));
    h = ops::relu(n_down1.forward(down1.forward(h)));
    h = ops::relu(n_down2.forward(down2.forward(h)));
    for (auto& b : blocks) h = b->forward(h);
    h = ops::relu(n_up1.forward(up1.forward(h)));
    h = ops::relu(n_up2.forward(up2.forward(h)));
    return ops::affine(ops::tanh(head.forward(h)), T(0.5), T(0.5));
  }

  /// Layer census used to compare against the reference layout.
  struct Census {
    int downsampling_convs;  // stem + strided convolutions
    int residual_blocks;
    int transposed_convs;
    int final_convs;
  };
  Census census() const { return {3, static_cast<int>(blocks.size()), 2, 1}; }

  nn::Conv2d<T> stem, down1, down2;
  nn::ConvTranspose2d<T> up1, up2;
  nn::Conv2d<T> head;
  nn::InstanceNorm2d<T> n_stem, n_down1, n_down2, n_up1, n_up2;
  std::vector<std::unique_ptr<ResidualBlock<T>>> blocks;
};

// ---------------------------------------------------------------------------
// PatchGAN discriminator: n_layers stride-2 k4 convs, one stride-1 k4 conv,
// a final stride-1 k4 conv to one channel. Each output unit sees a
// receptive_field() x receptive_field() input window (70 for n_layers = 3).

template <class T>
class PatchDiscriminator : public nn::Module<T> {
 public:
  explicit PatchDiscriminator(const DiscriminatorSpec& spec) : spec_(spec) {
    const bool bias = spec.norm != NormKind::batch;
    int ch = spec.base_channels;
    int prev = spec.in_channels;
    for (int i = 0; i <= spec.n_layers; ++i) {
      const int stride = i < spec.n_layers ? 2 : 1;
      const int out = spec.base_channels * (1 << std::min(i, 3));
      convs_.push_back(std::make_unique<nn::Conv2d<T>>(prev, out, 4, stride, 1, i == 0 || bias));
      this->register_module("conv" + std::to_string(i), *convs_.back());
      norms_.push_back(
          std::make_unique<nn::Norm2d<T>>(i == 0 ? NormKind::none : spec.norm, out));
      this->register_module("norm" + std::to_string(i), *norms_.back());
      prev = out;
      ch = out;
    }
    final_ = std::make_unique<nn::Conv2d<T>>(ch, 1, 4, 1, 1);
    this->register_module("final", *final_);
  }

  Var<T> forward(const Var<T>& x) {
    if (x.shape().c != spec_.in_channels) {
      throw ShapeError("discriminator expects " + std::to_string(spec_.in_channels) +
                       " channels, got " + vce::to_string(x.shape()));
    }
    Var<T> h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = ops::leaky_relu(norms_[i]->forward(convs_[i]->forward(h)), T(0.2));
    }
    h = final_->forward(h);
    return spec_.sigmoid_output ? ops::sigmoid(h) : h;
  }

  /// Conditional form: scores the channel concatenation (x, candidate).
  Var<T> forward(const Var<T>& x, const Var<T>& candidate) {
    return forward(ops::concat_channels(x, candidate));
  }

  const DiscriminatorSpec& spec() const { return spec_; }

  /// Score-map side for a square input of side `in`.
  int output_size(int in) const {
    int s = in;
    for (int i = 0; i < spec_.n_layers; ++i) s = (s + 2 - 4) / 2 + 1;
    s = s + 2 - 4 + 1;
    return s + 2 - 4 + 1;
  }

 private:
  DiscriminatorSpec spec_;
  std::vector<std::unique_ptr<nn::Conv2d<T>>> convs_;
  std::vector<std::unique_ptr<nn::Norm2d<T>>> norms_;
  std::unique_ptr<nn::Conv2d<T>> final_;
};

// ---------------------------------------------------------------------------
// Builders

template <class T>
std::unique_ptr<Generator<T>> build_generator(const GeneratorSpec& spec, Rng& rng) {
  validate(spec);
  std::unique_ptr<Generator<T>> g;
  switch (spec.kind) {
    case GeneratorKind::autoencoder:
      g = std::make_unique<Autoencoder<T>>(spec);
      nn::init_he(*g, rng);
      return g;
    case GeneratorKind::unet:
      g = std::make_unique<UnetGenerator<T>>(spec);
      break;
    case GeneratorKind::resnet:
      g = std::make_unique<ResnetGenerator<T>>(spec);
      break;
  }
  nn::init_normal(*g, rng);
  return g;
}

template <class T>
std::unique_ptr<Generator<T>> build_autoencoder(const GeneratorSpec& spec, Rng& rng) {
  if (spec.kind != GeneratorKind::autoencoder) {
    throw std::invalid_argument("build_autoencoder: spec.kind must be autoencoder");
  }
  return build_generator<T>(spec, rng);
}

template <class T>
std::unique_ptr<PatchDiscriminator<T>> build_discriminator(const DiscriminatorSpec& spec,
                                                           Rng& rng) {
  if (spec.in_channels < 1 || spec.base_channels < 1 || spec.n_layers < 1) {
    throw std::invalid_argument("DiscriminatorSpec: channels and n_layers must be >= 1");
  }
  auto d = std::make_unique<PatchDiscriminator<T>>(spec);
  nn::init_normal(*d, rng);
  return d;
}

template <class T>
struct Pix2Pix {
  std::unique_ptr<Generator<T>> generator;
  std::unique_ptr<PatchDiscriminator<T>> discriminator;
};

template <class T>
Pix2Pix<T> build_pix2pix(const GeneratorSpec& g_spec, DiscriminatorSpec d_spec, Rng& rng) {
  if (g_spec.kind != GeneratorKind::unet) {
    throw std::invalid_argument("build_pix2pix: generator kind must be unet");
  }
  d_spec.in_channels = g_spec.in_channels + g_spec.out_channels;
  return {build_generator<T>(g_spec, rng), build_discriminator<T>(d_spec, rng)};
}

template <class T>
struct CycleGan {
  std::unique_ptr<Generator<T>> g;  // X -> Y
  std::unique_ptr<Generator<T>> f;  // Y -> X
  std::unique_ptr<PatchDiscriminator<T>> d_x;
  std::unique_ptr<PatchDiscriminator<T>> d_y;
};

template <class T>
CycleGan<T> build_cyclegan(const GeneratorSpec& g_spec, const GeneratorSpec& f_spec,
                           const DiscriminatorSpec& dx_spec, const DiscriminatorSpec& dy_spec,
                           Rng& rng) {
  if (g_spec.kind != GeneratorKind::resnet || f_spec.kind != GeneratorKind::resnet) {
    throw std::invalid_argument("build_cyclegan: generator kinds must be resnet");
  }
  CycleGan<T> m;
  m.g = build_generator<T>(g_spec, rng);
  m.f = build_generator<T>(f_spec, rng);
  m.d_x = build_discriminator<T>(dx_spec, rng);
  m.d_y = build_discriminator<T>(dy_spec, rng);
  return m;
}

}  // namespace vce::models
