#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vce/autograd.hpp"
#include "vce/ops.hpp"

namespace vce::losses {

using ag::Var;

/// Loss-term coefficients: pix2pix L1 weight, CycleGAN cycle and identity weights.
/// `lambda_supervised` adds a paired G(x)-vs-y L1 term to the CycleGAN generator;
/// zero reproduces the plain cycle-consistent objective.
struct LossWeights {
  double lambda_l1 = 100.0;
  double lambda_cycle = 10.0;
  double lambda_identity = 5.0;
  double lambda_supervised = 0.0;
};

inline void validate(const LossWeights& w) {
  if (w.lambda_l1 < 0 || w.lambda_cycle < 0 || w.lambda_identity < 0 || w.lambda_supervised < 0) {
    throw std::invalid_argument("LossWeights: all weights must be >= 0");
  }
}

/// Mean absolute difference over all elements.
template <class T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
  return ops::mean_abs_diff(a, b);
}

template <class T>
struct AdversarialTerms {
  Var<T> discriminator;  // real -> 1, fake -> 0
  Var<T> generator;      // fake -> 1
};

/// Binary cross-entropy on probability score maps, each term averaged over its map.
template <class T>
AdversarialTerms<T> adversarial_bce(const Var<T>& real_scores, const Var<T>& fake_scores) {
  Var<T> d = ops::weighted_sum<T>({{ops::bce_to(real_scores, T{1}), T{1}},
                                   {ops::bce_to(fake_scores, T{0}), T{1}}});
  return {d, ops::bce_to(fake_scores, T{1})};
}

/// Least-squares adversarial terms.
template <class T>
AdversarialTerms<T> adversarial_mse(const Var<T>& real_scores, const Var<T>& fake_scores) {
  Var<T> d = ops::weighted_sum<T>({{ops::mean_sq_to(real_scores, T{1}), T{1}},
                                   {ops::mean_sq_to(fake_scores, T{0}), T{1}}});
  return {d, ops::mean_sq_to(fake_scores, T{1})};
}

/// |F(G(x)) - x| + |G(F(y)) - y|, each a mean.
template <class T>
Var<T> cycle_loss(const Var<T>& x, const Var<T>& fgx, const Var<T>& y, const Var<T>& gfy) {
  return ops::weighted_sum<T>({{l1_loss(fgx, x), T{1}}, {l1_loss(gfy, y), T{1}}});
}

/// |G(y) - y| + |F(x) - x|, each a mean.
template <class T>
Var<T> identity_loss(const Var<T>& g_of_y, const Var<T>& y, const Var<T>& f_of_x,
                     const Var<T>& x) {
  return ops::weighted_sum<T>({{l1_loss(g_of_y, y), T{1}}, {l1_loss(f_of_x, x), T{1}}});
}

enum class ModelKind { autoencoder, pix2pix, cyclegan };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::autoencoder:
      return "autoencoder";
    case ModelKind::pix2pix:
      return "pix2pix";
    case ModelKind::cyclegan:
      return "cyclegan";
  }
  return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "autoencoder") return ModelKind::autoencoder;
  if (s == "pix2pix") return ModelKind::pix2pix;
  if (s == "cyclegan") return ModelKind::cyclegan;
  throw std::invalid_argument("unknown model '" + s + "' (expected autoencoder|pix2pix|cyclegan)");
}

/// Named scalar terms entering the objectives. Unused terms stay undefined.
template <class T>
struct LossParts {
  Var<T> l1;           // |y - G(x)|
  Var<T> adv_g;        // generator adversarial term (G vs D or D_y)
  Var<T> adv_d;        // discriminator term (D or D_y)
  Var<T> adv_g_f;      // CycleGAN: F vs D_x
  Var<T> adv_d_x;      // CycleGAN: D_x
  Var<T> cycle;
  Var<T> identity;
  Var<T> supervised;   // optional paired term for CycleGAN
};

template <class T>
struct Objectives {
  Var<T> generator;
  Var<T> discriminator;
};

namespace detail {
template <class T>
const Var<T>& need(const Var<T>& v, const char* name) {
  if (!v.defined()) throw std::invalid_argument(std::string("total_objective: missing term ") + name);
  return v;
}
}  // namespace detail

/// Weighted objectives:
///   autoencoder  G = l1
///   pix2pix      G = adv_g + lambda_l1 * l1,  D = adv_d
///   cyclegan     G = adv_g + adv_g_f + lambda_cycle * cycle + lambda_identity * identity
///                    (+ lambda_supervised * supervised),   D = adv_d + adv_d_x
template <class T>
Objectives<T> total_objective(ModelKind kind, const LossParts<T>& p, const LossWeights& w) {
  using detail::need;
  const Var<T> zero(Tensor<T>::scalar(T{0}));
  switch (kind) {
    case ModelKind::autoencoder:
      return {ops::weighted_sum<T>({{need(p.l1, "l1"), T{1}}}), zero};
    case ModelKind::pix2pix:
      return {ops::weighted_sum<T>({{need(p.adv_g, "adv_g"), T{1}},
                                    {need(p.l1, "l1"), static_cast<T>(w.lambda_l1)}}),
              ops::weighted_sum<T>({{need(p.adv_d, "adv_d"), T{1}}})};
    case ModelKind::cyclegan: {
      std::vector<std::pair<Var<T>, T>> g{{need(p.adv_g, "adv_g"), T{1}},
                                          {need(p.adv_g_f, "adv_g_f"), T{1}},
                                          {need(p.cycle, "cycle"), static_cast<T>(w.lambda_cycle)},
                                          {need(p.identity, "identity"),
                                           static_cast<T>(w.lambda_identity)}};
      if (w.lambda_supervised > 0) {
        g.push_back({need(p.supervised, "supervised"), static_cast<T>(w.lambda_supervised)});
      }
      return {ops::weighted_sum<T>(g),
              ops::weighted_sum<T>({{need(p.adv_d, "adv_d"), T{1}},
                                    {need(p.adv_d_x, "adv_d_x"), T{1}}})};
    }
  }
  throw std::invalid_argument("total_objective: unknown model kind");
}

}  // namespace vce::losses
