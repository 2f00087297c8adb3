#pragma once

// Loss terms and their weighted combination.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pldcp/network.hpp"
#include "pldcp/prototypes.hpp"
#include "pldcp/tensor.hpp"

namespace pldcp {

inline constexpr double kProbClip = 1e-7;

struct ObjectiveWeights {
  double cls = 1.0;    // class discriminator loss
  double dom = 1.0;    // domain discriminator loss
  double pair = 1.0;   // pairwise (or pointwise) class loss
  double beta = 0.01;  // soft regulariser

  friend bool operator==(const ObjectiveWeights&, const ObjectiveWeights&) = default;
};

struct LossBreakdown {
  double cls_disc = 0.0;
  double dom_disc = 0.0;
  double pairwise = 0.0;  // holds the pointwise loss when pairwise learning is off
  double reg = 0.0;
  double total = 0.0;
  ObjectiveWeights weights;

  bool all_finite() const;
  std::string to_string() const;
};

/// A training mini-batch. `domains` index the source DomainIndex.
struct Batch {
  Matrix x;  // B x F
  std::vector<int> labels;
  std::vector<int> domains;
  std::vector<std::size_t> ids;
};

/// -mean(y ln z + (1-y) ln(1-z)) with z clipped to [1e-7, 1-1e-7].
double bce(std::span<const double> y, std::span<const double> z);
Var bce(const Matrix& y, const Var& z);

Matrix one_hot(std::span<const int> labels, std::size_t width);

/// bce(y_c, D_c(x_c)) + bce(y_c, D_c(grl(x_d))).
Var class_disc_loss(const BoundParams& p, const Disentangled& z, std::span<const int> labels, int n_classes,
                    double grl_lambda);
/// bce(y_d, D_d(x_d)) + bce(y_d, D_d(grl(x_c))).
Var domain_disc_loss(const BoundParams& p, const Disentangled& z, std::span<const int> domains, int n_domains,
                     double grl_lambda);

/// r_ij = 1 iff labels agree.
Matrix pair_indicator(std::span<const int> labels);

/// Cosine of two class-probability vectors.
double pair_similarity(std::span<const double> a, std::span<const double> b);

/// Mean BCE over all B^2 ordered pairs (i = j included) between r_ij and
/// cos(l_i, l_j).
Var pairwise_loss(const Var& l, std::span<const int> labels);

/// Mean BCE of l against one-hot labels.
Var pointwise_loss(const Var& l, std::span<const int> labels);

/// ||P^T P - I||_F.
double soft_reg(const Matrix& p);
Var soft_reg(const Var& p);

struct ObjectiveOptions {
  ObjectiveWeights weights;
  bool pairwise = true;
  double grl_lambda = 1.0;
};

struct Objective {
  LossBreakdown breakdown;
  Var total;
  Inference inference;
};

/// Weighted sum of all terms. Zero-weighted terms are still evaluated for
/// the breakdown but contribute no gradient. Throws Error(kNumeric) with the
/// breakdown if any term is non-finite.
///
/// The regulariser's P takes, for every domain present in the batch, the
/// batch mean of its x_d rows (so it is differentiable), and the stored
/// prototype for the others.
Objective total_objective(const BoundParams& p, const Batch& batch, const PrototypeStore& store,
                          const ObjectiveOptions& options);

}  // namespace pldcp
