#pragma once

// The model: shallow extractor f_g, class/domain disentanglers f_c and f_d,
// one-vs-rest discriminator heads D_c and D_d, and the bilinear matrix S.
//
// Layers store weights as (in x out) so a batch of row vectors maps as
// x W + b.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "pldcp/tensor.hpp"

namespace pldcp {

struct NetworkDims {
  std::size_t input_dim = 310;
  std::size_t shallow_hidden = 128;  // first f_g layer width
  std::size_t hidden = 64;           // h: width of x_c, x_d and side of S
  int n_classes = 3;
  int n_domains = 2;                 // D_d width, fixed at training time
  double leaky_slope = 0.01;

  friend bool operator==(const NetworkDims&, const NetworkDims&) = default;
};

struct Dense {
  Matrix weight;  // in x out
  Matrix bias;    // 1 x out
};

struct ModelParams {
  NetworkDims dims;
  Dense g1, g2;  // f_g
  Dense fc;      // f_c
  Dense fd;      // f_d
  Dense dc;      // D_c
  Dense dd;      // D_d
  Matrix s;      // bilinear similarity, hidden x hidden
  bool bilinear = true;  // false: plain dot product in place of x_d^T S mu

  /// Glorot-uniform layers with zero biases, S ~ N(0, 1/h).
  static ModelParams init(const NetworkDims& dims, std::uint64_t seed);

  /// Stable, named view over every trainable tensor (used by the optimiser
  /// and the checkpoint format).
  std::vector<std::pair<std::string, Matrix*>> tensors();
  std::vector<std::pair<std::string, const Matrix*>> tensors() const;

  bool all_finite() const;
};

struct BoundDense {
  Var weight;
  Var bias;
};

/// ModelParams placed on a graph, either as trainable leaves or constants.
struct BoundParams {
  BoundDense g1, g2, fc, fd, dc, dd;
  Var s;
  double leaky_slope = 0.01;
  bool bilinear = true;

  std::vector<Var> all() const;  // same order as ModelParams::tensors()
};

BoundParams bind(Graph& graph, const ModelParams& params, bool trainable);
/// Rebuilds the bundle from Vars laid out as BoundParams::all().
BoundParams bind_vars(std::span<const Var> vars, double leaky_slope, bool bilinear);

Var dense(const BoundDense& layer, const Var& x);

/// f_g(x) for a batch of rows.
Var shallow(const BoundParams& p, const Var& x);

struct Disentangled {
  Var x_c;
  Var x_d;
};

/// One shared f_g pass feeding both disentanglers.
Disentangled disentangle(const BoundParams& p, const Var& x);

/// sigmoid(v W + b), each entry an independent one-vs-rest probability.
Var discriminate(const BoundDense& head, const Var& v);

/// x_d^T S mu for single vectors.
double bilinear_sim(const Matrix& s, std::span<const double> x_d, std::span<const double> mu);

/// Scores of every row of x_d against every prototype row: x_d S P^T, or
/// x_d P^T when `s` is null.
Var bilinear_scores(const Var& x_d, const Var* s, const Var& prototypes);

nlohmann::json params_to_json(const ModelParams& params);
/// Validates every tensor shape against the stored dims.
ModelParams params_from_json(const nlohmann::json& j);

}  // namespace pldcp
