#include "pldcp/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "pldcp/error.hpp"
#include "pldcp/io.hpp"

namespace pldcp {

bool LossBreakdown::all_finite() const {
  return std::isfinite(cls_disc) && std::isfinite(dom_disc) && std::isfinite(pairwise) && std::isfinite(reg) &&
         std::isfinite(total);
}

std::string LossBreakdown::to_string() const {
  return "cls_disc=" + io::format_double(cls_disc) + " dom_disc=" + io::format_double(dom_disc) +
         " pairwise=" + io::format_double(pairwise) + " reg=" + io::format_double(reg) +
         " total=" + io::format_double(total);
}

double bce(std::span<const double> y, std::span<const double> z) {
  if (y.size() != z.size() || y.empty()) {
    throw Error(ErrorKind::kShape, "bce: " + std::to_string(y.size()) + " targets for " +
                                       std::to_string(z.size()) + " probabilities");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double p = std::clamp(z[i], kProbClip, 1.0 - kProbClip);
    total += y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p);
  }
  return -total / static_cast<double>(y.size());
}

Var bce(const Matrix& y, const Var& z) {
  if (y.rows() != z.rows() || y.cols() != z.cols()) {
    throw Error(ErrorKind::kShape, "bce: targets " + y.shape_string() + " vs probabilities " +
                                       z.value().shape_string());
  }
  Graph& g = z.graph();
  Matrix not_y(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.size(); ++i) not_y.data()[i] = 1.0 - y.data()[i];
  Var p = clip(z, kProbClip, 1.0 - kProbClip);
  Var pos = mul(g.constant(y), log(p));
  Var neg = mul(g.constant(std::move(not_y)), log(add_scalar(scale(p, -1.0), 1.0)));
  return scale(mean(add(pos, neg)), -1.0);
}

Matrix one_hot(std::span<const int> labels, std::size_t width) {
  Matrix m(labels.size(), width);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= width) {
      throw Error(ErrorKind::kData, "label " + std::to_string(labels[i]) + " outside [0, " +
                                        std::to_string(width) + ")");
    }
    m(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return m;
}

Var class_disc_loss(const BoundParams& p, const Disentangled& z, std::span<const int> labels, int n_classes,
                    double grl_lambda) {
  const Matrix y = one_hot(labels, static_cast<std::size_t>(n_classes));
  return add(bce(y, discriminate(p.dc, z.x_c)), bce(y, discriminate(p.dc, grl(z.x_d, grl_lambda))));
}

Var domain_disc_loss(const BoundParams& p, const Disentangled& z, std::span<const int> domains, int n_domains,
                     double grl_lambda) {
  const Matrix y = one_hot(domains, static_cast<std::size_t>(n_domains));
  return add(bce(y, discriminate(p.dd, z.x_d)), bce(y, discriminate(p.dd, grl(z.x_c, grl_lambda))));
}

Matrix pair_indicator(std::span<const int> labels) {
  Matrix r(labels.size(), labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = 0; j < labels.size(); ++j) r(i, j) = labels[i] == labels[j] ? 1.0 : 0.0;
  return r;
}

double pair_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::kShape, "pair_similarity: lengths " + std::to_string(a.size()) + " and " +
                                       std::to_string(b.size()));
  }
  const double na = la::norm2(a);
  const double nb = la::norm2(b);
  if (na == 0.0 || nb == 0.0) throw Error(ErrorKind::kNumeric, "pair_similarity: zero probability vector");
  return la::dot(a, b) / (na * nb);
}

Var pairwise_loss(const Var& l, std::span<const int> labels) {
  if (labels.size() != l.rows()) {
    throw Error(ErrorKind::kShape, "pairwise_loss: " + std::to_string(labels.size()) + " labels for " +
                                       l.value().shape_string());
  }
  if (labels.size() < 2) throw Error(ErrorKind::kShape, "pairwise_loss needs at least 2 samples");
  return bce(pair_indicator(labels), cosine(l, l));
}

Var pointwise_loss(const Var& l, std::span<const int> labels) {
  if (labels.size() != l.rows()) {
    throw Error(ErrorKind::kShape, "pointwise_loss: " + std::to_string(labels.size()) + " labels for " +
                                       l.value().shape_string());
  }
  return bce(one_hot(labels, l.cols()), l);
}

double soft_reg(const Matrix& p) {
  Matrix gram = la::matmul_tn(p, p);
  for (std::size_t i = 0; i < gram.rows(); ++i) gram(i, i) -= 1.0;
  return la::frobenius(gram);
}

Var soft_reg(const Var& p) {
  Graph& g = p.graph();
  return frobenius_norm(sub(matmul(transpose(p), p), g.constant(Matrix::identity(p.cols()))));
}

Objective total_objective(const BoundParams& p, const Batch& batch, const PrototypeStore& store,
                          const ObjectiveOptions& options) {
  const std::size_t b = batch.x.rows();
  if (batch.labels.size() != b || batch.domains.size() != b) {
    throw Error(ErrorKind::kShape, "batch has " + std::to_string(b) + " rows but " +
                                       std::to_string(batch.labels.size()) + " labels and " +
                                       std::to_string(batch.domains.size()) + " domain ids");
  }
  Graph& g = p.s.graph();
  const Disentangled z = disentangle(p, g.constant(batch.x));
  const int n_domains = static_cast<int>(p.dd.weight.cols());

  Objective out;
  out.inference = infer(z.x_c, z.x_d, p.bilinear ? &p.s : nullptr, store);

  Var cls = class_disc_loss(p, z, batch.labels, store.n_classes, options.grl_lambda);
  Var dom = domain_disc_loss(p, z, batch.domains, n_domains, options.grl_lambda);
  Var pair = options.pairwise ? pairwise_loss(out.inference.l, batch.labels)
                              : pointwise_loss(out.inference.l, batch.labels);

  // P: batch means where the batch has samples of a domain, stored rows elsewhere.
  const std::size_t nd = store.n_domains();
  Matrix averaging(nd, b);
  std::vector<std::size_t> counts(nd, 0);
  for (int d : batch.domains) {
    if (d < 0 || static_cast<std::size_t>(d) >= nd) {
      throw Error(ErrorKind::kData, "batch domain id " + std::to_string(d) + " outside the prototype store");
    }
    ++counts[static_cast<std::size_t>(d)];
  }
  Matrix fixed = store.domain_protos;
  for (std::size_t i = 0; i < b; ++i) {
    const auto d = static_cast<std::size_t>(batch.domains[i]);
    averaging(d, i) = 1.0 / static_cast<double>(counts[d]);
  }
  for (std::size_t n = 0; n < nd; ++n)
    if (counts[n] > 0) std::fill(fixed.row(n).begin(), fixed.row(n).end(), 0.0);
  Var protos = add(matmul(g.constant(std::move(averaging)), z.x_d), g.constant(std::move(fixed)));
  Var reg = soft_reg(protos);

  const ObjectiveWeights& w = options.weights;
  out.breakdown.weights = w;
  out.breakdown.cls_disc = cls.value()(0, 0);
  out.breakdown.dom_disc = dom.value()(0, 0);
  out.breakdown.pairwise = pair.value()(0, 0);
  out.breakdown.reg = reg.value()(0, 0);

  Var total;
  bool any = false;
  auto accumulate = [&](const Var& term, double weight) {
    if (weight == 0.0) return;
    Var scaled = scale(term, weight);
    total = any ? add(total, scaled) : scaled;
    any = true;
  };
  accumulate(pair, w.pair);
  accumulate(cls, w.cls);
  accumulate(dom, w.dom);
  accumulate(reg, w.beta);
  if (!any) total = g.constant(Matrix(1, 1, 0.0));
  out.total = total;
  out.breakdown.total = total.value()(0, 0);

  if (!out.breakdown.all_finite()) {
    throw Error(ErrorKind::kNumeric, "non-finite loss: " + out.breakdown.to_string());
  }
  return out;
}

}  // namespace pldcp
