#include "pldcp/prototypes.hpp"

#include <algorithm>
#include <sstream>

#include "pldcp/error.hpp"
#include "pldcp/io.hpp"

namespace pldcp {

namespace {

constexpr std::size_t kEmbedChunk = 1024;

void check_ids(std::span<const int> ids, std::size_t rows, std::size_t limit, const char* what) {
  if (ids.size() != rows) {
    throw Error(ErrorKind::kShape, std::string(what) + ": " + std::to_string(ids.size()) + " ids for " +
                                       std::to_string(rows) + " feature rows");
  }
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= limit) {
      throw Error(ErrorKind::kData, std::string(what) + ": id " + std::to_string(id) + " outside [0, " +
                                        std::to_string(limit) + ")");
    }
  }
}

int argmax_row(std::span<const double> v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

}  // namespace

Matrix compute_domain_prototypes(const Matrix& x_d, std::span<const int> domain_ids, std::size_t n_domains) {
  check_ids(domain_ids, x_d.rows(), n_domains, "compute_domain_prototypes");
  Matrix protos(n_domains, x_d.cols());
  std::vector<std::size_t> counts(n_domains, 0);
  for (std::size_t i = 0; i < x_d.rows(); ++i) {
    const auto n = static_cast<std::size_t>(domain_ids[i]);
    auto dst = protos.row(n);
    auto src = x_d.row(i);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    ++counts[n];
  }
  for (std::size_t n = 0; n < n_domains; ++n) {
    if (counts[n] == 0) throw Error(ErrorKind::kData, "domain " + std::to_string(n) + " has no samples");
    for (double& v : protos.row(n)) v /= static_cast<double>(counts[n]);
  }
  return protos;
}

ClassPrototypes compute_class_prototypes(const Matrix& x_c, std::span<const int> domain_ids,
                                         std::span<const int> labels, std::size_t n_domains, int n_classes) {
  check_ids(domain_ids, x_c.rows(), n_domains, "compute_class_prototypes");
  check_ids(labels, x_c.rows(), static_cast<std::size_t>(n_classes), "compute_class_prototypes labels");
  const auto nc = static_cast<std::size_t>(n_classes);
  ClassPrototypes out{Matrix(n_domains * nc, x_c.cols()), std::vector<double>(n_domains * nc, 0.0)};
  std::vector<std::size_t> counts(n_domains * nc, 0);
  for (std::size_t i = 0; i < x_c.rows(); ++i) {
    const std::size_t r = static_cast<std::size_t>(domain_ids[i]) * nc + static_cast<std::size_t>(labels[i]);
    auto dst = out.protos.row(r);
    auto src = x_c.row(i);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    ++counts[r];
  }
  for (std::size_t r = 0; r < counts.size(); ++r) {
    if (counts[r] == 0) continue;
    out.mask[r] = 1.0;
    for (double& v : out.protos.row(r)) v /= static_cast<double>(counts[r]);
  }
  return out;
}

std::vector<double> domain_similarity(const Matrix* s, std::span<const double> x_d, const Matrix& domain_protos) {
  Graph g;
  Var xd = g.constant(Matrix::row_vector(x_d));
  Var protos = g.constant(domain_protos);
  Var sv;
  if (s) sv = g.constant(*s);
  Var d = softmax_rows(bilinear_scores(xd, s ? &sv : nullptr, protos));
  return {d.value().data().begin(), d.value().data().end()};
}

int select_domain(std::span<const double> d_sim) {
  if (d_sim.empty()) throw Error(ErrorKind::kShape, "select_domain: empty similarity vector");
  return argmax_row(d_sim);
}

std::vector<double> class_inference(std::span<const double> x_c, const Matrix& protos,
                                    std::span<const double> mask) {
  if (mask.size() != protos.rows()) {
    throw Error(ErrorKind::kShape, "class_inference: mask has " + std::to_string(mask.size()) +
                                       " entries for " + std::to_string(protos.rows()) + " prototypes");
  }
  if (std::none_of(mask.begin(), mask.end(), [](double m) { return m != 0.0; })) {
    throw Error(ErrorKind::kData, "class_inference: every class prototype is masked");
  }
  Graph g;
  Var l = softmax_rows(cosine(g.constant(Matrix::row_vector(x_c)), g.constant(protos)), 0, mask);
  return {l.value().data().begin(), l.value().data().end()};
}

Inference infer(const Var& x_c, const Var& x_d, const Var* s, const PrototypeStore& store) {
  Graph& g = x_c.graph();
  const std::size_t batch = x_c.rows();
  const auto nc = static_cast<std::size_t>(store.n_classes);
  const std::size_t groups = store.n_groups();

  Inference out;
  out.scores = bilinear_scores(x_d, s, g.constant(store.domain_protos));
  out.d_sim = softmax_rows(out.scores);
  out.d_star.resize(batch);
  for (std::size_t i = 0; i < batch; ++i) out.d_star[i] = select_domain(out.d_sim.value().row(i));

  // Cosine against every class prototype, normalised within each group.
  Var probs = softmax_rows(cosine(x_c, g.constant(store.class_protos)), nc, store.class_mask);

  Matrix onehot(batch, groups);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t grp = store.pooled ? 0 : static_cast<std::size_t>(out.d_star[i]);
    bool any = false;
    for (std::size_t k = 0; k < nc; ++k) any = any || store.class_mask[grp * nc + k] != 0.0;
    if (!any) throw Error(ErrorKind::kData, "all classes masked for domain " + std::to_string(grp));
    onehot(i, grp) = 1.0;
  }
  Var weights = g.constant(std::move(onehot));
  if (!store.pooled && g.surrogate_gradients()) weights = add(weights, sub(out.d_sim, detach(out.d_sim)));

  Matrix expand(groups, groups * nc);
  Matrix fold(groups * nc, nc);
  for (std::size_t grp = 0; grp < groups; ++grp) {
    for (std::size_t k = 0; k < nc; ++k) {
      expand(grp, grp * nc + k) = 1.0;
      fold(grp * nc + k, k) = 1.0;
    }
  }
  Var gated = mul(probs, matmul(weights, g.constant(std::move(expand))));
  out.l = matmul(gated, g.constant(std::move(fold)));
  return out;
}

Embeddings embed(const ModelParams& params, std::span<const Sample> samples) {
  const std::size_t h = params.dims.hidden;
  Embeddings out{Matrix(samples.size(), h), Matrix(samples.size(), h)};
  for (std::size_t start = 0; start < samples.size(); start += kEmbedChunk) {
    const std::size_t n = std::min(kEmbedChunk, samples.size() - start);
    Matrix x(n, params.dims.input_dim);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& f = samples[start + i].features;
      if (f.size() != params.dims.input_dim) {
        throw Error(ErrorKind::kShape, "sample " + std::to_string(samples[start + i].id) + " has " +
                                           std::to_string(f.size()) + " features, model expects " +
                                           std::to_string(params.dims.input_dim));
      }
      std::copy(f.begin(), f.end(), x.row(i).begin());
    }
    Graph g;
    const BoundParams p = bind(g, params, false);
    const Disentangled z = disentangle(p, g.constant(std::move(x)));
    std::copy(z.x_c.value().data().begin(), z.x_c.value().data().end(), out.x_c.row(start).begin());
    std::copy(z.x_d.value().data().begin(), z.x_d.value().data().end(), out.x_d.row(start).begin());
  }
  return out;
}

PrototypeStore build_store(const Embeddings& emb, const SourceDomainSet& source, bool pooled) {
  std::vector<int> labels;
  labels.reserve(source.samples.size());
  for (const auto& s : source.samples) labels.push_back(s.label);
  PrototypeStore store;
  store.n_classes = source.n_classes;
  store.pooled = pooled;
  store.domain_protos = compute_domain_prototypes(emb.x_d, source.domain_ids, source.n_domains());
  ClassPrototypes cls = pooled
                            ? compute_class_prototypes(emb.x_c, std::vector<int>(labels.size(), 0), labels, 1,
                                                       source.n_classes)
                            : compute_class_prototypes(emb.x_c, source.domain_ids, labels, source.n_domains(),
                                                       source.n_classes);
  store.class_protos = std::move(cls.protos);
  store.class_mask = std::move(cls.mask);
  return store;
}

PrototypeStore build_store(const ModelParams& params, const SourceDomainSet& source, bool pooled) {
  return build_store(embed(params, source.samples), source, pooled);
}

std::vector<int> predict(const ModelParams& params, const PrototypeStore& store, const Embeddings& emb) {
  Graph g;
  Var s;
  if (params.bilinear) s = g.constant(params.s);
  const Inference inf = infer(g.constant(emb.x_c), g.constant(emb.x_d), params.bilinear ? &s : nullptr, store);
  std::vector<int> labels(emb.x_c.rows());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = argmax_row(inf.l.value().row(i));
  return labels;
}

std::vector<int> predict(const ModelParams& params, const PrototypeStore& store, std::span<const Sample> samples) {
  return predict(params, store, embed(params, samples));
}

void write_embeddings(const std::filesystem::path& path, std::span<const EmbeddingRow> rows) {
  std::ostringstream out;
  out << "sample_id,domain_id,split";
  if (!rows.empty()) {
    for (std::size_t c = 0; c < rows[0].x_d.size(); ++c) out << ",xd_" << c;
    for (std::size_t c = 0; c < rows[0].x_c.size(); ++c) out << ",xc_" << c;
  }
  out << '\n';
  for (const auto& r : rows) {
    out << r.sample_id << ',' << r.domain_id << ',' << r.split;
    for (double v : r.x_d) out << ',' << io::format_double(v);
    for (double v : r.x_c) out << ',' << io::format_double(v);
    out << '\n';
  }
  io::write_file(path, out.str());
}

void write_prototypes(const std::filesystem::path& path, const PrototypeStore& store) {
  std::ostringstream out;
  out << "kind,group,class,present";
  for (std::size_t c = 0; c < store.domain_protos.cols(); ++c) out << ",v_" << c;
  out << '\n';
  for (std::size_t n = 0; n < store.n_domains(); ++n) {
    out << "domain," << n << ",-1,1";
    for (double v : store.domain_protos.row(n)) out << ',' << io::format_double(v);
    out << '\n';
  }
  for (std::size_t grp = 0; grp < store.n_groups(); ++grp) {
    for (int k = 0; k < store.n_classes; ++k) {
      out << "class," << grp << ',' << k << ',' << (store.present(grp, k) ? 1 : 0);
      for (double v : store.class_proto(grp, k)) out << ',' << io::format_double(v);
      out << '\n';
    }
  }
  io::write_file(path, out.str());
}

nlohmann::json store_to_json(const PrototypeStore& store) {
  auto flat = [](const Matrix& m) { return std::vector<double>(m.data().begin(), m.data().end()); };
  return {{"n_classes", store.n_classes},
          {"pooled", store.pooled},
          {"hidden", store.domain_protos.cols()},
          {"n_domains", store.n_domains()},
          {"domain_protos", flat(store.domain_protos)},
          {"class_protos", flat(store.class_protos)},
          {"class_mask", store.class_mask}};
}

PrototypeStore store_from_json(const nlohmann::json& j) {
  try {
    PrototypeStore s;
    s.n_classes = j.at("n_classes").get<int>();
    s.pooled = j.at("pooled").get<bool>();
    const auto h = j.at("hidden").get<std::size_t>();
    const auto nd = j.at("n_domains").get<std::size_t>();
    if (s.n_classes < 2) throw Error(ErrorKind::kCheckpoint, "prototype store needs at least 2 classes");
    const std::size_t groups = s.pooled ? 1 : nd;
    const std::size_t rows = groups * static_cast<std::size_t>(s.n_classes);
    s.domain_protos = Matrix(nd, h, j.at("domain_protos").get<std::vector<double>>());
    s.class_protos = Matrix(rows, h, j.at("class_protos").get<std::vector<double>>());
    s.class_mask = j.at("class_mask").get<std::vector<double>>();
    if (s.class_mask.size() != rows) throw Error(ErrorKind::kCheckpoint, "class mask has the wrong length");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kCheckpoint, std::string("malformed prototype store: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kShape) throw Error(ErrorKind::kCheckpoint, e.what());
    throw;
  }
}

}  // namespace pldcp
