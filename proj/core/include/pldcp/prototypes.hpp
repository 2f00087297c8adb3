#pragma once

// Domain and class prototypes, similarity-based domain selection and
// cosine-softmax class inference.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pldcp/dataset.hpp"
#include "pldcp/network.hpp"
#include "pldcp/tensor.hpp"

namespace pldcp {

struct PrototypeStore {
  Matrix domain_protos;            // N_d x h, row n = mean x_d of domain n
  Matrix class_protos;             // (G * N_c) x h, row g * N_c + k
  std::vector<double> class_mask;  // 1 where (g, k) had samples, else 0
  int n_classes = 0;
  bool pooled = false;  // G = 1: class prototypes pooled over all domains

  std::size_t n_domains() const noexcept { return domain_protos.rows(); }
  std::size_t n_groups() const noexcept {
    return n_classes > 0 ? class_protos.rows() / static_cast<std::size_t>(n_classes) : 0;
  }
  std::span<const double> class_proto(std::size_t group, int k) const {
    return class_protos.row(group * static_cast<std::size_t>(n_classes) + static_cast<std::size_t>(k));
  }
  bool present(std::size_t group, int k) const {
    return class_mask[group * static_cast<std::size_t>(n_classes) + static_cast<std::size_t>(k)] != 0.0;
  }
};

/// Row n = mean of the rows of `x_d` whose domain id is n.
Matrix compute_domain_prototypes(const Matrix& x_d, std::span<const int> domain_ids, std::size_t n_domains);

struct ClassPrototypes {
  Matrix protos;             // (n_domains * n_classes) x h
  std::vector<double> mask;  // parallel to rows
};

/// Entry (n, k) = mean x_c over samples of domain n with label k; empty
/// pairs are zero rows with mask 0.
ClassPrototypes compute_class_prototypes(const Matrix& x_c, std::span<const int> domain_ids,
                                         std::span<const int> labels, std::size_t n_domains, int n_classes);

/// softmax over x_d^T S mu_n for every domain prototype; S == nullptr means
/// a plain dot product.
std::vector<double> domain_similarity(const Matrix* s, std::span<const double> x_d, const Matrix& domain_protos);

/// argmax, lowest index on ties.
int select_domain(std::span<const double> d_sim);

/// softmax over cos(x_c, mu_k) for the unmasked rows of `protos`
/// (n_classes x h); masked classes get probability 0.
std::vector<double> class_inference(std::span<const double> x_c, const Matrix& protos,
                                    std::span<const double> mask);

/// Graph form used both in training and at test time.
struct Inference {
  Var scores;                // B x N_d
  Var d_sim;                 // B x N_d
  std::vector<int> d_star;   // per row
  Var l;                     // B x N_c
};

/// Selects d* per row by hard argmax, then reads l off that domain's class
/// prototypes. When the graph has surrogate gradients enabled the selection
/// weights carry a straight-through term (one-hot + D_sim - detach(D_sim)),
/// whose forward value is exactly the one-hot, so S still receives gradient.
Inference infer(const Var& x_c, const Var& x_d, const Var* s, const PrototypeStore& store);

struct Embeddings {
  Matrix x_c;  // B x h
  Matrix x_d;  // B x h
};

/// Forward pass with frozen parameters, chunked to bound graph size.
Embeddings embed(const ModelParams& params, std::span<const Sample> samples);

/// Full recomputation over a source set with the given weights.
PrototypeStore build_store(const ModelParams& params, const SourceDomainSet& source, bool pooled);
PrototypeStore build_store(const Embeddings& emb, const SourceDomainSet& source, bool pooled);

std::vector<int> predict(const ModelParams& params, const PrototypeStore& store, std::span<const Sample> samples);
std::vector<int> predict(const ModelParams& params, const PrototypeStore& store, const Embeddings& emb);

struct EmbeddingRow {
  std::size_t sample_id = 0;
  int domain_id = -1;  // -1 for target samples
  std::string split;   // "source" or "target"
  std::span<const double> x_d;
  std::span<const double> x_c;
};

/// CSV: sample_id,domain_id,split,xd_0..,xc_0..
void write_embeddings(const std::filesystem::path& path, std::span<const EmbeddingRow> rows);

/// CSV with one line per prototype: kind,group,class,present,v_0..
void write_prototypes(const std::filesystem::path& path, const PrototypeStore& store);

nlohmann::json store_to_json(const PrototypeStore& store);
PrototypeStore store_from_json(const nlohmann::json& j);

}  // namespace pldcp
