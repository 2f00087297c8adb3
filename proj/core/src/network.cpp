#include "pldcp/network.hpp"

#include <cmath>
#include <random>

#include "pldcp/error.hpp"

namespace pldcp {

namespace {

Dense glorot(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Dense d{Matrix(in, out), Matrix(1, out)};
  for (double& v : d.weight.data()) v = dist(rng);
  return d;
}

}  // namespace

ModelParams ModelParams::init(const NetworkDims& dims, std::uint64_t seed) {
  if (dims.input_dim == 0 || dims.shallow_hidden == 0 || dims.hidden == 0 || dims.n_classes < 2 ||
      dims.n_domains < 1) {
    throw Error(ErrorKind::kConfig, "network dims must be positive with at least 2 classes");
  }
  std::mt19937_64 rng(seed);
  ModelParams p;
  p.dims = dims;
  const auto n_c = static_cast<std::size_t>(dims.n_classes);
  const auto n_d = static_cast<std::size_t>(dims.n_domains);
  p.g1 = glorot(dims.input_dim, dims.shallow_hidden, rng);
  p.g2 = glorot(dims.shallow_hidden, dims.hidden, rng);
  p.fc = glorot(dims.hidden, dims.hidden, rng);
  p.fd = glorot(dims.hidden, dims.hidden, rng);
  p.dc = glorot(dims.hidden, n_c, rng);
  p.dd = glorot(dims.hidden, n_d, rng);
  p.s = Matrix(dims.hidden, dims.hidden);
  std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(dims.hidden)));
  for (double& v : p.s.data()) v = gauss(rng);
  return p;
}

std::vector<std::pair<std::string, Matrix*>> ModelParams::tensors() {
  return {{"g1.weight", &g1.weight}, {"g1.bias", &g1.bias}, {"g2.weight", &g2.weight},
          {"g2.bias", &g2.bias},     {"fc.weight", &fc.weight}, {"fc.bias", &fc.bias},
          {"fd.weight", &fd.weight}, {"fd.bias", &fd.bias}, {"dc.weight", &dc.weight},
          {"dc.bias", &dc.bias},     {"dd.weight", &dd.weight}, {"dd.bias", &dd.bias},
          {"s", &s}};
}

std::vector<std::pair<std::string, const Matrix*>> ModelParams::tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& [name, m] : const_cast<ModelParams*>(this)->tensors()) out.emplace_back(name, m);
  return out;
}

bool ModelParams::all_finite() const {
  for (const auto& [name, m] : tensors())
    if (!m->all_finite()) return false;
  return true;
}

std::vector<Var> BoundParams::all() const {
  return {g1.weight, g1.bias, g2.weight, g2.bias, fc.weight, fc.bias, fd.weight,
          fd.bias,   dc.weight, dc.bias, dd.weight, dd.bias, s};
}

BoundParams bind(Graph& graph, const ModelParams& params, bool trainable) {
  auto leaf = [&](const Matrix& m) { return trainable ? graph.parameter(m) : graph.constant(m); };
  auto layer = [&](const Dense& d) { return BoundDense{leaf(d.weight), leaf(d.bias)}; };
  BoundParams b;
  b.g1 = layer(params.g1);
  b.g2 = layer(params.g2);
  b.fc = layer(params.fc);
  b.fd = layer(params.fd);
  b.dc = layer(params.dc);
  b.dd = layer(params.dd);
  b.s = leaf(params.s);
  b.leaky_slope = params.dims.leaky_slope;
  b.bilinear = params.bilinear;
  return b;
}

BoundParams bind_vars(std::span<const Var> vars, double leaky_slope, bool bilinear) {
  if (vars.size() != 13) {
    throw Error(ErrorKind::kShape, "bind_vars: expected 13 tensors, got " + std::to_string(vars.size()));
  }
  BoundParams b;
  b.g1 = {vars[0], vars[1]};
  b.g2 = {vars[2], vars[3]};
  b.fc = {vars[4], vars[5]};
  b.fd = {vars[6], vars[7]};
  b.dc = {vars[8], vars[9]};
  b.dd = {vars[10], vars[11]};
  b.s = vars[12];
  b.leaky_slope = leaky_slope;
  b.bilinear = bilinear;
  return b;
}

Var dense(const BoundDense& layer, const Var& x) { return add_row(matmul(x, layer.weight), layer.bias); }

Var shallow(const BoundParams& p, const Var& x) {
  Var h = leaky_relu(dense(p.g1, x), p.leaky_slope);
  return leaky_relu(dense(p.g2, h), p.leaky_slope);
}

Disentangled disentangle(const BoundParams& p, const Var& x) {
  Var h = shallow(p, x);
  return {dense(p.fc, h), dense(p.fd, h)};
}

Var discriminate(const BoundDense& head, const Var& v) { return sigmoid(dense(head, v)); }

double bilinear_sim(const Matrix& s, std::span<const double> x_d, std::span<const double> mu) {
  if (s.rows() != s.cols() || x_d.size() != s.rows() || mu.size() != s.cols()) {
    throw Error(ErrorKind::kShape, "bilinear_sim: S is " + s.shape_string() + ", x_d has " +
                                       std::to_string(x_d.size()) + " and mu " + std::to_string(mu.size()) +
                                       " entries");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    if (x_d[i] == 0.0) continue;
    total += x_d[i] * la::dot(s.row(i), mu);
  }
  return total;
}

Var bilinear_scores(const Var& x_d, const Var* s, const Var& prototypes) {
  Var projected = s ? matmul(x_d, *s) : x_d;
  return matmul(projected, transpose(prototypes));
}

// ---------------------------------------------------------------------------
// Serialisation

namespace {

nlohmann::json matrix_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()},
          {"data", std::vector<double>(m.data().begin(), m.data().end())}};
}

Matrix matrix_from(const nlohmann::json& j, const std::string& name, std::size_t rows, std::size_t cols) {
  const auto r = j.at("rows").get<std::size_t>();
  const auto c = j.at("cols").get<std::size_t>();
  if (r != rows || c != cols) {
    throw Error(ErrorKind::kCheckpoint, "tensor " + name + " is " + std::to_string(r) + "x" +
                                            std::to_string(c) + ", config expects " + std::to_string(rows) +
                                            "x" + std::to_string(cols));
  }
  auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != r * c) {
    throw Error(ErrorKind::kCheckpoint, "tensor " + name + " has " + std::to_string(data.size()) +
                                            " values for shape " + std::to_string(r) + "x" + std::to_string(c));
  }
  return Matrix(r, c, std::move(data));
}

}  // namespace

nlohmann::json params_to_json(const ModelParams& p) {
  nlohmann::json j;
  j["dims"] = {{"input_dim", p.dims.input_dim},     {"shallow_hidden", p.dims.shallow_hidden},
               {"hidden", p.dims.hidden},           {"n_classes", p.dims.n_classes},
               {"n_domains", p.dims.n_domains},     {"leaky_slope", p.dims.leaky_slope}};
  j["bilinear"] = p.bilinear;
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, m] : p.tensors()) tensors[name] = matrix_json(*m);
  j["tensors"] = std::move(tensors);
  return j;
}

ModelParams params_from_json(const nlohmann::json& j) {
  try {
    NetworkDims dims;
    const auto& d = j.at("dims");
    dims.input_dim = d.at("input_dim").get<std::size_t>();
    dims.shallow_hidden = d.at("shallow_hidden").get<std::size_t>();
    dims.hidden = d.at("hidden").get<std::size_t>();
    dims.n_classes = d.at("n_classes").get<int>();
    dims.n_domains = d.at("n_domains").get<int>();
    dims.leaky_slope = d.at("leaky_slope").get<double>();

    // Shapes come from a freshly initialised model with the same dims.
    ModelParams p = ModelParams::init(dims, 0);
    p.bilinear = j.at("bilinear").get<bool>();
    const auto& tensors = j.at("tensors");
    for (auto& [name, m] : p.tensors()) {
      if (!tensors.contains(name)) throw Error(ErrorKind::kCheckpoint, "missing tensor " + name);
      *m = matrix_from(tensors.at(name), name, m->rows(), m->cols());
    }
    if (!p.all_finite()) throw Error(ErrorKind::kCheckpoint, "checkpoint holds non-finite weights");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kCheckpoint, std::string("malformed model parameters: ") + e.what());
  }
}

}  // namespace pldcp
