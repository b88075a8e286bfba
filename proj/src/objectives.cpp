#include "newtonmr/objectives.hpp"

#include "newtonmr/random.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace newtonmr {

namespace {

double stable_softplus(double t) {
  return std::log1p(std::exp(-std::abs(t))) + std::max(t, 0.0);
}

double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

std::vector<int> all_indices(Eigen::Index n) {
  std::vector<int> idx(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = static_cast<int>(i);
  return idx;
}

void check_subset(const std::vector<int>& idx, Eigen::Index n, const char* who) {
  if (idx.empty()) throw std::invalid_argument(std::string(who) + ": empty index set");
  for (int i : idx)
    if (i < 0 || i >= n)
      throw std::invalid_argument(std::string(who) + ": index out of range");
}

}  // namespace

Dataset load_csv(const std::string& path, bool has_labels, bool skip_header,
                 bool scale01) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open " + path);

  std::vector<std::vector<double>> rows;
  std::string line;
  size_t line_no = 0;
  bool skipped = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (skip_header && !skipped) {
      skipped = true;
      continue;
    }
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string field;
    size_t col = 0;
    while (std::getline(ss, field, ',')) {
      ++col;
      const char* s = field.c_str();
      char* end = nullptr;
      const double v = std::strtod(s, &end);
      while (end && *end == ' ') ++end;
      if (end == s || (end && *end != '\0'))
        throw std::runtime_error("load_csv: non-numeric field at row " +
                                 std::to_string(line_no) + ", column " +
                                 std::to_string(col));
      row.push_back(v);
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw std::runtime_error("load_csv: ragged row " + std::to_string(line_no) +
                               " (got " + std::to_string(row.size()) + " fields, expected " +
                               std::to_string(rows.front().size()) + ")");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("load_csv: no data rows in " + path);

  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  Eigen::Index p = static_cast<Eigen::Index>(rows.front().size());
  if (has_labels) {
    if (p < 2) throw std::runtime_error("load_csv: label column requires >= 2 columns");
    p -= 1;
  }

  Dataset ds;
  ds.features.resize(n, p);
  ds.has_labels = has_labels;
  if (has_labels) ds.labels.resize(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = rows[static_cast<size_t>(i)];
    for (Eigen::Index j = 0; j < p; ++j)
      ds.features(i, j) = row[static_cast<size_t>(j)];
    if (has_labels) {
      const double lab = row.back();
      if (lab != std::floor(lab))
        throw std::runtime_error("load_csv: non-integer label at row " +
                                 std::to_string(i + 1));
      ds.labels[static_cast<size_t>(i)] = static_cast<int>(lab);
    }
  }

  if (scale01 && ds.features.size() > 0) {
    const double lo = ds.features.minCoeff();
    const double hi = ds.features.maxCoeff();
    if (hi > lo)
      ds.features = ((ds.features.array() - lo) / (hi - lo)).matrix();
    else
      ds.features.setZero();
  }
  if (!ds.features.allFinite())
    throw std::runtime_error("load_csv: non-finite feature value in " + path);
  return ds;
}

Problem make_quadratic(const SymMatrix& a, const Vector& c) {
  if (a.dim() != c.size())
    throw std::invalid_argument("make_quadratic: dimension mismatch");
  Eigen::LLT<Matrix> llt(a.mat());
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("make_quadratic: matrix is not positive definite");

  auto am = std::make_shared<const Matrix>(a.mat());
  auto cv = std::make_shared<const Vector>(c);

  Problem prob;
  prob.dim = a.dim();
  prob.n_components = 1;
  prob.f = [am, cv](const Vector& x) {
    return 0.5 * x.dot(*am * x) - cv->dot(x);
  };
  prob.grad = [am, cv](const Vector& x) -> Vector { return *am * x - *cv; };
  prob.hvp = [am](const Vector&, const Vector& v) -> Vector { return *am * v; };
  prob.grad_sum = [g = prob.grad](const Vector& x, const std::vector<int>& idx) -> Vector {
    check_subset(idx, 1, "quadratic grad_sum");
    return g(x);
  };
  prob.hvp_sum = [am](const Vector&, const Vector& v, const std::vector<int>& idx) -> Vector {
    check_subset(idx, 1, "quadratic hvp_sum");
    return *am * v;
  };
  return prob;
}

Problem make_fraction(double a, double b) {
  Problem prob;
  prob.dim = 2;
  prob.n_components = 1;
  prob.in_domain = [b](const Vector& x) { return x(1) != b; };
  // The domain splits at the hyperplane x2 = b; a segment stays inside iff
  // both endpoints lie strictly on the same side.
  prob.path_in_domain = [b](const Vector& from, const Vector& to) {
    return (b - from(1)) * (b - to(1)) > 0.0;
  };
  prob.f = [a, b](const Vector& x) { return a * x(0) * x(0) / (b - x(1)); };
  prob.grad = [a, b](const Vector& x) -> Vector {
    const double tau = b - x(1);
    Vector g(2);
    g(0) = 2.0 * a * x(0) / tau;
    g(1) = a * x(0) * x(0) / (tau * tau);
    return g;
  };
  prob.hvp = [a, b](const Vector& x, const Vector& v) -> Vector {
    const double tau = b - x(1);
    const double h11 = 2.0 * a / tau;
    const double h12 = 2.0 * a * x(0) / (tau * tau);
    const double h22 = 2.0 * a * x(0) * x(0) / (tau * tau * tau);
    Vector out(2);
    out(0) = h11 * v(0) + h12 * v(1);
    out(1) = h12 * v(0) + h22 * v(1);
    return out;
  };
  prob.grad_sum = [g = prob.grad](const Vector& x, const std::vector<int>& idx) -> Vector {
    check_subset(idx, 1, "fraction grad_sum");
    return g(x);
  };
  prob.hvp_sum = [h = prob.hvp](const Vector& x, const Vector& v,
                                const std::vector<int>& idx) -> Vector {
    check_subset(idx, 1, "fraction hvp_sum");
    return h(x, v);
  };
  return prob;
}

namespace {

struct SoftmaxCore {
  Matrix a;  // n x p
  std::vector<int> labels;
  Eigen::Index num_classes;

  Eigen::Index n() const { return a.rows(); }
  Eigen::Index p() const { return a.cols(); }
  Eigen::Index k() const { return num_classes - 1; }  // free class blocks
  Eigen::Index dim() const { return k() * p(); }

  Eigen::Map<const Matrix> unflatten(const Vector& x) const {
    return Eigen::Map<const Matrix>(x.data(), p(), k());
  }

  // Row-wise softmax pieces for the selected rows: logits z, log-partition
  // lse, probabilities h (against the implicit zero logit of class 0).
  void forward(const Matrix& rows, const Matrix& xm, Matrix& z, Vector& lse,
               Matrix& h) const {
    z = rows * xm;  // s x k
    lse.resize(z.rows());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      double m = 0.0;  // class 0 logit
      for (Eigen::Index c = 0; c < z.cols(); ++c) m = std::max(m, z(i, c));
      double acc = std::exp(-m);
      for (Eigen::Index c = 0; c < z.cols(); ++c) acc += std::exp(z(i, c) - m);
      lse(i) = m + std::log(acc);
    }
    h = (z.colwise() - lse).array().exp();
  }

  Matrix gather(const std::vector<int>& idx) const {
    Matrix rows(static_cast<Eigen::Index>(idx.size()), p());
    for (size_t i = 0; i < idx.size(); ++i)
      rows.row(static_cast<Eigen::Index>(i)) = a.row(idx[i]);
    return rows;
  }

  double value(const Vector& x, const Matrix& rows, const std::vector<int>& idx) const {
    Matrix z, h;
    Vector lse;
    forward(rows, unflatten(x), z, lse, h);
    double fval = lse.sum();
    for (size_t i = 0; i < idx.size(); ++i) {
      const int lab = labels[static_cast<size_t>(idx[i])];
      if (lab >= 1) fval -= z(static_cast<Eigen::Index>(i), lab - 1);
    }
    return fval;
  }

  Vector gradient(const Vector& x, const Matrix& rows, const std::vector<int>& idx) const {
    Matrix z, h;
    Vector lse;
    forward(rows, unflatten(x), z, lse, h);
    for (size_t i = 0; i < idx.size(); ++i) {
      const int lab = labels[static_cast<size_t>(idx[i])];
      if (lab >= 1) h(static_cast<Eigen::Index>(i), lab - 1) -= 1.0;
    }
    Matrix gm = rows.transpose() * h;  // p x k
    return Eigen::Map<Vector>(gm.data(), dim());
  }

  Vector hess_vec(const Vector& x, const Vector& v, const Matrix& rows) const {
    Matrix z, h;
    Vector lse;
    forward(rows, unflatten(x), z, lse, h);
    const Matrix s = rows * unflatten(v);          // s x k
    const Vector mix = (h.array() * s.array()).rowwise().sum();  // h_i . s_i
    const Matrix weighted = h.array() * (s.colwise() - mix).array();
    Matrix hm = rows.transpose() * weighted;  // p x k
    return Eigen::Map<Vector>(hm.data(), dim());
  }
};

}  // namespace

Problem make_softmax(const Dataset& data, int num_classes) {
  if (!data.has_labels)
    throw std::invalid_argument("make_softmax: dataset has no labels");
  if (num_classes < 2)
    throw std::invalid_argument("make_softmax: need at least two classes");
  if (data.n() < 1) throw std::invalid_argument("make_softmax: empty dataset");
  for (int lab : data.labels)
    if (lab < 0 || lab >= num_classes)
      throw std::invalid_argument("make_softmax: label outside [0, C)");

  auto core = std::make_shared<const SoftmaxCore>(
      SoftmaxCore{data.features, data.labels, num_classes});

  Problem prob;
  prob.dim = core->dim();
  prob.n_components = core->n();
  prob.f = [core](const Vector& x) {
    return core->value(x, core->a, all_indices(core->n()));
  };
  prob.grad = [core](const Vector& x) {
    return core->gradient(x, core->a, all_indices(core->n()));
  };
  prob.hvp = [core](const Vector& x, const Vector& v) {
    return core->hess_vec(x, v, core->a);
  };
  prob.grad_sum = [core](const Vector& x, const std::vector<int>& idx) {
    check_subset(idx, core->n(), "softmax grad_sum");
    return core->gradient(x, core->gather(idx), idx);
  };
  prob.hvp_sum = [core](const Vector& x, const Vector& v, const std::vector<int>& idx) {
    check_subset(idx, core->n(), "softmax hvp_sum");
    return core->hess_vec(x, v, core->gather(idx));
  };
  return prob;
}

namespace {

struct GmmCore {
  Matrix at;  // p x n, data points as columns
  Matrix sigma1, sigma2;
  Eigen::LLT<Matrix> llt1, llt2;
  double log_norm1 = 0.0, log_norm2 = 0.0;  // log of the Gaussian normalizers

  Eigen::Index p() const { return at.rows(); }
  Eigen::Index n() const { return at.cols(); }
  Eigen::Index dim() const { return 2 * p() + 1; }

  struct Eval {
    double zeta = 0.0, dzeta = 0.0;
    Matrix s1, s2;   // p x s: Sigma_j^{-1} (a_i - mean_j)
    Vector r1;       // responsibilities of component 1
    Vector lse;      // per-point log mixture density
  };

  Matrix gather(const std::vector<int>& idx) const {
    Matrix cols(p(), static_cast<Eigen::Index>(idx.size()));
    for (size_t i = 0; i < idx.size(); ++i)
      cols.col(static_cast<Eigen::Index>(i)) = at.col(idx[i]);
    return cols;
  }

  Eval evaluate(const Vector& x, const Matrix& pts) const {
    Eval e;
    const double w = x(0);
    const Vector u = x.segment(1, p());
    const Vector v = x.segment(1 + p(), p());
    e.zeta = sigmoid(w);
    e.dzeta = e.zeta * (1.0 - e.zeta);

    const Matrix c1 = pts.colwise() - u;
    const Matrix c2 = pts.colwise() - v;
    e.s1 = llt1.solve(c1);
    e.s2 = llt2.solve(c2);

    const Eigen::Index s = pts.cols();
    e.r1.resize(s);
    e.lse.resize(s);
    for (Eigen::Index i = 0; i < s; ++i) {
      const double q1 = c1.col(i).dot(e.s1.col(i));
      const double q2 = c2.col(i).dot(e.s2.col(i));
      const double z1 = -stable_softplus(-w) + log_norm1 - 0.5 * q1;
      const double z2 = -stable_softplus(w) + log_norm2 - 0.5 * q2;
      const double m = std::max(z1, z2);
      e.lse(i) = m + std::log1p(std::exp(-std::abs(z1 - z2)));
      e.r1(i) = sigmoid(z1 - z2);
    }
    return e;
  }
};

}  // namespace

Problem make_gmm(const Dataset& data, const SymMatrix& sigma1, const SymMatrix& sigma2) {
  const Eigen::Index p = data.p();
  if (sigma1.dim() != p || sigma2.dim() != p)
    throw std::invalid_argument("make_gmm: covariance dimension mismatch");
  if (data.n() < 1) throw std::invalid_argument("make_gmm: empty dataset");

  auto core = std::make_shared<GmmCore>();
  core->at = data.features.transpose();
  core->sigma1 = sigma1.mat();
  core->sigma2 = sigma2.mat();
  core->llt1.compute(sigma1.mat());
  core->llt2.compute(sigma2.mat());
  if (core->llt1.info() != Eigen::Success || core->llt2.info() != Eigen::Success)
    throw std::invalid_argument("make_gmm: covariances must be positive definite");
  const double half_log_2pi = 0.5 * std::log(2.0 * M_PI);
  auto log_det = [](const Eigen::LLT<Matrix>& llt) {
    return 2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum();
  };
  core->log_norm1 = -static_cast<double>(p) * half_log_2pi - 0.5 * log_det(core->llt1);
  core->log_norm2 = -static_cast<double>(p) * half_log_2pi - 0.5 * log_det(core->llt2);

  const Eigen::Index dim = core->dim();
  auto check_x = [dim](const Vector& x) {
    if (x.size() != dim) throw std::invalid_argument("gmm: bad parameter size");
  };

  auto value = [core, check_x](const Vector& x, const Matrix& pts) {
    check_x(x);
    return -core->evaluate(x, pts).lse.sum();
  };

  auto gradient = [core, check_x](const Vector& x, const Matrix& pts) -> Vector {
    check_x(x);
    const auto e = core->evaluate(x, pts);
    const Eigen::Index p = core->p();
    Vector g(core->dim());
    g(0) = -(e.r1.sum() - e.zeta * static_cast<double>(pts.cols()));
    g.segment(1, p) = -(e.s1 * e.r1);
    g.segment(1 + p, p) = -(e.s2 * (Vector::Ones(pts.cols()) - e.r1));
    return g;
  };

  auto hess_vec = [core, check_x](const Vector& x, const Vector& vec,
                                  const Matrix& pts) -> Vector {
    check_x(x);
    const auto e = core->evaluate(x, pts);
    const Eigen::Index p = core->p();
    const Eigen::Index s = pts.cols();
    const double vw = vec(0);
    const Vector vu = vec.segment(1, p);
    const Vector vv = vec.segment(1 + p, p);
    const Vector t1 = core->llt1.solve(vu);
    const Vector t2 = core->llt2.solve(vv);

    const Vector r1 = e.r1;
    const Vector r2 = Vector::Ones(s) - r1;
    Vector d1 = e.s1.transpose() * vu;
    d1.array() += (1.0 - e.zeta) * vw;
    Vector d2 = e.s2.transpose() * vv;
    d2.array() += -e.zeta * vw;
    const Vector dbar =
        (r1.array() * d1.array() + r2.array() * d2.array()).matrix();

    Vector out(core->dim());
    // w block: curvature of the mixing weight plus alignment terms
    double w_acc = static_cast<double>(s) * e.dzeta * vw;
    w_acc -= ((1.0 - e.zeta) * (r1.array() * d1.array()).sum() -
              e.zeta * (r2.array() * d2.array()).sum() -
              (dbar.array() * (r1.array() - e.zeta)).sum());
    out(0) = w_acc;
    out.segment(1, p) =
        r1.sum() * t1 - e.s1 * (r1.array() * (d1 - dbar).array()).matrix();
    out.segment(1 + p, p) =
        r2.sum() * t2 - e.s2 * (r2.array() * (d2 - dbar).array()).matrix();
    return out;
  };

  Problem prob;
  prob.dim = dim;
  prob.n_components = core->n();
  prob.f = [core, value](const Vector& x) { return value(x, core->at); };
  prob.grad = [core, gradient](const Vector& x) { return gradient(x, core->at); };
  prob.hvp = [core, hess_vec](const Vector& x, const Vector& v) {
    return hess_vec(x, v, core->at);
  };
  prob.grad_sum = [core, gradient](const Vector& x, const std::vector<int>& idx) {
    check_subset(idx, core->n(), "gmm grad_sum");
    return gradient(x, core->gather(idx));
  };
  prob.hvp_sum = [core, hess_vec](const Vector& x, const Vector& v,
                                  const std::vector<int>& idx) {
    check_subset(idx, core->n(), "gmm hvp_sum");
    return hess_vec(x, v, core->gather(idx));
  };
  return prob;
}

Vector GmmGroundTruth::stacked() const {
  Vector x(1 + u.size() + v.size());
  x(0) = w;
  x.segment(1, u.size()) = u;
  x.segment(1 + u.size(), v.size()) = v;
  return x;
}

std::pair<Dataset, GmmGroundTruth> gen_gmm_data(Eigen::Index p, Eigen::Index n,
                                                double cond, std::uint64_t seed) {
  if (p < 1 || n < 1) throw std::invalid_argument("gen_gmm_data: p, n must be >= 1");
  if (cond < 1.0) throw std::invalid_argument("gen_gmm_data: cond must be >= 1");

  Rng rng(seed);
  GmmGroundTruth truth;
  truth.w = rng.normal();
  truth.u = rng.uniform_matrix(p, 1, -1.0, 1.0).col(0);
  truth.v = rng.uniform_matrix(p, 1, 3.0, 4.0).col(0);

  // Diagonal spectrum equidistant on [1, cond] so cond(Sigma_j) == cond.
  Vector d(p);
  for (Eigen::Index j = 0; j < p; ++j)
    d(j) = p == 1 ? cond : 1.0 + static_cast<double>(j) * (cond - 1.0) / static_cast<double>(p - 1);

  auto orthonormal = [](const Matrix& raw) -> Matrix {
    Eigen::HouseholderQR<Matrix> qr(raw);
    return Matrix(qr.householderQ());
  };
  const Matrix q1 = orthonormal(rng.normal_matrix(p, p));
  const Matrix q2 = orthonormal(rng.uniform_matrix(p, p));
  truth.sigma1 = SymMatrix(q1.transpose() * d.cwiseInverse().asDiagonal() * q1);
  truth.sigma2 = SymMatrix(q2.transpose() * d.cwiseInverse().asDiagonal() * q2);

  const Matrix l1 = Eigen::LLT<Matrix>(truth.sigma1.mat()).matrixL();
  const Matrix l2 = Eigen::LLT<Matrix>(truth.sigma2.mat()).matrixL();
  const double zeta = sigmoid(truth.w);

  Dataset ds;
  ds.features.resize(n, p);
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool first = rng.uniform() < zeta;
    const Vector z = rng.normal_vector(p);
    const Vector point = first ? Vector(truth.u + l1 * z) : Vector(truth.v + l2 * z);
    ds.features.row(i) = point.transpose();
  }
  return {std::move(ds), std::move(truth)};
}

double estimation_error(const Vector& x, const GmmGroundTruth& truth) {
  const Eigen::Index p = truth.u.size();
  if (x.size() != 2 * p + 1)
    throw std::invalid_argument("estimation_error: dimension mismatch");
  if (truth.w == 0.0)
    throw std::invalid_argument("estimation_error: ground-truth w is zero");
  Vector means_true(2 * p), means_est(2 * p);
  means_true << truth.u, truth.v;
  means_est << x.segment(1, p), x.segment(1 + p, p);
  const double mean_norm = means_true.norm();
  if (mean_norm == 0.0)
    throw std::invalid_argument("estimation_error: ground-truth means are zero");
  return 0.5 * (std::abs(x(0) - truth.w) / std::abs(truth.w) +
                (means_est - means_true).norm() / mean_norm);
}

std::vector<int> SampleSelector::draw(Eigen::Index n, int iteration) const {
  if (fraction <= 0.0 || fraction > 1.0)
    throw std::invalid_argument("SampleSelector: fraction must be in (0, 1]");
  const int nn = static_cast<int>(n);
  int k = static_cast<int>(std::llround(fraction * static_cast<double>(nn)));
  k = std::max(1, std::min(k, nn));
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(iteration)));
  return rng.sample_without_replacement(nn, k);
}

LinearOperator hessian_operator(const Problem& prob, const Vector& x) {
  if (!prob.hvp) throw std::invalid_argument("hessian_operator: problem lacks hvp");
  return LinearOperator(
      prob.dim, [hvp = prob.hvp, x](const Vector& v) { return hvp(x, v); }, 2.0);
}

LinearOperator subsampled_operator(const Problem& prob, const Vector& x,
                                   const std::vector<int>& indices) {
  if (!prob.hvp_sum)
    throw std::invalid_argument("subsampled_operator: problem lacks hvp_sum");
  check_subset(indices, prob.n_components, "subsampled_operator");
  const double scale =
      static_cast<double>(prob.n_components) / static_cast<double>(indices.size());
  const double cost =
      2.0 * static_cast<double>(indices.size()) / static_cast<double>(prob.n_components);
  return LinearOperator(
      prob.dim,
      [hvp_sum = prob.hvp_sum, x, indices, scale](const Vector& v) -> Vector {
        return scale * hvp_sum(x, v, indices);
      },
      cost);
}

}  // namespace newtonmr
