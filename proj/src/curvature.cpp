#include "invflip/curvature.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "invflip/util.hpp"
#include "json.hpp"

namespace invflip {

using ojson = nlohmann::ordered_json;

std::string kind_name(CurvatureKind k) {
  switch (k) {
    case CurvatureKind::exact_hessian: return "exact_hessian";
    case CurvatureKind::gauss_newton: return "gauss_newton";
    case CurvatureKind::ekfac: return "ekfac";
  }
  return "?";
}

CurvatureKind parse_kind(const std::string& s) {
  if (s == "exact_hessian" || s == "exact") return CurvatureKind::exact_hessian;
  if (s == "gauss_newton" || s == "gn") return CurvatureKind::gauss_newton;
  if (s == "ekfac") return CurvatureKind::ekfac;
  throw Error("unknown curvature kind: " + s);
}

double default_damping(double trace, std::size_t d) { return 1e-3 * trace / static_cast<double>(d); }

double CurvatureOperator::payload_trace() const {
  if (kind != CurvatureKind::ekfac) return dense.trace();
  double t = l2 * static_cast<double>(d);
  for (auto& L : layers) t += L.lambda.sum();
  return t;
}

std::string CurvatureOperator::content_hash() const {
  return sha256_hex(classifier_hash + "|" + dataset_hash + "|" + kind_name(kind) + "|" +
                    (labels == EkfacLabels::empirical ? "empirical" : "model_expected"));
}

static void factorize(CurvatureOperator& op) {
  if (op.kind == CurvatureKind::ekfac) return;
  Eigen::MatrixXd M = op.dense;
  M.diagonal().array() += op.lambda;
  auto f = std::make_shared<Eigen::LDLT<Eigen::MatrixXd>>(M);
  if (f->info() != Eigen::Success) throw Error("curvature: factorization failed");
  if (op.lambda <= 0) {
    Eigen::LLT<Eigen::MatrixXd> llt(M);
    if (llt.info() != Eigen::Success) throw Error("curvature: payload is not positive definite and lambda = 0");
  }
  op.factor = std::move(f);
}

static void finish_dense(CurvatureOperator& op, const CurvatureOptions& o) {
  op.lambda = o.lambda ? *o.lambda : default_damping(op.dense.trace(), op.d);
  if (op.lambda < 0) throw Error("curvature: negative damping");
  op.dense = 0.5 * (op.dense + op.dense.transpose());
  factorize(op);
}

static void check_cap(const Classifier& c, const CurvatureOptions& o) {
  if (c.dim() > o.dense_cap)
    throw Error("curvature: d = " + std::to_string(c.dim()) + " exceeds dense cap " + std::to_string(o.dense_cap) +
                "; use ekfac or the CG path");
}

static CurvatureOperator base_op(CurvatureKind k, const Classifier& c, const Featurized& data, double l2) {
  CurvatureOperator op;
  op.kind = k;
  op.d = c.dim();
  op.l2 = l2;
  op.n_train = data.size();
  op.classifier_hash = classifier_hash(c);
  return op;
}

CurvatureOperator exact_hessian(const Classifier& c, const Featurized& data, double l2, const CurvatureOptions& o) {
  check_cap(c, o);
  auto op = base_op(CurvatureKind::exact_hessian, c, data, l2);
  if (c.arch.kind == Arch::linear) {
    op.dense = linear_hessian(c, data, l2);
  } else {
    const auto d = static_cast<Eigen::Index>(op.d);
    op.dense.resize(d, d);
    for (Eigen::Index i = 0; i < d; ++i) op.dense.col(i) = objective_hvp(c, data, l2, Eigen::VectorXd::Unit(d, i));
  }
  finish_dense(op, o);
  return op;
}

CurvatureOperator gauss_newton(const Classifier& c, const Featurized& data, double l2, const CurvatureOptions& o) {
  check_cap(c, o);
  auto op = base_op(CurvatureKind::gauss_newton, c, data, l2);
  const auto d = static_cast<Eigen::Index>(op.d);
  op.dense = Eigen::MatrixXd::Zero(d, d);
  const double w = 1.0 / static_cast<double>(data.size());
  for (std::size_t n = 0; n < data.size(); ++n) {
    auto p = forward(c, data.x[n]).probs;
    Eigen::MatrixXd Hy = Eigen::MatrixXd(p.asDiagonal()) - p * p.transpose();
    Eigen::MatrixXd J = logit_jacobian(c, data.x[n]);
    op.dense.noalias() += w * J.transpose() * Hy * J;
  }
  op.dense.diagonal().array() += l2;
  finish_dense(op, o);
  return op;
}

EkfacLayer ekfac_layer_from_samples(const LayerDesc& desc, const std::vector<KfacSample>& s) {
  const Eigen::Index in1 = desc.in + 1, out = desc.out;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(in1, in1), G = Eigen::MatrixXd::Zero(out, out);
  for (auto& x : s) {
    A.noalias() += x.w * x.a * x.a.transpose();
    G.noalias() += x.w * x.delta * x.delta.transpose();
  }
  EkfacLayer L;
  L.desc = desc;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(A), eg(G);
  L.QA = ea.eigenvectors();
  L.evA = ea.eigenvalues();
  L.QG = eg.eigenvectors();
  L.evG = eg.eigenvalues();
  L.lambda = Eigen::MatrixXd::Zero(out, in1);
  for (auto& x : s) {
    Eigen::VectorXd pa = L.QA.transpose() * x.a;
    Eigen::VectorXd pg = L.QG.transpose() * x.delta;
    L.lambda.noalias() += x.w * (pg.array().square().matrix() * pa.array().square().matrix().transpose());
  }
  return L;
}

CurvatureOperator ekfac_fit(const Classifier& c, const Featurized& data, double l2, const CurvatureOptions& o) {
  auto op = base_op(CurvatureKind::ekfac, c, data, l2);
  op.labels = o.labels;
  auto descs = c.layers();
  std::vector<std::vector<KfacSample>> samples(descs.size());
  const double w = 1.0 / static_cast<double>(data.size());
  const int K = c.K(), F = c.F();
  for (std::size_t n = 0; n < data.size(); ++n) {
    auto act = forward(c, data.x[n]);
    Eigen::VectorXd a0 = Eigen::VectorXd::Zero(F + 1);
    for (auto& [j, xj] : data.x[n]) a0[j] = xj;
    a0[F] = 1.0;
    std::vector<std::pair<int, double>> ys;
    if (o.labels == EkfacLabels::empirical) ys.emplace_back(data.y[n], 1.0);
    else
      for (int y = 0; y < K; ++y) ys.emplace_back(y, act.probs[y]);
    for (auto& [y, py] : ys) {
      Eigen::VectorXd d2 = act.probs;
      d2[y] -= 1.0;
      if (c.arch.kind == Arch::linear) {
        samples[0].push_back({a0, d2, w * py});
      } else {
        const int H = c.arch.hidden;
        Eigen::VectorXd a1(H + 1);
        a1.head(H) = act.hidden;
        a1[H] = 1.0;
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W2(
            c.theta.data() + descs[1].w_offset, K, H);
        Eigen::VectorXd d1 = (W2.transpose() * d2).array() * (1.0 - act.hidden.array().square());
        samples[0].push_back({a0, d1, w * py});
        samples[1].push_back({a1, d2, w * py});
      }
    }
  }
  for (std::size_t l = 0; l < descs.size(); ++l) op.layers.push_back(ekfac_layer_from_samples(descs[l], samples[l]));
  op.lambda = o.lambda ? *o.lambda : default_damping(op.payload_trace(), op.d);
  if (op.lambda < 0) throw Error("curvature: negative damping");
  if (op.lambda == 0 && op.l2 == 0) {
    for (auto& L : op.layers)
      if (L.lambda.minCoeff() <= 0) throw Error("ekfac: rank-deficient factors and no damping");
  }
  return op;
}

CurvatureOperator build_operator(CurvatureKind kind, const Classifier& c, const Featurized& data, double l2,
                                 const CurvatureOptions& o) {
  switch (kind) {
    case CurvatureKind::exact_hessian: return exact_hessian(c, data, l2, o);
    case CurvatureKind::gauss_newton: return gauss_newton(c, data, l2, o);
    case CurvatureKind::ekfac: return ekfac_fit(c, data, l2, o);
  }
  throw Error("bad kind");
}

CurvatureOperator dense_operator(const Eigen::MatrixXd& payload, double lambda, CurvatureKind kind) {
  if (payload.rows() != payload.cols()) throw Error("dense_operator: payload not square");
  CurvatureOperator op;
  op.kind = kind == CurvatureKind::ekfac ? CurvatureKind::exact_hessian : kind;
  op.d = static_cast<std::size_t>(payload.rows());
  op.dense = 0.5 * (payload + payload.transpose());
  op.lambda = lambda;
  factorize(op);
  return op;
}

CurvatureOperator with_damping(const CurvatureOperator& op, double lambda) {
  CurvatureOperator o = op;
  o.lambda = lambda;
  o.factor.reset();
  factorize(o);
  return o;
}

static Eigen::MatrixXd gather(const LayerDesc& L, const Eigen::VectorXd& v) {
  Eigen::MatrixXd V(L.out, L.in + 1);
  for (int o = 0; o < L.out; ++o) {
    for (int i = 0; i < L.in; ++i) V(o, i) = v[static_cast<Eigen::Index>(L.w_offset) + o * L.in + i];
    V(o, L.in) = v[static_cast<Eigen::Index>(L.b_offset) + o];
  }
  return V;
}

static void scatter(const LayerDesc& L, const Eigen::MatrixXd& V, Eigen::VectorXd& v) {
  for (int o = 0; o < L.out; ++o) {
    for (int i = 0; i < L.in; ++i) v[static_cast<Eigen::Index>(L.w_offset) + o * L.in + i] = V(o, i);
    v[static_cast<Eigen::Index>(L.b_offset) + o] = V(o, L.in);
  }
}

static Eigen::VectorXd ekfac_map(const CurvatureOperator& op, const Eigen::VectorXd& v, bool inverse) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(v.size());
  for (auto& L : op.layers) {
    Eigen::MatrixXd U = L.QG.transpose() * gather(L.desc, v) * L.QA;
    Eigen::ArrayXXd den = L.lambda.array() + op.l2 + op.lambda;
    Eigen::MatrixXd S = inverse ? Eigen::MatrixXd(U.array() / den) : Eigen::MatrixXd(U.array() * den);
    scatter(L.desc, L.QG * S * L.QA.transpose(), out);
  }
  return out;
}

Eigen::VectorXd apply(const CurvatureOperator& op, const Eigen::VectorXd& v) {
  if (static_cast<std::size_t>(v.size()) != op.d) throw Error("apply: dimension mismatch");
  if (op.kind == CurvatureKind::ekfac) return ekfac_map(op, v, false);
  return op.dense * v + op.lambda * v;
}

Eigen::VectorXd solve(const CurvatureOperator& op, const Eigen::VectorXd& v) {
  if (static_cast<std::size_t>(v.size()) != op.d) throw Error("solve: dimension mismatch");
  if (op.kind == CurvatureKind::ekfac) return ekfac_map(op, v, true);
  std::shared_ptr<const Eigen::LDLT<Eigen::MatrixXd>> f = op.factor;
  if (!f) {
    CurvatureOperator tmp = op;
    factorize(tmp);
    f = tmp.factor;
  }
  Eigen::VectorXd u = f->solve(v);
  Eigen::VectorXd r = v - apply(op, u);
  u += f->solve(r);  // one step of iterative refinement
  return u;
}

CgResult solve_cg(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& hvp, double lambda,
                  const Eigen::VectorXd& v, double tol, int max_iter) {
  CgResult res;
  res.x = Eigen::VectorXd::Zero(v.size());
  double vn = v.norm();
  if (vn == 0) return res;
  Eigen::VectorXd r = v, p = r;
  double rr = r.squaredNorm();
  while (std::sqrt(rr) > tol * vn) {
    if (res.iterations >= max_iter) {
      res.residual = std::sqrt(rr) / vn;
      throw Error("solve_cg: no convergence after " + std::to_string(max_iter) + " iterations, relative residual " +
                  fmt_double(res.residual, 6));
    }
    Eigen::VectorXd q = hvp(p) + lambda * p;
    double alpha = rr / p.dot(q);
    res.x += alpha * p;
    r -= alpha * q;
    double rr_new = r.squaredNorm();
    p = r + (rr_new / rr) * p;
    rr = rr_new;
    ++res.iterations;
  }
  res.residual = std::sqrt(rr) / vn;
  return res;
}

// ---- cache file ----------------------------------------------------------

static void put_mat(std::string& out, const Eigen::MatrixXd& M) {
  for (Eigen::Index j = 0; j < M.cols(); ++j)
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
      double v = M(i, j);
      std::uint64_t u;
      std::memcpy(&u, &v, 8);
      for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
    }
}

static Eigen::MatrixXd get_mat(const std::string& s, std::size_t& pos, Eigen::Index rows, Eigen::Index cols) {
  if (pos + static_cast<std::size_t>(rows * cols) * 8 > s.size()) throw Error("operator cache: truncated payload");
  Eigen::MatrixXd M(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) {
      std::uint64_t u = 0;
      for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos + static_cast<std::size_t>(b)])) << (8 * b);
      std::memcpy(&M(i, j), &u, 8);
      pos += 8;
    }
  return M;
}

std::string operator_bytes(const CurvatureOperator& op) {
  ojson h;
  h["format"] = "invflip-operator/1";
  h["kind"] = kind_name(op.kind);
  h["lambda"] = op.lambda;
  h["d"] = op.d;
  h["l2"] = op.l2;
  h["labels"] = op.labels == EkfacLabels::empirical ? "empirical" : "model_expected";
  h["n_train"] = op.n_train;
  h["classifier_hash"] = op.classifier_hash;
  h["dataset_hash"] = op.dataset_hash;
  h["content_hash"] = op.content_hash();
  ojson ls = ojson::array();
  for (auto& L : op.layers) ls.push_back({L.desc.w_offset, L.desc.b_offset, L.desc.in, L.desc.out});
  h["layers"] = ls;
  std::string out = h.dump() + "\n";
  if (op.kind == CurvatureKind::ekfac) {
    for (auto& L : op.layers) {
      put_mat(out, L.QA);
      put_mat(out, L.QG);
      put_mat(out, L.evA);
      put_mat(out, L.evG);
      put_mat(out, L.lambda);
    }
  } else {
    put_mat(out, op.dense);
  }
  return out;
}

CurvatureOperator operator_from_bytes(const std::string& bytes) {
  auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw Error("operator cache: missing header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const std::exception& e) {
    throw Error(std::string("operator cache: bad header: ") + e.what());
  }
  if (h.value("format", "") != "invflip-operator/1") throw Error("operator cache: unknown format");
  CurvatureOperator op;
  op.kind = parse_kind(h.at("kind").get<std::string>());
  op.lambda = h.at("lambda").get<double>();
  op.d = h.at("d").get<std::size_t>();
  op.l2 = h.at("l2").get<double>();
  op.labels = h.at("labels").get<std::string>() == "empirical" ? EkfacLabels::empirical : EkfacLabels::model_expected;
  op.n_train = h.at("n_train").get<std::size_t>();
  op.classifier_hash = h.at("classifier_hash").get<std::string>();
  op.dataset_hash = h.at("dataset_hash").get<std::string>();
  std::size_t pos = nl + 1;
  const auto d = static_cast<Eigen::Index>(op.d);
  if (op.kind == CurvatureKind::ekfac) {
    for (auto& l : h.at("layers")) {
      EkfacLayer L;
      L.desc = {l[0].get<std::size_t>(), l[1].get<std::size_t>(), l[2].get<int>(), l[3].get<int>()};
      L.QA = get_mat(bytes, pos, L.desc.in + 1, L.desc.in + 1);
      L.QG = get_mat(bytes, pos, L.desc.out, L.desc.out);
      L.evA = get_mat(bytes, pos, L.desc.in + 1, 1);
      L.evG = get_mat(bytes, pos, L.desc.out, 1);
      L.lambda = get_mat(bytes, pos, L.desc.out, L.desc.in + 1);
      op.layers.push_back(std::move(L));
    }
  } else {
    op.dense = get_mat(bytes, pos, d, d);
    factorize(op);
  }
  if (pos != bytes.size()) throw Error("operator cache: trailing bytes");
  if (op.content_hash() != h.at("content_hash").get<std::string>()) throw Error("operator cache: content hash mismatch");
  return op;
}

void save_operator(const CurvatureOperator& op, const std::filesystem::path& p) { write_file(p, operator_bytes(op)); }
CurvatureOperator load_operator(const std::filesystem::path& p) { return operator_from_bytes(read_file(p)); }

}  // namespace invflip
