#include "invflip/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <set>

#include "invflip/util.hpp"
#include "json.hpp"

namespace invflip {

using ojson = nlohmann::ordered_json;

// ---- featurizer ----------------------------------------------------------

void FeaturizerSpec::freeze() {
  auto m = std::make_shared<std::unordered_map<std::string, int>>();
  for (std::size_t i = 0; i < vocab.size(); ++i)
    if (!m->emplace(vocab[i], static_cast<int>(i)).second) throw Error("featurizer: duplicate vocab entry " + vocab[i]);
  index_ = std::move(m);
}

bool FeaturizerSpec::operator==(const FeaturizerSpec& o) const {
  return mode == o.mode && vocab == o.vocab && lowercase == o.lowercase && polarity == o.polarity &&
         polarity_weight == o.polarity_weight && negation_cues == o.negation_cues &&
         negation_marking == o.negation_marking;
}

static bool is_cue(const FeaturizerSpec& f, const std::string& w) {
  return std::find(f.negation_cues.begin(), f.negation_cues.end(), w) != f.negation_cues.end();
}

static std::vector<std::string> marked_words(const FeaturizerSpec& f, const std::string& text) {
  std::vector<std::string> ws;
  bool scope = false;
  for (auto& t : tokenize(text)) {
    if (t.punct) {
      scope = false;
      continue;
    }
    auto w = f.lowercase ? to_lower(t.text) : t.text;
    bool capital = t.text[0] >= 'A' && t.text[0] <= 'Z';
    if (scope && !capital) {
      ws.push_back("NOT_" + w);
      continue;
    }
    if (is_cue(f, to_lower(t.text))) scope = true;
    ws.push_back(w);
  }
  return ws;
}

std::vector<std::string> feature_tokens(const FeaturizerSpec& f, const std::string& text) {
  auto ws = f.negation_marking ? marked_words(f, text) : words(text, f.lowercase);
  if (f.mode == FeatureMode::bag_of_bigrams) {
    auto n = ws.size();
    for (std::size_t i = 0; i + 1 < n; ++i) ws.push_back(ws[i] + " " + ws[i + 1]);
  }
  return ws;
}

double polarity_score(const FeaturizerSpec& f, const std::string& text) {
  double s = 0;
  bool scope = false;
  for (auto& t : tokenize(text)) {
    if (t.punct) {
      scope = false;
      continue;
    }
    auto w = to_lower(t.text);
    if (!scope && is_cue(f, w)) {
      scope = true;
      continue;
    }
    auto it = f.polarity.find(w);
    if (it != f.polarity.end()) s += scope ? -it->second : it->second;
  }
  return s;
}

SparseVec featurize(const FeaturizerSpec& f, const std::string& text) {
  std::unordered_map<std::string, int> local;
  const auto* idx = f.index();
  if (!idx) {
    for (std::size_t i = 0; i < f.vocab.size(); ++i) local.emplace(f.vocab[i], static_cast<int>(i));
    idx = &local;
  }
  std::map<int, double> counts;
  for (auto& t : feature_tokens(f, text)) {
    auto it = idx->find(t);
    if (it != idx->end()) counts[it->second] += 1.0;
  }
  SparseVec out(counts.begin(), counts.end());
  if (f.has_polarity()) {
    double p = polarity_score(f, text);
    if (p != 0) out.emplace_back(static_cast<int>(f.vocab.size()), f.polarity_weight * p);
  }
  return out;
}

FeaturizerSpec build_vocab(const Dataset& ds, FeaturizerSpec base) {
  std::set<std::string> v;
  for (auto& e : ds.examples)
    for (auto& t : feature_tokens(base, e.text)) v.insert(t);
  base.vocab.assign(v.begin(), v.end());
  base.freeze();
  return base;
}

std::string vocab_hash(const FeaturizerSpec& f) {
  std::string s;
  for (auto& w : f.vocab) s += w + "\n";
  return sha256_hex(s);
}

// ---- architecture --------------------------------------------------------

std::string arch_name(const ArchSpec& a) { return a.kind == Arch::linear ? "linear" : "mlp"; }

ArchSpec parse_arch(const std::string& s, int hidden) {
  if (s == "linear") return {Arch::linear, 0};
  if (s == "mlp" || s == "one-hidden-layer") {
    if (hidden < 1) throw Error("mlp arch needs hidden >= 1");
    return {Arch::mlp, hidden};
  }
  throw Error("unknown arch: " + s);
}

std::size_t param_dim(const ArchSpec& a, int F, int K) {
  if (a.kind == Arch::linear) return static_cast<std::size_t>(K * F + K);
  int H = a.hidden;
  return static_cast<std::size_t>(H * F + H + K * H + K);
}

std::vector<LayerDesc> Classifier::layers() const {
  int f = F(), k = K();
  if (arch.kind == Arch::linear) return {{0, static_cast<std::size_t>(k * f), f, k}};
  int h = arch.hidden;
  std::size_t o2 = static_cast<std::size_t>(h * f + h);
  return {{0, static_cast<std::size_t>(h * f), f, h}, {o2, o2 + static_cast<std::size_t>(k * h), h, k}};
}

Classifier zero_classifier(const ArchSpec& a, const FeaturizerSpec& f, const std::vector<std::string>& labels) {
  Classifier c{a, f, labels, {}};
  if (!c.featurizer.index()) c.featurizer.freeze();
  c.theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(param_dim(a, c.F(), c.K())));
  return c;
}

Featurized featurize_examples(const Classifier& c, const std::vector<Example>& ex) {
  Featurized d;
  d.x.reserve(ex.size());
  d.y.reserve(ex.size());
  for (auto& e : ex) {
    auto it = std::find(c.label_space.begin(), c.label_space.end(), e.label);
    if (it == c.label_space.end()) throw Error("label " + e.label + " not in classifier label space");
    d.x.push_back(featurize(c.featurizer, e.text));
    d.y.push_back(static_cast<int>(it - c.label_space.begin()));
  }
  return d;
}

Featurized featurize_dataset(const Classifier& c, const Dataset& ds) { return featurize_examples(c, ds.examples); }

// ---- loss and gradient, generic in the scalar --------------------------

namespace {

struct Dual {
  double v = 0, d = 0;
  Dual() = default;
  Dual(double v_) : v(v_) {}
  Dual(double v_, double d_) : v(v_), d(d_) {}
  Dual& operator+=(const Dual& o) { v += o.v; d += o.d; return *this; }
};
inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
inline Dual operator/(Dual a, Dual b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }
inline Dual exp(Dual a) { double e = std::exp(a.v); return {e, e * a.d}; }
inline Dual log(Dual a) { return {std::log(a.v), a.d / a.v}; }
inline Dual tanh(Dual a) { double t = std::tanh(a.v); return {t, (1 - t * t) * a.d}; }
inline double value(Dual a) { return a.v; }
inline double value(double a) { return a; }
using std::exp;
using std::log;
using std::tanh;

// Returns the loss; if g is non-null adds w * dloss/dtheta into g.
template <class T>
T loss_grad(const Classifier& c, const T* th, const SparseVec& x, int y, T* g, double w) {
  const int K = c.K(), F = c.F();
  std::vector<T> z(static_cast<std::size_t>(K));
  std::vector<T> hh;
  int H = 0;
  std::size_t w2 = 0, b2 = 0;
  if (c.arch.kind == Arch::linear) {
    const std::size_t b = static_cast<std::size_t>(K * F);
    for (int k = 0; k < K; ++k) {
      T s = th[b + static_cast<std::size_t>(k)];
      for (auto& [j, xj] : x) s += th[static_cast<std::size_t>(k * F + j)] * T(xj);
      z[static_cast<std::size_t>(k)] = s;
    }
  } else {
    H = c.arch.hidden;
    const std::size_t b1 = static_cast<std::size_t>(H * F);
    w2 = b1 + static_cast<std::size_t>(H);
    b2 = w2 + static_cast<std::size_t>(K * H);
    hh.resize(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) {
      T s = th[b1 + static_cast<std::size_t>(h)];
      for (auto& [j, xj] : x) s += th[static_cast<std::size_t>(h * F + j)] * T(xj);
      hh[static_cast<std::size_t>(h)] = tanh(s);
    }
    for (int k = 0; k < K; ++k) {
      T s = th[b2 + static_cast<std::size_t>(k)];
      for (int h = 0; h < H; ++h) s += th[w2 + static_cast<std::size_t>(k * H + h)] * hh[static_cast<std::size_t>(h)];
      z[static_cast<std::size_t>(k)] = s;
    }
  }
  std::size_t kmax = 0;
  for (std::size_t k = 1; k < z.size(); ++k)
    if (value(z[k]) > value(z[kmax])) kmax = k;
  T m = z[kmax];
  T se = T(0.0);
  for (auto& zk : z) se += exp(zk - m);
  T lse = m + log(se);
  T L = lse - z[static_cast<std::size_t>(y)];
  if (!g) return L;

  std::vector<T> r(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) r[static_cast<std::size_t>(k)] = exp(z[static_cast<std::size_t>(k)] - lse) - T(k == y ? 1.0 : 0.0);
  T W(w);
  if (c.arch.kind == Arch::linear) {
    const std::size_t b = static_cast<std::size_t>(K * F);
    for (int k = 0; k < K; ++k) {
      T rk = W * r[static_cast<std::size_t>(k)];
      for (auto& [j, xj] : x) g[static_cast<std::size_t>(k * F + j)] += rk * T(xj);
      g[b + static_cast<std::size_t>(k)] += rk;
    }
  } else {
    const std::size_t b1 = static_cast<std::size_t>(H * F);
    for (int k = 0; k < K; ++k) {
      T rk = W * r[static_cast<std::size_t>(k)];
      for (int h = 0; h < H; ++h) g[w2 + static_cast<std::size_t>(k * H + h)] += rk * hh[static_cast<std::size_t>(h)];
      g[b2 + static_cast<std::size_t>(k)] += rk;
    }
    for (int h = 0; h < H; ++h) {
      T dh = T(0.0);
      for (int k = 0; k < K; ++k) dh += r[static_cast<std::size_t>(k)] * th[w2 + static_cast<std::size_t>(k * H + h)];
      auto hv = hh[static_cast<std::size_t>(h)];
      T da = W * dh * (T(1.0) - hv * hv);
      for (auto& [j, xj] : x) g[static_cast<std::size_t>(h * F + j)] += da * T(xj);
      g[b1 + static_cast<std::size_t>(h)] += da;
    }
  }
  return L;
}

void check_finite(double v) {
  if (!std::isfinite(v)) throw Error("non-finite loss");
}

}  // namespace

Eigen::VectorXd logits(const Classifier& c, const SparseVec& x) {
  const int K = c.K(), F = c.F();
  Eigen::VectorXd z(K);
  const double* th = c.theta.data();
  if (c.arch.kind == Arch::linear) {
    for (int k = 0; k < K; ++k) {
      double s = th[K * F + k];
      for (auto& [j, xj] : x) s += th[k * F + j] * xj;
      z[k] = s;
    }
    return z;
  }
  auto a = forward(c, x);
  return a.probs.array().log();  // equal to logits up to a constant
}

Activations forward(const Classifier& c, const SparseVec& x) {
  const int K = c.K(), F = c.F();
  const double* th = c.theta.data();
  Activations a;
  Eigen::VectorXd z(K);
  if (c.arch.kind == Arch::linear) {
    for (int k = 0; k < K; ++k) {
      double s = th[K * F + k];
      for (auto& [j, xj] : x) s += th[k * F + j] * xj;
      z[k] = s;
    }
  } else {
    int H = c.arch.hidden;
    std::size_t b1 = static_cast<std::size_t>(H * F), w2 = b1 + static_cast<std::size_t>(H),
                b2 = w2 + static_cast<std::size_t>(K * H);
    a.hidden.resize(H);
    for (int h = 0; h < H; ++h) {
      double s = th[b1 + static_cast<std::size_t>(h)];
      for (auto& [j, xj] : x) s += th[h * F + j] * xj;
      a.hidden[h] = std::tanh(s);
    }
    for (int k = 0; k < K; ++k) {
      double s = th[b2 + static_cast<std::size_t>(k)];
      for (int h = 0; h < H; ++h) s += th[w2 + static_cast<std::size_t>(k * H + h)] * a.hidden[h];
      z[k] = s;
    }
  }
  double m = z.maxCoeff();
  Eigen::VectorXd e = (z.array() - m).exp();
  a.probs = e / e.sum();
  return a;
}

Eigen::VectorXd log_probs(const Classifier& c, const std::string& text) {
  auto x = featurize(c.featurizer, text);
  Eigen::VectorXd z;
  if (c.arch.kind == Arch::linear) {
    z = logits(c, x);
  } else {
    // recompute raw logits for exact log-softmax
    const int K = c.K(), F = c.F(), H = c.arch.hidden;
    auto a = forward(c, x);
    std::size_t w2 = static_cast<std::size_t>(H * F + H), b2 = w2 + static_cast<std::size_t>(K * H);
    z.resize(K);
    for (int k = 0; k < K; ++k) {
      double s = c.theta[static_cast<Eigen::Index>(b2) + k];
      for (int h = 0; h < H; ++h) s += c.theta[static_cast<Eigen::Index>(w2) + k * H + h] * a.hidden[h];
      z[k] = s;
    }
  }
  double m = z.maxCoeff();
  double lse = m + std::log((z.array() - m).exp().sum());
  return z.array() - lse;
}

double loss_x(const Classifier& c, const SparseVec& x, int y) {
  double L = loss_grad<double>(c, c.theta.data(), x, y, nullptr, 1.0);
  check_finite(L);
  return L;
}

double loss(const Classifier& c, const Example& ex) {
  auto it = std::find(c.label_space.begin(), c.label_space.end(), ex.label);
  if (it == c.label_space.end()) throw Error("loss: label " + ex.label + " not in label space");
  return loss_x(c, featurize(c.featurizer, ex.text), static_cast<int>(it - c.label_space.begin()));
}

void add_grad(const Classifier& c, const SparseVec& x, int y, double w, Eigen::VectorXd& g) {
  double L = loss_grad<double>(c, c.theta.data(), x, y, g.data(), w);
  check_finite(L);
}

Eigen::VectorXd grad_x(const Classifier& c, const SparseVec& x, int y) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(c.theta.size());
  add_grad(c, x, y, 1.0, g);
  return g;
}

Eigen::VectorXd grad(const Classifier& c, const Example& ex) {
  auto it = std::find(c.label_space.begin(), c.label_space.end(), ex.label);
  if (it == c.label_space.end()) throw Error("grad: label " + ex.label + " not in label space");
  return grad_x(c, featurize(c.featurizer, ex.text), static_cast<int>(it - c.label_space.begin()));
}

double objective(const Classifier& c, const Featurized& data, double l2) {
  double s = 0;
  for (std::size_t i = 0; i < data.size(); ++i) s += loss_grad<double>(c, c.theta.data(), data.x[i], data.y[i], nullptr, 1.0);
  return s / static_cast<double>(data.size()) + 0.5 * l2 * c.theta.squaredNorm();
}

Eigen::VectorXd objective_grad(const Classifier& c, const Featurized& data, double l2) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(c.theta.size());
  double w = 1.0 / static_cast<double>(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) add_grad(c, data.x[i], data.y[i], w, g);
  return g + l2 * c.theta;
}

static Eigen::VectorXd dual_hvp(const Classifier& c, const Featurized& data, const std::vector<std::size_t>& rows,
                                double w, const Eigen::VectorXd& v) {
  auto d = c.dim();
  std::vector<Dual> th(d), g(d);
  for (std::size_t i = 0; i < d; ++i) th[i] = Dual(c.theta[static_cast<Eigen::Index>(i)], v[static_cast<Eigen::Index>(i)]);
  for (auto i : rows) loss_grad<Dual>(c, th.data(), data.x[i], data.y[i], g.data(), w);
  Eigen::VectorXd out(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i) out[static_cast<Eigen::Index>(i)] = g[i].d;
  return out;
}

Eigen::VectorXd objective_hvp(const Classifier& c, const Featurized& data, double l2, const Eigen::VectorXd& v) {
  std::vector<std::size_t> rows(data.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return dual_hvp(c, data, rows, 1.0 / static_cast<double>(data.size()), v) + l2 * v;
}

Eigen::VectorXd example_hvp(const Classifier& c, const SparseVec& x, int y, const Eigen::VectorXd& v) {
  Featurized one{{x}, {y}};
  return dual_hvp(c, one, {0}, 1.0, v);
}

Eigen::MatrixXd logit_jacobian(const Classifier& c, const SparseVec& x) {
  const int K = c.K(), F = c.F();
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(K, static_cast<Eigen::Index>(c.dim()));
  if (c.arch.kind == Arch::linear) {
    for (int k = 0; k < K; ++k) {
      for (auto& [j, xj] : x) J(k, k * F + j) = xj;
      J(k, K * F + k) = 1.0;
    }
    return J;
  }
  const int H = c.arch.hidden;
  auto a = forward(c, x);
  const Eigen::Index b1 = H * F, w2 = b1 + H, b2 = w2 + K * H;
  for (int k = 0; k < K; ++k) {
    for (int h = 0; h < H; ++h) {
      J(k, w2 + k * H + h) = a.hidden[h];
      double dh = c.theta[w2 + k * H + h] * (1 - a.hidden[h] * a.hidden[h]);
      for (auto& [j, xj] : x) J(k, h * F + j) = dh * xj;
      J(k, b1 + h) = dh;
    }
    J(k, b2 + k) = 1.0;
  }
  return J;
}

Eigen::MatrixXd linear_hessian(const Classifier& c, const Featurized& data, double l2) {
  if (c.arch.kind != Arch::linear) throw Error("linear_hessian: arch is not linear");
  const int K = c.K(), F = c.F();
  const auto d = static_cast<Eigen::Index>(c.dim());
  Eigen::MatrixXd Hm = Eigen::MatrixXd::Zero(d, d);
  const double w = 1.0 / static_cast<double>(data.size());
  std::vector<std::pair<int, double>> xt;
  for (std::size_t n = 0; n < data.size(); ++n) {
    auto p = forward(c, data.x[n]).probs;
    xt.assign(data.x[n].begin(), data.x[n].end());
    xt.emplace_back(F, 1.0);  // bias slot
    auto idx = [&](int k, int j) -> Eigen::Index { return j < F ? k * F + j : K * F + k; };
    for (int k = 0; k < K; ++k)
      for (int l = 0; l < K; ++l) {
        double a = w * ((k == l ? p[k] : 0.0) - p[k] * p[l]);
        if (a == 0) continue;
        for (auto& [j, xj] : xt)
          for (auto& [i, xi] : xt) Hm(idx(k, j), idx(l, i)) += a * xj * xi;
      }
  }
  Hm.diagonal().array() += l2;
  return Hm;
}

int predict_index(const Classifier& c, const SparseVec& x) {
  Eigen::VectorXd p = c.arch.kind == Arch::linear ? logits(c, x) : forward(c, x).probs;
  int best = 0;
  for (int k = 1; k < p.size(); ++k)
    if (p[k] > p[best]) best = k;
  return best;
}

std::string predict_label(const Classifier& c, const std::string& text) {
  auto lp = log_probs(c, text);
  int best = 0;
  for (int k = 1; k < lp.size(); ++k)
    if (lp[k] > lp[best]) best = k;
  return c.label_space[static_cast<std::size_t>(best)];
}

Evaluation evaluate(const Classifier& c, const Dataset& ds, const std::string& positive_label) {
  std::string pos = positive_label.empty() ? c.label_space.front() : positive_label;
  Evaluation ev;
  std::map<std::string, std::pair<std::size_t, std::size_t>> per;
  std::size_t correct = 0;
  for (auto& e : ds.examples) {
    auto p = predict_label(c, e.text);
    correct += p == e.label;
    auto& t = per[e.task];
    t.first += p == pos;
    t.second += 1;
  }
  ev.accuracy = ds.size() ? static_cast<double>(correct) / static_cast<double>(ds.size()) : 0.0;
  for (auto& [task, cnt] : per) ev.positive_ratio[task] = static_cast<double>(cnt.first) / static_cast<double>(cnt.second);
  return ev;
}

// ---- training ------------------------------------------------------------

int newton_polish(Classifier& c, const Featurized& data, double l2, double tol, int max_iter) {
  int it = 0;
  double J = objective(c, data, l2);
  for (; it < max_iter; ++it) {
    Eigen::VectorXd g = objective_grad(c, data, l2);
    if (g.norm() < tol) break;
    Eigen::MatrixXd H = linear_hessian(c, data, l2);
    Eigen::VectorXd step = H.ldlt().solve(g);
    double t = 1.0;
    Eigen::VectorXd th0 = c.theta;
    while (true) {
      c.theta = th0 - t * step;
      double Jn = objective(c, data, l2);
      if (Jn <= J || t < 1e-10) {
        J = Jn;
        break;
      }
      t *= 0.5;
    }
  }
  return it;
}

TrainResult train_featurized(const Classifier& shape, const Featurized& data, const TrainConfig& cfg) {
  if (data.size() == 0) throw Error("train: empty dataset");
  if (cfg.epochs < 1 || !(cfg.learning_rate > 0) || cfg.l2_weight < 0 || cfg.batch_size < 1)
    throw Error("train: invalid config");
  TrainResult r;
  r.model = shape;
  Classifier& c = r.model;
  Rng rng(cfg.seed);
  const int F = c.F();
  if (c.arch.kind == Arch::linear) {
    for (Eigen::Index i = 0; i < c.theta.size(); ++i) c.theta[i] = cfg.init_scale * rng.normal();
  } else {
    c.theta.setZero();
    for (auto& L : c.layers()) {
      double s = 1.0 / std::sqrt(static_cast<double>(std::max(L.in, 1)));
      for (int i = 0; i < L.in * L.out; ++i) c.theta[static_cast<Eigen::Index>(L.w_offset) + i] = s * rng.normal();
    }
  }
  (void)F;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Eigen::VectorXd g(c.theta.size());
  for (int ep = 0; ep < cfg.epochs; ++ep) {
    rng.shuffle(order);
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::size_t e = std::min(order.size(), s + cfg.batch_size);
      g.setZero();
      double w = 1.0 / static_cast<double>(e - s);
      for (std::size_t i = s; i < e; ++i)
        loss_grad<double>(c, c.theta.data(), data.x[order[i]], data.y[order[i]], g.data(), w);
      g += cfg.l2_weight * c.theta;
      c.theta -= cfg.learning_rate * g;
    }
    double J = objective(c, data, cfg.l2_weight);
    if (!std::isfinite(J))
      throw Error("train: objective diverged at epoch " + std::to_string(ep + 1) + " (lr " +
                  fmt_double(cfg.learning_rate, 6) + "); lower the learning rate");
    r.objective_log.push_back(J);
  }
  if (cfg.polish && c.arch.kind == Arch::linear)
    r.polish_iterations = newton_polish(c, data, cfg.l2_weight, cfg.polish_tol, cfg.polish_max_iter);
  r.final_objective = objective(c, data, cfg.l2_weight);
  r.final_grad_norm = objective_grad(c, data, cfg.l2_weight).norm();
  return r;
}

TrainResult train(const Dataset& ds, const ArchSpec& arch, const TrainConfig& cfg, const FeaturizerSpec& base) {
  if (ds.size() == 0) throw Error("train: empty dataset");
  auto f = base.vocab.empty() ? build_vocab(ds, base) : base;
  if (!f.index()) f.freeze();
  auto shape = zero_classifier(arch, f, ds.label_space);
  return train_featurized(shape, featurize_dataset(shape, ds), cfg);
}

// ---- checkpoint ----------------------------------------------------------

static ojson featurizer_json(const FeaturizerSpec& f) {
  ojson j;
  j["mode"] = f.mode == FeatureMode::bag_of_words ? "bag-of-words" : "bag-of-bigrams";
  j["lowercase"] = f.lowercase;
  j["vocab"] = f.vocab;
  j["polarity_weight"] = f.polarity_weight;
  ojson pol = ojson::object();
  for (auto& [w, s] : f.polarity) pol[w] = s;
  j["polarity"] = pol;
  j["negation_cues"] = f.negation_cues;
  j["negation_marking"] = f.negation_marking;
  return j;
}

static FeaturizerSpec featurizer_from(const nlohmann::json& j) {
  FeaturizerSpec f;
  auto mode = j.at("mode").get<std::string>();
  if (mode == "bag-of-words") f.mode = FeatureMode::bag_of_words;
  else if (mode == "bag-of-bigrams") f.mode = FeatureMode::bag_of_bigrams;
  else throw Error("unknown featurizer mode " + mode);
  f.lowercase = j.at("lowercase").get<bool>();
  f.vocab = j.at("vocab").get<std::vector<std::string>>();
  f.polarity_weight = j.at("polarity_weight").get<double>();
  for (auto& [w, s] : j.at("polarity").items()) f.polarity[w] = s.get<int>();
  f.negation_cues = j.at("negation_cues").get<std::vector<std::string>>();
  f.negation_marking = j.value("negation_marking", false);
  f.freeze();
  return f;
}

static void put_f64_le(std::string& out, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

static double get_f64_le(const std::string& s, std::size_t pos) {
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos + static_cast<std::size_t>(i)])) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

std::string classifier_bytes(const Classifier& c) {
  ojson h;
  h["format"] = "invflip-checkpoint/1";
  h["arch"] = arch_name(c.arch);
  h["hidden"] = c.arch.hidden;
  h["label_space"] = c.label_space;
  h["vocab_hash"] = vocab_hash(c.featurizer);
  h["dim"] = c.dim();
  h["featurizer"] = featurizer_json(c.featurizer);
  std::string out = h.dump() + "\n";
  for (Eigen::Index i = 0; i < c.theta.size(); ++i) put_f64_le(out, c.theta[i]);
  return out;
}

Classifier classifier_from_bytes(const std::string& bytes) {
  auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw Error("checkpoint: missing header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const std::exception& e) {
    throw Error(std::string("checkpoint: bad header: ") + e.what());
  }
  if (h.value("format", "") != "invflip-checkpoint/1") throw Error("checkpoint: unknown format");
  Classifier c;
  c.arch = parse_arch(h.at("arch").get<std::string>(), h.at("hidden").get<int>());
  c.label_space = h.at("label_space").get<std::vector<std::string>>();
  c.featurizer = featurizer_from(h.at("featurizer"));
  if (vocab_hash(c.featurizer) != h.at("vocab_hash").get<std::string>()) throw Error("checkpoint: vocab hash mismatch");
  auto d = h.at("dim").get<std::size_t>();
  if (d != param_dim(c.arch, c.F(), c.K())) throw Error("checkpoint: dimension does not match arch and vocab");
  if (bytes.size() != nl + 1 + 8 * d) throw Error("checkpoint: truncated parameter block");
  c.theta.resize(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i) {
    c.theta[static_cast<Eigen::Index>(i)] = get_f64_le(bytes, nl + 1 + 8 * i);
    if (!std::isfinite(c.theta[static_cast<Eigen::Index>(i)])) throw Error("checkpoint: non-finite parameter");
  }
  return c;
}

std::string classifier_hash(const Classifier& c) { return sha256_hex(classifier_bytes(c)); }
void save_classifier(const Classifier& c, const std::filesystem::path& p) { write_file(p, classifier_bytes(c)); }
Classifier load_classifier(const std::filesystem::path& p) { return classifier_from_bytes(read_file(p)); }

}  // namespace invflip
