#include "invflip/influence.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <sstream>

#include "invflip/util.hpp"
#include "json.hpp"

namespace invflip {

using ojson = nlohmann::ordered_json;

std::string sign_name(SignConvention s) { return s == SignConvention::removal ? "removal" : "upweight"; }

SignConvention parse_sign(const std::string& s) {
  if (s == "removal") return SignConvention::removal;
  if (s == "upweight") return SignConvention::upweight;
  throw Error("unknown sign convention: " + s);
}

static double resolve_eps(const CurvatureOperator& op, const InfluenceConfig& cfg) {
  if (cfg.epsilon) {
    if (!(*cfg.epsilon > 0)) throw Error("influence: epsilon must be > 0");
    return *cfg.epsilon;
  }
  if (op.n_train == 0) throw Error("influence: operator has no training-set size; set epsilon explicitly");
  return 1.0 / static_cast<double>(op.n_train);
}

static void check_binding(const Classifier& c, const CurvatureOperator& op) {
  if (!op.classifier_hash.empty() && op.classifier_hash != classifier_hash(c))
    throw Error("influence: operator was built for a different classifier (hash mismatch)");
  if (op.d != c.dim()) throw Error("influence: operator dimension does not match classifier");
}

static double sign_factor(const InfluenceConfig& cfg) { return cfg.sign == SignConvention::removal ? 1.0 : -1.0; }

double influence_score(const Classifier& c, const CurvatureOperator& op, const Example& train_example,
                       const Example& query, const InfluenceConfig& cfg) {
  check_binding(c, op);
  Eigen::VectorXd gz = grad(c, train_example);
  Eigen::VectorXd gq = grad(c, query);
  return sign_factor(cfg) * resolve_eps(op, cfg) * gq.dot(solve(op, gz));
}

Eigen::MatrixXd gradient_rows(const Classifier& c, const Featurized& data) {
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(c.dim()));
  Eigen::VectorXd g(static_cast<Eigen::Index>(c.dim()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    g.setZero();
    add_grad(c, data.x[i], data.y[i], 1.0, g);
    G.row(static_cast<Eigen::Index>(i)) = g.transpose();
  }
  return G;
}

Eigen::VectorXd influence_profile(const Classifier& c, const CurvatureOperator& op, const Eigen::MatrixXd& train_grads,
                                  const std::vector<Example>& queries, const InfluenceConfig& cfg) {
  if (queries.empty()) throw Error("influence_profile: empty query set");
  if (cfg.query_batch < 1) throw Error("influence_profile: query_batch must be >= 1");
  check_binding(c, op);
  double eps = resolve_eps(op, cfg);
  auto qdata = featurize_examples(c, queries);
  const double nq = static_cast<double>(queries.size());
  // The operator is symmetric, so gq . solve(gz) = gz . solve(gq): one solve per query batch.
  Eigen::VectorXd u = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.dim()));
  for (std::size_t s = 0; s < qdata.size(); s += cfg.query_batch) {
    std::size_t e = std::min(qdata.size(), s + cfg.query_batch);
    Eigen::VectorXd gq = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.dim()));
    for (std::size_t i = s; i < e; ++i) add_grad(c, qdata.x[i], qdata.y[i], 1.0 / static_cast<double>(e - s), gq);
    u += (static_cast<double>(e - s) / nq) * solve(op, gq);
  }
  return sign_factor(cfg) * eps * (train_grads * u);
}

Eigen::VectorXd influence_profile(const Classifier& c, const CurvatureOperator& op, const Dataset& train,
                                  const std::vector<Example>& queries, const InfluenceConfig& cfg) {
  return influence_profile(c, op, gradient_rows(c, featurize_dataset(c, train)), queries, cfg);
}

// ---- TF-IDF ----------------------------------------------------------------

TfidfIndex::TfidfIndex(const std::vector<std::string>& corpus) {
  std::unordered_map<std::string, std::size_t> df;
  for (auto& t : corpus) {
    auto ws = words(t, true);
    std::set<std::string> uniq(ws.begin(), ws.end());
    for (auto& w : uniq) ++df[w];
  }
  const double n = static_cast<double>(corpus.size());
  for (auto& [w, c] : df) idf_[w] = std::log((1.0 + n) / (1.0 + static_cast<double>(c))) + 1.0;
  default_idf_ = std::log(1.0 + n) + 1.0;
}

double TfidfIndex::idf(const std::string& token) const {
  auto it = idf_.find(token);
  return it == idf_.end() ? default_idf_ : it->second;
}

std::unordered_map<std::string, double> TfidfIndex::vector(const std::string& text, bool normalize) const {
  std::unordered_map<std::string, double> v;
  for (auto& w : words(text, true)) v[w] += 1.0;
  double nrm = 0;
  for (auto& [w, x] : v) {
    x *= idf(w);
    nrm += x * x;
  }
  nrm = std::sqrt(nrm);
  if (normalize && nrm > 0)
    for (auto& [w, x] : v) x /= nrm;
  return v;
}

double cosine(const std::unordered_map<std::string, double>& a, const std::unordered_map<std::string, double>& b) {
  const auto& small = a.size() <= b.size() ? a : b;
  const auto& large = a.size() <= b.size() ? b : a;
  double dot = 0, na = 0, nb = 0;
  for (auto& [w, x] : small) {
    auto it = large.find(w);
    if (it != large.end()) dot += x * it->second;
  }
  if (dot == 0) return 0.0;
  for (auto& [w, x] : a) na += x * x;
  for (auto& [w, x] : b) nb += x * x;
  return dot / std::sqrt(na * nb);
}

std::vector<RankedId> tfidf_rank(const Dataset& train, const std::vector<Example>& queries) {
  std::vector<std::string> texts;
  for (auto& e : train.examples) texts.push_back(e.text);
  TfidfIndex idx(texts);
  std::unordered_map<std::string, double> profile;
  for (auto& q : queries)
    for (auto& [w, x] : idx.vector(q.text)) profile[w] += x;
  std::vector<RankedId> out;
  for (auto& e : train.examples) out.push_back({e.id, cosine(idx.vector(e.text), profile)});
  std::stable_sort(out.begin(), out.end(), [](auto& a, auto& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  return out;
}

std::vector<std::string> tfidf_prefilter(const Dataset& train, const std::vector<Example>& queries, std::size_t top_n) {
  if (top_n > train.size()) throw Error("tfidf_prefilter: top_n exceeds N");
  auto r = tfidf_rank(train, queries);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < top_n; ++i) ids.push_back(r[i].id);
  return ids;
}

// ---- matrix ----------------------------------------------------------------

Eigen::VectorXd InfluenceMatrix::col(std::size_t j) const {
  if (j >= cols.size()) throw Error("influence matrix: column " + std::to_string(j) + " out of range");
  if (access_log) access_log->record(cols[j]);
  return values.col(static_cast<Eigen::Index>(j));
}

std::size_t InfluenceMatrix::col_index(const std::string& name) const {
  for (std::size_t j = 0; j < cols.size(); ++j)
    if (cols[j] == name) return j;
  throw Error("influence matrix: no column named " + name);
}

InfluenceMatrix InfluenceMatrix::select(const std::vector<std::size_t>& transform_cols) const {
  InfluenceMatrix m;
  m.rows = rows;
  m.provenance = provenance;
  m.access_log = access_log;
  std::vector<std::size_t> keep{0};
  keep.insert(keep.end(), transform_cols.begin(), transform_cols.end());
  m.values.resize(values.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    if (keep[k] >= cols.size()) throw Error("influence matrix: column out of range");
    m.cols.push_back(cols[keep[k]]);
    m.categories.push_back(categories[keep[k]]);
    m.values.col(static_cast<Eigen::Index>(k)) = values.col(static_cast<Eigen::Index>(keep[k]));
  }
  return m;
}

std::string queries_hash(const std::vector<Example>& queries) {
  std::string s;
  for (auto& q : queries) s += q.id + "\t" + q.text + "\t" + q.label + "\n";
  return sha256_hex(s);
}

InfluenceMatrix build_influence_matrix(const Classifier& c, const CurvatureOperator& op, const Dataset& train,
                                       const std::vector<Example>& queries, const std::vector<TransformSpec>& transforms,
                                       const InfluenceConfig& cfg) {
  if (transforms.empty()) throw Error("build_influence_matrix: at least one transform is required");
  std::set<std::string> names;
  for (auto& t : transforms)
    if (!names.insert(t.name).second) throw Error("build_influence_matrix: duplicate transform " + t.name);
  InfluenceMatrix m;
  for (auto& e : train.examples) m.rows.push_back(e.id);
  m.cols.push_back("original");
  m.categories.push_back("");
  for (auto& t : transforms) {
    m.cols.push_back(t.name);
    m.categories.push_back(category_name(t.category));
  }
  auto G = gradient_rows(c, featurize_dataset(c, train));
  m.values.resize(static_cast<Eigen::Index>(train.size()), static_cast<Eigen::Index>(m.cols.size()));
  m.values.col(0) = influence_profile(c, op, G, queries, cfg);
  for (std::size_t t = 0; t < transforms.size(); ++t) {
    std::vector<Example> tq;
    for (auto& q : queries) {
      Example e = q;
      e.text = apply_transform(transforms[t], q.text).text;
      if (e.text.empty()) throw QueryTransformError("transform " + transforms[t].name + " failed on query " + q.id);
      tq.push_back(std::move(e));
    }
    m.values.col(static_cast<Eigen::Index>(t + 1)) = influence_profile(c, op, G, tq, cfg);
  }
  if (!m.values.allFinite()) throw Error("build_influence_matrix: non-finite scores");
  std::string tlist;
  for (auto& t : transforms) tlist += (tlist.empty() ? "" : ",") + t.name;
  m.provenance["classifier_hash"] = classifier_hash(c);
  m.provenance["operator_hash"] = op.content_hash();
  m.provenance["query_hash"] = queries_hash(queries);
  m.provenance["n_queries"] = std::to_string(queries.size());
  m.provenance["transforms"] = tlist;
  m.provenance["curvature_kind"] = kind_name(op.kind);
  m.provenance["lambda"] = fmt_double(op.lambda);
  m.provenance["epsilon"] = fmt_double(resolve_eps(op, cfg));
  m.provenance["sign_convention"] = sign_name(cfg.sign);
  m.provenance["query_batch"] = std::to_string(cfg.query_batch);
  return m;
}

static ojson header_json(const InfluenceMatrix& m) {
  ojson h;
  h["format"] = "invflip-matrix/1";
  h["categories"] = m.categories;
  ojson p = ojson::object();
  for (auto& [k, v] : m.provenance) p[k] = v;
  h["provenance"] = p;
  return h;
}

static void read_header(const nlohmann::json& h, InfluenceMatrix& m) {
  if (h.value("format", "") != "invflip-matrix/1") throw Error("influence matrix: unknown format");
  m.categories = h.at("categories").get<std::vector<std::string>>();
  for (auto& [k, v] : h.at("provenance").items()) m.provenance[k] = v.get<std::string>();
}

static void check_shape(const InfluenceMatrix& m) {
  if (m.cols.size() != m.categories.size()) throw Error("influence matrix: column/category count mismatch");
  std::set<std::string> r(m.rows.begin(), m.rows.end()), c(m.cols.begin(), m.cols.end());
  if (r.size() != m.rows.size() || c.size() != m.cols.size()) throw Error("influence matrix: duplicate ids");
  if (!m.values.allFinite()) throw Error("influence matrix: non-finite values");
}

std::string matrix_to_csv(const InfluenceMatrix& m) {
  std::string out = "# " + header_json(m).dump() + "\n";
  out += "id";
  for (auto& c : m.cols) out += "," + c;
  out += "\n";
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    out += m.rows[i];
    for (std::size_t j = 0; j < m.cols.size(); ++j)
      out += "," + fmt_double(m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    out += "\n";
  }
  return out;
}

static std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> f;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      f.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  f.push_back(cur);
  return f;
}

InfluenceMatrix matrix_from_csv(const std::string& text) {
  InfluenceMatrix m;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      if (lineno == 1) {
        if (line.rfind("# ", 0) != 0) throw Error("missing header");
        read_header(nlohmann::json::parse(line.substr(2)), m);
        continue;
      }
      auto f = split_csv(line);
      if (lineno == 2) {
        if (f.empty() || f[0] != "id") throw Error("missing column line");
        m.cols.assign(f.begin() + 1, f.end());
        continue;
      }
      if (f.size() != m.cols.size() + 1) throw Error("wrong field count");
      m.rows.push_back(f[0]);
      std::vector<double> v;
      for (std::size_t j = 1; j < f.size(); ++j) {
        std::size_t used = 0;
        v.push_back(std::stod(f[j], &used));
        if (used != f[j].size()) throw Error("bad number " + f[j]);
      }
      rows.push_back(std::move(v));
    } catch (const std::exception& e) {
      throw Error("influence matrix csv line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  m.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(m.cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < m.cols.size(); ++j) m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  check_shape(m);
  return m;
}

std::string matrix_to_packed(const InfluenceMatrix& m) {
  auto h = header_json(m);
  h["rows"] = m.rows;
  h["cols"] = m.cols;
  std::string out = h.dump() + "\n";
  for (Eigen::Index i = 0; i < m.values.rows(); ++i)
    for (Eigen::Index j = 0; j < m.values.cols(); ++j) {
      double v = m.values(i, j);
      std::uint64_t u;
      std::memcpy(&u, &v, 8);
      for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
    }
  return out;
}

InfluenceMatrix matrix_from_packed(const std::string& bytes) {
  auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw Error("influence matrix packed: missing header");
  InfluenceMatrix m;
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(0, nl));
    read_header(h, m);
    m.rows = h.at("rows").get<std::vector<std::string>>();
    m.cols = h.at("cols").get<std::vector<std::string>>();
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(std::string("influence matrix packed: bad header: ") + e.what());
  }
  const std::size_t n = m.rows.size() * m.cols.size();
  if (bytes.size() != nl + 1 + 8 * n) throw Error("influence matrix packed: size mismatch");
  m.values.resize(static_cast<Eigen::Index>(m.rows.size()), static_cast<Eigen::Index>(m.cols.size()));
  std::size_t pos = nl + 1;
  for (Eigen::Index i = 0; i < m.values.rows(); ++i)
    for (Eigen::Index j = 0; j < m.values.cols(); ++j) {
      std::uint64_t u = 0;
      for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(b)])) << (8 * b);
      std::memcpy(&m.values(i, j), &u, 8);
      pos += 8;
    }
  check_shape(m);
  return m;
}

void save_matrix(const InfluenceMatrix& m, const std::filesystem::path& p) {
  write_file(p, p.extension() == ".csv" ? matrix_to_csv(m) : matrix_to_packed(m));
}

InfluenceMatrix load_matrix(const std::filesystem::path& p) {
  auto s = read_file(p);
  return p.extension() == ".csv" ? matrix_from_csv(s) : matrix_from_packed(s);
}

}  // namespace invflip
