#include "tp/comnhallu.hpp"

#include <cmath>
#include <json.hpp>

#include "tp/binary_io.hpp"
#include "tp/error.hpp"

namespace tp {

using linalg::Matrix;

namespace {

Matrix rows_to_matrix(const std::vector<std::vector<double>>& rows, std::size_t dim) {
  Matrix m(rows.size(), dim);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != dim) throw ContractViolation("row " + std::to_string(r) + " has the wrong dimension");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

// Anchor projections in one domain's own frame; anchors equal to the mean
// are dropped from both sides.
Matrix anchor_projections(const std::vector<std::vector<double>>& anchors, const DomainStats& stats,
                          const std::vector<bool>& keep) {
  std::size_t n = 0;
  for (bool k : keep) n += k;
  Matrix p(n, stats.d_prime);
  std::size_t r = 0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (!keep[i]) continue;
    const auto v = vecmat(*normalize_state(anchors[i], stats.mean), stats.basis);
    std::copy(v.begin(), v.end(), p.row(r++).begin());
  }
  return p;
}

}  // namespace

std::optional<std::vector<double>> normalize_state(std::span<const double> h, std::span<const double> mean) {
  if (h.size() != mean.size()) {
    throw ContractViolation("state has dimension " + std::to_string(h.size()) + ", domain has " +
                            std::to_string(mean.size()));
  }
  std::vector<double> v(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) v[i] = h[i] - mean[i];
  const double norm = linalg::frobenius_norm(v);
  if (norm == 0.0) return std::nullopt;
  for (double& x : v) x /= norm;
  return v;
}

CenteredRows center_normalize(const std::vector<std::vector<double>>& states, Diagnostics* diagnostics) {
  if (states.size() < 2) throw ContractViolation("center_normalize: need at least two states");
  const std::size_t d = states.front().size();
  CenteredRows out;
  out.mean.assign(d, 0.0);
  for (const auto& s : states) {
    if (s.size() != d) throw ContractViolation("center_normalize: ragged input");
    for (std::size_t j = 0; j < d; ++j) out.mean[j] += s[j];
  }
  for (double& m : out.mean) m /= static_cast<double>(states.size());

  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < states.size(); ++i) {
    auto v = normalize_state(states[i], out.mean);
    if (!v) {
      ++out.dropped;
      continue;
    }
    rows.push_back(std::move(*v));
    out.kept.push_back(i);
  }
  if (out.dropped && diagnostics) {
    diagnostics->note("center_normalize: dropped " + std::to_string(out.dropped) + " state(s) equal to the mean");
  }
  if (rows.empty()) throw DegenerateDataError("center_normalize: every state equals the mean");
  out.rows = rows_to_matrix(rows, d);
  return out;
}

DomainStats build_subspace(const Matrix& normalized, std::size_t d_prime) {
  if (normalized.rows() >= 1 && d_prime > normalized.rows() - 1) {
    throw RankError("build_subspace: d′=" + std::to_string(d_prime) + " exceeds N−1 for N=" +
                        std::to_string(normalized.rows()),
                    normalized.rows() - 1);
  }
  auto ps = linalg::principal_subspace(normalized, d_prime);
  DomainStats s;
  s.basis = std::move(ps.basis);
  s.variances = std::move(ps.variances);
  s.d_prime = d_prime;
  return s;
}

Alignment align_subspaces(const Matrix& k_s, const Matrix& k_t) {
  if (k_s.cols() != k_t.cols()) throw DimensionError("align_subspaces: d′ differs between domains");
  if (k_s.rows() != k_t.rows()) {
    throw DimensionError("align_subspaces: K_SᵀK_T needs equal ambient dimensions; supply anchors instead");
  }
  Alignment a;
  a.m = linalg::matmul_tn(k_s, k_t);
  a.k_s_align = linalg::matmul(k_s, a.m);
  return a;
}

Alignment align_subspaces_anchored(const Matrix& k_s, const Matrix& k_t, const Matrix& p_s, const Matrix& p_t) {
  if (k_s.cols() != k_t.cols() || p_s.cols() != k_s.cols() || p_t.cols() != k_t.cols()) {
    throw DimensionError("align_subspaces: d′ differs between domains");
  }
  if (p_s.rows() != p_t.rows()) throw ContractViolation("align_subspaces: anchor sets are not paired");
  Alignment a;
  a.m = linalg::least_squares(p_s, p_t);
  a.k_s_align = linalg::matmul(k_s, a.m);
  return a;
}

AlignmentBundle fit_comnhallu(const std::vector<std::vector<double>>& source_states,
                              const std::vector<std::vector<double>>& target_states, std::size_t d_prime,
                              const AnchorPairs* anchors, Diagnostics* diagnostics) {
  auto src = center_normalize(source_states, diagnostics);
  auto tgt = center_normalize(target_states, diagnostics);
  AlignmentBundle b;
  b.d_prime = d_prime;
  b.source = build_subspace(src.rows, d_prime);
  b.source.mean = std::move(src.mean);
  b.target = build_subspace(tgt.rows, d_prime);
  b.target.mean = std::move(tgt.mean);

  Alignment a;
  if (anchors) {
    if (anchors->source.size() != anchors->target.size()) {
      throw ContractViolation("fit_comnhallu: anchor lists differ in length");
    }
    std::vector<bool> keep(anchors->source.size(), true);
    std::size_t dropped = 0;
    for (std::size_t i = 0; i < keep.size(); ++i) {
      keep[i] = normalize_state(anchors->source[i], b.source.mean) && normalize_state(anchors->target[i], b.target.mean);
      dropped += !keep[i];
    }
    if (dropped && diagnostics) diagnostics->note("fit_comnhallu: dropped " + std::to_string(dropped) + " anchor(s)");
    const auto p_s = anchor_projections(anchors->source, b.source, keep);
    const auto p_t = anchor_projections(anchors->target, b.target, keep);
    if (p_s.rows() < d_prime) {
      throw RankError("fit_comnhallu: need at least d′ anchors, got " + std::to_string(p_s.rows()), p_s.rows());
    }
    a = align_subspaces_anchored(b.source.basis, b.target.basis, p_s, p_t);
  } else {
    a = align_subspaces(b.source.basis, b.target.basis);
  }
  b.m = std::move(a.m);
  b.source.basis = std::move(a.k_s_align);
  return b;
}

std::vector<double> project_state(std::span<const double> h, Domain domain, const AlignmentBundle& bundle,
                                  Diagnostics* diagnostics) {
  const auto& stats = domain == Domain::kSource ? bundle.source : bundle.target;
  auto v = normalize_state(h, stats.mean);
  if (!v) {
    if (diagnostics) diagnostics->note("project_state: state equals the domain mean; projected to zero");
    return std::vector<double>(bundle.d_prime, 0.0);
  }
  return linalg::vecmat(*v, stats.basis);
}

Matrix project_states(const std::vector<std::vector<double>>& states, Domain domain, const AlignmentBundle& bundle,
                      Diagnostics* diagnostics) {
  const auto& stats = domain == Domain::kSource ? bundle.source : bundle.target;
  const std::size_t d = stats.mean.size();
  Matrix x(states.size(), d);
  std::size_t zero = 0;
  for (std::size_t r = 0; r < states.size(); ++r) {
    auto v = normalize_state(states[r], stats.mean);
    if (v) {
      std::copy(v->begin(), v->end(), x.row(r).begin());
    } else {
      ++zero;
    }
  }
  if (zero && diagnostics) {
    diagnostics->note("project_states: " + std::to_string(zero) + " state(s) equal the domain mean");
  }
  return linalg::matmul(x, stats.basis);
}

std::vector<LabeledState> project_labeled(const std::vector<LabeledState>& states, Domain domain,
                                          const AlignmentBundle& bundle) {
  std::vector<LabeledState> out = states;
  for (auto& s : out) s.vector = project_state(s.vector, domain, bundle);
  return out;
}

void save_bundle(const std::filesystem::path& path, const AlignmentBundle& b) {
  nlohmann::ordered_json head;
  head["format"] = "tpbundle";
  head["version"] = 1;
  head["d_s"] = b.source.mean.size();
  head["d_t"] = b.target.mean.size();
  head["d_prime"] = b.d_prime;
  head["config_hash"] = b.config_hash;
  std::string out = head.dump() + "\n";
  auto put = [&](std::span<const double> v) {
    for (double x : v) io::append_le(out, x);
  };
  put(b.source.mean);
  put(b.target.mean);
  put(b.source.basis.data());
  put(b.target.basis.data());
  put(b.m.data());
  io::write_file(path, out);
}

AlignmentBundle load_bundle(const std::filesystem::path& path) {
  using Kind = ParseError::Kind;
  if (!std::filesystem::exists(path)) throw IoError("missing alignment bundle " + path.string());
  const std::string raw = io::read_file(path);
  const auto nl = raw.find('\n');
  if (nl == std::string::npos) throw ParseError(Kind::kHeader, 0, "bundle has no header");
  AlignmentBundle b;
  std::size_t d_s = 0, d_t = 0;
  try {
    auto head = nlohmann::json::parse(raw.substr(0, nl));
    if (head.value("format", "") != "tpbundle") throw ParseError(Kind::kHeader, 0, "not a tpbundle file");
    if (head.at("version").get<int>() != 1) throw ParseError(Kind::kVersion, 0, "unsupported tpbundle version");
    d_s = head.at("d_s").get<std::size_t>();
    d_t = head.at("d_t").get<std::size_t>();
    b.d_prime = head.at("d_prime").get<std::size_t>();
    b.config_hash = head.value("config_hash", "");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(Kind::kHeader, 0, e.what());
  }
  const std::size_t k = b.d_prime;
  const std::string_view body(raw.data() + nl + 1, raw.size() - nl - 1);
  const std::size_t expect = d_s + d_t + d_s * k + d_t * k + k * k;
  if (body.size() != expect * 8) throw ParseError(Kind::kTruncated, 0, "bundle body has the wrong size");
  std::size_t at = 0;
  auto take = [&](std::span<double> dst) {
    for (double& x : dst) {
      x = io::read_le<double>(body, at);
      at += 8;
    }
  };
  b.source.mean.resize(d_s);
  b.target.mean.resize(d_t);
  b.source.basis = Matrix(d_s, k);
  b.target.basis = Matrix(d_t, k);
  b.m = Matrix(k, k);
  take(b.source.mean);
  take(b.target.mean);
  take(b.source.basis.data());
  take(b.target.basis.data());
  take(b.m.data());
  b.source.d_prime = b.target.d_prime = k;
  return b;
}

}  // namespace tp
