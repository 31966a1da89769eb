#include "msdm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "msdm/errors.hpp"

namespace msdm::metrics {

EmbeddingSet pool(const std::vector<EmbeddingSet>& sets, std::string source) {
  Eigen::Index rows = 0, dim = -1;
  for (const auto& s : sets) {
    if (dim >= 0 && s.dim() != dim) throw ContractError("pool: embedding widths differ");
    dim = s.dim();
    rows += s.size();
  }
  EmbeddingSet out;
  out.source = std::move(source);
  out.embeddings.resize(rows, std::max<Eigen::Index>(dim, 0));
  Eigen::Index r = 0;
  for (const auto& s : sets) {
    out.embeddings.middleRows(r, s.size()) = s.embeddings;
    r += s.size();
  }
  return out;
}

GaussianStats fit_gaussian(const Eigen::MatrixXd& x, CovMode mode) {
  if (x.rows() < 2) throw InsufficientSamplesError("fit_gaussian: need at least 2 samples, got " + std::to_string(x.rows()));
  if (!x.allFinite()) throw NumericError("fit_gaussian: non-finite embedding");
  GaussianStats g;
  g.mode = mode;
  g.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - g.mean.transpose();
  g.cov = (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
  if (mode == CovMode::diagonal) g.cov = Eigen::MatrixXd(g.cov.diagonal().asDiagonal());
  g.cov.diagonal().array() += kRidge;
  return g;
}

Eigen::MatrixXd matrix_sqrt_spd(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw DimensionError("matrix_sqrt_spd: matrix is not square");
  if (!m.allFinite()) throw NumericError("matrix_sqrt_spd: non-finite entry");
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw NumericError("matrix_sqrt_spd: eigendecomposition failed");
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

double frechet_distance(const GaussianStats& g1, const GaussianStats& g2) {
  if (g1.mean.size() != g2.mean.size()) throw ContractError("frechet_distance: dimension mismatch");
  if (g1.mode != g2.mode) throw ContractError("frechet_distance: covariance modes differ");
  const double mean_term = (g1.mean - g2.mean).squaredNorm();
  double cross;
  if (g1.mode == CovMode::diagonal) {
    cross = (g1.cov.diagonal().array() * g2.cov.diagonal().array()).cwiseMax(0.0).sqrt().sum();
  } else {
    const Eigen::MatrixXd s1 = matrix_sqrt_spd(g1.cov);
    cross = matrix_sqrt_spd(s1 * g2.cov * s1).trace();
  }
  const double d = mean_term + g1.cov.trace() + g2.cov.trace() - 2.0 * cross;
  if (!std::isfinite(d)) throw NumericError("frechet_distance: non-finite result");
  return std::max(d, 0.0);
}

CovMode fid_mode(const EmbeddingSet& real, const EmbeddingSet& gen) {
  return std::min(real.size(), gen.size()) < real.dim() ? CovMode::diagonal : CovMode::full;
}

double fid(const EmbeddingSet& real, const EmbeddingSet& gen) {
  if (real.dim() != gen.dim()) throw ContractError("fid: embedding widths differ");
  const CovMode mode = fid_mode(real, gen);
  return frechet_distance(fit_gaussian(real.embeddings, mode), fit_gaussian(gen.embeddings, mode));
}

double fidelity(const std::vector<double>& per_prompt_fids) {
  if (per_prompt_fids.empty()) throw ContractError("fidelity: no per-prompt FIDs");
  double sum = 0.0;
  for (double f : per_prompt_fids) {
    if (!(f >= 0.0)) throw ContractError("fidelity: FID values must be non-negative");
    sum += f;
  }
  return 1000.0 / (1.0 + sum / static_cast<double>(per_prompt_fids.size()));
}

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine_similarity: zero vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

double agreement_pair(const EmbeddingSet& original, const EmbeddingSet& rephrased) {
  if (original.size() < 1 || rephrased.size() < 1) throw InsufficientSamplesError("agreement: empty set");
  if (original.dim() != rephrased.dim()) throw ContractError("agreement: embedding widths differ");
  return cosine_similarity(original.embeddings.colwise().mean().transpose(),
                           rephrased.embeddings.colwise().mean().transpose());
}

double agreement(const std::vector<EmbeddingSet>& original, const std::vector<EmbeddingSet>& rephrased) {
  if (original.size() != rephrased.size() || original.empty()) {
    throw ContractError("agreement: original and rephrased sets must pair one to one");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < original.size(); ++i) sum += agreement_pair(original[i], rephrased[i]);
  return sum / static_cast<double>(original.size());
}

double set_diversity(const Eigen::MatrixXd& x) {
  const Eigen::Index n = x.rows();
  if (n < 2) throw InsufficientSamplesError("diversity: need at least 2 samples");
  Eigen::MatrixXd unit = x;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = unit.row(i).norm();
    if (norm == 0.0) throw NumericError("diversity: zero embedding");
    unit.row(i) /= norm;
  }
  const Eigen::MatrixXd gram = unit * unit.transpose();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) sum += 1.0 - std::clamp(gram(i, j), -1.0, 1.0);
  }
  return sum / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

double diversity(const std::vector<EmbeddingSet>& per_prompt) {
  if (per_prompt.empty()) throw ContractError("diversity: no prompts");
  double sum = 0.0;
  for (const auto& s : per_prompt) sum += set_diversity(s.embeddings);
  return sum / static_cast<double>(per_prompt.size());
}

double fbd(const EmbeddingSet& all_real, const EmbeddingSet& all_gen) { return fid(all_real, all_gen); }

RunStats aggregate_runs(const std::vector<double>& values) {
  if (values.size() < 2) throw InsufficientSamplesError("aggregate_runs: need at least 2 runs");
  RunStats s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return s;
}

std::string format_mean_std(const RunStats& s, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << s.mean << " ± " << s.std;
  return os.str();
}

std::string format_range(const std::vector<double>& values, int precision) {
  if (values.empty()) throw ContractError("format_range: no values");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *lo << "-" << *hi;
  return os.str();
}

void MetricReport::validate() const {
  if (!(agreement >= -1.0 && agreement <= 1.0)) throw ContractError("report: agreement outside [-1, 1]");
  if (!(diversity >= 0.0)) throw ContractError("report: negative diversity");
  if (!(fbd >= 0.0)) throw ContractError("report: negative fbd");
  if (!(fidelity > 0.0 && fidelity <= 1000.0)) throw ContractError("report: fidelity outside (0, 1000]");
  if (run_fids.size() != static_cast<std::size_t>(run_count)) throw ContractError("report: run list length != run_count");
}

std::string to_json(const MetricReport& r) {
  nlohmann::json j = {{"model", r.model},
                      {"embedder", r.embedder},
                      {"fidelity", r.fidelity},
                      {"agreement", r.agreement},
                      {"diversity", r.diversity},
                      {"fbd", r.fbd},
                      {"fid_mean", r.fid_mean},
                      {"fid_std", r.fid_std},
                      {"run_count", r.run_count},
                      {"run_fids", r.run_fids},
                      {"dev_run_fids", r.dev_run_fids},
                      {"real_samples", r.real_samples},
                      {"generated_samples", r.generated_samples},
                      {"prompt_count", r.prompt_count},
                      {"assumptions", r.assumptions}};
  return j.dump(2);
}

MetricReport report_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MetricReport r;
    r.model = j.value("model", "");
    r.embedder = j.at("embedder").get<std::string>();
    r.fidelity = j.at("fidelity").get<double>();
    r.agreement = j.at("agreement").get<double>();
    r.diversity = j.at("diversity").get<double>();
    r.fbd = j.at("fbd").get<double>();
    r.fid_mean = j.at("fid_mean").get<double>();
    r.fid_std = j.at("fid_std").get<double>();
    r.run_count = j.at("run_count").get<int>();
    r.run_fids = j.value("run_fids", std::vector<double>{});
    r.dev_run_fids = j.value("dev_run_fids", std::vector<double>{});
    r.real_samples = j.value("real_samples", std::size_t{0});
    r.generated_samples = j.value("generated_samples", std::size_t{0});
    r.prompt_count = j.value("prompt_count", std::size_t{0});
    r.assumptions = j.value("assumptions", std::vector<std::string>{});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("metric report: ") + e.what());
  }
}

void write_prompt_csv(std::ostream& os, const std::vector<PromptMetricRow>& rows) {
  os << "prompt_id,fid,diversity,agreement_pair\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g\n", r.fid, r.diversity, r.agreement_pair);
    os << r.prompt_id << buf;
  }
}

}  // namespace msdm::metrics
