#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <string>
#include <vector>

namespace msdm::metrics {

/// n x D embeddings, one row per image.
struct EmbeddingSet {
  Eigen::MatrixXd embeddings;
  std::string source;  // "real" or "generated"
  std::string prompt_id;

  Eigen::Index size() const { return embeddings.rows(); }
  Eigen::Index dim() const { return embeddings.cols(); }
};

EmbeddingSet pool(const std::vector<EmbeddingSet>& sets, std::string source);

enum class CovMode { full, diagonal };

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  CovMode mode = CovMode::full;
};

inline constexpr double kRidge = 1e-6;

// Sample mean and (n-1)-denominator covariance plus kRidge * I. Diagonal mode
// drops the off-diagonal terms.
GaussianStats fit_gaussian(const Eigen::MatrixXd& x, CovMode mode);

// Symmetrizes, clamps negative eigenvalues to 0, returns V sqrt(L) V^T.
Eigen::MatrixXd matrix_sqrt_spd(const Eigen::MatrixXd& m);

// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), clamped at 0.
double frechet_distance(const GaussianStats& g1, const GaussianStats& g2);

// Diagonal covariances when either set has fewer rows than dimensions.
CovMode fid_mode(const EmbeddingSet& real, const EmbeddingSet& gen);
double fid(const EmbeddingSet& real, const EmbeddingSet& gen);

// 1000 / (1 + mean of per-prompt FIDs)
double fidelity(const std::vector<double>& per_prompt_fids);

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);
// Cosine similarity of the two set means.
double agreement_pair(const EmbeddingSet& original, const EmbeddingSet& rephrased);
// Mean of agreement_pair over index-matched sets.
double agreement(const std::vector<EmbeddingSet>& original, const std::vector<EmbeddingSet>& rephrased);

// Mean cosine distance over all unordered pairs of rows.
double set_diversity(const Eigen::MatrixXd& x);
double diversity(const std::vector<EmbeddingSet>& per_prompt);

// Global FID over pooled sets.
double fbd(const EmbeddingSet& all_real, const EmbeddingSet& all_gen);

struct RunStats {
  double mean = 0.0;
  double std = 0.0;  // n-1 denominator
};
RunStats aggregate_runs(const std::vector<double>& values);

// "72.96 ± 4.05"
std::string format_mean_std(const RunStats& s, int precision = 2);
// "45.12-50.34"
std::string format_range(const std::vector<double>& values, int precision = 2);

struct MetricReport {
  std::string model;
  std::string embedder;
  double fidelity = 0.0;
  double agreement = 0.0;
  double diversity = 0.0;
  double fbd = 0.0;
  double fid_mean = 0.0;  // test-half FID over runs
  double fid_std = 0.0;
  int run_count = 0;
  std::vector<double> run_fids;      // test half, one per run
  std::vector<double> dev_run_fids;  // dev half, one per run
  std::size_t real_samples = 0;
  std::size_t generated_samples = 0;
  std::size_t prompt_count = 0;
  std::vector<std::string> assumptions;

  void validate() const;
};

std::string to_json(const MetricReport& report);
MetricReport report_from_json(const std::string& text);

struct PromptMetricRow {
  std::string prompt_id;
  double fid = 0.0;
  double diversity = 0.0;
  double agreement_pair = 0.0;
};

void write_prompt_csv(std::ostream& os, const std::vector<PromptMetricRow>& rows);

}  // namespace msdm::metrics
