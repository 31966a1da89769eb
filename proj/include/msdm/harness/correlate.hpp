#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "msdm/annotation/schema.hpp"
#include "msdm/metrics.hpp"

namespace msdm::harness {

// 1-based ranks; tied values share the mean of the positions they occupy.
std::vector<double> average_ranks(const std::vector<double>& v);
// Pearson correlation of average ranks. 0 when either side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

std::vector<annotation::ExportRow> parse_export_csv(const std::string& text);

struct MetricCorrelation {
  std::string metric;
  int expected_sign = 0;  // sign of Spearman(rank, metric) if experts agree with the metric
  double spearman = 0.0;
  std::array<double, 4> tier_mean{};  // index 0 is rank 1 (best)
  std::array<std::size_t, 4> tier_count{};
  std::size_t samples = 0;
};

struct CorrelationTable {
  std::vector<MetricCorrelation> rows;
  std::vector<std::string> warnings;
  std::size_t tasks = 0;
};

// Rows whose model_id has no report (the real-image rows) are skipped.
// expected_tasks > 0 adds a warning when fewer tasks were rated.
CorrelationTable correlate_ranks(const std::vector<annotation::ExportRow>& rows,
                                 const std::map<std::string, metrics::MetricReport>& reports,
                                 std::size_t expected_tasks = 0);

// metric,expected_sign,spearman,n,tier1_mean,...,tier4_mean
void write_correlation_csv(std::ostream& os, const CorrelationTable& table);

}  // namespace msdm::harness
