#include "msdm/harness/correlate.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "msdm/errors.hpp"

namespace msdm::annotation {

std::string export_header() {
  std::string h = "task_id,prompt_kind,model_id";
  for (auto a : kAspects) (h += ',') += a;
  return h + ",rank";
}

}  // namespace msdm::annotation

namespace msdm::harness {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ContractError("spearman: length mismatch");
  if (x.size() < 2) return 0.0;
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

int to_int(const std::string& s, std::size_t line) {
  int v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("export line " + std::to_string(line) + ": '" + s + "' is not an integer");
  }
  return v;
}

}  // namespace

std::vector<annotation::ExportRow> parse_export_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("export: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != annotation::export_header()) throw ConfigError("export: unexpected header '" + line + "'");
  std::vector<annotation::ExportRow> rows;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 4 + annotation::kAspectCount) {
      throw ConfigError("export line " + std::to_string(n) + ": expected " +
                        std::to_string(4 + annotation::kAspectCount) + " columns");
    }
    annotation::ExportRow r;
    r.task_id = cells[0];
    r.prompt_kind = cells[1];
    r.model_id = cells[2];
    if (!cells[3].empty()) {
      std::array<int, annotation::kAspectCount> s{};
      for (std::size_t a = 0; a < s.size(); ++a) s[a] = to_int(cells[3 + a], n);
      r.scores = s;
    }
    r.rank = to_int(cells.back(), n);
    if (r.rank < 1 || r.rank > 4) throw ConfigError("export line " + std::to_string(n) + ": rank outside 1..4");
    rows.push_back(std::move(r));
  }
  return rows;
}

CorrelationTable correlate_ranks(const std::vector<annotation::ExportRow>& rows,
                                 const std::map<std::string, metrics::MetricReport>& reports,
                                 std::size_t expected_tasks) {
  struct Metric {
    const char* name;
    int sign;
    double (*get)(const metrics::MetricReport&);
  };
  // Rank 1 is best, so a lower-is-better metric should rise with the rank number.
  static const Metric kMetrics[] = {
      {"fbd", +1, [](const metrics::MetricReport& r) { return r.fbd; }},
      {"fid", +1, [](const metrics::MetricReport& r) { return r.fid_mean; }},
      {"fidelity", -1, [](const metrics::MetricReport& r) { return r.fidelity; }},
      {"agreement", -1, [](const metrics::MetricReport& r) { return r.agreement; }},
      {"diversity", -1, [](const metrics::MetricReport& r) { return r.diversity; }},
  };

  CorrelationTable table;
  std::map<std::string, std::set<std::string>> models_per_task;
  std::set<std::string> unknown;
  for (const auto& r : rows) {
    models_per_task[r.task_id].insert(r.model_id);
    if (r.model_id != annotation::kRealModelId && !reports.count(r.model_id)) unknown.insert(r.model_id);
  }
  table.tasks = models_per_task.size();
  for (const auto& [task, models] : models_per_task) {
    if (models.size() != 4) {
      table.warnings.push_back("task " + task + " has " + std::to_string(models.size()) + " of 4 ranked candidates");
    }
  }
  if (expected_tasks > 0 && table.tasks < expected_tasks) {
    table.warnings.push_back("partial annotations: " + std::to_string(table.tasks) + " of " +
                             std::to_string(expected_tasks) + " tasks rated");
  }
  for (const auto& m : unknown) table.warnings.push_back("no metric report for model '" + m + "'; rows skipped");

  for (const auto& metric : kMetrics) {
    MetricCorrelation out;
    out.metric = metric.name;
    out.expected_sign = metric.sign;
    std::vector<double> ranks, values;
    std::array<double, 4> sums{};
    for (const auto& r : rows) {
      const auto it = reports.find(r.model_id);
      if (it == reports.end()) continue;
      const double v = metric.get(it->second);
      ranks.push_back(r.rank);
      values.push_back(v);
      sums[static_cast<std::size_t>(r.rank - 1)] += v;
      ++out.tier_count[static_cast<std::size_t>(r.rank - 1)];
    }
    for (std::size_t t = 0; t < 4; ++t) {
      out.tier_mean[t] = out.tier_count[t] ? sums[t] / static_cast<double>(out.tier_count[t]) : std::nan("");
    }
    out.samples = ranks.size();
    out.spearman = spearman(ranks, values);
    table.rows.push_back(out);
  }
  return table;
}

void write_correlation_csv(std::ostream& os, const CorrelationTable& table) {
  os << "metric,expected_sign,spearman,n,tier1_mean,tier2_mean,tier3_mean,tier4_mean\n";
  char buf[96];
  for (const auto& r : table.rows) {
    os << r.metric << ',' << (r.expected_sign > 0 ? "+" : "-") << ',';
    std::snprintf(buf, sizeof buf, "%.6f,%zu", r.spearman, r.samples);
    os << buf;
    for (double m : r.tier_mean) {
      if (std::isnan(m)) {
        os << ",";
      } else {
        std::snprintf(buf, sizeof buf, ",%.6f", m);
        os << buf;
      }
    }
    os << '\n';
  }
}

}  // namespace msdm::harness
