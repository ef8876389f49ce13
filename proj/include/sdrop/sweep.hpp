#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "sdrop/data.hpp"
#include "sdrop/errors.hpp"
#include "sdrop/evaluate.hpp"
#include "sdrop/network.hpp"
#include "sdrop/prune.hpp"

namespace sdrop {

/// Shared widths to evaluate (every dropout layer at the same k).
struct SweepPlan {
  std::vector<std::size_t> widths;  // strictly increasing
  std::size_t stride = 1;
};

/// Widths N, N - stride, N - 2*stride, ... down to the largest lower bound,
/// returned ascending. N (the smallest layer width) is always included.
inline SweepPlan make_sweep_plan(const ModelSpec& spec, std::size_t stride = 1) {
  if (stride < 1) throw ConfigError("sweep: stride must be >= 1");
  const auto cfgs = dropout_configs(spec);
  if (cfgs.empty()) throw DomainError("sweep: model has no structural dropout layers");
  std::size_t lo = 1, hi = std::numeric_limits<std::size_t>::max();
  for (const auto& c : cfgs) {
    lo = std::max(lo, c.lower_bound);
    hi = std::min(hi, c.width);
  }
  if (lo > hi) throw DomainError("sweep: no width is valid for every dropout layer");
  SweepPlan plan{{}, stride};
  for (std::size_t k = hi;; k -= stride) {
    plan.widths.push_back(k);
    if (k < lo + stride) break;
  }
  std::reverse(plan.widths.begin(), plan.widths.end());
  return plan;
}

struct SweepRecord {
  std::size_t width = 0;
  std::size_t params = 0;
  std::size_t flops = 0;
  double metric = 0.0;   // accuracy
  double seconds = 0.0;  // evaluation wall-clock

  /// Equality of everything except timing.
  bool same_result(const SweepRecord& o) const noexcept {
    return width == o.width && params == o.params && flops == o.flops && metric == o.metric;
  }
  friend bool operator==(const SweepRecord&, const SweepRecord&) = default;
};

/// Evaluates the pruned network at every planned width. Widths are spread
/// over `threads` workers that share `net` read-only; records come back in
/// width order.
inline std::vector<SweepRecord> sweep(const Network& net, const Dataset& data, const SweepPlan& plan,
                                      unsigned threads = 1) {
  if (plan.widths.empty()) throw DomainError("sweep: empty plan");
  for (std::size_t i = 1; i < plan.widths.size(); ++i)
    if (plan.widths[i] <= plan.widths[i - 1]) throw DomainError("sweep: widths must be strictly increasing");
  for (std::size_t k : plan.widths) resolve_widths(net.spec, PruneWidth::all(k));

  std::vector<SweepRecord> records(plan.widths.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < records.size(); i = next++) {
      const auto started = std::chrono::steady_clock::now();
      const PruneWidth w = PruneWidth::all(plan.widths[i]);
      const PrunedNetwork pruned = prune(net, w);
      SweepRecord r;
      r.width = plan.widths[i];
      r.params = pruned.network.parameter_count();
      r.flops = flop_estimate(net.spec, w);
      r.metric = accuracy(pruned.network, data);
      r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      records[i] = r;
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(records.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  return records;
}

// ---------------------------------------------------------------------------
// Width selection

struct BestMetric {};
/// Smallest width whose metric is within `tolerance` of the best.
struct SmallestWithin {
  double tolerance = 0.0;
};
/// Best metric among records with at most `budget` parameters.
struct MaxParams {
  std::size_t budget = 0;
};
using SelectionPolicy = std::variant<BestMetric, SmallestWithin, MaxParams>;

/// "best_metric", "smallest_within:<eps>" or "max_params:<count>".
inline SelectionPolicy parse_policy(const std::string& text) {
  const auto colon = text.find(':');
  const std::string name = text.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  if (name == "best_metric" && arg.empty()) return BestMetric{};
  try {
    std::size_t used = 0;
    if (name == "smallest_within" && !arg.empty()) {
      const double eps = std::stod(arg, &used);
      if (used == arg.size() && eps >= 0.0) return SmallestWithin{eps};
    } else if (name == "max_params" && !arg.empty() && arg.find_first_not_of("0123456789") == std::string::npos) {
      const auto budget = std::stoull(arg, &used);
      if (used == arg.size()) return MaxParams{static_cast<std::size_t>(budget)};
    }
  } catch (const std::logic_error&) {
  }
  throw ConfigError("unknown selection policy '" + text +
                    "' (expected best_metric, smallest_within:<eps> or max_params:<count>)");
}

/// Chosen width; ties go to the smaller width.
inline std::size_t select_width(std::vector<SweepRecord> records, const SelectionPolicy& policy) {
  if (records.empty()) throw DomainError("select_width: no records");
  std::sort(records.begin(), records.end(),
            [](const SweepRecord& a, const SweepRecord& b) { return a.width < b.width; });
  auto best_of = [](const std::vector<SweepRecord>& rs) {
    const SweepRecord* best = &rs.front();
    for (const auto& r : rs)
      if (r.metric > best->metric) best = &r;
    return *best;
  };
  return std::visit(
      overloaded{
          [&](const BestMetric&) { return best_of(records).width; },
          [&](const SmallestWithin& p) {
            const double floor = best_of(records).metric - p.tolerance;
            for (const auto& r : records)
              if (r.metric >= floor) return r.width;
            return records.back().width;  // unreachable: the best record qualifies
          },
          [&](const MaxParams& p) {
            std::vector<SweepRecord> feasible;
            for (const auto& r : records)
              if (r.params <= p.budget) feasible.push_back(r);
            if (feasible.empty()) {
              const auto smallest = *std::min_element(
                  records.begin(), records.end(),
                  [](const SweepRecord& a, const SweepRecord& b) { return a.params < b.params; });
              std::ostringstream msg;
              msg << "no width fits a budget of " << p.budget << " parameters; closest is width "
                  << smallest.width << " with " << smallest.params << " parameters (metric "
                  << smallest.metric << ")";
              throw InfeasibleError(msg.str());
            }
            return best_of(feasible).width;
          },
      },
      policy);
}

// ---------------------------------------------------------------------------
// Report

inline constexpr const char* kSweepCsvHeader = "width,params,flops,metric,seconds";

/// CSV (rows ascending by width) at `csv_path`, plus an SVG plot of metric
/// against parameter count next to it (same stem, .svg).
inline void write_report(std::vector<SweepRecord> records, const std::filesystem::path& csv_path) {
  std::sort(records.begin(), records.end(),
            [](const SweepRecord& a, const SweepRecord& b) { return a.width < b.width; });
  {
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + csv_path.string() + "' for writing");
    out << kSweepCsvHeader << '\n' << std::setprecision(17);
    for (const auto& r : records)
      out << r.width << ',' << r.params << ',' << r.flops << ',' << r.metric << ',' << r.seconds << '\n';
    if (!out) throw IoError("failed writing '" + csv_path.string() + "'");
  }

  auto svg_path = csv_path;
  svg_path.replace_extension(".svg");
  std::ofstream svg(svg_path, std::ios::trunc);
  if (!svg) throw IoError("cannot open '" + svg_path.string() + "' for writing");
  constexpr double W = 640, H = 400, M = 50;
  double pmin = records.empty() ? 0 : static_cast<double>(records.front().params);
  double pmax = pmin;
  for (const auto& r : records) {
    pmin = std::min(pmin, static_cast<double>(r.params));
    pmax = std::max(pmax, static_cast<double>(r.params));
  }
  const double span = pmax > pmin ? pmax - pmin : 1.0;
  auto px = [&](double p) { return M + (p - pmin) / span * (W - 2 * M); };
  auto py = [&](double m) { return H - M - std::clamp(m, 0.0, 1.0) * (H - 2 * M); };
  svg << std::fixed << std::setprecision(2);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<line x1=\"" << M << "\" y1=\"" << H - M << "\" x2=\"" << W - M << "\" y2=\"" << H - M
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << M << "\" y1=\"" << M << "\" x2=\"" << M << "\" y2=\"" << H - M
      << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">parameters ("
      << static_cast<long long>(pmin) << " to " << static_cast<long long>(pmax) << ")</text>\n"
      << "<text x=\"15\" y=\"" << H / 2 << "\" transform=\"rotate(-90 15 " << H / 2
      << ")\" text-anchor=\"middle\">accuracy</text>\n"
      << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (const auto& r : records) svg << px(static_cast<double>(r.params)) << ',' << py(r.metric) << ' ';
  svg << "\"/>\n</svg>\n";
}

inline std::vector<SweepRecord> read_report(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw IoError("cannot open '" + csv_path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != kSweepCsvHeader)
    throw FormatError("sweep csv '" + csv_path.string() + "': unexpected header");
  std::vector<SweepRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    SweepRecord r;
    char c1 = 0, c2 = 0, c3 = 0, c4 = 0;
    if (!(row >> r.width >> c1 >> r.params >> c2 >> r.flops >> c3 >> r.metric >> c4 >> r.seconds) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',') {
      throw FormatError("sweep csv: malformed row '" + line + "'");
    }
    records.push_back(r);
  }
  return records;
}

// ---------------------------------------------------------------------------

/// Spearman rank correlation with average ranks for ties.
inline double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw ShapeError("spearman: need two equal-length series");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(xs), ry = ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace sdrop
