#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "mima/experiment.hpp"
#include "mima/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace mima;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Criterion {
  std::string name;
  bool passed = false;
  double seconds = 0.0;
  double budget = 0.0;
  std::string detail;
};

std::vector<Criterion> results;

void report(Criterion c) {
  const bool in_budget = c.seconds < c.budget;
  c.passed = c.passed && in_budget;
  std::ostringstream line;
  line << (c.passed ? "PASS " : "FAIL ") << c.name << " (" << std::fixed;
  line.precision(1);
  line << c.seconds << " s, budget " << c.budget << " s)";
  if (!in_budget) line << " over budget;";
  if (!c.detail.empty()) line << ' ' << c.detail;
  std::cout << line.str() << std::endl;
  results.push_back(std::move(c));
}

void from_check(const std::string& name, double budget, const CheckReport& r) {
  std::ostringstream d;
  d << r.instances << " instances, max error " << r.max_error << " (tolerance " << r.tolerance << ")";
  if (!r.detail.empty()) d << ", " << r.detail;
  report({name, r.passed, r.seconds, budget, d.str()});
}

// Metric algebra on values where every product is exact, so scaling is bitwise.
bool metric_algebra(std::string& detail) {
  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  Rng rng(2024);
  auto dyadic = [&] { return static_cast<double>(rng.uniform_int(1, 1 << 20)) / (1 << 20); };
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(3), i(3);
    for (std::size_t n = 0; n < 3; ++n) {
      a[n] = dyadic();
      i[n] = dyadic();
    }
    for (double lambda : {0.5, 2.0, 10.0}) {
      std::vector<double> la(a), li(i);
      for (double& v : la) v *= lambda;
      for (double& v : li) v *= lambda;
      expect(msgr(la, li) == msgr(a, i), "msgr scale");
      expect(mrsgr(lambda * i[0], lambda * a[0]) == mrsgr(i[0], a[0]), "mrsgr scale");
    }
  }
  const std::vector<double> same{0.3, 0.7};
  expect(msgr(same, same) == 0.0, "msgr zero");
  expect(mrsgr(0.4, 0.4) == 0.0, "mrsgr zero");
  const std::vector<double> att{0.8, 0.5}, imm{0.2, 0.5};
  expect(std::abs(msgr(att, imm) - ((0.8 - 0.2) / 0.8 + 0.0) / 2.0) < 1e-15, "msgr arithmetic");
  expect(std::abs(mrsgr(0.45, 0.9) - 0.5) < 1e-15, "mrsgr arithmetic");
  expect(negative_denominators(std::vector<double>{0.5, -0.1}) == std::vector<std::size_t>{1},
         "negative denominator");

  Rng g(5);
  Matrix x(40, 2);
  for (double& v : x.data()) v = g.normal();
  const std::vector<GenerationPair> pairs{{x, x}};
  const SimilarityMetric cosine_metric{MetricKind::FrozenEncoderCosine, 7};
  expect(mrsgr(cosine_metric, pairs, pairs) == 0.0, "mrsgr identical batches");
  std::ostringstream d;
  d << failures.size() << " failed checks";
  for (const std::string& f : failures) d << "; " << f;
  detail = d.str();
  return failures.empty();
}

using Table = std::map<std::string, std::map<std::string, SummaryEntry>>;  // run -> method/attack

Table table_of(const std::vector<SummaryEntry>& summary) {
  Table t;
  for (const SummaryEntry& e : summary) {
    if (e.metric != "frozen_encoder_cosine") continue;
    t[e.run_id][e.method + "/" + e.attack] = e;
  }
  return t;
}

double msgr_of(const Table& t, const std::string& run, const std::string& key) {
  const auto& m = t.at(run);
  const auto it = m.find(key);
  return it != m.end() && it->second.msgr ? *it->second.msgr : std::nan("");
}

double mrsgr_of(const Table& t, const std::string& run, const std::string& key) {
  const auto& m = t.at(run);
  const auto it = m.find(key);
  return it != m.end() && it->second.mrsgr ? *it->second.mrsgr : std::nan("");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + fmt(x);
  return s;
}

// Counts seeds where MIMA's attack-averaged MSGR is at least the baseline's.
std::size_t wins(const Table& t, const std::string& baseline, std::string& detail) {
  std::size_t n = 0;
  std::vector<double> mima, other;
  for (const auto& [run, unused] : t) {
    const double a = msgr_of(t, run, "mima/mean"), b = msgr_of(t, run, baseline + "/mean");
    mima.push_back(a);
    other.push_back(b);
    if (a >= b) ++n;
  }
  detail += "mima " + join(mima) + " vs " + baseline + " " + join(other) + "; ";
  return n;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

int main() {
  const fs::path root = fs::temp_directory_path() / ("mima_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);

  from_check("merge correctness", 10, check_merge_forward());
  from_check("merge backward exactness", 30, check_merge_backward());
  from_check("denoiser gradient suite", 30, check_denoiser_gradients());
  from_check("full bi-level gradient check", 60, check_bilevel_gradient());

  {
    const auto t0 = Clock::now();
    std::string detail;
    const bool ok = metric_algebra(detail);
    report({"metric algebra", ok, seconds_since(t0), 5, detail});
  }

  const ExperimentConfig two = preset_config("2concept");
  const ExperimentConfig three = preset_config("3concept");

  auto t0 = Clock::now();
  const ExperimentOutcome out2 = run_experiment(two, root / "first");
  const double grid2_seconds = seconds_since(t0);
  const Table t2 = table_of(out2.summary);

  {
    std::vector<double> full;
    for (const auto& [run, unused] : t2) full.push_back(msgr_of(t2, run, "mima/full"));
    const std::size_t positive = std::count_if(full.begin(), full.end(), [](double v) { return v > 0; });
    std::vector<double> sorted(full);
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted.empty() ? std::nan("") : sorted[sorted.size() / 2];
    const bool ok = out2.all_ok() && full.size() == 5 && positive >= 4 && median > 0.05;
    report({"immunization effect", ok, grid2_seconds, 15 * 60,
            "full fine-tune MSGR " + join(full) + "; positive " + std::to_string(positive) + "/5, median " +
                fmt(median)});
  }

  t0 = Clock::now();
  const ExperimentOutcome out3 = run_grid(three);
  const double grid3_seconds = seconds_since(t0);
  {
    const Table t3 = table_of(out3.summary);
    std::string detail = "2concept: ";
    const std::size_t jt2 = wins(t2, "jt", detail), cp2 = wins(t2, "cp", detail);
    detail += "3concept: ";
    const std::size_t jt3 = wins(t3, "jt", detail), cp3 = wins(t3, "cp", detail);
    detail += "wins " + std::to_string(jt2) + "," + std::to_string(cp2) + "," + std::to_string(jt3) + "," +
              std::to_string(cp3) + " of 5";
    const bool ok = out3.all_ok() && jt2 >= 3 && cp2 >= 3 && jt3 >= 3 && cp3 >= 3;
    report({"baseline ordering", ok, grid2_seconds + grid3_seconds, 45 * 60, detail});
  }

  {
    std::vector<double> mima, seq;
    std::size_t positive = 0, beats = 0;
    for (const auto& [run, unused] : t2) {
      mima.push_back(mrsgr_of(t2, run, "mima/mean"));
      seq.push_back(mrsgr_of(t2, run, "sequential/mean"));
      if (mima.back() > 0) ++positive;
      if (mima.back() > seq.back()) ++beats;
    }
    const bool ok = positive >= 3 && beats >= 3;
    report({"usability preservation", ok, grid2_seconds, 45 * 60,
            "MRSGR mima " + join(mima) + " vs sequential " + join(seq) + "; positive " +
                std::to_string(positive) + "/5, above sequential " + std::to_string(beats) + "/5"});
  }

  {
    t0 = Clock::now();
    run_experiment(two, root / "second");
    const std::string a = read_file(root / "first" / two.output_dir / "results.csv");
    const std::string b = read_file(root / "second" / two.output_dir / "results.csv");
    const bool ok = !a.empty() && a == b;
    report({"determinism", ok, seconds_since(t0), 15 * 60,
            "2concept results.csv " + std::to_string(a.size()) + " bytes, " + (ok ? "identical" : "different")});
  }

  fs::remove_all(root);
  const std::size_t passed = std::count_if(results.begin(), results.end(), [](const Criterion& c) { return c.passed; });
  std::cout << passed << "/" << results.size() << " criteria passed" << std::endl;
  return passed == results.size() ? 0 : 1;
}
