#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "mima/experiment.hpp"

namespace mima {

namespace {

constexpr const char* kToolVersion = "1.0.0";

double flat_cosine(const Matrix& a, const Matrix& b) {
  return inner(a, b) / (frobenius_norm(a) * frobenius_norm(b));
}

// Stream layout under the master seed, per concept set.
Rng set_rng(const ExperimentConfig& cfg, std::size_t set_index) {
  return Rng(cfg.seed).split(set_index + 1);
}

Rng world_rng(const ExperimentConfig& cfg, std::size_t set_index, std::uint64_t purpose) {
  return set_rng(cfg, set_index).split(purpose);
}

Rng immunize_rng(const ExperimentConfig& cfg, std::size_t set_index, ImmunizeMethod m) {
  return set_rng(cfg, set_index).split(100 + static_cast<std::uint64_t>(m));
}

Rng attack_rng(const ExperimentConfig& cfg, std::size_t set_index, std::size_t attack,
               std::size_t concept_index) {
  return set_rng(cfg, set_index).split(1000 + 1000 * attack + concept_index);
}

ConceptSpec gaussian_concept(int token_id, Matrix embedding, std::vector<double> mean, double stddev) {
  ConceptSpec spec;
  spec.token_id = token_id;
  spec.embedding = std::move(embedding);
  spec.components.push_back(GaussianComponent{std::move(mean), stddev, 1.0});
  return spec;
}

ParamSet pretrain(const ExperimentConfig& cfg, std::span<const ConceptSpec> concepts, Rng rng) {
  Rng init_rng = rng.split(0);
  Denoiser model = Denoiser::init(cfg.arch, init_rng);
  if (concepts.empty() || cfg.pretrain.steps == 0) return model.params();
  const NoiseSchedule schedule = cfg.schedule();
  const ParamSignature sig = cfg.arch.signature();
  Rng data_rng = rng.split(1);
  Rng noise_rng = rng.split(2);
  std::vector<double> flat = model.params().flatten();
  for (std::size_t step = 0; step < cfg.pretrain.steps; ++step) {
    std::vector<double> grad(flat.size(), 0.0);
    for (const ConceptSpec& c : concepts) {
      const Matrix x0 = sample_concept(c, cfg.pretrain.batch_size, data_rng);
      const LossGrad g = loss(model, x0, c.embedding, schedule, noise_rng);
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g.grad[i];
    }
    const double scale = cfg.pretrain.lr / static_cast<double>(concepts.size());
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] -= scale * grad[i];
    model.set_params(ParamSet::unflatten(sig, flat));
  }
  for (double v : flat)
    if (!std::isfinite(v)) throw Error(Errc::NonFiniteLoss, "pretraining diverged");
  return model.params();
}

// Runs jobs [0, count) on `workers` threads; returns the error text per job.
std::vector<std::optional<std::string>> run_pool(std::size_t count, std::size_t workers,
                                                 const std::function<void(std::size_t)>& job) {
  std::vector<std::optional<std::string>> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        job(i);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(workers, count));
  if (n == 1) {
    worker();
    return errors;
  }
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < n; ++t) threads.emplace_back(worker);
  for (std::thread& t : threads) t.join();
  return errors;
}

bool is_other(const std::string& concept_id) { return concept_id.rfind("other", 0) == 0; }

double rounded(double v) { return std::strtod(format_value(v).c_str(), nullptr); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string optional_value(const std::optional<double>& v) { return v ? format_value(*v) : ""; }

}  // namespace

Embeddings gen_embeddings(std::size_t n, std::size_t reg_count, std::size_t l, std::size_t c,
                          std::uint64_t seed, std::size_t max_attempts) {
  if (n < 1) throw Error(Errc::InvalidArgument, "gen_embeddings needs at least one concept");
  if (reg_count < 1) throw Error(Errc::InvalidArgument, "gen_embeddings needs at least one regularization embedding");
  if (l < 1 || c < 1) throw Error(Errc::InvalidArgument, "embedding shape must be non-empty");
  Rng rng = Rng(seed).split(0);
  Embeddings out;
  std::size_t attempts = 0;
  while (out.concepts.size() < n) {
    Matrix e = rng.normal_matrix(l, c);
    bool distinct = true;
    for (const Matrix& prev : out.concepts) distinct = distinct && flat_cosine(prev, e) < 0.5;
    if (distinct) {
      out.concepts.push_back(std::move(e));
    } else if (++attempts > max_attempts) {
      throw Error(Errc::ResampleLimitExceeded,
                  "could not draw " + std::to_string(n) + " embeddings with pairwise cosine < 0.5");
    }
  }
  Rng reg_rng = Rng(seed).split(1);
  out.regularization = reg_rng.normal_matrix(reg_count * l, c);
  return out;
}

const ConceptSpec& World::concept_at(std::size_t i) const {
  return i < targets.size() ? targets[i] : others.at(i - targets.size());
}

std::string World::concept_id(std::size_t i) const {
  return i < targets.size() ? std::to_string(i) : "other" + std::to_string(i - targets.size());
}

World build_world(const ExperimentConfig& cfg, std::size_t set_index) {
  const ConceptSetConfig& set = cfg.concept_sets.at(set_index);
  const Arch& arch = cfg.arch;
  const std::size_t total = set.num_concepts + set.num_other_concepts;
  const std::size_t generic = set.regularization_size - set.num_other_concepts;
  const Embeddings emb =
      gen_embeddings(total, std::max<std::size_t>(generic, 1), arch.tokens, arch.embed_dim, set.seed);

  Rng layout = Rng(set.seed).split(2);
  const double offset = 2.0 * std::numbers::pi * layout.uniform();
  std::vector<ConceptSpec> targets, others;
  for (std::size_t i = 0; i < total; ++i) {
    std::vector<double> mean(arch.data_dim, 0.0);
    const double angle = offset + 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(total);
    mean[0] = set.radius * std::cos(angle);
    if (arch.data_dim > 1) mean[1] = set.radius * std::sin(angle);
    ConceptSpec spec = gaussian_concept(static_cast<int>(i), emb.concepts[i], std::move(mean), set.stddev);
    (i < set.num_concepts ? targets : others).push_back(std::move(spec));
  }

  // Generic concepts: broad data centred at the origin, conditioned on the
  // regularization embeddings.
  std::vector<ConceptSpec> generics;
  for (std::size_t g = 0; g < generic; ++g) {
    generics.push_back(gaussian_concept(static_cast<int>(total + g),
                                        row_block(emb.regularization, g * arch.tokens, arch.tokens),
                                        std::vector<double>(arch.data_dim, 0.0), set.radius));
  }

  std::vector<Matrix> reg_blocks;
  for (const ConceptSpec& o : others) reg_blocks.push_back(o.embedding);
  for (const ConceptSpec& g : generics) reg_blocks.push_back(g.embedding);

  std::vector<ConceptSpec> known = others;
  known.insert(known.end(), generics.begin(), generics.end());
  ParamSet theta_p = pretrain(cfg, known, world_rng(cfg, set_index, 0));

  Rng pool_rng = world_rng(cfg, set_index, 1);
  Rng attack_data_rng = world_rng(cfg, set_index, 2);
  Rng reference_rng = world_rng(cfg, set_index, 3);

  ImmunizeSetup setup;
  setup.schedule = cfg.schedule();
  setup.concepts = targets;
  for (const ConceptSpec& t : targets) setup.data.push_back(sample_concept(t, cfg.data.immunize_samples, pool_rng));
  setup.regularization = vstack(reg_blocks);
  setup.pretrained = theta_p;

  World world{std::move(targets), std::move(others), std::move(setup), {}, {},
              Denoiser(arch, std::move(theta_p))};
  for (std::size_t i = 0; i < world.num_concepts(); ++i) {
    world.attack_data.push_back(sample_concept(world.concept_at(i), cfg.data.attack_samples, attack_data_rng));
    world.references.push_back(sample_concept(world.concept_at(i), cfg.data.reference_samples, reference_rng));
  }
  world.setup.validate(arch);
  return world;
}

ArmOutput run_arm(const ExperimentConfig& cfg, std::size_t set_index, const World& world,
                  std::optional<ImmunizeMethod> method) {
  ArmOutput out;
  out.theta = world.pretrained.params();
  if (method) {
    Rng rng = immunize_rng(cfg, set_index, *method);
    const ParamSet& pre = world.pretrained.params();
    switch (*method) {
      case ImmunizeMethod::Mima: out.theta = run_mima(cfg.arch, pre, world.setup, cfg.immunize, rng).theta; break;
      case ImmunizeMethod::Jt: out.theta = run_jt(cfg.arch, pre, world.setup, cfg.immunize, rng).theta; break;
      case ImmunizeMethod::Cp: out.theta = run_cp(cfg.arch, pre, world.setup, cfg.immunize, rng).theta; break;
      case ImmunizeMethod::Sequential:
        out.theta = run_sequential(cfg.arch, pre, world.setup, cfg.immunize, rng).theta;
        break;
    }
  }
  const Denoiser model(cfg.arch, out.theta);
  const NoiseSchedule schedule = cfg.schedule();
  for (std::size_t a = 0; a < cfg.attacks.size(); ++a) {
    std::vector<Trajectory> per_concept;
    for (std::size_t k = 0; k < world.num_concepts(); ++k) {
      Rng rng = attack_rng(cfg, set_index, a, k);
      per_concept.push_back(trajectory(model, cfg.attacks[a].method, world.concept_at(k), world.attack_data[k],
                                       schedule, cfg.checkpoints, cfg.metrics.front(), world.references[k],
                                       cfg.data.generated_samples, rng));
    }
    out.runs.push_back(std::move(per_concept));
  }
  return out;
}

std::string format_value(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%#.9g", v);
  return buf;
}

void write_results(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << kResultsHeader << '\n';
  for (const ResultRow& r : rows) {
    out << r.run_id << ',' << r.method << ',' << r.attack << ',' << r.concept_id << ',' << r.step << ','
        << r.metric << ',' << r.arm << ',' << format_value(r.value) << '\n';
  }
}

void emit_results(const std::vector<ResultRow>& rows, const std::filesystem::path& path) {
  if (rows.empty()) throw Error(Errc::InvalidArgument, "no result rows to emit");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  write_results(out, rows);
  if (!out) throw Error(Errc::IoError, "failed writing " + path.string());
}

std::vector<ResultRow> parse_results(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kResultsHeader)
    throw Error(Errc::IoError, "results header must be '" + std::string(kResultsHeader) + "'");
  std::vector<ResultRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv_line(line);
    if (f.size() != 8) throw Error(Errc::IoError, "line " + std::to_string(line_no) + ": expected 8 fields");
    ResultRow r{f[0], f[1], f[2], f[3], 0, f[5], f[6], 0.0};
    char* end = nullptr;
    r.step = std::strtoull(f[4].c_str(), &end, 10);
    if (f[4].empty() || *end != '\0') throw Error(Errc::IoError, "line " + std::to_string(line_no) + ": bad step");
    r.value = std::strtod(f[7].c_str(), &end);
    if (f[7].empty() || *end != '\0') throw Error(Errc::IoError, "line " + std::to_string(line_no) + ": bad value");
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<ResultRow> load_results(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot read " + path.string());
  return parse_results(in);
}

std::vector<ResultRow> make_rows(const ExperimentConfig& cfg, std::size_t set_index, const World& world,
                                 const ArmOutput& none,
                                 const std::vector<std::pair<ImmunizeMethod, ArmOutput>>& arms) {
  const std::string run_id = cfg.concept_sets.at(set_index).name;
  std::vector<ResultRow> rows;
  auto emit = [&](const std::string& method, const ArmOutput* arm) {
    for (std::size_t a = 0; a < cfg.attacks.size(); ++a) {
      for (std::size_t k = 0; k < world.num_concepts(); ++k) {
        const Trajectory& base = none.runs[a][k];
        for (std::size_t j = 0; j < cfg.checkpoints.size(); ++j) {
          for (const SimilarityMetric& m : cfg.metrics) {
            ResultRow row{run_id, method, cfg.attacks[a].name, world.concept_id(k), cfg.checkpoints[j],
                          std::string(to_string(m.kind)), "", 0.0};
            if (!arm) {
              row.arm = "none";
              row.value = rounded(similarity(m, base.generations[j], world.references[k]));
              rows.push_back(row);
              continue;
            }
            const Matrix& gen = arm->runs[a][k].generations[j];
            row.arm = "immunized";
            row.value = rounded(similarity(m, gen, world.references[k]));
            rows.push_back(row);
            row.arm = "pair";
            row.value = rounded(similarity(m, gen, base.generations[j]));
            rows.push_back(row);
          }
        }
      }
    }
  };
  emit("none", nullptr);
  for (const auto& [method, arm] : arms) emit(std::string(to_string(method)), &arm);
  return rows;
}

std::vector<SummaryEntry> summarize(const std::vector<ResultRow>& rows) {
  // (run, attack, metric) -> last step; (run, method, attack, metric, step, concept, arm) -> value.
  using Key = std::tuple<std::string, std::string, std::string, std::string, std::size_t, std::string, std::string>;
  std::map<Key, double> value;
  std::map<std::tuple<std::string, std::string, std::string>, std::size_t> last_step;
  std::vector<std::string> run_order, method_order, attack_order, metric_order;
  auto remember = [](std::vector<std::string>& order, const std::string& s) {
    if (std::find(order.begin(), order.end(), s) == order.end()) order.push_back(s);
  };
  std::map<std::string, std::vector<std::string>> concepts;  // run -> ids
  for (const ResultRow& r : rows) {
    value[{r.run_id, r.method, r.attack, r.metric, r.step, r.concept_id, r.arm}] = r.value;
    std::size_t& last = last_step[{r.run_id, r.attack, r.metric}];
    last = std::max(last, r.step);
    remember(run_order, r.run_id);
    remember(attack_order, r.attack);
    remember(metric_order, r.metric);
    remember(concepts[r.run_id], r.concept_id);
    if (r.method != "none") remember(method_order, r.method);
  }

  std::vector<SummaryEntry> out;
  for (const std::string& run : run_order) {
    for (const std::string& method : method_order) {
      for (const std::string& metric : metric_order) {
        std::vector<double> msgrs, mrsgrs;
        bool all_msgr = true, all_mrsgr = true;
        std::set<std::string> negatives;
        std::size_t step_for_mean = 0;
        bool any = false;
        for (const std::string& attack : attack_order) {
          auto ls = last_step.find({run, attack, metric});
          if (ls == last_step.end()) continue;
          const std::size_t step = ls->second;
          SummaryEntry e{run, method, attack, metric, step, std::nullopt, std::nullopt, {}};
          std::vector<double> attacked, immunized;
          std::vector<std::string> target_ids;
          double pair_t = 0.0, pair_o = 0.0;
          std::size_t n_t = 0, n_o = 0;
          bool complete = true;
          for (const std::string& id : concepts[run]) {
            auto pair = value.find({run, method, attack, metric, step, id, "pair"});
            if (pair == value.end()) {
              complete = false;
              continue;
            }
            if (is_other(id)) {
              pair_o += pair->second;
              ++n_o;
              continue;
            }
            pair_t += pair->second;
            ++n_t;
            auto a = value.find({run, "none", attack, metric, step, id, "none"});
            auto i = value.find({run, method, attack, metric, step, id, "immunized"});
            if (a == value.end() || i == value.end()) {
              complete = false;
              continue;
            }
            attacked.push_back(a->second);
            immunized.push_back(i->second);
            target_ids.push_back(id);
          }
          if (!complete || n_t == 0) continue;
          any = true;
          step_for_mean = step;
          for (std::size_t idx : negative_denominators(attacked)) {
            e.negative_denominators.push_back(target_ids[idx]);
            negatives.insert(target_ids[idx]);
          }
          try {
            e.msgr = msgr(attacked, immunized);
          } catch (const Error&) {
          }
          if (n_o > 0) {
            try {
              e.mrsgr = mrsgr(pair_t / static_cast<double>(n_t), pair_o / static_cast<double>(n_o));
            } catch (const Error&) {
            }
          }
          if (e.msgr) msgrs.push_back(*e.msgr);
          else all_msgr = false;
          if (e.mrsgr) mrsgrs.push_back(*e.mrsgr);
          else all_mrsgr = false;
          out.push_back(std::move(e));
        }
        if (!any) continue;
        SummaryEntry mean{run, method, "mean", metric, step_for_mean, std::nullopt, std::nullopt,
                          std::vector<std::string>(negatives.begin(), negatives.end())};
        auto average = [](const std::vector<double>& v) {
          double s = 0.0;
          for (double x : v) s += x;
          return s / static_cast<double>(v.size());
        };
        if (all_msgr && !msgrs.empty()) mean.msgr = average(msgrs);
        if (all_mrsgr && !mrsgrs.empty()) mean.mrsgr = average(mrsgrs);
        out.push_back(std::move(mean));
      }
    }
  }
  return out;
}

void write_summary_tables(std::ostream& out, const std::vector<SummaryEntry>& summary) {
  std::vector<std::string> runs, methods, attacks, metrics;
  auto remember = [](std::vector<std::string>& order, const std::string& s) {
    if (std::find(order.begin(), order.end(), s) == order.end()) order.push_back(s);
  };
  std::map<std::tuple<std::string, std::string, std::string, std::string>, const SummaryEntry*> index;
  for (const SummaryEntry& e : summary) {
    remember(runs, e.run_id);
    remember(methods, e.method);
    remember(attacks, e.attack);
    remember(metrics, e.metric);
    index[{e.run_id, e.method, e.attack, e.metric}] = &e;
  }
  out << "# Summary\n";
  for (const std::string& metric : metrics) {
    for (const std::string& attack : attacks) {
      for (const char* which : {"MSGR", "MRSGR"}) {
        const bool is_msgr = std::string(which) == "MSGR";
        out << "\n## " << which << " (" << metric << ", attack " << attack << ")\n\n| method |";
        for (const std::string& run : runs) out << ' ' << run << " |";
        out << " average |\n|---|";
        for (std::size_t i = 0; i <= runs.size(); ++i) out << "---|";
        out << '\n';
        for (const std::string& method : methods) {
          out << "| " << method << " |";
          double sum = 0.0;
          std::size_t count = 0;
          for (const std::string& run : runs) {
            auto it = index.find({run, method, attack, metric});
            std::optional<double> v;
            if (it != index.end()) v = is_msgr ? it->second->msgr : it->second->mrsgr;
            if (v) {
              char buf[32];
              std::snprintf(buf, sizeof(buf), "%.4f", *v);
              out << ' ' << buf << " |";
              sum += *v;
              ++count;
            } else {
              out << " n/a |";
            }
          }
          if (count == runs.size() && count > 0) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.4f", sum / static_cast<double>(count));
            out << ' ' << buf << " |\n";
          } else {
            out << " n/a |\n";
          }
        }
      }
    }
  }
  bool header = false;
  for (const SummaryEntry& e : summary) {
    if (e.negative_denominators.empty() || e.attack == "mean") continue;
    if (!header) out << "\n## Negative denominators\n\n";
    header = true;
    out << "- " << e.run_id << ' ' << e.method << ' ' << e.attack << ' ' << e.metric << ':';
    for (const std::string& id : e.negative_denominators) out << ' ' << id;
    out << '\n';
  }
}

void write_summary_csv(std::ostream& out, const std::vector<SummaryEntry>& summary) {
  out << "run_id,method,attack,metric,step,msgr,mrsgr\n";
  for (const SummaryEntry& e : summary) {
    out << e.run_id << ',' << e.method << ',' << e.attack << ',' << e.metric << ',' << e.step << ','
        << optional_value(e.msgr) << ',' << optional_value(e.mrsgr) << '\n';
  }
}

bool ExperimentOutcome::all_ok() const {
  return std::all_of(cells.begin(), cells.end(), [](const CellStatus& c) { return c.ok; });
}

ExperimentOutcome run_grid(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::size_t sets = cfg.concept_sets.size();
  const std::size_t arms_per_set = cfg.methods.size() + 1;

  std::vector<std::optional<World>> worlds(sets);
  const auto world_errors = run_pool(sets, cfg.workers, [&](std::size_t s) { worlds[s].emplace(build_world(cfg, s)); });

  std::vector<std::optional<ArmOutput>> outputs(sets * arms_per_set);
  const auto arm_errors = run_pool(sets * arms_per_set, cfg.workers, [&](std::size_t cell) {
    const std::size_t s = cell / arms_per_set;
    const std::size_t arm = cell % arms_per_set;
    if (!worlds[s]) return;
    std::optional<ImmunizeMethod> method;
    if (arm > 0) method = cfg.methods[arm - 1];
    outputs[cell].emplace(run_arm(cfg, s, *worlds[s], method));
  });

  ExperimentOutcome outcome;
  for (std::size_t s = 0; s < sets; ++s) {
    const std::string& run_id = cfg.concept_sets[s].name;
    const std::size_t base = s * arms_per_set;
    std::vector<std::pair<ImmunizeMethod, ArmOutput>> arms;
    for (std::size_t arm = 0; arm < arms_per_set; ++arm) {
      const std::size_t cell = base + arm;
      CellStatus status{run_id, arm == 0 ? "none" : std::string(to_string(cfg.methods[arm - 1])), false, ""};
      if (world_errors[s]) {
        status.error = "concept set setup failed: " + *world_errors[s];
      } else if (arm_errors[cell]) {
        status.error = *arm_errors[cell];
      } else if (arm > 0 && !outputs[base]) {
        status.error = "non-immunized arm failed";
      } else {
        status.ok = true;
        outcome.models.emplace_back(run_id + "_" + status.arm, outputs[cell]->theta);
        if (arm > 0) arms.emplace_back(cfg.methods[arm - 1], std::move(*outputs[cell]));
      }
      outcome.cells.push_back(std::move(status));
    }
    if (!outputs[base]) continue;
    try {
      std::vector<ResultRow> rows = make_rows(cfg, s, *worlds[s], *outputs[base], arms);
      outcome.rows.insert(outcome.rows.end(), rows.begin(), rows.end());
    } catch (const std::exception& e) {
      for (std::size_t arm = 0; arm < arms_per_set; ++arm) {
        CellStatus& c = outcome.cells[base + arm];
        if (c.ok) c = CellStatus{c.run_id, c.arm, false, std::string("evaluation failed: ") + e.what()};
      }
    }
  }
  outcome.summary = summarize(outcome.rows);
  return outcome;
}

ExperimentOutcome run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& output_root,
                                 std::ostream* log) {
  const std::filesystem::path dir = output_root.empty() ? std::filesystem::path(cfg.output_dir)
                                                        : output_root / cfg.output_dir;
  std::error_code ec;
  std::filesystem::create_directories(dir / "checkpoints", ec);
  if (ec) throw Error(Errc::IoError, "cannot create " + (dir / "checkpoints").string() + ": " + ec.message());
  if (log) *log << "running " << cfg.concept_sets.size() << " concept sets x " << cfg.methods.size() + 1
                << " arms with " << cfg.workers << " workers\n";

  ExperimentOutcome outcome = run_grid(cfg);

  auto open = [&](const std::string& name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw Error(Errc::IoError, "cannot write " + (dir / name).string());
    return f;
  };
  {
    std::ofstream f = open("config.json");
    f << serialize_config(cfg);
  }
  {
    std::ofstream f = open("results.csv");
    write_results(f, outcome.rows);
  }
  {
    std::ofstream f = open("summary.md");
    write_summary_tables(f, outcome.summary);
  }
  {
    std::ofstream f = open("summary.csv");
    write_summary_csv(f, outcome.summary);
  }
  for (const auto& [name, theta] : outcome.models)
    save_checkpoint(dir / "checkpoints" / (name + ".ckpt"), Denoiser(cfg.arch, theta));

  nlohmann::ordered_json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["tool_version"] = kToolVersion;
  manifest["config_hash"] = hex64(config_hash(cfg));
  manifest["seed"] = cfg.seed;
  nlohmann::ordered_json sets = nlohmann::ordered_json::array();
  for (const ConceptSetConfig& s : cfg.concept_sets) sets.push_back({{"name", s.name}, {"seed", s.seed}});
  manifest["concept_sets"] = sets;
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  for (const CellStatus& c : outcome.cells) {
    nlohmann::ordered_json j{{"run_id", c.run_id}, {"arm", c.arm}, {"status", c.ok ? "done" : "failed"}};
    if (!c.ok) j["error"] = c.error;
    if (c.ok) j["checkpoint"] = "checkpoints/" + c.run_id + "_" + c.arm + ".ckpt";
    cells.push_back(j);
  }
  manifest["cells"] = cells;
  manifest["rows"] = outcome.rows.size();
  manifest["artifacts"] = {"results.csv", "summary.md", "summary.csv", "config.json", "manifest.json"};
  {
    std::ofstream f = open("manifest.json");
    f << manifest.dump(2) << '\n';
  }
  if (log) {
    for (const CellStatus& c : outcome.cells)
      if (!c.ok) *log << "cell " << c.run_id << '/' << c.arm << " failed: " << c.error << '\n';
    *log << "wrote " << outcome.rows.size() << " rows to " << (dir / "results.csv").string() << '\n';
  }
  return outcome;
}

}  // namespace mima
