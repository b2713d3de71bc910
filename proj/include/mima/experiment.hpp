#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mima/adapt.hpp"
#include "mima/diffusion.hpp"
#include "mima/immunize.hpp"
#include "mima/metrics.hpp"

namespace mima {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kResultsHeader = "run_id,method,attack,concept,step,metric,arm,value";

struct PretrainConfig {
  std::size_t steps = 2000;
  double lr = 0.05;
  std::size_t batch_size = 64;
  bool operator==(const PretrainConfig&) const = default;
};

struct DataConfig {
  std::size_t immunize_samples = 256;   // per target concept, seen by the immunizer
  std::size_t attack_samples = 256;     // per concept, seen by the attacker
  std::size_t reference_samples = 256;  // per concept, x^r
  std::size_t generated_samples = 256;  // per checkpoint
  bool operator==(const DataConfig&) const = default;
};

// Targets and other concepts share one circle of Gaussian means.
struct ConceptSetConfig {
  std::string name;
  std::size_t num_concepts = 2;         // N targets
  std::size_t num_other_concepts = 2;   // evaluated for usability, also in C_reg
  std::size_t regularization_size = 4;  // N' embeddings in C_reg (others + generic)
  double radius = 2.0;
  double stddev = 0.3;
  std::uint64_t seed = 0;
  bool operator==(const ConceptSetConfig&) const = default;
};

struct AttackConfig {
  std::string name;
  AdaptMethod method;
  bool operator==(const AttackConfig&) const = default;
};

enum class ImmunizeMethod { Mima, Jt, Cp, Sequential };
std::string_view to_string(ImmunizeMethod m);
ImmunizeMethod immunize_method_from_string(std::string_view name);

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::string output_dir = "runs/experiment";
  std::size_t workers = 1;
  Arch arch;
  double beta_start = 1e-4;
  double beta_end = 0.2;
  PretrainConfig pretrain;
  DataConfig data;
  std::vector<ConceptSetConfig> concept_sets;
  ImmunizeConfig immunize;
  std::vector<ImmunizeMethod> methods;
  std::vector<AttackConfig> attacks;
  std::vector<SimilarityMetric> metrics;
  std::vector<std::size_t> checkpoints;

  bool operator==(const ExperimentConfig&) const = default;
  void validate() const;  // throws Errc::ConfigError naming the key
  NoiseSchedule schedule() const;
};

ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& cfg);
std::uint64_t config_hash(const ExperimentConfig& cfg);

ExperimentConfig preset_config(std::string_view preset);  // 2concept, 3concept, minimal

struct Embeddings {
  std::vector<Matrix> concepts;  // l x c each
  Matrix regularization;         // independent rows, (count * l) x c
};

// Seeded Gaussian embeddings with pairwise cosine < 0.5 between concepts.
Embeddings gen_embeddings(std::size_t n, std::size_t reg_count, std::size_t l, std::size_t c,
                          std::uint64_t seed, std::size_t max_attempts = 1000);

// Everything an arm needs for one concept set.
struct World {
  std::vector<ConceptSpec> targets;
  std::vector<ConceptSpec> others;
  ImmunizeSetup setup;                  // targets, their immunizer pools, C_reg, theta^p
  std::vector<Matrix> attack_data;      // targets then others
  std::vector<Matrix> references;       // targets then others
  Denoiser pretrained;

  std::size_t num_concepts() const { return targets.size() + others.size(); }
  const ConceptSpec& concept_at(std::size_t i) const;
  std::string concept_id(std::size_t i) const;  // "0", "1", .. then "other0", ..
};

World build_world(const ExperimentConfig& cfg, std::size_t set_index);

// Per (attack, concept): the trajectory after attacking a model.
struct ArmOutput {
  ParamSet theta;
  std::vector<std::vector<Trajectory>> runs;  // [attack][concept]
};

ArmOutput run_arm(const ExperimentConfig& cfg, std::size_t set_index, const World& world,
                  std::optional<ImmunizeMethod> method);

struct ResultRow {
  std::string run_id;
  std::string method;
  std::string attack;
  std::string concept_id;
  std::size_t step = 0;
  std::string metric;
  std::string arm;  // immunized | none | pair
  double value = 0.0;
  bool operator==(const ResultRow&) const = default;
};

std::string format_value(double v);  // 9 significant digits
void write_results(std::ostream& out, const std::vector<ResultRow>& rows);
void emit_results(const std::vector<ResultRow>& rows, const std::filesystem::path& path);
std::vector<ResultRow> parse_results(std::istream& in);
std::vector<ResultRow> load_results(const std::filesystem::path& path);

// Rows of one concept set, given the none arm and each method's arm.
std::vector<ResultRow> make_rows(const ExperimentConfig& cfg, std::size_t set_index,
                                 const World& world, const ArmOutput& none,
                                 const std::vector<std::pair<ImmunizeMethod, ArmOutput>>& arms);

struct SummaryEntry {
  std::string run_id;
  std::string method;
  std::string attack;  // "mean" for the attack average
  std::string metric;
  std::size_t step = 0;
  std::optional<double> msgr;
  std::optional<double> mrsgr;
  std::vector<std::string> negative_denominators;
};

// MSGR and MRSGR at the last checkpoint of every (run, method, attack, metric),
// plus the attack average.
std::vector<SummaryEntry> summarize(const std::vector<ResultRow>& rows);
void write_summary_tables(std::ostream& out, const std::vector<SummaryEntry>& summary);
void write_summary_csv(std::ostream& out, const std::vector<SummaryEntry>& summary);

struct CellStatus {
  std::string run_id;
  std::string arm;
  bool ok = false;
  std::string error;
};

struct ExperimentOutcome {
  std::vector<ResultRow> rows;
  std::vector<SummaryEntry> summary;
  std::vector<CellStatus> cells;
  std::vector<std::pair<std::string, ParamSet>> models;  // "<run>_<arm>"
  bool all_ok() const;
};

// Runs the grid in memory; `workers` threads.
ExperimentOutcome run_grid(const ExperimentConfig& cfg);

// Runs the grid and writes results.csv, summary.md, summary.csv, manifest.json
// and checkpoints/ under output_root / cfg.output_dir (or cfg.output_dir alone
// when output_root is empty).
ExperimentOutcome run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& output_root,
                                 std::ostream* log = nullptr);

}  // namespace mima
