#include "mima/experiment.hpp"

namespace mima {

namespace {

std::vector<AttackConfig> default_attacks() {
  std::vector<AttackConfig> attacks;
  AdaptMethod full{AdaptKind::FullFineTune};
  full.lr = 2e-2;
  full.steps = 100;
  full.batch_size = 32;
  full.max_grad_norm = 1.0;
  attacks.push_back({"full", full});

  AdaptMethod lowrank{AdaptKind::LowRank};
  lowrank.rank = 2;
  lowrank.lowrank_mlp = true;
  lowrank.lr = 5e-2;
  lowrank.steps = 100;
  lowrank.batch_size = 32;
  lowrank.max_grad_norm = 1.0;
  attacks.push_back({"lowrank", lowrank});

  AdaptMethod kv{AdaptKind::KeyValueOnly};
  kv.lr = 5e-2;
  kv.steps = 100;
  kv.batch_size = 32;
  kv.max_grad_norm = 1.0;
  attacks.push_back({"kv", kv});

  AdaptMethod embedding{AdaptKind::EmbeddingOnly};
  embedding.lr = 0.5;
  embedding.steps = 100;
  embedding.batch_size = 32;
  embedding.max_grad_norm = 1.0;
  embedding.embedding_noise = 0.5;
  attacks.push_back({"embedding", embedding});
  return attacks;
}

ExperimentConfig grid_config(std::size_t n, const std::string& name, std::uint64_t seed_base) {
  ExperimentConfig cfg;
  cfg.name = name;
  cfg.seed = seed_base;
  cfg.output_dir = "runs/" + name;
  cfg.workers = 1;
  for (std::size_t g = 0; g < 5; ++g) {
    ConceptSetConfig set;
    set.name = "group" + std::to_string(g + 1);
    set.num_concepts = n;
    set.num_other_concepts = 2;
    set.regularization_size = 4;
    set.seed = seed_base + 101 * (g + 1);
    cfg.concept_sets.push_back(set);
  }
  cfg.immunize.alpha = 1e-2;
  cfg.immunize.beta = 3e-4;
  cfg.immunize.epochs = 300;
  cfg.methods = {ImmunizeMethod::Mima, ImmunizeMethod::Jt, ImmunizeMethod::Cp, ImmunizeMethod::Sequential};
  cfg.attacks = default_attacks();
  cfg.metrics = {SimilarityMetric{MetricKind::FrozenEncoderCosine, 7},
                 SimilarityMetric{MetricKind::NegMse, 7},
                 SimilarityMetric{MetricKind::MmdGaussian, 7}};
  cfg.checkpoints = {0, 25, 50, 100};
  return cfg;
}

}  // namespace

ExperimentConfig preset_config(std::string_view preset) {
  if (preset == "2concept") return grid_config(2, "2concept", 2);
  if (preset == "3concept") return grid_config(3, "3concept", 3);
  if (preset == "minimal") {
    ExperimentConfig cfg;
    cfg.name = "minimal";
    cfg.seed = 1;
    cfg.output_dir = "runs/minimal";
    cfg.pretrain.steps = 50;
    cfg.data = DataConfig{64, 64, 64, 64};
    ConceptSetConfig set;
    set.name = "single";
    set.num_concepts = 1;
    set.num_other_concepts = 0;
    set.regularization_size = 1;
    set.seed = 11;
    cfg.concept_sets.push_back(set);
    cfg.immunize.epochs = 1;
    cfg.methods = {ImmunizeMethod::Mima};
    AdaptMethod full{AdaptKind::FullFineTune};
    full.steps = 10;
    cfg.attacks = {{"full", full}};
    cfg.metrics = {SimilarityMetric{}};
    cfg.checkpoints = {10};
    return cfg;
  }
  throw Error(Errc::ConfigError, "unknown preset '" + std::string(preset) + "' (2concept, 3concept, minimal)");
}

}  // namespace mima
