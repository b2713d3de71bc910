#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mima/experiment.hpp"

namespace mima {

using Json = nlohmann::ordered_json;

namespace {

[[noreturn]] void config_error(const std::string& key, const std::string& what) {
  throw Error(Errc::ConfigError, "config key '" + key + "': " + what);
}

// Strict reader: every key must be consumed, missing keys keep defaults.
class Reader {
 public:
  Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) config_error(path_.empty() ? "<root>" : path_, "expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) config_error(key(it.key()), "unknown key");
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }
  bool has(const std::string& k) const { return j_.contains(k); }

  const Json* get(const std::string& k) {
    used_.insert(k);
    auto it = j_.find(k);
    return it == j_.end() ? nullptr : &*it;
  }

  void read(const std::string& k, double& out) {
    if (const Json* v = get(k)) {
      if (!v->is_number()) config_error(key(k), "expected a number");
      out = v->get<double>();
    }
  }
  void read(const std::string& k, std::size_t& out) {
    if (const Json* v = get(k)) {
      if (!v->is_number_unsigned()) config_error(key(k), "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const std::string& k, std::uint64_t& out, int) {
    if (const Json* v = get(k)) {
      if (!v->is_number_unsigned()) config_error(key(k), "expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void read(const std::string& k, int& out) {
    if (const Json* v = get(k)) {
      if (!v->is_number_integer()) config_error(key(k), "expected an integer");
      out = v->get<int>();
    }
  }
  void read(const std::string& k, bool& out) {
    if (const Json* v = get(k)) {
      if (!v->is_boolean()) config_error(key(k), "expected true or false");
      out = v->get<bool>();
    }
  }
  void read(const std::string& k, std::string& out) {
    if (const Json* v = get(k)) {
      if (!v->is_string()) config_error(key(k), "expected a string");
      out = v->get<std::string>();
    }
  }
  const Json* array(const std::string& k) {
    const Json* v = get(k);
    if (v && !v->is_array()) config_error(key(k), "expected an array");
    return v;
  }

  // Parses an enum via `from`, rewrapping its error with the key.
  template <class E, class F>
  void read_enum(const std::string& k, E& out, F from) {
    std::string s;
    read(k, s);
    if (!has(k)) return;
    try {
      out = from(s);
    } catch (const Error& e) {
      config_error(key(k), e.what());
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> used_;
};

std::string idx(const std::string& base, std::size_t i) { return base + "[" + std::to_string(i) + "]"; }

void read_arch(Reader& r, Arch& a) {
  r.read("data_dim", a.data_dim);
  r.read("tokens", a.tokens);
  r.read("embed_dim", a.embed_dim);
  r.read("key_dim", a.key_dim);
  r.read("value_dim", a.value_dim);
  r.read("hidden", a.hidden);
  r.read("sites", a.sites);
  r.read("time_features", a.time_features);
  r.read("num_steps", a.num_steps);
}

Json write_arch(const Arch& a) {
  return Json{{"data_dim", a.data_dim},   {"tokens", a.tokens},       {"embed_dim", a.embed_dim},
              {"key_dim", a.key_dim},     {"value_dim", a.value_dim}, {"hidden", a.hidden},
              {"sites", a.sites},         {"time_features", a.time_features},
              {"num_steps", a.num_steps}};
}

void read_subset(Reader& r, const std::string& k, ParamSubset& s) {
  r.read_enum(k, s.kind, subset_kind_from_string);
  const std::string mask_key = k + "_mask";
  if (const Json* m = r.array(mask_key)) {
    s.custom.clear();
    for (std::size_t i = 0; i < m->size(); ++i) {
      const Json& v = (*m)[i];
      if (!v.is_number_unsigned() || v.get<unsigned>() > 1)
        config_error(idx(r.key(mask_key), i), "expected 0 or 1");
      s.custom.push_back(v.get<unsigned>() == 1);
    }
  }
  if (s.kind == SubsetKind::Custom && s.custom.empty())
    config_error(r.key(mask_key), "required when the subset is custom");
  if (s.kind != SubsetKind::Custom && !s.custom.empty())
    config_error(r.key(mask_key), "only allowed when the subset is custom");
}

void write_subset(Json& j, const std::string& k, const ParamSubset& s) {
  j[k] = std::string(to_string(s.kind));
  if (s.kind == SubsetKind::Custom) {
    Json m = Json::array();
    for (bool b : s.custom) m.push_back(b ? 1 : 0);
    j[k + "_mask"] = m;
  }
}

void read_immunize(Reader& r, ImmunizeConfig& c) {
  r.read("alpha", c.alpha);
  r.read("beta", c.beta);
  r.read("epochs", c.epochs);
  read_subset(r, "lower_subset", c.lower_subset);
  read_subset(r, "upper_subset", c.upper_subset);
  r.read_enum("grad_mode", c.grad_mode, grad_mode_from_string);
  if (const Json* v = r.get("ridge_lambda")) {
    if (v->is_null()) c.ridge_lambda.reset();
    else if (v->is_number()) c.ridge_lambda = v->get<double>();
    else config_error(r.key("ridge_lambda"), "expected a number or null");
  }
  r.read("lower_batch", c.lower_batch);
  r.read("upper_batch", c.upper_batch);
  r.read("single_sample_n", c.single_sample_n);
}

Json write_immunize(const ImmunizeConfig& c) {
  Json j{{"alpha", c.alpha}, {"beta", c.beta}, {"epochs", c.epochs}};
  write_subset(j, "lower_subset", c.lower_subset);
  write_subset(j, "upper_subset", c.upper_subset);
  j["grad_mode"] = std::string(to_string(c.grad_mode));
  j["ridge_lambda"] = c.ridge_lambda ? Json(*c.ridge_lambda) : Json(nullptr);
  j["lower_batch"] = c.lower_batch;
  j["upper_batch"] = c.upper_batch;
  j["single_sample_n"] = c.single_sample_n;
  return j;
}

std::string_view to_string(Aggregation a) {
  return a == Aggregation::MeanFeature ? "mean_feature" : "mean_pairwise";
}

Aggregation aggregation_from_string(std::string_view s) {
  if (s == "mean_feature") return Aggregation::MeanFeature;
  if (s == "mean_pairwise") return Aggregation::MeanPairwise;
  throw Error(Errc::ConfigError, "unknown aggregation '" + std::string(s) + "'");
}

bool safe_name(const std::string& s) {
  if (s.empty()) return false;
  for (char ch : s)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-')) return false;
  return true;
}

}  // namespace

std::string_view to_string(ImmunizeMethod m) {
  switch (m) {
    case ImmunizeMethod::Mima: return "mima";
    case ImmunizeMethod::Jt: return "jt";
    case ImmunizeMethod::Cp: return "cp";
    case ImmunizeMethod::Sequential: return "sequential";
  }
  return "unknown";
}

ImmunizeMethod immunize_method_from_string(std::string_view name) {
  for (ImmunizeMethod m : {ImmunizeMethod::Mima, ImmunizeMethod::Jt, ImmunizeMethod::Cp,
                           ImmunizeMethod::Sequential})
    if (to_string(m) == name) return m;
  throw Error(Errc::ConfigError, "unknown immunization method '" + std::string(name) + "'");
}

ExperimentConfig parse_config(const std::string& json_text) {
  Json root;
  try {
    root = Json::parse(json_text);
  } catch (const Json::parse_error& e) {
    throw Error(Errc::ConfigError, std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  Reader r(root, "");
  r.read("schema_version", cfg.schema_version);
  if (!r.has("schema_version")) config_error("schema_version", "missing");
  if (cfg.schema_version != kSchemaVersion)
    config_error("schema_version", "unsupported version " + std::to_string(cfg.schema_version));
  r.read("name", cfg.name);
  r.read("seed", cfg.seed, 0);
  r.read("output_dir", cfg.output_dir);
  r.read("workers", cfg.workers);
  if (const Json* a = r.get("arch")) {
    Reader ar(*a, "arch");
    read_arch(ar, cfg.arch);
  }
  if (const Json* s = r.get("schedule")) {
    Reader sr(*s, "schedule");
    sr.read("beta_start", cfg.beta_start);
    sr.read("beta_end", cfg.beta_end);
  }
  if (const Json* p = r.get("pretrain")) {
    Reader pr(*p, "pretrain");
    pr.read("steps", cfg.pretrain.steps);
    pr.read("lr", cfg.pretrain.lr);
    pr.read("batch_size", cfg.pretrain.batch_size);
  }
  if (const Json* d = r.get("data")) {
    Reader dr(*d, "data");
    dr.read("immunize_samples", cfg.data.immunize_samples);
    dr.read("attack_samples", cfg.data.attack_samples);
    dr.read("reference_samples", cfg.data.reference_samples);
    dr.read("generated_samples", cfg.data.generated_samples);
  }
  if (const Json* sets = r.array("concept_sets")) {
    for (std::size_t i = 0; i < sets->size(); ++i) {
      Reader sr((*sets)[i], idx("concept_sets", i));
      ConceptSetConfig s;
      sr.read("name", s.name);
      sr.read("num_concepts", s.num_concepts);
      sr.read("num_other_concepts", s.num_other_concepts);
      sr.read("regularization_size", s.regularization_size);
      sr.read("radius", s.radius);
      sr.read("stddev", s.stddev);
      sr.read("seed", s.seed, 0);
      cfg.concept_sets.push_back(std::move(s));
    }
  }
  if (const Json* im = r.get("immunize")) {
    Reader ir(*im, "immunize");
    read_immunize(ir, cfg.immunize);
  }
  if (const Json* ms = r.array("methods")) {
    for (std::size_t i = 0; i < ms->size(); ++i) {
      if (!(*ms)[i].is_string()) config_error(idx("methods", i), "expected a string");
      try {
        cfg.methods.push_back(immunize_method_from_string((*ms)[i].get<std::string>()));
      } catch (const Error& e) {
        config_error(idx("methods", i), e.what());
      }
    }
  }
  if (const Json* as = r.array("attacks")) {
    for (std::size_t i = 0; i < as->size(); ++i) {
      Reader ar((*as)[i], idx("attacks", i));
      AttackConfig a;
      ar.read("name", a.name);
      ar.read_enum("kind", a.method.kind, adapt_kind_from_string);
      ar.read("rank", a.method.rank);
      ar.read("lowrank_mlp", a.method.lowrank_mlp);
      ar.read("lr", a.method.lr);
      ar.read("steps", a.method.steps);
      ar.read("batch_size", a.method.batch_size);
      ar.read("embedding_noise", a.method.embedding_noise);
      ar.read("max_grad_norm", a.method.max_grad_norm);
      if (a.name.empty()) a.name = std::string(to_string(a.method.kind));
      cfg.attacks.push_back(std::move(a));
    }
  }
  if (const Json* ms = r.array("metrics")) {
    for (std::size_t i = 0; i < ms->size(); ++i) {
      Reader mr((*ms)[i], idx("metrics", i));
      SimilarityMetric m;
      mr.read_enum("kind", m.kind, metric_kind_from_string);
      mr.read("encoder_seed", m.encoder_seed, 0);
      mr.read("bandwidth", m.bandwidth);
      mr.read_enum("aggregation", m.aggregation, aggregation_from_string);
      cfg.metrics.push_back(m);
    }
  }
  if (const Json* cs = r.array("checkpoints")) {
    for (std::size_t i = 0; i < cs->size(); ++i) {
      if (!(*cs)[i].is_number_unsigned()) config_error(idx("checkpoints", i), "expected a non-negative integer");
      cfg.checkpoints.push_back((*cs)[i].get<std::size_t>());
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::ConfigError, "cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  Json j;
  j["schema_version"] = cfg.schema_version;
  j["name"] = cfg.name;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  j["workers"] = cfg.workers;
  j["arch"] = write_arch(cfg.arch);
  j["schedule"] = Json{{"beta_start", cfg.beta_start}, {"beta_end", cfg.beta_end}};
  j["pretrain"] = Json{{"steps", cfg.pretrain.steps},
                       {"lr", cfg.pretrain.lr},
                       {"batch_size", cfg.pretrain.batch_size}};
  j["data"] = Json{{"immunize_samples", cfg.data.immunize_samples},
                   {"attack_samples", cfg.data.attack_samples},
                   {"reference_samples", cfg.data.reference_samples},
                   {"generated_samples", cfg.data.generated_samples}};
  Json sets = Json::array();
  for (const ConceptSetConfig& s : cfg.concept_sets) {
    sets.push_back(Json{{"name", s.name},
                        {"num_concepts", s.num_concepts},
                        {"num_other_concepts", s.num_other_concepts},
                        {"regularization_size", s.regularization_size},
                        {"radius", s.radius},
                        {"stddev", s.stddev},
                        {"seed", s.seed}});
  }
  j["concept_sets"] = sets;
  j["immunize"] = write_immunize(cfg.immunize);
  Json methods = Json::array();
  for (ImmunizeMethod m : cfg.methods) methods.push_back(std::string(to_string(m)));
  j["methods"] = methods;
  Json attacks = Json::array();
  for (const AttackConfig& a : cfg.attacks) {
    attacks.push_back(Json{{"name", a.name},
                           {"kind", std::string(to_string(a.method.kind))},
                           {"rank", a.method.rank},
                           {"lowrank_mlp", a.method.lowrank_mlp},
                           {"lr", a.method.lr},
                           {"steps", a.method.steps},
                           {"batch_size", a.method.batch_size},
                           {"embedding_noise", a.method.embedding_noise},
                           {"max_grad_norm", a.method.max_grad_norm}});
  }
  j["attacks"] = attacks;
  Json metrics = Json::array();
  for (const SimilarityMetric& m : cfg.metrics) {
    metrics.push_back(Json{{"kind", std::string(to_string(m.kind))},
                           {"encoder_seed", m.encoder_seed},
                           {"bandwidth", m.bandwidth},
                           {"aggregation", std::string(to_string(m.aggregation))}});
  }
  j["metrics"] = metrics;
  j["checkpoints"] = cfg.checkpoints;
  return j.dump(2) + "\n";
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : serialize_config(cfg)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

void ExperimentConfig::validate() const {
  if (schema_version != kSchemaVersion) config_error("schema_version", "unsupported version");
  if (!safe_name(name)) config_error("name", "use letters, digits, '_' or '-'");
  if (output_dir.empty()) config_error("output_dir", "must not be empty");
  if (workers < 1) config_error("workers", "must be >= 1");
  try {
    arch.validate();
  } catch (const Error& e) {
    config_error("arch", e.what());
  }
  try {
    NoiseSchedule::linear(arch.num_steps, beta_start, beta_end).validate();
  } catch (const Error& e) {
    config_error("schedule", e.what());
  }
  if (pretrain.lr < 0 || !std::isfinite(pretrain.lr)) config_error("pretrain.lr", "must be >= 0");
  if (pretrain.batch_size < 1) config_error("pretrain.batch_size", "must be >= 1");
  if (data.immunize_samples < 1) config_error("data.immunize_samples", "must be >= 1");
  if (data.attack_samples < 1) config_error("data.attack_samples", "must be >= 1");
  if (data.reference_samples < 1) config_error("data.reference_samples", "must be >= 1");
  if (data.generated_samples < 1) config_error("data.generated_samples", "must be >= 1");

  if (concept_sets.empty()) config_error("concept_sets", "at least one concept set is required");
  std::set<std::string> names;
  for (std::size_t i = 0; i < concept_sets.size(); ++i) {
    const ConceptSetConfig& s = concept_sets[i];
    const std::string k = idx("concept_sets", i);
    if (!safe_name(s.name)) config_error(k + ".name", "use letters, digits, '_' or '-'");
    if (!names.insert(s.name).second) config_error(k + ".name", "duplicate name '" + s.name + "'");
    if (s.num_concepts < 1) config_error(k + ".num_concepts", "must be >= 1");
    if (s.num_concepts * arch.tokens > arch.embed_dim)
      config_error(k + ".num_concepts", "num_concepts * arch.tokens must not exceed arch.embed_dim");
    if (s.regularization_size < 1) config_error(k + ".regularization_size", "must be >= 1");
    if (s.regularization_size < s.num_other_concepts)
      config_error(k + ".regularization_size", "must be >= num_other_concepts");
    if (!(s.radius > 0) || !std::isfinite(s.radius)) config_error(k + ".radius", "must be > 0");
    if (!(s.stddev > 0) || !std::isfinite(s.stddev)) config_error(k + ".stddev", "must be > 0");
  }

  try {
    immunize.validate(arch.signature());
  } catch (const Error& e) {
    config_error("immunize", e.what());
  }
  std::set<ImmunizeMethod> seen_methods;
  for (std::size_t i = 0; i < methods.size(); ++i)
    if (!seen_methods.insert(methods[i]).second) config_error(idx("methods", i), "duplicate method");

  if (attacks.empty()) config_error("attacks", "at least one attack is required");
  std::set<std::string> attack_names;
  for (std::size_t i = 0; i < attacks.size(); ++i) {
    const std::string k = idx("attacks", i);
    if (!safe_name(attacks[i].name)) config_error(k + ".name", "use letters, digits, '_' or '-'");
    if (!attack_names.insert(attacks[i].name).second) config_error(k + ".name", "duplicate name");
    try {
      attacks[i].method.validate(arch);
    } catch (const Error& e) {
      config_error(k, e.what());
    }
  }

  if (metrics.empty()) config_error("metrics", "at least one metric is required");
  for (std::size_t i = 0; i < metrics.size(); ++i) {
    if (!(metrics[i].bandwidth > 0) || !std::isfinite(metrics[i].bandwidth))
      config_error(idx("metrics", i) + ".bandwidth", "must be > 0");
    for (std::size_t j = 0; j < i; ++j)
      if (metrics[j] == metrics[i]) config_error(idx("metrics", i), "duplicate metric");
  }

  if (checkpoints.empty()) config_error("checkpoints", "at least one checkpoint is required");
  for (std::size_t i = 1; i < checkpoints.size(); ++i)
    if (checkpoints[i] <= checkpoints[i - 1]) config_error(idx("checkpoints", i), "must be strictly increasing");
  for (std::size_t i = 0; i < attacks.size(); ++i)
    if (checkpoints.back() > attacks[i].method.steps)
      config_error(idx("attacks", i) + ".steps", "shorter than the last checkpoint");
}

NoiseSchedule ExperimentConfig::schedule() const {
  return NoiseSchedule::linear(arch.num_steps, beta_start, beta_end);
}

}  // namespace mima
