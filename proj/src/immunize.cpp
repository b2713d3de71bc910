#include "mima/immunize.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>

namespace mima {

std::string_view to_string(SubsetKind kind) {
  switch (kind) {
    case SubsetKind::All: return "all";
    case SubsetKind::KvOnly: return "kv_only";
    case SubsetKind::RestOnly: return "rest_only";
    case SubsetKind::Custom: return "custom";
  }
  return "unknown";
}

std::string_view to_string(GradMode mode) {
  return mode == GradMode::FullUnrolled ? "full_unrolled" : "first_order";
}

SubsetKind subset_kind_from_string(std::string_view name) {
  for (SubsetKind k : {SubsetKind::All, SubsetKind::KvOnly, SubsetKind::RestOnly, SubsetKind::Custom})
    if (to_string(k) == name) return k;
  throw Error(Errc::ConfigError, "unknown parameter subset '" + std::string(name) + "'");
}

GradMode grad_mode_from_string(std::string_view name) {
  for (GradMode m : {GradMode::FullUnrolled, GradMode::FirstOrder})
    if (to_string(m) == name) return m;
  throw Error(Errc::ConfigError, "unknown grad_mode '" + std::string(name) + "'");
}

std::vector<double> ParamSubset::mask(const ParamSignature& sig) const {
  const std::size_t n = sig.flat_size(), kv = sig.kv_size();
  std::vector<double> m(n, 0.0);
  switch (kind) {
    case SubsetKind::All: std::fill(m.begin(), m.end(), 1.0); break;
    case SubsetKind::KvOnly: std::fill(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(kv), 1.0); break;
    case SubsetKind::RestOnly: std::fill(m.begin() + static_cast<std::ptrdiff_t>(kv), m.end(), 1.0); break;
    case SubsetKind::Custom:
      if (custom.size() != n) {
        throw Error(Errc::ConfigError, "custom subset mask has " + std::to_string(custom.size()) +
                                           " entries, expected " + std::to_string(n));
      }
      for (std::size_t i = 0; i < n; ++i) m[i] = custom[i] ? 1.0 : 0.0;
      break;
  }
  return m;
}

void ImmunizeConfig::validate(const ParamSignature& sig) const {
  if (!std::isfinite(alpha) || alpha < 0) throw Error(Errc::ConfigError, "alpha must be >= 0");
  if (!std::isfinite(beta) || beta < 0) throw Error(Errc::ConfigError, "beta must be >= 0");
  if (epochs < 1) throw Error(Errc::ConfigError, "epochs must be >= 1");
  if (lower_batch < 1 || upper_batch < 1) throw Error(Errc::ConfigError, "batch sizes must be >= 1");
  if (ridge_lambda && (!std::isfinite(*ridge_lambda) || *ridge_lambda < 0))
    throw Error(Errc::ConfigError, "ridge_lambda must be >= 0");
  for (const ParamSubset* s : {&lower_subset, &upper_subset}) {
    const std::vector<double> m = s->mask(sig);
    if (std::none_of(m.begin(), m.end(), [](double v) { return v != 0.0; }))
      throw Error(Errc::ConfigError, "parameter subset is empty");
  }
}

void ImmunizeSetup::validate(const Arch& arch) const {
  schedule.validate();
  if (schedule.num_steps() != arch.num_steps)
    throw Error(Errc::IncompatibleSignature, "schedule length differs from arch.num_steps");
  if (concepts.empty()) throw Error(Errc::InvalidArgument, "no concepts to immunize");
  if (data.size() != concepts.size())
    throw Error(Errc::InvalidArgument, "one data pool per concept required");
  for (std::size_t n = 0; n < concepts.size(); ++n) {
    if (data[n].rows() == 0) throw Error(Errc::EmptyBatch, "empty data pool");
    if (data[n].cols() != arch.data_dim)
      throw Error(Errc::IncompatibleSignature, "data pool dimension");
    if (concepts[n].embedding.rows() != arch.tokens || concepts[n].embedding.cols() != arch.embed_dim)
      throw Error(Errc::IncompatibleSignature, "concept embedding shape");
  }
  if (regularization.cols() != arch.embed_dim)
    throw Error(Errc::IncompatibleSignature, "regularization embedding width");
  require_signature(pretrained, arch.signature(), "pretrained");
}

StepDraws draw_step(std::span<const ConceptBatch> batches, const ImmunizeConfig& cfg,
                    const NoiseSchedule& schedule, Rng& rng) {
  StepDraws d;
  for (const ConceptBatch& b : batches) {
    d.lower.push_back(draw_noise(b.lower.rows(), b.lower.cols(), schedule, rng));
    d.upper.push_back(draw_noise(b.upper.rows(), b.upper.cols(), schedule, rng));
  }
  if (cfg.single_sample_n && !batches.empty()) {
    d.sampled_concept =
        static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(batches.size()) - 1));
  }
  return d;
}

namespace {

using Clock = std::chrono::steady_clock;

bool finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void check_inputs(const Arch& arch, const ParamSet& theta, const ImmunizeSetup& setup,
                  std::span<const ConceptBatch> batches, const StepDraws& draws,
                  const ImmunizeConfig& cfg) {
  const ParamSignature sig = arch.signature();
  require_signature(theta, sig, "theta");
  cfg.validate(sig);
  if (batches.empty()) throw Error(Errc::InvalidArgument, "no concepts to immunize");
  if (batches.size() != setup.concepts.size())
    throw Error(Errc::InvalidArgument, "one batch pair per concept required");
  if (draws.lower.size() != batches.size() || draws.upper.size() != batches.size())
    throw Error(Errc::InvalidArgument, "one noise draw per concept batch required");
  for (const ConceptBatch& b : batches)
    if (b.lower.rows() == 0 || b.upper.rows() == 0) throw Error(Errc::EmptyBatch, "empty batch");
}

double loss_at(const Denoiser& m, const Matrix& x0, const Matrix& emb, const NoiseSchedule& s,
               const NoiseDraws& d) {
  return weighted_noise_mse(m.forward(noisy_inputs(x0, d, s), emb, d.timesteps), d, s);
}

void require_finite_loss(double v, const char* what) {
  if (!std::isfinite(v)) throw Error(Errc::NonFiniteLoss, std::string(what) + " loss is not finite");
}

void require_finite_grad(std::span<const double> g) {
  if (!finite(g)) throw Error(Errc::NonFiniteGradient, "upper-level gradient is not finite");
}

bool upper_included(const StepDraws& draws, std::size_t n) {
  return !draws.sampled_concept || *draws.sampled_concept == n;
}

// Upper losses at theta' and their summed gradient.
std::vector<double> upper_gradient(const Denoiser& merged, const ImmunizeSetup& setup,
                                   std::span<const ConceptBatch> batches, const StepDraws& draws,
                                   StepRecord& record) {
  std::vector<double> u(merged.params().signature().flat_size(), 0.0);
  record.upper_loss.assign(batches.size(), 0.0);
  for (std::size_t n = 0; n < batches.size(); ++n) {
    const Matrix& emb = setup.concepts[n].embedding;
    if (!upper_included(draws, n)) {
      record.upper_loss[n] = loss_at(merged, batches[n].upper, emb, setup.schedule, draws.upper[n]);
      continue;
    }
    const LossGrad g = loss_and_grad(merged, batches[n].upper, emb, setup.schedule, draws.upper[n]);
    require_finite_loss(g.loss, "upper-level");
    record.upper_loss[n] = g.loss;
    for (std::size_t i = 0; i < u.size(); ++i) u[i] += g.grad[i];
  }
  return u;
}

StepResult finish(const ParamSet& theta, const ParamSignature& sig, std::vector<double> g,
                  const ImmunizeConfig& cfg, StepRecord record, Clock::time_point start) {
  require_finite_grad(g);
  const std::vector<double> mask_u = cfg.upper_subset.mask(sig);
  std::vector<double> flat = theta.flatten();
  double norm2 = 0.0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (mask_u[i] == 0.0) continue;
    flat[i] += cfg.beta * g[i];
    norm2 += g[i] * g[i];
  }
  record.grad_norm = std::sqrt(norm2);
  record.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  StepResult out;
  out.theta = cfg.beta == 0.0 ? theta : ParamSet::unflatten(sig, flat);
  out.record = std::move(record);
  out.upper_grad = std::move(g);
  return out;
}

}  // namespace

StepResult mima_step(const Arch& arch, const ParamSet& theta, const ImmunizeSetup& setup,
                     std::span<const ConceptBatch> batches, const StepDraws& draws,
                     const ImmunizeConfig& cfg) {
  const auto start = Clock::now();
  check_inputs(arch, theta, setup, batches, draws, cfg);
  const ParamSignature sig = arch.signature();
  const std::size_t N = batches.size();
  const std::vector<double> mask_l = cfg.lower_subset.mask(sig);
  const std::vector<double> flat = theta.flatten();
  const Denoiser model(arch, theta);

  // Lower level: one masked gradient step per concept.
  std::vector<ParamSet> adapted;
  std::vector<Matrix> embeddings;
  StepRecord record;
  record.lower_loss.resize(N);
  for (std::size_t n = 0; n < N; ++n) {
    const Matrix& emb = setup.concepts[n].embedding;
    const LossGrad g = loss_and_grad(model, batches[n].lower, emb, setup.schedule, draws.lower[n]);
    require_finite_loss(g.loss, "lower-level");
    std::vector<double> p = flat;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg.alpha * mask_l[i] * g.grad[i];
    adapted.push_back(ParamSet::unflatten(sig, p));
    embeddings.push_back(emb);
    record.lower_loss[n] =
        loss_at(Denoiser(arch, adapted.back()), batches[n].lower, emb, setup.schedule, draws.lower[n]);
  }

  const MergeResult merged =
      merge_params(adapted, embeddings, setup.regularization, setup.pretrained, cfg.ridge_lambda);
  const std::vector<double> u =
      upper_gradient(Denoiser(arch, merged.merged), setup, batches, draws, record);

  // Back through the merge, then through each inner step.
  const std::vector<ParamSet> v = merged.context.vjp(ParamSet::unflatten(sig, u));
  std::vector<double> g(flat.size(), 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    const std::vector<double> vn = v[n].flatten();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += vn[i];
    if (cfg.grad_mode == GradMode::FirstOrder || cfg.alpha == 0.0) continue;
    std::vector<double> dir(vn.size());
    for (std::size_t i = 0; i < dir.size(); ++i) dir[i] = mask_l[i] * vn[i];
    const HessianVector hv = hessian_vector(model, batches[n].lower, setup.concepts[n].embedding,
                                            setup.schedule, draws.lower[n], dir);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= cfg.alpha * hv.hvp[i];
  }
  return finish(theta, sig, std::move(g), cfg, std::move(record), start);
}

StepResult mima_step(const Arch& arch, const ParamSet& theta, const ImmunizeSetup& setup,
                     std::span<const ConceptBatch> batches, const ImmunizeConfig& cfg, Rng& rng) {
  const StepDraws draws = draw_step(batches, cfg, setup.schedule, rng);
  return mima_step(arch, theta, setup, batches, draws, cfg);
}

StepResult jt_step(const Arch& arch, const ParamSet& theta, const ImmunizeSetup& setup,
                   std::span<const ConceptBatch> batches, const StepDraws& draws,
                   const ImmunizeConfig& cfg) {
  const auto start = Clock::now();
  check_inputs(arch, theta, setup, batches, draws, cfg);
  const ParamSignature sig = arch.signature();
  const std::size_t N = batches.size();
  const std::vector<double> mask_l = cfg.lower_subset.mask(sig);
  const Denoiser model(arch, theta);

  // Pooled loss: sample-weighted mean over every concept's lower batch.
  std::size_t total = 0;
  for (const ConceptBatch& b : batches) total += b.lower.rows();
  std::vector<double> weight(N);
  for (std::size_t n = 0; n < N; ++n)
    weight[n] = static_cast<double>(batches[n].lower.rows()) / static_cast<double>(total);

  std::vector<double> p = theta.flatten();
  for (std::size_t n = 0; n < N; ++n) {
    const LossGrad g = loss_and_grad(model, batches[n].lower, setup.concepts[n].embedding,
                                     setup.schedule, draws.lower[n]);
    require_finite_loss(g.loss, "lower-level");
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg.alpha * weight[n] * mask_l[i] * g.grad[i];
  }
  const Denoiser adapted(arch, ParamSet::unflatten(sig, p));

  StepRecord record;
  record.lower_loss.resize(N);
  for (std::size_t n = 0; n < N; ++n)
    record.lower_loss[n] = loss_at(adapted, batches[n].lower, setup.concepts[n].embedding,
                                   setup.schedule, draws.lower[n]);
  std::vector<double> g = upper_gradient(adapted, setup, batches, draws, record);

  if (cfg.grad_mode == GradMode::FullUnrolled && cfg.alpha != 0.0) {
    std::vector<double> dir(g.size());
    for (std::size_t i = 0; i < dir.size(); ++i) dir[i] = mask_l[i] * g[i];
    std::vector<double> hsum(g.size(), 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      const HessianVector hv = hessian_vector(model, batches[n].lower, setup.concepts[n].embedding,
                                              setup.schedule, draws.lower[n], dir);
      for (std::size_t i = 0; i < hsum.size(); ++i) hsum[i] += weight[n] * hv.hvp[i];
    }
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= cfg.alpha * hsum[i];
  }
  return finish(theta, sig, std::move(g), cfg, std::move(record), start);
}

void ImmunizeTrace::append(const StepRecord& r) {
  upper_loss.push_back(r.upper_loss);
  lower_loss.push_back(r.lower_loss);
  grad_norm.push_back(r.grad_norm);
  wall_seconds.push_back(r.wall_seconds);
}

void ImmunizeTrace::append(const ImmunizeTrace& other) {
  upper_loss.insert(upper_loss.end(), other.upper_loss.begin(), other.upper_loss.end());
  lower_loss.insert(lower_loss.end(), other.lower_loss.begin(), other.lower_loss.end());
  grad_norm.insert(grad_norm.end(), other.grad_norm.begin(), other.grad_norm.end());
  wall_seconds.insert(wall_seconds.end(), other.wall_seconds.begin(), other.wall_seconds.end());
}

bool ImmunizeTrace::same_values(const ImmunizeTrace& other) const {
  return upper_loss == other.upper_loss && lower_loss == other.lower_loss &&
         grad_norm == other.grad_norm;
}

std::vector<ConceptBatch> draw_batches(const ImmunizeSetup& setup, const ImmunizeConfig& cfg,
                                       Rng& rng) {
  std::vector<ConceptBatch> out;
  for (const Matrix& pool : setup.data) {
    ConceptBatch b;
    b.lower = draw_minibatch(pool, cfg.lower_batch, rng);
    b.upper = draw_minibatch(pool, cfg.upper_batch, rng);
    out.push_back(std::move(b));
  }
  return out;
}

namespace {

using StepFn = StepResult (*)(const Arch&, const ParamSet&, const ImmunizeSetup&,
                              std::span<const ConceptBatch>, const StepDraws&,
                              const ImmunizeConfig&);

ImmunizeResult run_loop(StepFn step, const Arch& arch, const ParamSet& theta_pre,
                        const ImmunizeSetup& setup, const ImmunizeConfig& cfg, Rng& rng) {
  arch.validate();
  setup.validate(arch);
  cfg.validate(arch.signature());
  ImmunizeResult out{theta_pre, {}};
  for (std::size_t k = 0; k < cfg.epochs; ++k) {
    const std::vector<ConceptBatch> batches = draw_batches(setup, cfg, rng);
    const StepDraws draws = draw_step(batches, cfg, setup.schedule, rng);
    StepResult r = step(arch, out.theta, setup, batches, draws, cfg);
    out.theta = std::move(r.theta);
    out.trace.append(r.record);
  }
  return out;
}

}  // namespace

ImmunizeResult run_mima(const Arch& arch, const ParamSet& theta_pre, const ImmunizeSetup& setup,
                        const ImmunizeConfig& cfg, Rng& rng) {
  return run_loop(&mima_step, arch, theta_pre, setup, cfg, rng);
}

ImmunizeResult run_jt(const Arch& arch, const ParamSet& theta_pre, const ImmunizeSetup& setup,
                      const ImmunizeConfig& cfg, Rng& rng) {
  return run_loop(&jt_step, arch, theta_pre, setup, cfg, rng);
}

ImmunizeResult run_cp(const Arch& arch, const ParamSet& theta_pre, const ImmunizeSetup& setup,
                      const ImmunizeConfig& cfg, Rng& rng) {
  ImmunizeConfig kv = cfg;
  kv.lower_subset = {SubsetKind::KvOnly, {}};
  kv.upper_subset = {SubsetKind::KvOnly, {}};
  return run_loop(&mima_step, arch, theta_pre, setup, kv, rng);
}

ImmunizeResult run_sequential(const Arch& arch, const ParamSet& theta_pre,
                              const ImmunizeSetup& setup, const ImmunizeConfig& cfg, Rng& rng) {
  setup.validate(arch);
  ImmunizeResult out{theta_pre, {}};
  for (std::size_t n = 0; n < setup.concepts.size(); ++n) {
    ImmunizeSetup one = setup;
    one.concepts = {setup.concepts[n]};
    one.data = {setup.data[n]};
    ImmunizeResult r = run_jt(arch, out.theta, one, cfg, rng);
    out.theta = std::move(r.theta);
    out.trace.append(r.trace);
  }
  return out;
}

}  // namespace mima
