#include "mima/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "mima/diffusion.hpp"
#include "mima/immunize.hpp"
#include "mima/merge.hpp"
#include "mima/oracles.hpp"

namespace mima {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double matrix_rel(const Matrix& got, const Matrix& want) {
  return frobenius_norm(got - want) / std::max(1e-8, frobenius_norm(want));
}

std::vector<double> slice(const std::vector<double>& v, std::size_t first, std::size_t last) {
  return {v.begin() + static_cast<std::ptrdiff_t>(first), v.begin() + static_cast<std::ptrdiff_t>(last)};
}

CheckReport finish(CheckReport r, Clock::time_point start) {
  r.passed = r.max_error <= r.tolerance && r.detail.empty();
  r.seconds = seconds_since(start);
  return r;
}

Arch denoiser_check_arch(std::size_t sites) {
  Arch a;
  a.data_dim = 2;
  a.tokens = 2;
  a.embed_dim = 4;
  a.key_dim = 4;
  a.value_dim = 4;
  a.hidden = 6;
  a.sites = sites;
  a.time_features = 2;
  a.num_steps = 10;
  return a;
}

// 26 parameters in total: 9 kv, 17 rest.
Arch bilevel_check_arch() {
  Arch a;
  a.data_dim = 1;
  a.tokens = 1;
  a.embed_dim = 3;
  a.key_dim = 2;
  a.value_dim = 1;
  a.hidden = 2;
  a.sites = 1;
  a.time_features = 1;
  a.num_steps = 10;
  return a;
}

double composite_objective(const Arch& arch, const ImmunizeSetup& setup, std::span<const double> flat,
                           std::span<const ConceptBatch> batches, const StepDraws& draws,
                           const ImmunizeConfig& cfg) {
  const ParamSignature sig = arch.signature();
  const std::vector<double> mask = cfg.lower_subset.mask(sig);
  const Denoiser model(arch, ParamSet::unflatten(sig, flat));
  std::vector<ParamSet> adapted;
  std::vector<Matrix> embs;
  for (std::size_t n = 0; n < batches.size(); ++n) {
    const Matrix& e = setup.concepts[n].embedding;
    const LossGrad g = loss_and_grad(model, batches[n].lower, e, setup.schedule, draws.lower[n]);
    std::vector<double> p(flat.begin(), flat.end());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg.alpha * mask[i] * g.grad[i];
    adapted.push_back(ParamSet::unflatten(sig, p));
    embs.push_back(e);
  }
  const Denoiser merged(arch, merge_params(adapted, embs, setup.regularization, setup.pretrained,
                                           cfg.ridge_lambda)
                                  .merged);
  double total = 0.0;
  for (std::size_t n = 0; n < batches.size(); ++n) {
    total += loss_and_grad(merged, batches[n].upper, setup.concepts[n].embedding, setup.schedule,
                           draws.upper[n])
                 .loss;
  }
  return total;
}

}  // namespace

CheckReport check_merge_forward(std::size_t instances, std::uint64_t seed) {
  const auto start = Clock::now();
  CheckReport r{"merge forward", false, instances, 0.0, 1e-7, 0.0, ""};
  Rng rng(seed);
  double max_residual = 0.0;
  for (std::size_t trial = 0; trial < instances; ++trial) {
    const auto l = static_cast<std::size_t>(rng.uniform_int(1, 2));
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 3));
    const auto c = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(n * l), 16));
    const auto d = static_cast<std::size_t>(rng.uniform_int(1, 8));
    const auto reg = c + static_cast<std::size_t>(rng.uniform_int(0, 6));
    const MergeProblem p = oracles::random_merge_problem(rng, c, d, n, l, reg);
    const MergeSolution s = solve(p, 0.0);
    const double residual = matrix_rel(p.concepts * s.phi_star, p.o_star);
    max_residual = std::max(max_residual, residual);
    r.max_error = std::max(r.max_error, oracles::rel_err(s.phi_star, oracles::kkt_oracle(p, 0.0)));
  }
  std::ostringstream d;
  d << "max constraint residual " << max_residual;
  if (max_residual > 1e-8) r.detail = d.str() + " exceeds 1e-8";
  r = finish(r, start);
  if (r.detail.empty()) r.detail = d.str();
  return r;
}

CheckReport check_merge_backward(std::size_t instances, std::uint64_t seed) {
  const auto start = Clock::now();
  CheckReport r{"merge backward", false, instances, 0.0, 1e-5, 0.0, ""};
  Rng rng(seed);
  for (std::size_t trial = 0; trial < instances; ++trial) {
    const std::size_t n = 1 + trial % 3;
    const auto l = static_cast<std::size_t>(rng.uniform_int(1, 2));
    const auto c = n * l + static_cast<std::size_t>(rng.uniform_int(1, 6));
    const auto d = static_cast<std::size_t>(rng.uniform_int(1, 5));
    std::vector<Matrix> embeds, weights;
    for (std::size_t i = 0; i < n; ++i) {
      embeds.push_back(rng.normal_matrix(l, c));
      weights.push_back(rng.normal_matrix(c, d));
    }
    MergeProblem p;
    p.concept_rows = l;
    p.concepts = vstack(embeds);
    p.regularization = rng.normal_matrix(c + 3, c);
    p.w_pre = rng.normal_matrix(c, d);
    const Matrix upstream = rng.normal_matrix(c, d);
    auto build = [&](const std::vector<Matrix>& ws) {
      MergeProblem q = p;
      std::vector<Matrix> targets;
      for (std::size_t i = 0; i < n; ++i) targets.push_back(embeds[i] * ws[i]);
      q.o_star = vstack(targets);
      return q;
    };
    const MergeProblem base = build(weights);
    const MergeGradients g = backward(solve(base, 0.0), base, upstream);
    for (std::size_t i = 0; i < n; ++i) {
      const Matrix fd = finite_diff_grad(
          [&](const Matrix& w) {
            std::vector<Matrix> ws = weights;
            ws[i] = w;
            return inner(upstream, solve(build(ws), 0.0).phi_star);
          },
          weights[i], 1e-5);
      r.max_error = std::max(r.max_error, matrix_rel(g.grad_w_blocks[i], fd));
    }
  }
  return finish(r, start);
}

CheckReport check_denoiser_gradients(std::size_t configs, std::uint64_t seed) {
  const auto start = Clock::now();
  CheckReport r{"denoiser gradients", false, configs, 0.0, 1e-5, 0.0, ""};
  for (std::size_t k = 0; k < configs; ++k) {
    const Arch arch = denoiser_check_arch(1 + k % 2);
    Rng rng(seed + k);
    Denoiser m = Denoiser::init(arch, rng);
    ParamSet p = m.params();
    for (double& v : p.rest) v += 0.3 * rng.normal();
    m.set_params(p);
    const NoiseSchedule sched = NoiseSchedule::linear(arch.num_steps, 1e-4, 0.2);
    const Matrix x0 = rng.normal_matrix(4, arch.data_dim);
    const Matrix emb = rng.normal_matrix(arch.tokens, arch.embed_dim);
    const NoiseDraws draws = draw_noise(4, arch.data_dim, sched, rng);
    const LossGrad g = loss_and_grad(m, x0, emb, sched, draws);

    const std::vector<double> flat = m.params().flatten();
    const std::vector<double> fd = oracles::fd_gradient(
        [&](const std::vector<double>& v) {
          return loss_and_grad(Denoiser(arch, ParamSet::unflatten(arch.signature(), v)), x0, emb, sched, draws)
              .loss;
        },
        flat, 1e-5);
    const std::size_t kv = arch.signature().kv_size();
    r.max_error = std::max(r.max_error, oracles::rel_err(slice(g.grad, 0, kv), slice(fd, 0, kv)));
    r.max_error = std::max(r.max_error, oracles::rel_err(slice(g.grad, kv, fd.size()), slice(fd, kv, fd.size())));

    const Matrix fd_emb = finite_diff_grad(
        [&](const Matrix& e) { return loss_and_grad(m, x0, e, sched, draws).loss; }, emb, 1e-5);
    r.max_error = std::max(r.max_error, matrix_rel(g.grad_embedding, fd_emb));

    const Matrix fd_x0 = finite_diff_grad(
        [&](const Matrix& x) { return loss_and_grad(m, x, emb, sched, draws).loss; }, x0, 1e-5);
    Matrix chained = g.grad_input;
    for (std::size_t b = 0; b < chained.rows(); ++b)
      for (double& v : chained.row(b)) v *= std::sqrt(sched.alpha_bar(draws.timesteps[b]));
    r.max_error = std::max(r.max_error, matrix_rel(chained, fd_x0));
  }
  return finish(r, start);
}

CheckReport check_bilevel_gradient(std::uint64_t seed) {
  const auto start = Clock::now();
  const Arch arch = bilevel_check_arch();
  const ParamSignature sig = arch.signature();
  CheckReport r{"bi-level gradient", false, 0, 0.0, 1e-4, 0.0, ""};
  if (sig.flat_size() > 30) {
    r.detail = "check model has " + std::to_string(sig.flat_size()) + " parameters";
    return finish(r, start);
  }
  std::ostringstream detail;
  for (std::uint64_t s = seed; s < seed + 3; ++s) {
    Rng rng(s);
    Denoiser m = Denoiser::init(arch, rng);
    ParamSet p = m.params();
    for (double& v : p.rest) v += 0.3 * rng.normal();
    m.set_params(p);
    ImmunizeSetup setup;
    setup.schedule = NoiseSchedule::linear(arch.num_steps, 1e-4, 0.2);
    for (std::size_t n = 0; n < 2; ++n) {
      ConceptSpec c;
      c.token_id = static_cast<int>(n);
      c.embedding = rng.normal_matrix(arch.tokens, arch.embed_dim);
      c.components.push_back({{n == 0 ? 1.5 : -1.5}, 0.3, 1.0});
      setup.data.push_back(sample_concept(c, 32, rng));
      setup.concepts.push_back(std::move(c));
    }
    setup.regularization = rng.normal_matrix(2 * arch.embed_dim, arch.embed_dim);
    setup.pretrained = m.params();

    for (SubsetKind lower : {SubsetKind::All, SubsetKind::KvOnly}) {
      ImmunizeConfig cfg;
      cfg.alpha = 0.05;
      cfg.beta = 1e-3;
      cfg.lower_batch = 6;
      cfg.upper_batch = 5;
      cfg.lower_subset.kind = lower;
      const std::vector<ConceptBatch> batches = draw_batches(setup, cfg, rng);
      const StepDraws draws = draw_step(batches, cfg, setup.schedule, rng);
      const StepResult step = mima_step(arch, m.params(), setup, batches, draws, cfg);
      const std::vector<double> fd = oracles::fd_gradient(
          [&](const std::vector<double>& x) { return composite_objective(arch, setup, x, batches, draws, cfg); },
          m.params().flatten(), 1e-5);
      r.max_error = std::max(r.max_error, oracles::rel_err(step.upper_grad, fd));
      ++r.instances;

      ImmunizeConfig zero = cfg;
      zero.alpha = 0.0;
      ImmunizeConfig first = zero;
      first.grad_mode = GradMode::FirstOrder;
      const StepResult a = mima_step(arch, m.params(), setup, batches, draws, zero);
      const StepResult b = mima_step(arch, m.params(), setup, batches, draws, first);
      if (a.upper_grad != b.upper_grad || !(a.theta == b.theta))
        detail << "grad modes differ at alpha=0 (seed " << s << ") ";
    }
  }
  r.detail = detail.str();
  r = finish(r, start);
  if (r.detail.empty()) r.detail = std::to_string(sig.flat_size()) + " parameters, grad modes equal at alpha=0";
  return r;
}

std::vector<CheckReport> run_gradient_checks(const std::string& module) {
  if (module != "all" && module != "merge" && module != "diffusion" && module != "immunize")
    throw Error(Errc::ConfigError, "unknown module '" + module + "' (all, merge, diffusion, immunize)");
  std::vector<CheckReport> out;
  if (module == "all" || module == "merge") {
    out.push_back(check_merge_forward());
    out.push_back(check_merge_backward());
  }
  if (module == "all" || module == "diffusion") out.push_back(check_denoiser_gradients());
  if (module == "all" || module == "immunize") out.push_back(check_bilevel_gradient());
  return out;
}

}  // namespace mima
