#include "mima/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>

#include "mima/dual.hpp"

namespace mima {

NoiseSchedule NoiseSchedule::linear(std::size_t steps, double beta_start, double beta_end,
                                    double weight) {
  if (steps == 0) throw Error(Errc::InvalidArgument, "schedule needs at least one step");
  NoiseSchedule s;
  s.betas.resize(steps);
  s.alpha_bars.resize(steps);
  s.loss_weights.assign(steps, weight);
  double abar = 1.0;
  for (std::size_t i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    s.betas[i] = beta_start + (beta_end - beta_start) * frac;
    abar *= 1.0 - s.betas[i];
    s.alpha_bars[i] = abar;
  }
  s.validate();
  return s;
}

void NoiseSchedule::validate() const {
  if (betas.empty() || alpha_bars.size() != betas.size() ||
      loss_weights.size() != betas.size()) {
    throw Error(Errc::InvalidArgument, "schedule arrays are inconsistent");
  }
  for (std::size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] > 0.0 && betas[i] < 1.0)) throw Error(Errc::InvalidArgument, "beta out of (0,1)");
    if (i > 0 && betas[i] < betas[i - 1]) throw Error(Errc::InvalidArgument, "betas decrease");
    if (i > 0 && !(alpha_bars[i] < alpha_bars[i - 1])) {
      throw Error(Errc::InvalidArgument, "alpha_bar not strictly decreasing");
    }
    if (!(loss_weights[i] > 0.0)) throw Error(Errc::InvalidArgument, "loss weight must be > 0");
  }
}

namespace {

struct Layout {
  std::size_t D, l, c, d, dv, H, S, F, T;
  std::size_t in, zdim;
  std::size_t kv_size, rest_size;
  std::size_t w1, b1, w2, b2;

  explicit Layout(const Arch& a)
      : D(a.data_dim), l(a.tokens), c(a.embed_dim), d(a.key_dim), dv(a.value_dim),
        H(a.hidden), S(a.sites), F(a.time_features), T(a.num_steps) {
    in = D + F;
    zdim = in + S * dv;
    kv_size = S * (c * d + c * dv);
    w1 = S * (d * in + d);
    b1 = w1 + H * zdim;
    w2 = b1 + H;
    b2 = w2 + D * H;
    rest_size = b2 + D;
  }

  std::size_t wk(std::size_t s) const { return s * (c * d + c * dv); }
  std::size_t wv(std::size_t s) const { return wk(s) + c * d; }
  std::size_t wq(std::size_t s) const { return kv_size + s * (d * in + d); }
  std::size_t bq(std::size_t s) const { return wq(s) + d * in; }
  std::size_t at(std::size_t rest_offset) const { return kv_size + rest_offset; }
};

void time_features(const Layout& L, int t, double* out) {
  const double u = std::numbers::pi * static_cast<double>(t) / static_cast<double>(L.T);
  for (std::size_t k = 0; k < L.F; ++k) {
    const double freq = static_cast<double>(k / 2 + 1);
    out[k] = (k % 2 == 0) ? std::sin(freq * u) : std::cos(freq * u);
  }
}

using std::exp;
using std::tanh;

// Forward and hand-derived reverse pass, generic over double and Dual.
template <class T>
class Core {
 public:
  struct Cache {
    std::vector<T> h0, q, attn, z, hidden, out;
  };

  Core(const Layout& layout, const T* params, const T* emb)
      : L_(layout), p_(params), e_(emb),
        keys_(L_.S * L_.l * L_.d), values_(L_.S * L_.l * L_.dv),
        d_keys_(keys_.size(), T(0.0)), d_values_(values_.size(), T(0.0)) {
    for (std::size_t s = 0; s < L_.S; ++s) {
      project(p_ + L_.wk(s), L_.d, keys_.data() + s * L_.l * L_.d);
      project(p_ + L_.wv(s), L_.dv, values_.data() + s * L_.l * L_.dv);
    }
  }

  void forward(const T* x, int t, Cache& c) const {
    c.h0.assign(L_.in, T(0.0));
    for (std::size_t i = 0; i < L_.D; ++i) c.h0[i] = x[i];
    std::vector<double> tf(L_.F);
    time_features(L_, t, tf.data());
    for (std::size_t k = 0; k < L_.F; ++k) c.h0[L_.D + k] = T(tf[k]);

    c.q.assign(L_.S * L_.d, T(0.0));
    c.attn.assign(L_.S * L_.l, T(0.0));
    c.z.assign(L_.zdim, T(0.0));
    for (std::size_t i = 0; i < L_.in; ++i) c.z[i] = c.h0[i];
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(L_.d));

    for (std::size_t s = 0; s < L_.S; ++s) {
      T* q = c.q.data() + s * L_.d;
      const T* wq = p_ + L_.wq(s);
      const T* bq = p_ + L_.bq(s);
      for (std::size_t k = 0; k < L_.d; ++k) {
        T acc = bq[k];
        for (std::size_t i = 0; i < L_.in; ++i) acc += wq[k * L_.in + i] * c.h0[i];
        q[k] = acc;
      }
      const T* keys = keys_.data() + s * L_.l * L_.d;
      T* a = c.attn.data() + s * L_.l;
      for (std::size_t j = 0; j < L_.l; ++j) {
        T acc(0.0);
        for (std::size_t k = 0; k < L_.d; ++k) acc += keys[j * L_.d + k] * q[k];
        a[j] = acc * T(inv_sqrt_d);
      }
      double shift = value_of(a[0]);
      for (std::size_t j = 1; j < L_.l; ++j) shift = std::max(shift, value_of(a[j]));
      T total(0.0);
      for (std::size_t j = 0; j < L_.l; ++j) {
        a[j] = exp(a[j] - T(shift));
        total += a[j];
      }
      for (std::size_t j = 0; j < L_.l; ++j) a[j] /= total;

      const T* values = values_.data() + s * L_.l * L_.dv;
      T* o = c.z.data() + L_.in + s * L_.dv;
      for (std::size_t k = 0; k < L_.dv; ++k) {
        T acc(0.0);
        for (std::size_t j = 0; j < L_.l; ++j) acc += a[j] * values[j * L_.dv + k];
        o[k] = acc;
      }
    }

    c.hidden.assign(L_.H, T(0.0));
    const T* w1 = p_ + L_.at(L_.w1);
    const T* b1 = p_ + L_.at(L_.b1);
    for (std::size_t h = 0; h < L_.H; ++h) {
      T acc = b1[h];
      for (std::size_t i = 0; i < L_.zdim; ++i) acc += w1[h * L_.zdim + i] * c.z[i];
      c.hidden[h] = tanh(acc);
    }
    c.out.assign(L_.D, T(0.0));
    const T* w2 = p_ + L_.at(L_.w2);
    const T* b2 = p_ + L_.at(L_.b2);
    for (std::size_t i = 0; i < L_.D; ++i) {
      T acc = b2[i];
      for (std::size_t h = 0; h < L_.H; ++h) acc += w2[i * L_.H + h] * c.hidden[h];
      c.out[i] = acc;
    }
  }

  // Accumulates parameter gradients into g (flat layout; kv blocks are filled
  // by finish()). Writes dL/dx into g_x when non-null.
  void backward(const Cache& c, const T* d_out, T* g, T* g_x) {
    const T* w2 = p_ + L_.at(L_.w2);
    T* g_w2 = g + L_.at(L_.w2);
    T* g_b2 = g + L_.at(L_.b2);
    std::vector<T> d_pre(L_.H, T(0.0));
    for (std::size_t i = 0; i < L_.D; ++i) {
      g_b2[i] += d_out[i];
      for (std::size_t h = 0; h < L_.H; ++h) {
        g_w2[i * L_.H + h] += d_out[i] * c.hidden[h];
        d_pre[h] += w2[i * L_.H + h] * d_out[i];
      }
    }
    for (std::size_t h = 0; h < L_.H; ++h) d_pre[h] *= T(1.0) - c.hidden[h] * c.hidden[h];

    const T* w1 = p_ + L_.at(L_.w1);
    T* g_w1 = g + L_.at(L_.w1);
    T* g_b1 = g + L_.at(L_.b1);
    std::vector<T> d_z(L_.zdim, T(0.0));
    for (std::size_t h = 0; h < L_.H; ++h) {
      g_b1[h] += d_pre[h];
      for (std::size_t i = 0; i < L_.zdim; ++i) {
        g_w1[h * L_.zdim + i] += d_pre[h] * c.z[i];
        d_z[i] += w1[h * L_.zdim + i] * d_pre[h];
      }
    }

    std::vector<T> d_h0(d_z.begin(), d_z.begin() + static_cast<std::ptrdiff_t>(L_.in));
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(L_.d));
    std::vector<T> d_a(L_.l), d_q(L_.d);
    for (std::size_t s = 0; s < L_.S; ++s) {
      const T* a = c.attn.data() + s * L_.l;
      const T* q = c.q.data() + s * L_.d;
      const T* d_o = d_z.data() + L_.in + s * L_.dv;
      const T* values = values_.data() + s * L_.l * L_.dv;
      T* d_values = d_values_.data() + s * L_.l * L_.dv;
      for (std::size_t j = 0; j < L_.l; ++j) {
        T acc(0.0);
        for (std::size_t k = 0; k < L_.dv; ++k) {
          d_values[j * L_.dv + k] += a[j] * d_o[k];
          acc += values[j * L_.dv + k] * d_o[k];
        }
        d_a[j] = acc;
      }
      T dot(0.0);
      for (std::size_t j = 0; j < L_.l; ++j) dot += a[j] * d_a[j];
      const T* keys = keys_.data() + s * L_.l * L_.d;
      T* d_keys = d_keys_.data() + s * L_.l * L_.d;
      std::fill(d_q.begin(), d_q.end(), T(0.0));
      for (std::size_t j = 0; j < L_.l; ++j) {
        const T d_score = a[j] * (d_a[j] - dot) * T(inv_sqrt_d);
        for (std::size_t k = 0; k < L_.d; ++k) {
          d_keys[j * L_.d + k] += d_score * q[k];
          d_q[k] += d_score * keys[j * L_.d + k];
        }
      }
      const T* wq = p_ + L_.wq(s);
      T* g_wq = g + L_.wq(s);
      T* g_bq = g + L_.bq(s);
      for (std::size_t k = 0; k < L_.d; ++k) {
        g_bq[k] += d_q[k];
        for (std::size_t i = 0; i < L_.in; ++i) {
          g_wq[k * L_.in + i] += d_q[k] * c.h0[i];
          d_h0[i] += wq[k * L_.in + i] * d_q[k];
        }
      }
    }
    if (g_x != nullptr) {
      for (std::size_t i = 0; i < L_.D; ++i) g_x[i] = d_h0[i];
    }
  }

  // Converts accumulated key/value gradients into dL/dW^k, dL/dW^v and dL/dE.
  void finish(T* g, T* g_emb) const {
    for (std::size_t s = 0; s < L_.S; ++s) {
      finish_projection(p_ + L_.wk(s), L_.d, d_keys_.data() + s * L_.l * L_.d, g + L_.wk(s),
                        g_emb);
      finish_projection(p_ + L_.wv(s), L_.dv, d_values_.data() + s * L_.l * L_.dv,
                        g + L_.wv(s), g_emb);
    }
  }

 private:
  // out (l x width) = E (l x c) * W (c x width)
  void project(const T* w, std::size_t width, T* out) const {
    for (std::size_t j = 0; j < L_.l; ++j)
      for (std::size_t k = 0; k < width; ++k) {
        T acc(0.0);
        for (std::size_t i = 0; i < L_.c; ++i) acc += e_[j * L_.c + i] * w[i * width + k];
        out[j * width + k] = acc;
      }
  }

  void finish_projection(const T* w, std::size_t width, const T* d_proj, T* g_w,
                         T* g_emb) const {
    for (std::size_t i = 0; i < L_.c; ++i)
      for (std::size_t k = 0; k < width; ++k) {
        T acc(0.0);
        for (std::size_t j = 0; j < L_.l; ++j) acc += e_[j * L_.c + i] * d_proj[j * width + k];
        g_w[i * width + k] += acc;
      }
    if (g_emb == nullptr) return;
    for (std::size_t j = 0; j < L_.l; ++j)
      for (std::size_t i = 0; i < L_.c; ++i) {
        T acc(0.0);
        for (std::size_t k = 0; k < width; ++k) acc += d_proj[j * width + k] * w[i * width + k];
        g_emb[j * L_.c + i] += acc;
      }
  }

  const Layout& L_;
  const T* p_;
  const T* e_;
  std::vector<T> keys_, values_;
  std::vector<T> d_keys_, d_values_;
};

void check_embedding(const Arch& arch, const Matrix& embedding) {
  if (embedding.rows() != arch.tokens || embedding.cols() != arch.embed_dim) {
    throw Error(Errc::ShapeMismatch, "embedding must be " + std::to_string(arch.tokens) + "x" +
                                         std::to_string(arch.embed_dim));
  }
}

void check_batch(const Arch& arch, const Matrix& x) {
  if (x.rows() == 0) throw Error(Errc::ShapeMismatch, "empty batch");
  if (x.cols() != arch.data_dim) {
    throw Error(Errc::ShapeMismatch, "batch has " + std::to_string(x.cols()) +
                                         " columns, model expects " +
                                         std::to_string(arch.data_dim));
  }
}

void check_timestep(const Arch& arch, int t) {
  if (t < 1 || static_cast<std::size_t>(t) > arch.num_steps) {
    throw Error(Errc::ShapeMismatch, "timestep " + std::to_string(t) + " outside [1, T]");
  }
}

template <class T>
struct Evaluation {
  T loss{0.0};
  std::vector<T> grad;
  std::vector<T> grad_embedding;
  std::vector<T> grad_input;
};

template <class T>
Evaluation<T> evaluate(const Arch& arch, const std::vector<T>& params,
                       const std::vector<T>& embedding, const Matrix& x0,
                       const NoiseSchedule& schedule, const NoiseDraws& draws) {
  const Layout L(arch);
  const std::size_t batch = x0.rows();
  if (draws.timesteps.size() != batch || draws.noise.rows() != batch ||
      draws.noise.cols() != arch.data_dim) {
    throw Error(Errc::ShapeMismatch, "noise draws do not match the batch");
  }
  if (schedule.num_steps() != arch.num_steps) {
    throw Error(Errc::ShapeMismatch, "schedule length differs from the model's T");
  }
  const Matrix x_t = noisy_inputs(x0, draws, schedule);

  Evaluation<T> ev;
  ev.grad.assign(params.size(), T(0.0));
  ev.grad_embedding.assign(embedding.size(), T(0.0));
  ev.grad_input.assign(batch * arch.data_dim, T(0.0));

  Core<T> core(L, params.data(), embedding.data());
  typename Core<T>::Cache cache;
  std::vector<T> x(arch.data_dim), d_out(arch.data_dim);
  const double inv_b = 1.0 / static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const int t = draws.timesteps[b];
    check_timestep(arch, t);
    for (std::size_t i = 0; i < arch.data_dim; ++i) x[i] = T(x_t(b, i));
    core.forward(x.data(), t, cache);
    const double w = schedule.weight(t);
    for (std::size_t i = 0; i < arch.data_dim; ++i) {
      const T r = cache.out[i] - T(draws.noise(b, i));
      ev.loss += T(w * inv_b) * r * r;
      d_out[i] = T(2.0 * w * inv_b) * r;
    }
    core.backward(cache, d_out.data(), ev.grad.data(), ev.grad_input.data() + b * arch.data_dim);
  }
  core.finish(ev.grad.data(), ev.grad_embedding.data());
  return ev;
}

}  // namespace

ParamSignature Arch::signature() const {
  const Layout L(*this);
  ParamSignature sig;
  for (std::size_t s = 0; s < sites; ++s) {
    sig.kv_shapes.emplace_back(embed_dim, key_dim);
    sig.kv_shapes.emplace_back(embed_dim, value_dim);
  }
  sig.rest_size = L.rest_size;
  return sig;
}

std::vector<RestBlock> mlp_weight_blocks(const Arch& arch) {
  const Layout L(arch);
  return {{L.w1, L.H, L.zdim}, {L.w2, L.D, L.H}};
}

void Arch::validate() const {
  if (data_dim == 0 || tokens == 0 || embed_dim == 0 || key_dim == 0 || value_dim == 0 ||
      hidden == 0 || sites == 0 || num_steps == 0) {
    throw Error(Errc::InvalidArgument, "architecture dimensions must be positive");
  }
}

Denoiser::Denoiser(Arch arch, ParamSet params) : arch_(std::move(arch)), params_(std::move(params)) {
  arch_.validate();
  require_signature(params_, arch_.signature(), "denoiser parameters");
}

Denoiser Denoiser::init(const Arch& arch, Rng& rng) {
  arch.validate();
  const Layout L(arch);
  ParamSet p = ParamSet::zeros_like(arch.signature());
  const double kv_scale = 1.0 / std::sqrt(static_cast<double>(arch.embed_dim));
  for (Matrix& w : p.kv_weights) w = rng.normal_matrix(w.rows(), w.cols(), kv_scale);
  auto fill = [&](std::size_t offset, std::size_t count, double stddev) {
    for (std::size_t i = 0; i < count; ++i) p.rest[offset + i] = stddev * rng.normal();
  };
  for (std::size_t s = 0; s < L.S; ++s) {
    fill(L.wq(s) - L.kv_size, L.d * L.in, 1.0 / std::sqrt(static_cast<double>(L.in)));
  }
  fill(L.w1, L.H * L.zdim, 1.0 / std::sqrt(static_cast<double>(L.zdim)));
  fill(L.w2, L.D * L.H, 0.1 / std::sqrt(static_cast<double>(L.H)));
  return Denoiser(arch, std::move(p));
}

void Denoiser::set_params(ParamSet params) {
  require_signature(params, arch_.signature(), "denoiser parameters");
  params_ = std::move(params);
}

Matrix Denoiser::forward(const Matrix& x_t, const Matrix& embedding, std::span<const int> t) const {
  check_batch(arch_, x_t);
  check_embedding(arch_, embedding);
  if (t.size() != 1 && t.size() != x_t.rows()) {
    throw Error(Errc::ShapeMismatch, "need one timestep per row or a single shared timestep");
  }
  const Layout L(arch_);
  const std::vector<double> flat = params_.flatten();
  Core<double> core(L, flat.data(), embedding.data().data());
  Core<double>::Cache cache;
  Matrix out(x_t.rows(), arch_.data_dim);
  for (std::size_t b = 0; b < x_t.rows(); ++b) {
    const int tb = t.size() == 1 ? t[0] : t[b];
    check_timestep(arch_, tb);
    core.forward(x_t.row(b).data(), tb, cache);
    std::copy(cache.out.begin(), cache.out.end(), out.row(b).begin());
  }
  return out;
}

Matrix Denoiser::forward(const Matrix& x_t, const Matrix& embedding, int t) const {
  const int ts[] = {t};
  return forward(x_t, embedding, ts);
}

NoiseDraws draw_noise(std::size_t batch, std::size_t data_dim, const NoiseSchedule& schedule,
                      Rng& rng) {
  NoiseDraws d;
  d.timesteps.resize(batch);
  for (int& t : d.timesteps) t = rng.uniform_int(1, static_cast<int>(schedule.num_steps()));
  d.noise = rng.normal_matrix(batch, data_dim);
  return d;
}

Matrix noisy_inputs(const Matrix& x0, const NoiseDraws& draws, const NoiseSchedule& schedule) {
  require_same_shape(x0, draws.noise, "noisy_inputs");
  Matrix x_t(x0.rows(), x0.cols());
  for (std::size_t b = 0; b < x0.rows(); ++b) {
    const double abar = schedule.alpha_bar(draws.timesteps[b]);
    const double signal = std::sqrt(abar);
    const double noise = std::sqrt(1.0 - abar);
    for (std::size_t i = 0; i < x0.cols(); ++i) x_t(b, i) = signal * x0(b, i) + noise * draws.noise(b, i);
  }
  return x_t;
}

double weighted_noise_mse(const Matrix& predicted, const NoiseDraws& draws,
                          const NoiseSchedule& schedule) {
  require_same_shape(predicted, draws.noise, "weighted_noise_mse");
  if (predicted.rows() == 0) throw Error(Errc::EmptyBatch, "weighted_noise_mse");
  double total = 0.0;
  for (std::size_t b = 0; b < predicted.rows(); ++b) {
    double sq = 0.0;
    for (std::size_t i = 0; i < predicted.cols(); ++i) {
      const double r = predicted(b, i) - draws.noise(b, i);
      sq += r * r;
    }
    total += schedule.weight(draws.timesteps[b]) * sq;
  }
  return total / static_cast<double>(predicted.rows());
}

LossGrad loss_and_grad(const Denoiser& model, const Matrix& x0, const Matrix& embedding,
                       const NoiseSchedule& schedule, const NoiseDraws& draws) {
  check_batch(model.arch(), x0);
  check_embedding(model.arch(), embedding);
  const std::vector<double> flat = model.params().flatten();
  const std::vector<double> emb(embedding.data().begin(), embedding.data().end());
  Evaluation<double> ev = evaluate<double>(model.arch(), flat, emb, x0, schedule, draws);
  LossGrad out;
  out.loss = ev.loss;
  out.grad = std::move(ev.grad);
  out.grad_embedding = Matrix(embedding.rows(), embedding.cols(), std::move(ev.grad_embedding));
  out.grad_input = Matrix(x0.rows(), x0.cols(), std::move(ev.grad_input));
  return out;
}

LossGrad loss(const Denoiser& model, const Matrix& x0, const Matrix& embedding,
              const NoiseSchedule& schedule, Rng& rng) {
  const NoiseDraws draws = draw_noise(x0.rows(), x0.cols(), schedule, rng);
  return loss_and_grad(model, x0, embedding, schedule, draws);
}

HessianVector hessian_vector(const Denoiser& model, const Matrix& x0, const Matrix& embedding,
                             const NoiseSchedule& schedule, const NoiseDraws& draws,
                             std::span<const double> direction) {
  check_batch(model.arch(), x0);
  check_embedding(model.arch(), embedding);
  const std::vector<double> flat = model.params().flatten();
  if (direction.size() != flat.size()) {
    throw Error(Errc::ShapeMismatch, "direction length differs from parameter count");
  }
  std::vector<Dual> params(flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) params[i] = Dual(flat[i], direction[i]);
  std::vector<Dual> emb(embedding.data().begin(), embedding.data().end());
  const Evaluation<Dual> ev = evaluate<Dual>(model.arch(), params, emb, x0, schedule, draws);
  HessianVector out;
  out.grad.resize(flat.size());
  out.hvp.resize(flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) {
    out.grad[i] = ev.grad[i].v;
    out.hvp[i] = ev.grad[i].d;
  }
  return out;
}

Matrix sample(const NoisePredictor& predict, const NoiseSchedule& schedule, std::size_t n,
              std::size_t data_dim, Rng& rng) {
  if (n == 0) throw Error(Errc::InvalidArgument, "sample needs n >= 1");
  Matrix x = rng.normal_matrix(n, data_dim);
  for (int t = static_cast<int>(schedule.num_steps()); t >= 1; --t) {
    const Matrix eps = predict(x, t);
    require_same_shape(eps, x, "predicted noise");
    const double beta = schedule.beta(t);
    const double abar = schedule.alpha_bar(t);
    const double coef = beta / std::sqrt(1.0 - abar);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
    double sigma = 0.0;
    if (t > 1) {
      const double abar_prev = schedule.alpha_bar(t - 1);
      sigma = std::sqrt(beta * (1.0 - abar_prev) / (1.0 - abar));
    }
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < data_dim; ++i) {
        double next = inv_sqrt_alpha * (x(b, i) - coef * eps(b, i));
        if (t > 1) next += sigma * rng.normal();
        x(b, i) = next;
      }
    }
  }
  return x;
}

Matrix sample(const Denoiser& model, const Matrix& embedding, const NoiseSchedule& schedule,
              std::size_t n, Rng& rng) {
  check_embedding(model.arch(), embedding);
  return sample([&](const Matrix& x_t, int t) { return model.forward(x_t, embedding, t); },
                schedule, n, model.arch().data_dim, rng);
}

Matrix sample_concept(const ConceptSpec& spec, std::size_t n, Rng& rng) {
  if (spec.components.empty()) throw Error(Errc::InvalidArgument, "concept has no components");
  const std::size_t dim = spec.data_dim();
  double total_weight = 0.0;
  for (const auto& comp : spec.components) {
    if (comp.mean.size() != dim) throw Error(Errc::ShapeMismatch, "component dims differ");
    total_weight += comp.weight;
  }
  Matrix out(n, dim);
  for (std::size_t b = 0; b < n; ++b) {
    const GaussianComponent* chosen = &spec.components.front();
    if (spec.components.size() > 1) {
      double u = rng.uniform() * total_weight;
      for (const auto& comp : spec.components) {
        chosen = &comp;
        if (u < comp.weight) break;
        u -= comp.weight;
      }
    }
    for (std::size_t i = 0; i < dim; ++i) out(b, i) = chosen->mean[i] + chosen->stddev * rng.normal();
  }
  return out;
}

std::vector<Matrix> make_toy_dataset(std::span<const ConceptSpec> concepts,
                                     std::size_t per_concept, Rng& rng) {
  if (per_concept == 0) throw Error(Errc::InvalidArgument, "per_concept must be >= 1");
  std::vector<Matrix> out;
  out.reserve(concepts.size());
  for (const ConceptSpec& c : concepts) out.push_back(sample_concept(c, per_concept, rng));
  return out;
}

namespace {

constexpr char kMagic[8] = {'M', 'I', 'M', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class V>
void put(std::ofstream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class V>
V get(std::ifstream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw Error(Errc::IoError, "truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Denoiser& model) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::IoError, "cannot open " + path.string());
  os.write(kMagic, sizeof kMagic);
  put(os, kCheckpointVersion);
  const Arch& a = model.arch();
  for (std::size_t v : {a.data_dim, a.tokens, a.embed_dim, a.key_dim, a.value_dim, a.hidden,
                        a.sites, a.time_features, a.num_steps}) {
    put(os, static_cast<std::uint64_t>(v));
  }
  const ParamSet& p = model.params();
  put(os, static_cast<std::uint64_t>(p.kv_weights.size()));
  for (const Matrix& w : p.kv_weights) {
    put(os, static_cast<std::uint64_t>(w.rows()));
    put(os, static_cast<std::uint64_t>(w.cols()));
    os.write(reinterpret_cast<const char*>(w.data().data()),
             static_cast<std::streamsize>(w.size() * sizeof(double)));
  }
  put(os, static_cast<std::uint64_t>(p.rest.size()));
  os.write(reinterpret_cast<const char*>(p.rest.data()),
           static_cast<std::streamsize>(p.rest.size() * sizeof(double)));
  if (!os) throw Error(Errc::IoError, "write failed for " + path.string());
}

Denoiser load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::IoError, "cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw Error(Errc::IoError, "not a checkpoint: " + path.string());
  }
  if (get<std::uint32_t>(is) != kCheckpointVersion) {
    throw Error(Errc::IoError, "unsupported checkpoint version");
  }
  Arch a;
  for (std::size_t* f : {&a.data_dim, &a.tokens, &a.embed_dim, &a.key_dim, &a.value_dim,
                         &a.hidden, &a.sites, &a.time_features, &a.num_steps}) {
    *f = static_cast<std::size_t>(get<std::uint64_t>(is));
  }
  ParamSet p;
  const auto kv_count = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < kv_count; ++i) {
    const auto rows = get<std::uint64_t>(is);
    const auto cols = get<std::uint64_t>(is);
    Matrix w(rows, cols);
    is.read(reinterpret_cast<char*>(w.data().data()),
            static_cast<std::streamsize>(w.size() * sizeof(double)));
    p.kv_weights.push_back(std::move(w));
  }
  const auto rest = get<std::uint64_t>(is);
  p.rest.resize(rest);
  is.read(reinterpret_cast<char*>(p.rest.data()),
          static_cast<std::streamsize>(rest * sizeof(double)));
  if (!is) throw Error(Errc::IoError, "truncated checkpoint");
  return Denoiser(a, std::move(p));
}

}  // namespace mima
