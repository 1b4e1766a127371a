#include "magic/neural_lm.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace magic::lm {

namespace {

std::atomic<std::uint64_t> g_backward_passes{0};

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u))); }

double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
}

// y = x W + b for a single row; W is n x m row-major.
void affine_row(const double* x, std::size_t n, const double* w, const double* b, double* y, std::size_t m) {
  std::copy(b, b + m, y);
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = x[i];
    const double* wr = w + i * m;
    for (std::size_t j = 0; j < m; ++j) y[j] += xi * wr[j];
  }
}

// Backward of affine_row over T rows. Accumulates dW, db and writes (or adds to) dx.
void affine_backward(const double* x, const double* dy, std::size_t rows, std::size_t n, std::size_t m,
                     const double* w, double* dw, double* db, double* dx, bool accumulate_dx) {
  for (std::size_t t = 0; t < rows; ++t) {
    const double* xr = x + t * n;
    const double* dyr = dy + t * m;
    for (std::size_t j = 0; j < m; ++j) db[j] += dyr[j];
    for (std::size_t i = 0; i < n; ++i) {
      const double xi = xr[i];
      double* dwr = dw + i * m;
      const double* wr = w + i * m;
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        dwr[j] += xi * dyr[j];
        acc += wr[j] * dyr[j];
      }
      if (accumulate_dx) {
        dx[t * n + i] += acc;
      } else {
        dx[t * n + i] = acc;
      }
    }
  }
}

void layer_norm_row(const double* x, const double* g, const double* b, double* y, double* xhat,
                    double* rstd_out, std::size_t d) {
  double mean = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= static_cast<double>(d);
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  for (std::size_t i = 0; i < d; ++i) {
    const double xh = (x[i] - mean) * rstd;
    if (xhat) xhat[i] = xh;
    y[i] = g[i] * xh + b[i];
  }
  if (rstd_out) *rstd_out = rstd;
}

// dx (added) from dy through y = g * xhat + b.
void layer_norm_backward(const double* dy, const double* xhat, const double* rstd, const double* g,
                         double* dg, double* db, double* dx, std::size_t rows, std::size_t d) {
  std::vector<double> dxhat(d);
  for (std::size_t t = 0; t < rows; ++t) {
    const double* dyr = dy + t * d;
    const double* xh = xhat + t * d;
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      dg[i] += dyr[i] * xh[i];
      db[i] += dyr[i];
      dxhat[i] = dyr[i] * g[i];
      mean_dxhat += dxhat[i];
      mean_dxhat_xhat += dxhat[i] * xh[i];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
      dx[t * d + i] += rstd[t] * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
    }
  }
}

// Causal attention output for query row `q` over `n` key/value rows of width
// `d` (heads laid out contiguously). Writes the probabilities when `probs_out`
// is non-null (layout H x n).
void attend(const double* q, const double* const* key_rows, const double* const* value_rows, std::size_t n,
            std::size_t heads, std::size_t head_dim, double* out, double* probs_out) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<double> scores(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t o = h * head_dim;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t e = 0; e < head_dim; ++e) s += q[o + e] * key_rows[j][o + e];
      scores[j] = s * scale;
      mx = std::max(mx, scores[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      scores[j] = std::exp(scores[j] - mx);
      sum += scores[j];
    }
    for (std::size_t e = 0; e < head_dim; ++e) out[o + e] = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double pj = scores[j] / sum;
      if (probs_out) probs_out[h * n + j] = pj;
      for (std::size_t e = 0; e < head_dim; ++e) out[o + e] += pj * value_rows[j][o + e];
    }
  }
}

void softmax_inplace(std::span<double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : v) x /= sum;
}

double log_softmax_at(std::span<const double> row, std::size_t idx) {
  const double mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double x : row) sum += std::exp(x - mx);
  return row[idx] - mx - std::log(sum);
}

double raw_cos(const double* a, const double* b, std::size_t d, double na, double nb) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) s += a[i] * b[i];
  return s / (na * nb);
}

double row_norm(const double* a, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) s += a[i] * a[i];
  return std::sqrt(s);
}

// Adds scale * d cos(a, b) / da to ga and scale * d cos(a, b) / db to gb.
void cos_grad(const double* a, const double* b, std::size_t d, double na, double nb, double scale, double* ga,
              double* gb) {
  const double c = raw_cos(a, b, d, na, nb);
  for (std::size_t i = 0; i < d; ++i) {
    ga[i] += scale * (b[i] / (na * nb) - c * a[i] / (na * na));
    gb[i] += scale * (a[i] / (na * nb) - c * b[i] / (nb * nb));
  }
}

void write_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void write_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
std::uint64_t read_le(const std::string& in, std::size_t pos, int bytes) {
  if (pos + static_cast<std::size_t>(bytes) > in.size()) throw Error("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)])) << (8 * i);
  }
  return v;
}

constexpr char kCheckpointMagic[] = "MAGICLM1";

}  // namespace

std::uint64_t backward_pass_count() { return g_backward_passes.load(); }

void LmConfig::validate() const {
  if (vocab_size < 3) throw ContractViolation("vocab_size must cover the special tokens");
  if (hidden_dim <= 0 || n_layers <= 0 || context_len <= 0 || n_heads <= 0) {
    throw ContractViolation("hidden_dim, n_layers, n_heads and context_len must be positive");
  }
  if (hidden_dim % n_heads != 0) throw ContractViolation("hidden_dim must be divisible by n_heads");
  if (!(rho >= 0.0 && rho <= 1.0)) throw ContractViolation("rho must lie in [0, 1]");
  if (!(learning_rate > 0.0)) throw ContractViolation("learning_rate must be positive");
  if (epochs < 0 || batch_size < 1) throw ContractViolation("epochs >= 0 and batch_size >= 1 required");
}

ParameterLayout::ParameterLayout(const LmConfig& c) {
  const auto D = static_cast<std::size_t>(c.hidden_dim);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto C = static_cast<std::size_t>(c.context_len);
  const auto F = static_cast<std::size_t>(c.ffn_dim());
  auto add = [this](std::string name, std::vector<std::size_t> shape) {
    std::size_t size = 1;
    for (auto s : shape) size *= s;
    groups_.push_back(ParamGroup{std::move(name), std::move(shape), total_, size});
    total_ += size;
  };
  add("tok_emb", {V, D});
  add("pos_emb", {C, D});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    add(pre + "ln1.g", {D});
    add(pre + "ln1.b", {D});
    add(pre + "attn.wq", {D, D});
    add(pre + "attn.bq", {D});
    add(pre + "attn.wk", {D, D});
    add(pre + "attn.bk", {D});
    add(pre + "attn.wv", {D, D});
    add(pre + "attn.bv", {D});
    add(pre + "attn.wo", {D, D});
    add(pre + "attn.bo", {D});
    add(pre + "ln2.g", {D});
    add(pre + "ln2.b", {D});
    add(pre + "ffn.w1", {D, F});
    add(pre + "ffn.b1", {F});
    add(pre + "ffn.w2", {F, D});
    add(pre + "ffn.b2", {D});
  }
  add("lnf.g", {D});
  add("lnf.b", {D});
  add("head.w", {D, V});
  add("head.b", {V});
}

const ParamGroup& ParameterLayout::group(const std::string& name) const {
  for (const auto& g : groups_) {
    if (g.name == name) return g;
  }
  throw NotFoundError("no parameter group named " + name);
}

// ----------------------------------------------------------------------------

Transformer::Transformer(LmConfig config, std::vector<double> params)
    : config_(config), layout_((config.validate(), config)), params_(std::move(params)) {
  if (params_.size() != layout_.total()) {
    throw ContractViolation("parameter count " + std::to_string(params_.size()) + " does not match layout " +
                            std::to_string(layout_.total()));
  }
  auto o = [this](const std::string& n) { return layout_.group(n).offset; };
  off_.tok_emb = o("tok_emb");
  off_.pos_emb = o("pos_emb");
  off_.lnf_g = o("lnf.g");
  off_.lnf_b = o("lnf.b");
  off_.head_w = o("head.w");
  off_.head_b = o("head.b");
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    off_.layers.push_back(LayerOffsets{o(pre + "ln1.g"), o(pre + "ln1.b"), o(pre + "attn.wq"), o(pre + "attn.bq"),
                                       o(pre + "attn.wk"), o(pre + "attn.bk"), o(pre + "attn.wv"),
                                       o(pre + "attn.bv"), o(pre + "attn.wo"), o(pre + "attn.bo"),
                                       o(pre + "ln2.g"), o(pre + "ln2.b"), o(pre + "ffn.w1"), o(pre + "ffn.b1"),
                                       o(pre + "ffn.w2"), o(pre + "ffn.b2")});
  }
}

Transformer Transformer::initialize(const LmConfig& config) {
  config.validate();
  ParameterLayout layout(config);
  std::vector<double> params(layout.total(), 0.0);
  std::mt19937_64 rng(config.seed);
  for (const auto& g : layout.groups()) {
    const bool is_gain = g.name.ends_with(".g");
    const bool is_bias = g.shape.size() == 1 && !is_gain;
    if (is_gain) {
      std::fill_n(params.begin() + static_cast<std::ptrdiff_t>(g.offset), g.size, 1.0);
    } else if (!is_bias) {
      const bool embedding = g.name == "tok_emb" || g.name == "pos_emb";
      const double std_dev = embedding ? 0.1 : 1.0 / std::sqrt(static_cast<double>(g.shape[0]));
      std::normal_distribution<double> normal(0.0, std_dev);
      for (std::size_t i = 0; i < g.size; ++i) params[g.offset + i] = normal(rng);
    }
  }
  return Transformer(config, std::move(params));
}

struct Transformer::LayerCache {
  std::vector<double> x_in, xhat1, rstd1, a, q, k, v, probs, o, x_mid, xhat2, rstd2, c, u, g;
};

struct Transformer::SequenceCache {
  std::vector<TokenId> inputs;
  std::vector<LayerCache> layers;
  std::vector<double> x_final, xhatf, rstdf, hidden;
};

SequenceOutput Transformer::forward_sequence(std::span<const TokenId> inputs) const {
  return forward_cached(inputs, nullptr);
}

SequenceOutput Transformer::forward_cached(std::span<const TokenId> inputs, SequenceCache* cache) const {
  const auto T = inputs.size();
  const auto D = static_cast<std::size_t>(config_.hidden_dim);
  const auto V = static_cast<std::size_t>(config_.vocab_size);
  const auto F = static_cast<std::size_t>(config_.ffn_dim());
  const auto H = static_cast<std::size_t>(config_.n_heads);
  const auto hd = D / H;
  if (T == 0) throw ContractViolation("forward: empty input");
  if (T > static_cast<std::size_t>(config_.context_len)) {
    throw ContextOverflowError("sequence of length " + std::to_string(T) + " exceeds context_len " +
                               std::to_string(config_.context_len));
  }

  std::vector<double> x(T * D);
  for (std::size_t t = 0; t < T; ++t) {
    const TokenId id = inputs[t];
    if (id < 0 || static_cast<std::size_t>(id) >= V) throw ContractViolation("token id out of range");
    const double* te = at(off_.tok_emb) + static_cast<std::size_t>(id) * D;
    const double* pe = at(off_.pos_emb) + t * D;
    for (std::size_t i = 0; i < D; ++i) x[t * D + i] = te[i] + pe[i];
  }
  if (cache) {
    cache->inputs.assign(inputs.begin(), inputs.end());
    cache->layers.assign(off_.layers.size(), LayerCache{});
  }

  std::vector<double> a(T * D), q(T * D), k(T * D), v(T * D), o(T * D), proj(D), c(T * D), u(T * F), g(T * F),
      xhat1(T * D), rstd1(T), xhat2(T * D), rstd2(T), probs;
  std::vector<const double*> krows(T), vrows(T);
  for (std::size_t l = 0; l < off_.layers.size(); ++l) {
    const auto& lo = off_.layers[l];
    LayerCache* lc = cache ? &cache->layers[l] : nullptr;
    if (lc) lc->x_in = x;
    for (std::size_t t = 0; t < T; ++t) {
      layer_norm_row(&x[t * D], at(lo.ln1_g), at(lo.ln1_b), &a[t * D], &xhat1[t * D], &rstd1[t], D);
      affine_row(&a[t * D], D, at(lo.wq), at(lo.bq), &q[t * D], D);
      affine_row(&a[t * D], D, at(lo.wk), at(lo.bk), &k[t * D], D);
      affine_row(&a[t * D], D, at(lo.wv), at(lo.bv), &v[t * D], D);
    }
    if (lc) probs.assign(T * H * T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j <= t; ++j) {
        krows[j] = &k[j * D];
        vrows[j] = &v[j * D];
      }
      std::vector<double> pr;
      if (lc) pr.resize(H * (t + 1));
      attend(&q[t * D], krows.data(), vrows.data(), t + 1, H, hd, &o[t * D], lc ? pr.data() : nullptr);
      if (lc) {
        for (std::size_t h = 0; h < H; ++h) {
          for (std::size_t j = 0; j <= t; ++j) probs[(t * H + h) * T + j] = pr[h * (t + 1) + j];
        }
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      affine_row(&o[t * D], D, at(lo.wo), at(lo.bo), proj.data(), D);
      for (std::size_t i = 0; i < D; ++i) x[t * D + i] += proj[i];
    }
    if (lc) {
      lc->xhat1 = xhat1;
      lc->rstd1 = rstd1;
      lc->a = a;
      lc->q = q;
      lc->k = k;
      lc->v = v;
      lc->probs = probs;
      lc->o = o;
      lc->x_mid = x;
    }
    for (std::size_t t = 0; t < T; ++t) {
      layer_norm_row(&x[t * D], at(lo.ln2_g), at(lo.ln2_b), &c[t * D], &xhat2[t * D], &rstd2[t], D);
      affine_row(&c[t * D], D, at(lo.w1), at(lo.b1), &u[t * F], F);
      for (std::size_t i = 0; i < F; ++i) g[t * F + i] = gelu(u[t * F + i]);
      affine_row(&g[t * F], F, at(lo.w2), at(lo.b2), proj.data(), D);
      for (std::size_t i = 0; i < D; ++i) x[t * D + i] += proj[i];
    }
    if (lc) {
      lc->xhat2 = xhat2;
      lc->rstd2 = rstd2;
      lc->c = c;
      lc->u = u;
      lc->g = g;
    }
  }

  SequenceOutput out;
  out.hidden.resize(T * D);
  out.logits.resize(T * V);
  std::vector<double> xhatf(T * D), rstdf(T);
  for (std::size_t t = 0; t < T; ++t) {
    layer_norm_row(&x[t * D], at(off_.lnf_g), at(off_.lnf_b), &out.hidden[t * D], &xhatf[t * D], &rstdf[t], D);
    affine_row(&out.hidden[t * D], D, at(off_.head_w), at(off_.head_b), &out.logits[t * V], V);
  }
  if (cache) {
    cache->x_final = x;
    cache->xhatf = std::move(xhatf);
    cache->rstdf = std::move(rstdf);
    cache->hidden = out.hidden;
  }
  return out;
}

void Transformer::backward(const SequenceCache& cache, std::span<const double> dlogits,
                           std::span<const double> dhidden, std::vector<double>& grad) const {
  const auto T = cache.inputs.size();
  const auto D = static_cast<std::size_t>(config_.hidden_dim);
  const auto V = static_cast<std::size_t>(config_.vocab_size);
  const auto F = static_cast<std::size_t>(config_.ffn_dim());
  const auto H = static_cast<std::size_t>(config_.n_heads);
  const auto hd = D / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  double* G = grad.data();

  // head and final norm
  std::vector<double> dh(dhidden.begin(), dhidden.end());
  affine_backward(cache.hidden.data(), dlogits.data(), T, D, V, at(off_.head_w), G + off_.head_w, G + off_.head_b,
                  dh.data(), true);
  std::vector<double> dx(T * D, 0.0);
  layer_norm_backward(dh.data(), cache.xhatf.data(), cache.rstdf.data(), at(off_.lnf_g), G + off_.lnf_g,
                      G + off_.lnf_b, dx.data(), T, D);

  std::vector<double> dg(T * F), du(T * F), dc(T * D), dout(T * D), dq(T * D), dk(T * D), dv(T * D), da(T * D);
  for (std::size_t l = off_.layers.size(); l-- > 0;) {
    const auto& lo = off_.layers[l];
    const auto& lc = cache.layers[l];

    // feed-forward block: x_out = x_mid + gelu(c W1 + b1) W2 + b2
    affine_backward(lc.g.data(), dx.data(), T, F, D, at(lo.w2), G + lo.w2, G + lo.b2, dg.data(), false);
    for (std::size_t i = 0; i < T * F; ++i) du[i] = dg[i] * gelu_grad(lc.u[i]);
    affine_backward(lc.c.data(), du.data(), T, D, F, at(lo.w1), G + lo.w1, G + lo.b1, dc.data(), false);
    layer_norm_backward(dc.data(), lc.xhat2.data(), lc.rstd2.data(), at(lo.ln2_g), G + lo.ln2_g, G + lo.ln2_b,
                        dx.data(), T, D);

    // attention block: x_mid = x_in + attn(LN1(x_in)) Wo + bo
    affine_backward(lc.o.data(), dx.data(), T, D, D, at(lo.wo), G + lo.wo, G + lo.bo, dout.data(), false);
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    std::vector<double> dp(T);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t ho = h * hd;
        const double* P = &lc.probs[(t * H + h) * T];
        double weighted = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          double s = 0.0;
          for (std::size_t e = 0; e < hd; ++e) {
            s += dout[t * D + ho + e] * lc.v[j * D + ho + e];
            dv[j * D + ho + e] += P[j] * dout[t * D + ho + e];
          }
          dp[j] = s;
          weighted += P[j] * s;
        }
        for (std::size_t j = 0; j <= t; ++j) {
          const double ds = P[j] * (dp[j] - weighted) * scale;
          for (std::size_t e = 0; e < hd; ++e) {
            dq[t * D + ho + e] += ds * lc.k[j * D + ho + e];
            dk[j * D + ho + e] += ds * lc.q[t * D + ho + e];
          }
        }
      }
    }
    affine_backward(lc.a.data(), dq.data(), T, D, D, at(lo.wq), G + lo.wq, G + lo.bq, da.data(), false);
    affine_backward(lc.a.data(), dk.data(), T, D, D, at(lo.wk), G + lo.wk, G + lo.bk, da.data(), true);
    affine_backward(lc.a.data(), dv.data(), T, D, D, at(lo.wv), G + lo.wv, G + lo.bv, da.data(), true);
    layer_norm_backward(da.data(), lc.xhat1.data(), lc.rstd1.data(), at(lo.ln1_g), G + lo.ln1_g, G + lo.ln1_b,
                        dx.data(), T, D);
  }

  for (std::size_t t = 0; t < T; ++t) {
    double* te = G + off_.tok_emb + static_cast<std::size_t>(cache.inputs[t]) * D;
    double* pe = G + off_.pos_emb + t * D;
    for (std::size_t i = 0; i < D; ++i) {
      te[i] += dx[t * D + i];
      pe[i] += dx[t * D + i];
    }
  }
}

LossBreakdown Transformer::loss(std::span<const Sequence> batch, double rho, std::vector<double>* grad) const {
  if (batch.empty()) throw ContractViolation("loss: empty batch");
  const auto D = static_cast<std::size_t>(config_.hidden_dim);
  const auto V = static_cast<std::size_t>(config_.vocab_size);
  if (grad) {
    grad->assign(params_.size(), 0.0);
    ++g_backward_passes;
  }
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  LossBreakdown total;
  SequenceCache cache;
  for (const auto& seq : batch) {
    if (seq.size() < 2) throw ContractViolation("training sequence needs at least two tokens");
    const std::span<const TokenId> inputs(seq.data(), seq.size() - 1);
    const std::span<const TokenId> targets(seq.data() + 1, seq.size() - 1);
    const auto T = inputs.size();
    const auto out = forward_cached(inputs, grad ? &cache : nullptr);
    const double mle = mle_from_logits(out.logits, targets, V);
    const double cl = cl_from_hidden(out.hidden, D, rho);
    total.mle += mle * inv_batch;
    total.cl += cl * inv_batch;
    if (!grad) continue;

    std::vector<double> dlogits(out.logits);
    for (std::size_t t = 0; t < T; ++t) {
      std::span<double> row(&dlogits[t * V], V);
      softmax_inplace(row);
      row[static_cast<std::size_t>(targets[t])] -= 1.0;
      for (double& x : row) x *= inv_batch / static_cast<double>(T);
    }
    std::vector<double> dhidden(T * D, 0.0);
    if (T >= 2) {
      const double norm = inv_batch / (static_cast<double>(T) * static_cast<double>(T - 1));
      std::vector<double> norms(T);
      for (std::size_t i = 0; i < T; ++i) norms[i] = row_norm(&out.hidden[i * D], D);
      for (std::size_t i = 0; i < T; ++i) {
        const double* hi = &out.hidden[i * D];
        const double self = raw_cos(hi, hi, D, norms[i], norms[i]);
        for (std::size_t j = 0; j < T; ++j) {
          if (j == i) continue;
          const double* hj = &out.hidden[j * D];
          const double margin = rho - self + raw_cos(hi, hj, D, norms[i], norms[j]);
          if (margin <= 0.0) continue;
          cos_grad(hi, hi, D, norms[i], norms[i], -norm, &dhidden[i * D], &dhidden[i * D]);
          cos_grad(hi, hj, D, norms[i], norms[j], norm, &dhidden[i * D], &dhidden[j * D]);
        }
      }
    }
    backward(cache, dlogits, dhidden, *grad);
  }
  total.total = total.mle + total.cl;
  return total;
}

double mle_from_logits(std::span<const double> logits, std::span<const TokenId> targets, std::size_t vocab) {
  if (targets.empty()) return 0.0;
  if (logits.size() != targets.size() * vocab) throw ContractViolation("mle: logits shape mismatch");
  double nll = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    nll -= log_softmax_at(logits.subspan(t * vocab, vocab), static_cast<std::size_t>(targets[t]));
  }
  return nll / static_cast<double>(targets.size());
}

double cl_from_hidden(std::span<const double> hidden, std::size_t dim, double rho) {
  const std::size_t T = hidden.size() / dim;
  if (T < 2) return 0.0;
  std::vector<double> norms(T);
  for (std::size_t i = 0; i < T; ++i) norms[i] = row_norm(&hidden[i * dim], dim);
  double sum = 0.0;
  for (std::size_t i = 0; i < T; ++i) {
    const double* hi = &hidden[i * dim];
    const double self = raw_cos(hi, hi, dim, norms[i], norms[i]);
    for (std::size_t j = 0; j < T; ++j) {
      if (j == i) continue;
      sum += std::max(0.0, rho - self + raw_cos(hi, &hidden[j * dim], dim, norms[i], norms[j]));
    }
  }
  return sum / (static_cast<double>(T) * static_cast<double>(T - 1));
}

LossBreakdown evaluate_loss(const Transformer& model, std::span<const Sequence> batch, double rho) {
  return model.loss(batch, rho, nullptr);
}

double mle_loss(const Transformer& model, std::span<const Sequence> batch) {
  return evaluate_loss(model, batch, 0.0).mle;
}

double cl_loss(const Transformer& model, std::span<const Sequence> batch, double rho) {
  return evaluate_loss(model, batch, rho).cl;
}

double total_loss(const Transformer& model, std::span<const Sequence> batch, double rho) {
  return evaluate_loss(model, batch, rho).total;
}

// ----------------------------------------------------------------------------
// Incremental inference

Transformer::Session::Session(const Transformer& model)
    : model_(&model), keys_(model.off_.layers.size()), values_(model.off_.layers.size()) {}

PositionOutput Transformer::Session::push(TokenId token) {
  std::vector<std::vector<double>> kv;
  auto out = model_->position(keys_, values_, length_, token, &kv);
  for (std::size_t l = 0; l < keys_.size(); ++l) {
    keys_[l].insert(keys_[l].end(), kv[2 * l].begin(), kv[2 * l].end());
    values_[l].insert(values_[l].end(), kv[2 * l + 1].begin(), kv[2 * l + 1].end());
  }
  ++length_;
  return out;
}

PositionOutput Transformer::Session::peek(TokenId token) const {
  return model_->position(keys_, values_, length_, token, nullptr);
}

PositionOutput Transformer::position(std::span<const std::vector<double>> keys,
                                     std::span<const std::vector<double>> values, std::size_t pos, TokenId token,
                                     std::vector<std::vector<double>>* new_kv) const {
  const auto D = static_cast<std::size_t>(config_.hidden_dim);
  const auto V = static_cast<std::size_t>(config_.vocab_size);
  const auto F = static_cast<std::size_t>(config_.ffn_dim());
  const auto H = static_cast<std::size_t>(config_.n_heads);
  if (pos >= static_cast<std::size_t>(config_.context_len)) {
    throw ContextOverflowError("position " + std::to_string(pos) + " exceeds context_len " +
                               std::to_string(config_.context_len));
  }
  if (token < 0 || static_cast<std::size_t>(token) >= V) throw ContractViolation("token id out of range");

  std::vector<double> x(D), a(D), q(D), k(D), v(D), o(D), proj(D), c(D), u(F);
  const double* te = at(off_.tok_emb) + static_cast<std::size_t>(token) * D;
  const double* pe = at(off_.pos_emb) + pos * D;
  for (std::size_t i = 0; i < D; ++i) x[i] = te[i] + pe[i];
  if (new_kv) new_kv->assign(2 * off_.layers.size(), {});

  std::vector<const double*> krows(pos + 1), vrows(pos + 1);
  for (std::size_t l = 0; l < off_.layers.size(); ++l) {
    const auto& lo = off_.layers[l];
    layer_norm_row(x.data(), at(lo.ln1_g), at(lo.ln1_b), a.data(), nullptr, nullptr, D);
    affine_row(a.data(), D, at(lo.wq), at(lo.bq), q.data(), D);
    affine_row(a.data(), D, at(lo.wk), at(lo.bk), k.data(), D);
    affine_row(a.data(), D, at(lo.wv), at(lo.bv), v.data(), D);
    for (std::size_t j = 0; j < pos; ++j) {
      krows[j] = &keys[l][j * D];
      vrows[j] = &values[l][j * D];
    }
    krows[pos] = k.data();
    vrows[pos] = v.data();
    attend(q.data(), krows.data(), vrows.data(), pos + 1, H, D / H, o.data(), nullptr);
    affine_row(o.data(), D, at(lo.wo), at(lo.bo), proj.data(), D);
    for (std::size_t i = 0; i < D; ++i) x[i] += proj[i];
    layer_norm_row(x.data(), at(lo.ln2_g), at(lo.ln2_b), c.data(), nullptr, nullptr, D);
    affine_row(c.data(), D, at(lo.w1), at(lo.b1), u.data(), F);
    for (double& e : u) e = gelu(e);
    affine_row(u.data(), F, at(lo.w2), at(lo.b2), proj.data(), D);
    for (std::size_t i = 0; i < D; ++i) x[i] += proj[i];
    if (new_kv) {
      (*new_kv)[2 * l] = k;
      (*new_kv)[2 * l + 1] = v;
    }
  }
  PositionOutput out;
  out.hidden.resize(D);
  out.logits.resize(V);
  layer_norm_row(x.data(), at(off_.lnf_g), at(off_.lnf_b), out.hidden.data(), nullptr, nullptr, D);
  affine_row(out.hidden.data(), D, at(off_.head_w), at(off_.head_b), out.logits.data(), V);
  return out;
}

// ----------------------------------------------------------------------------
// Checkpoints

namespace {

nlohmann::ordered_json config_to_json(const LmConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["hidden_dim"] = c.hidden_dim;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["context_len"] = c.context_len;
  j["rho"] = c.rho;
  j["learning_rate"] = c.learning_rate;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  return j;
}

LmConfig config_from_json(const nlohmann::ordered_json& j) {
  LmConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.context_len = j.at("context_len").get<int>();
  c.rho = j.at("rho").get<double>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const ParameterLayout layout(ckpt.config);
  if (layout.total() != ckpt.parameters.size()) throw ContractViolation("checkpoint parameters do not match layout");
  nlohmann::ordered_json header;
  header["format_version"] = ckpt.format_version;
  header["config"] = config_to_json(ckpt.config);
  header["specials"] = {{"sos", ckpt.specials.sos}, {"eos", ckpt.specials.eos}, {"pad", ckpt.specials.pad}};
  header["vocabulary"] = ckpt.vocabulary;
  auto manifest = nlohmann::ordered_json::array();
  for (const auto& g : layout.groups()) {
    manifest.push_back({{"name", g.name}, {"shape", g.shape}, {"offset", g.offset}});
  }
  header["manifest"] = manifest;
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, 8);
  write_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  write_u64(out, ckpt.parameters.size());
  out.reserve(out.size() + 4 * ckpt.parameters.size());
  for (float f : ckpt.parameters) write_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 8, kCheckpointMagic) != 0) throw Error("not a MAGICLM1 checkpoint");
  const auto json_len = static_cast<std::size_t>(read_le(bytes, 8, 4));
  if (12 + json_len > bytes.size()) throw Error("checkpoint truncated");
  const auto header = nlohmann::ordered_json::parse(bytes.substr(12, json_len));
  Checkpoint ckpt;
  ckpt.format_version = header.at("format_version").get<int>();
  if (ckpt.format_version != Checkpoint::kFormatVersion) {
    throw Error("unsupported checkpoint format version " + std::to_string(ckpt.format_version));
  }
  ckpt.config = config_from_json(header.at("config"));
  const auto& sp = header.at("specials");
  ckpt.specials = SpecialTokens{sp.at("sos").get<TokenId>(), sp.at("eos").get<TokenId>(), sp.at("pad").get<TokenId>()};
  ckpt.vocabulary = header.at("vocabulary").get<std::vector<std::string>>();

  const ParameterLayout layout(ckpt.config);
  const auto& manifest = header.at("manifest");
  if (manifest.size() != layout.groups().size()) throw Error("checkpoint manifest does not match config");
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& g = layout.groups()[i];
    if (manifest[i].at("name").get<std::string>() != g.name ||
        manifest[i].at("offset").get<std::size_t>() != g.offset ||
        manifest[i].at("shape").get<std::vector<std::size_t>>() != g.shape) {
      throw Error("checkpoint manifest entry " + std::to_string(i) + " does not match config");
    }
  }
  std::size_t pos = 12 + json_len;
  const auto count = static_cast<std::size_t>(read_le(bytes, pos, 8));
  pos += 8;
  if (count != layout.total()) throw Error("checkpoint parameter count does not match manifest");
  if (bytes.size() != pos + 4 * count) throw Error("checkpoint payload size mismatch");
  ckpt.parameters.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    ckpt.parameters[i] = std::bit_cast<float>(static_cast<std::uint32_t>(read_le(bytes, pos + 4 * i, 4)));
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint: " + path);
  const auto bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open checkpoint: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

// ----------------------------------------------------------------------------
// Training

TrainResult train(std::span<const Sequence> corpus, const LmConfig& config, const Vocabulary& vocab,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  if (corpus.empty()) throw Error("train: empty corpus");
  config.validate();
  if (static_cast<std::size_t>(config.vocab_size) != vocab.size()) {
    throw ContractViolation("config vocab_size does not match the vocabulary");
  }
  for (const auto& seq : corpus) {
    if (seq.size() < 2 || seq.size() - 1 > static_cast<std::size_t>(config.context_len)) {
      throw ContractViolation("training sequence length outside [2, context_len + 1]");
    }
  }

  Transformer model = Transformer::initialize(config);
  auto& params = model.mutable_params();
  std::vector<double> m(params.size(), 0.0), v(params.size(), 0.0), grad;
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::uint64_t step = 0;

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(config.seed ^ 0x9E3779B97F4A7C15ull);

  TrainResult result;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng() % i)]);
    }
    EpochLog log{epoch, 0.0, 0.0, 0.0};
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<Sequence> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(corpus[order[i]]);
      const auto l = model.loss(batch, config.rho, &grad);
      const double w = static_cast<double>(batch.size());
      log.total += l.total * w;
      log.mle += l.mle * w;
      log.cl += l.cl * w;
      seen += batch.size();

      ++step;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
      for (std::size_t i = 0; i < params.size(); ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        params[i] -= config.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
    log.total /= static_cast<double>(seen);
    log.mle /= static_cast<double>(seen);
    log.cl /= static_cast<double>(seen);
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }

  auto& ckpt = result.checkpoint;
  ckpt.config = config;
  ckpt.specials = vocab.specials();
  for (const auto& t : vocab.tokens()) ckpt.vocabulary.push_back(t.surface);
  ckpt.parameters.assign(params.begin(), params.end());
  return result;
}

double perplexity(const Transformer& model, std::span<const Sequence> sequences) {
  const auto V = static_cast<std::size_t>(model.config().vocab_size);
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& seq : sequences) {
    const std::span<const TokenId> inputs(seq.data(), seq.size() - 1);
    const auto out = model.forward_sequence(inputs);
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      nll -= log_softmax_at(std::span<const double>(&out.logits[t * V], V), static_cast<std::size_t>(seq[t + 1]));
      ++count;
    }
  }
  return std::exp(nll / static_cast<double>(count));
}

double unigram_perplexity(std::span<const Sequence> train_set, std::span<const Sequence> eval_set,
                          std::size_t vocab) {
  std::vector<double> counts(vocab, 1.0);
  double total = static_cast<double>(vocab);
  for (const auto& seq : train_set) {
    for (std::size_t t = 1; t < seq.size(); ++t) {
      counts[static_cast<std::size_t>(seq[t])] += 1.0;
      total += 1.0;
    }
  }
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& seq : eval_set) {
    for (std::size_t t = 1; t < seq.size(); ++t) {
      nll -= std::log(counts[static_cast<std::size_t>(seq[t])] / total);
      ++n;
    }
  }
  return std::exp(nll / static_cast<double>(n));
}

// ----------------------------------------------------------------------------

namespace {
Transformer model_from_checkpoint(const Checkpoint& ckpt) {
  return Transformer(ckpt.config, std::vector<double>(ckpt.parameters.begin(), ckpt.parameters.end()));
}
}  // namespace

NeuralLm::NeuralLm(const Checkpoint& ckpt)
    : model_(model_from_checkpoint(ckpt)), vocab_(ckpt.vocabulary, ckpt.specials) {
  if (vocab_.size() != static_cast<std::size_t>(ckpt.config.vocab_size)) {
    throw ContractViolation("checkpoint vocabulary does not match vocab_size");
  }
}

ForwardResult NeuralLm::forward(std::span<const TokenId> prefix) const {
  if (prefix.empty()) throw ContractViolation("forward: empty prefix");
  if (prefix.size() > context_limit()) {
    throw ContextOverflowError("prefix of length " + std::to_string(prefix.size()) + " exceeds context_len " +
                               std::to_string(context_limit()));
  }
  Transformer::Session session(model_);
  ForwardResult result;
  PositionOutput last;
  for (TokenId id : prefix) {
    last = session.push(id);
    result.reps.emplace_back(last.hidden);
  }
  softmax_inplace(last.logits);
  result.probs = std::move(last.logits);
  return result;
}

std::vector<double> NeuralLm::next_token_probs(std::span<const TokenId> prefix) const {
  return forward(prefix).probs;
}

CandidateSet NeuralLm::propose(const GenerationState& state, int k) const {
  if (k < 1) throw ContractViolation("propose: k must be >= 1");
  const auto prefix = state.prefix();
  if (prefix.empty()) throw ContractViolation("propose: empty prefix");
  if (prefix.size() + 1 > context_limit()) {
    throw ContextOverflowError("no room for a candidate after a prefix of length " + std::to_string(prefix.size()));
  }
  Transformer::Session session(model_);
  PositionOutput last;
  for (TokenId id : prefix) last = session.push(id);
  softmax_inplace(last.logits);
  const auto& probs = last.logits;

  const bool clamped = static_cast<std::size_t>(k) > probs.size();
  std::vector<Candidate> cands;
  for (TokenId id : top_k_ids(probs, static_cast<std::size_t>(k))) {
    auto out = session.peek(id);
    cands.push_back(Candidate{vocab_.token(id), probs[static_cast<std::size_t>(id)], Embedding(std::move(out.hidden))});
  }
  CandidateSet set(std::move(cands), k);
  set.mark_clamped(clamped);
  return set;
}

std::size_t NeuralLm::context_limit() const { return static_cast<std::size_t>(model_.config().context_len); }

}  // namespace magic::lm
