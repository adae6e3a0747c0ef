#include "itc/wm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <set>
#include <sstream>
#include <tuple>

#include "itc/errors.hpp"

namespace itc::wm {

namespace {

constexpr double kLnEps = 1e-5;  // layer-norm variance floor

int spatial_pair_count(int pairs) {
  // 3:1 spatial:temporal split over rotation pairs, spatial count even.
  return 2 * ((3 * pairs) / 8);
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
  const double kInvSqrt2Pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) +
         x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

double gaussian(SplitMixRng& rng) {
  // Box-Muller; u1 in (0,1] keeps the log finite.
  double u1 = 1.0 - rng.next_double();
  double u2 = rng.next_double();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

// Y (n x out) = X (n x in) * W (in x out) + b.
void linear_fwd(const double* X, int n, int in, const double* W, const double* b,
                int out, double* Y) {
  for (int i = 0; i < n; ++i) {
    double* y = Y + static_cast<size_t>(i) * out;
    if (b != nullptr) {
      std::memcpy(y, b, sizeof(double) * out);
    } else {
      std::fill(y, y + out, 0.0);
    }
    const double* x = X + static_cast<size_t>(i) * in;
    for (int k = 0; k < in; ++k) {
      const double xv = x[k];
      if (xv == 0.0) continue;
      const double* w = W + static_cast<size_t>(k) * out;
      for (int j = 0; j < out; ++j) y[j] += xv * w[j];
    }
  }
}

// dX (n x in) = dY (n x out) * W^T, overwriting dX.
void linear_bwd_data(const double* dY, int n, int out, const double* W, int in,
                     double* dX) {
  for (int i = 0; i < n; ++i) {
    const double* dy = dY + static_cast<size_t>(i) * out;
    double* dx = dX + static_cast<size_t>(i) * in;
    for (int k = 0; k < in; ++k) {
      const double* w = W + static_cast<size_t>(k) * out;
      double s = 0.0;
      for (int j = 0; j < out; ++j) s += dy[j] * w[j];
      dx[k] = s;
    }
  }
}

// dW += X^T dY, db += column sums of dY.
void linear_bwd_param(const double* X, const double* dY, int n, int in, int out,
                      double* dW, double* db) {
  for (int i = 0; i < n; ++i) {
    const double* x = X + static_cast<size_t>(i) * in;
    const double* dy = dY + static_cast<size_t>(i) * out;
    for (int k = 0; k < in; ++k) {
      const double xv = x[k];
      if (xv == 0.0) continue;
      double* dw = dW + static_cast<size_t>(k) * out;
      for (int j = 0; j < out; ++j) dw[j] += xv * dy[j];
    }
    if (db != nullptr) {
      for (int j = 0; j < out; ++j) db[j] += dy[j];
    }
  }
}

void layer_norm_fwd(const double* X, int n, int d, const double* g,
                    const double* b, double* Y, double* mean, double* rstd) {
  for (int i = 0; i < n; ++i) {
    const double* x = X + static_cast<size_t>(i) * d;
    double m = 0.0;
    for (int k = 0; k < d; ++k) m += x[k];
    m /= d;
    double var = 0.0;
    for (int k = 0; k < d; ++k) {
      const double c = x[k] - m;
      var += c * c;
    }
    var /= d;
    const double r = 1.0 / std::sqrt(var + kLnEps);
    mean[i] = m;
    rstd[i] = r;
    double* y = Y + static_cast<size_t>(i) * d;
    for (int k = 0; k < d; ++k) y[k] = g[k] * ((x[k] - m) * r) + b[k];
  }
}

// dX overwritten; dg/db accumulated.
void layer_norm_bwd(const double* X, const double* dY, int n, int d,
                    const double* g, const double* mean, const double* rstd,
                    double* dX, double* dg, double* db) {
  for (int i = 0; i < n; ++i) {
    const double* x = X + static_cast<size_t>(i) * d;
    const double* dy = dY + static_cast<size_t>(i) * d;
    double* dx = dX + static_cast<size_t>(i) * d;
    const double m = mean[i];
    const double r = rstd[i];
    double s1 = 0.0, s2 = 0.0;
    for (int k = 0; k < d; ++k) {
      const double xhat = (x[k] - m) * r;
      const double dxhat = dy[k] * g[k];
      s1 += dxhat;
      s2 += dxhat * xhat;
      dg[k] += dy[k] * xhat;
      db[k] += dy[k];
    }
    s1 /= d;
    s2 /= d;
    for (int k = 0; k < d; ++k) {
      const double xhat = (x[k] - m) * r;
      const double dxhat = dy[k] * g[k];
      dx[k] = r * (dxhat - s1 - xhat * s2);
    }
  }
}

// log(sum(exp(z))) with max subtraction.
double logsumexp_row(const double* z, int k) {
  double mx = z[0];
  for (int j = 1; j < k; ++j) mx = std::max(mx, z[j]);
  double s = 0.0;
  for (int j = 0; j < k; ++j) s += std::exp(z[j] - mx);
  return mx + std::log(s);
}

void softmax_row(const double* z, int k, double* p) {
  double mx = z[0];
  for (int j = 1; j < k; ++j) mx = std::max(mx, z[j]);
  double s = 0.0;
  for (int j = 0; j < k; ++j) {
    p[j] = std::exp(z[j] - mx);
    s += p[j];
  }
  for (int j = 0; j < k; ++j) p[j] /= s;
}

struct BlockActs {
  Matrix ln1_out;
  std::vector<double> ln1_mean, ln1_rstd;
  Matrix q_rot, k_rot, v;       // N x d, heads concatenated
  std::vector<Matrix> probs;    // per head, N x N (rows padded with zeros)
  Matrix ctx;                   // N x d
  std::vector<uint8_t> attn_keep, mlp_keep;
  Matrix x_mid;                 // after attention residual
  Matrix ln2_out;
  std::vector<double> ln2_mean, ln2_rstd;
  Matrix mlp_pre;               // N x mlp_dim
};

struct Acts {
  std::vector<uint8_t> embed_keep;
  std::vector<Matrix> x;  // inputs to each block, plus final block output
  std::vector<BlockActs> blk;
  Matrix lnf_out;
  std::vector<double> lnf_mean, lnf_rstd;
  Matrix obs_hidden;              // (T*L) x d, pre-ReLU
  Matrix rew_hidden, done_hidden; // T x d, pre-ReLU
  std::vector<Coord3> coords;
};

std::vector<uint8_t> draw_keep_mask(SplitMixRng& rng, size_t n, double rate) {
  std::vector<uint8_t> keep(n, 1);
  for (size_t i = 0; i < n; ++i) keep[i] = rng.next_double() >= rate ? 1 : 0;
  return keep;
}

void apply_dropout(double* x, const std::vector<uint8_t>& keep, double rate) {
  const double scale = 1.0 / (1.0 - rate);
  for (size_t i = 0; i < keep.size(); ++i) x[i] = keep[i] ? x[i] * scale : 0.0;
}

void validate_tokens(const WmConfig& cfg, const std::vector<int>& frames,
                     const std::vector<int>& actions) {
  const int L = cfg.tokens_per_frame();
  if (actions.empty()) throw ConfigError("forward: empty sequence");
  if (frames.size() != static_cast<size_t>(actions.size()) * L) {
    throw ConfigError("forward: frames/actions length mismatch");
  }
  if (static_cast<int>(actions.size()) > cfg.seq_len) {
    throw ConfigError("forward: sequence longer than seq_len");
  }
  for (int tok : frames) {
    if (tok < 0 || tok >= cfg.codebook_size) throw ConfigError("forward: token out of range");
  }
  for (int a : actions) {
    if (a < 0 || a >= cfg.num_actions) throw ConfigError("forward: action out of range");
  }
}

}  // namespace

void WmConfig::validate() const {
  if (num_blocks < 1 || num_heads < 1 || embed_dim < 1 || mlp_dim < 1) {
    throw ConfigError("WmConfig: sizes must be positive");
  }
  if (embed_dim % (2 * num_heads) != 0) {
    throw ConfigError("WmConfig: embed_dim must be divisible by 2*num_heads");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ConfigError("WmConfig: dropout_rate must be in [0, 1)");
  }
  if (seq_len < 1) throw ConfigError("WmConfig: seq_len must be positive");
  if (grid_height < 1 || grid_width < 1) throw ConfigError("WmConfig: grid dims must be positive");
  if (codebook_size < 1) throw ConfigError("WmConfig: codebook_size must be positive");
  if (num_actions < 1) throw ConfigError("WmConfig: num_actions must be positive");
  if (!(learning_rate > 0.0) || !(grad_clip_norm > 0.0) || !(rope_base > 0.0)) {
    throw ConfigError("WmConfig: rates must be positive");
  }
}

std::vector<Coord3> sequence_coords(int T, GridGeometry g) {
  if (T < 1) throw ConfigError("sequence_coords: T must be positive");
  const int L = g.size();
  std::vector<Coord3> coords;
  coords.reserve(static_cast<size_t>(T) * (L + 1));
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < L; ++i) {
      GridCoord c = g.coord_of(i);
      coords.push_back({c.x + t, c.y + t, 2 * t});
    }
    coords.push_back({t, t, 2 * t + 1});
  }
  std::set<std::tuple<int, int, int>> seen;
  for (const Coord3& c : coords) {
    if (!seen.insert({c.x, c.y, c.t}).second) {
      throw ConfigError("sequence_coords: duplicate coordinate triple");
    }
  }
  return coords;
}

std::vector<double> rope_angles(int dim, Coord3 c, double base) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("rope_angles: dimension must be even");
  const int pairs = dim / 2;
  const int spatial = spatial_pair_count(pairs);
  std::vector<double> angles(pairs);
  for (int p = 0; p < pairs; ++p) {
    const double theta = std::pow(base, -static_cast<double>(p) / pairs);
    int coord;
    if (p < spatial) {
      coord = (p % 2 == 0) ? c.x : c.y;
    } else {
      coord = c.t;
    }
    angles[p] = theta * coord;
  }
  return angles;
}

void rotate_pairs(double* vec, int dim, const double* angles) {
  for (int p = 0; p * 2 < dim; ++p) {
    const double cs = std::cos(angles[p]);
    const double sn = std::sin(angles[p]);
    const double a = vec[2 * p];
    const double b = vec[2 * p + 1];
    vec[2 * p] = a * cs - b * sn;
    vec[2 * p + 1] = a * sn + b * cs;
  }
}

void rope3d_rotate(double* vec, int dim, Coord3 c, double base) {
  std::vector<double> angles = rope_angles(dim, c, base);
  rotate_pairs(vec, dim, angles.data());
}

Matrix block_causal_mask(int T, int L) {
  if (T < 1 || L < 1) throw ConfigError("block_causal_mask: T and L must be positive");
  const int n = T * (L + 1);
  Matrix mask(n, n, 0.0);
  for (int i = 0; i < n; ++i) {
    const int end = (i / (L + 1) + 1) * (L + 1);
    for (int j = 0; j < end; ++j) mask.at(i, j) = 1.0;
  }
  return mask;
}

const TensorSpec& Model::spec(const std::string& name) const {
  for (const TensorSpec& s : specs) {
    if (s.name == name) return s;
  }
  throw ConfigError("unknown tensor: " + name);
}

double* Model::tensor(const std::string& name) { return params.data() + spec(name).offset; }

const double* Model::tensor(const std::string& name) const {
  return params.data() + spec(name).offset;
}

namespace {

std::vector<TensorSpec> build_layout(const WmConfig& cfg) {
  std::vector<TensorSpec> specs;
  size_t offset = 0;
  auto add = [&](const std::string& name, int rows, int cols) {
    specs.push_back({name, rows, cols, offset});
    offset += static_cast<size_t>(rows) * cols;
  };
  const int d = cfg.embed_dim;
  add("tok_embed", cfg.codebook_size, d);
  add("act_embed", cfg.num_actions, d);
  add("pos_embed", cfg.max_positions(), d);
  for (int b = 0; b < cfg.num_blocks; ++b) {
    const std::string p = "b" + std::to_string(b) + ".";
    add(p + "ln1.g", 1, d);
    add(p + "ln1.b", 1, d);
    add(p + "attn.wqkv", d, 3 * d);
    add(p + "attn.bqkv", 1, 3 * d);
    add(p + "attn.wo", d, d);
    add(p + "attn.bo", 1, d);
    add(p + "ln2.g", 1, d);
    add(p + "ln2.b", 1, d);
    add(p + "mlp.w1", d, cfg.mlp_dim);
    add(p + "mlp.b1", 1, cfg.mlp_dim);
    add(p + "mlp.w2", cfg.mlp_dim, d);
    add(p + "mlp.b2", 1, d);
  }
  add("lnf.g", 1, d);
  add("lnf.b", 1, d);
  add("obs.w1", d, d);
  add("obs.b1", 1, d);
  add("obs.w2", d, cfg.codebook_size);
  add("obs.b2", 1, cfg.codebook_size);
  add("rew.w1", d, d);
  add("rew.b1", 1, d);
  add("rew.w2", d, 2);
  add("rew.b2", 1, 2);
  add("done.w1", d, d);
  add("done.b1", 1, d);
  add("done.w2", d, 2);
  add("done.b2", 1, 2);
  return specs;
}

bool is_gain(const std::string& name) {
  return name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0 &&
         name.find("ln") != std::string::npos;
}

bool is_bias(const std::string& name) {
  const size_t dot = name.rfind('.');
  if (dot == std::string::npos) return false;
  const std::string tail = name.substr(dot);
  return tail == ".b" || tail == ".bqkv" || tail == ".bo" || tail == ".b1" || tail == ".b2";
}

bool is_zero_init_head(const std::string& name) {
  return name == "obs.w2" || name == "rew.w2" || name == "done.w2";
}

}  // namespace

Model init_model(const WmConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model model;
  model.cfg = cfg;
  model.specs = build_layout(cfg);
  const TensorSpec& last = model.specs.back();
  model.params.assign(last.offset + last.size(), 0.0);
  SplitMixRng rng(seed, 0x77770001u);
  for (const TensorSpec& s : model.specs) {
    double* p = model.params.data() + s.offset;
    if (is_gain(s.name)) {
      std::fill(p, p + s.size(), 1.0);
    } else if (is_bias(s.name) || is_zero_init_head(s.name)) {
      // zeros; final head layers stay zero so fresh heads are uniform
    } else {
      for (size_t i = 0; i < s.size(); ++i) p[i] = 0.02 * gaussian(rng);
    }
  }
  return model;
}

namespace {

// Shared forward pass. Fills `acts` and returns the head outputs. When
// `rate` > 0, draws inverted-dropout masks from `drop_rng`.
ForwardOutput forward_window(const Model& model, const std::vector<int>& frames,
                             const std::vector<int>& actions, Acts& acts,
                             double rate, SplitMixRng* drop_rng) {
  const WmConfig& cfg = model.cfg;
  validate_tokens(cfg, frames, actions);
  const int T = static_cast<int>(actions.size());
  const int L = cfg.tokens_per_frame();
  const int d = cfg.embed_dim;
  const int m = cfg.mlp_dim;
  const int h = cfg.num_heads;
  const int hd = cfg.head_dim();
  const int block = L + 1;
  const int N = T * block;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const GridGeometry geom{cfg.grid_height, cfg.grid_width};

  acts.coords = sequence_coords(T, geom);
  acts.x.assign(cfg.num_blocks + 1, Matrix());
  acts.blk.assign(cfg.num_blocks, BlockActs());

  // Token + position embeddings.
  Matrix x(N, d, 0.0);
  const double* tok_embed = model.tensor("tok_embed");
  const double* act_embed = model.tensor("act_embed");
  const double* pos_embed = model.tensor("pos_embed");
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < L; ++i) {
      const int pos = t * block + i;
      const double* e = tok_embed + static_cast<size_t>(frames[t * L + i]) * d;
      const double* pe = pos_embed + static_cast<size_t>(pos) * d;
      double* row = x.row(pos);
      for (int k = 0; k < d; ++k) row[k] = e[k] + pe[k];
    }
    const int pos = t * block + L;
    const double* e = act_embed + static_cast<size_t>(actions[t]) * d;
    const double* pe = pos_embed + static_cast<size_t>(pos) * d;
    double* row = x.row(pos);
    for (int k = 0; k < d; ++k) row[k] = e[k] + pe[k];
  }
  if (rate > 0.0) {
    acts.embed_keep = draw_keep_mask(*drop_rng, x.data.size(), rate);
    apply_dropout(x.data.data(), acts.embed_keep, rate);
  }
  acts.x[0] = x;

  // Precompute per-position rotation angles (shared across heads).
  const int pairs = hd / 2;
  std::vector<double> angles(static_cast<size_t>(N) * pairs);
  for (int pos = 0; pos < N; ++pos) {
    std::vector<double> a = rope_angles(hd, acts.coords[pos], cfg.rope_base);
    std::copy(a.begin(), a.end(), angles.begin() + static_cast<size_t>(pos) * pairs);
  }

  for (int b = 0; b < cfg.num_blocks; ++b) {
    BlockActs& ba = acts.blk[b];
    const std::string p = "b" + std::to_string(b) + ".";
    const Matrix& xin = acts.x[b];

    ba.ln1_out = Matrix(N, d, 0.0);
    ba.ln1_mean.resize(N);
    ba.ln1_rstd.resize(N);
    layer_norm_fwd(xin.data.data(), N, d, model.tensor(p + "ln1.g"),
                   model.tensor(p + "ln1.b"), ba.ln1_out.data.data(),
                   ba.ln1_mean.data(), ba.ln1_rstd.data());

    Matrix qkv(N, 3 * d, 0.0);
    linear_fwd(ba.ln1_out.data.data(), N, d, model.tensor(p + "attn.wqkv"),
               model.tensor(p + "attn.bqkv"), 3 * d, qkv.data.data());

    ba.q_rot = Matrix(N, d, 0.0);
    ba.k_rot = Matrix(N, d, 0.0);
    ba.v = Matrix(N, d, 0.0);
    for (int pos = 0; pos < N; ++pos) {
      const double* src = qkv.row(pos);
      double* q = ba.q_rot.row(pos);
      double* k = ba.k_rot.row(pos);
      double* v = ba.v.row(pos);
      std::memcpy(q, src, sizeof(double) * d);
      std::memcpy(k, src + d, sizeof(double) * d);
      std::memcpy(v, src + 2 * d, sizeof(double) * d);
      const double* a = angles.data() + static_cast<size_t>(pos) * pairs;
      for (int head = 0; head < h; ++head) {
        rotate_pairs(q + head * hd, hd, a);
        rotate_pairs(k + head * hd, hd, a);
      }
    }

    ba.probs.assign(h, Matrix(N, N, 0.0));
    ba.ctx = Matrix(N, d, 0.0);
    std::vector<double> srow(N);
    for (int head = 0; head < h; ++head) {
      Matrix& P = ba.probs[head];
      const int off = head * hd;
      for (int i = 0; i < N; ++i) {
        const int end = (i / block + 1) * block;
        const double* qi = ba.q_rot.row(i) + off;
        for (int j = 0; j < end; ++j) {
          const double* kj = ba.k_rot.row(j) + off;
          double s = 0.0;
          for (int k = 0; k < hd; ++k) s += qi[k] * kj[k];
          srow[j] = s * scale;
        }
        softmax_row(srow.data(), end, P.row(i));
        double* ci = ba.ctx.row(i) + off;
        for (int j = 0; j < end; ++j) {
          const double pij = P.at(i, j);
          if (pij == 0.0) continue;
          const double* vj = ba.v.row(j) + off;
          for (int k = 0; k < hd; ++k) ci[k] += pij * vj[k];
        }
      }
    }

    Matrix attn_out(N, d, 0.0);
    linear_fwd(ba.ctx.data.data(), N, d, model.tensor(p + "attn.wo"),
               model.tensor(p + "attn.bo"), d, attn_out.data.data());
    if (rate > 0.0) {
      ba.attn_keep = draw_keep_mask(*drop_rng, attn_out.data.size(), rate);
      apply_dropout(attn_out.data.data(), ba.attn_keep, rate);
    }

    ba.x_mid = xin;
    for (size_t i = 0; i < ba.x_mid.data.size(); ++i) ba.x_mid.data[i] += attn_out.data[i];

    ba.ln2_out = Matrix(N, d, 0.0);
    ba.ln2_mean.resize(N);
    ba.ln2_rstd.resize(N);
    layer_norm_fwd(ba.x_mid.data.data(), N, d, model.tensor(p + "ln2.g"),
                   model.tensor(p + "ln2.b"), ba.ln2_out.data.data(),
                   ba.ln2_mean.data(), ba.ln2_rstd.data());

    ba.mlp_pre = Matrix(N, m, 0.0);
    linear_fwd(ba.ln2_out.data.data(), N, d, model.tensor(p + "mlp.w1"),
               model.tensor(p + "mlp.b1"), m, ba.mlp_pre.data.data());
    Matrix hidden(N, m, 0.0);
    for (size_t i = 0; i < hidden.data.size(); ++i) hidden.data[i] = gelu(ba.mlp_pre.data[i]);
    if (rate > 0.0) {
      ba.mlp_keep = draw_keep_mask(*drop_rng, hidden.data.size(), rate);
      apply_dropout(hidden.data.data(), ba.mlp_keep, rate);
    }
    Matrix mlp_out(N, d, 0.0);
    linear_fwd(hidden.data.data(), N, m, model.tensor(p + "mlp.w2"),
               model.tensor(p + "mlp.b2"), d, mlp_out.data.data());

    Matrix xout = ba.x_mid;
    for (size_t i = 0; i < xout.data.size(); ++i) xout.data[i] += mlp_out.data[i];
    acts.x[b + 1] = std::move(xout);
  }

  acts.lnf_out = Matrix(N, d, 0.0);
  acts.lnf_mean.resize(N);
  acts.lnf_rstd.resize(N);
  layer_norm_fwd(acts.x[cfg.num_blocks].data.data(), N, d, model.tensor("lnf.g"),
                 model.tensor("lnf.b"), acts.lnf_out.data.data(),
                 acts.lnf_mean.data(), acts.lnf_rstd.data());

  // Heads. Observation head over state positions; reward/done at action
  // positions.
  ForwardOutput out;
  out.obs_logits = Matrix(T * L, cfg.codebook_size, 0.0);
  out.reward_logits = Matrix(T, 2, 0.0);
  out.done_logits = Matrix(T, 2, 0.0);

  Matrix state_emb(T * L, d, 0.0);
  Matrix action_emb(T, d, 0.0);
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < L; ++i) {
      std::memcpy(state_emb.row(t * L + i), acts.lnf_out.row(t * block + i),
                  sizeof(double) * d);
    }
    std::memcpy(action_emb.row(t), acts.lnf_out.row(t * block + L), sizeof(double) * d);
  }

  acts.obs_hidden = Matrix(T * L, d, 0.0);
  linear_fwd(state_emb.data.data(), T * L, d, model.tensor("obs.w1"),
             model.tensor("obs.b1"), d, acts.obs_hidden.data.data());
  Matrix obs_act(T * L, d, 0.0);
  for (size_t i = 0; i < obs_act.data.size(); ++i) {
    obs_act.data[i] = std::max(0.0, acts.obs_hidden.data[i]);
  }
  linear_fwd(obs_act.data.data(), T * L, d, model.tensor("obs.w2"),
             model.tensor("obs.b2"), cfg.codebook_size, out.obs_logits.data.data());

  acts.rew_hidden = Matrix(T, d, 0.0);
  linear_fwd(action_emb.data.data(), T, d, model.tensor("rew.w1"),
             model.tensor("rew.b1"), d, acts.rew_hidden.data.data());
  Matrix rew_act(T, d, 0.0);
  for (size_t i = 0; i < rew_act.data.size(); ++i) {
    rew_act.data[i] = std::max(0.0, acts.rew_hidden.data[i]);
  }
  linear_fwd(rew_act.data.data(), T, d, model.tensor("rew.w2"),
             model.tensor("rew.b2"), 2, out.reward_logits.data.data());

  acts.done_hidden = Matrix(T, d, 0.0);
  linear_fwd(action_emb.data.data(), T, d, model.tensor("done.w1"),
             model.tensor("done.b1"), d, acts.done_hidden.data.data());
  Matrix done_act(T, d, 0.0);
  for (size_t i = 0; i < done_act.data.size(); ++i) {
    done_act.data[i] = std::max(0.0, acts.done_hidden.data[i]);
  }
  linear_fwd(done_act.data.data(), T, d, model.tensor("done.w2"),
             model.tensor("done.b2"), 2, out.done_logits.data.data());
  return out;
}

// Backward through one window given per-output logit gradients. Accumulates
// into `grad` (same layout as params).
void backward_window(const Model& model, const Acts& acts,
                     const std::vector<int>& frames, const std::vector<int>& actions,
                     const Matrix& d_obs, const Matrix& d_rew, const Matrix& d_done,
                     double rate, std::vector<double>& grad) {
  const WmConfig& cfg = model.cfg;
  const int L = cfg.tokens_per_frame();
  const int d = cfg.embed_dim;
  const int m = cfg.mlp_dim;
  const int h = cfg.num_heads;
  const int hd = cfg.head_dim();
  const int block = L + 1;
  const int T = d_rew.rows;
  const int N = T * block;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const int pairs = hd / 2;

  auto g = [&](const std::string& name) { return grad.data() + model.spec(name).offset; };

  // Head backward, producing the gradient at the final layer-norm output.
  Matrix d_lnf(N, d, 0.0);

  Matrix state_emb(T * L, d, 0.0);
  Matrix action_emb(T, d, 0.0);
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < L; ++i) {
      std::memcpy(state_emb.row(t * L + i), acts.lnf_out.row(t * block + i),
                  sizeof(double) * d);
    }
    std::memcpy(action_emb.row(t), acts.lnf_out.row(t * block + L), sizeof(double) * d);
  }

  {  // observation head
    Matrix obs_act(T * L, d, 0.0);
    for (size_t i = 0; i < obs_act.data.size(); ++i) {
      obs_act.data[i] = std::max(0.0, acts.obs_hidden.data[i]);
    }
    linear_bwd_param(obs_act.data.data(), d_obs.data.data(), T * L, d,
                     cfg.codebook_size, g("obs.w2"), g("obs.b2"));
    Matrix d_hidden(T * L, d, 0.0);
    linear_bwd_data(d_obs.data.data(), T * L, cfg.codebook_size,
                    model.tensor("obs.w2"), d, d_hidden.data.data());
    for (size_t i = 0; i < d_hidden.data.size(); ++i) {
      if (acts.obs_hidden.data[i] <= 0.0) d_hidden.data[i] = 0.0;
    }
    linear_bwd_param(state_emb.data.data(), d_hidden.data.data(), T * L, d, d,
                     g("obs.w1"), g("obs.b1"));
    Matrix d_state(T * L, d, 0.0);
    linear_bwd_data(d_hidden.data.data(), T * L, d, model.tensor("obs.w1"), d,
                    d_state.data.data());
    for (int t = 0; t < T; ++t) {
      for (int i = 0; i < L; ++i) {
        double* dst = d_lnf.row(t * block + i);
        const double* src = d_state.row(t * L + i);
        for (int k = 0; k < d; ++k) dst[k] += src[k];
      }
    }
  }

  auto scalar_head = [&](const std::string& name, const Matrix& hidden_pre,
                         const Matrix& d_out) {
    Matrix act(T, d, 0.0);
    for (size_t i = 0; i < act.data.size(); ++i) {
      act.data[i] = std::max(0.0, hidden_pre.data[i]);
    }
    linear_bwd_param(act.data.data(), d_out.data.data(), T, d, 2, g(name + ".w2"),
                     g(name + ".b2"));
    Matrix d_hidden(T, d, 0.0);
    linear_bwd_data(d_out.data.data(), T, 2, model.tensor(name + ".w2"), d,
                    d_hidden.data.data());
    for (size_t i = 0; i < d_hidden.data.size(); ++i) {
      if (hidden_pre.data[i] <= 0.0) d_hidden.data[i] = 0.0;
    }
    linear_bwd_param(action_emb.data.data(), d_hidden.data.data(), T, d, d,
                     g(name + ".w1"), g(name + ".b1"));
    Matrix d_action(T, d, 0.0);
    linear_bwd_data(d_hidden.data.data(), T, d, model.tensor(name + ".w1"), d,
                    d_action.data.data());
    for (int t = 0; t < T; ++t) {
      double* dst = d_lnf.row(t * block + L);
      const double* src = d_action.row(t);
      for (int k = 0; k < d; ++k) dst[k] += src[k];
    }
  };
  scalar_head("rew", acts.rew_hidden, d_rew);
  scalar_head("done", acts.done_hidden, d_done);

  Matrix dx(N, d, 0.0);
  layer_norm_bwd(acts.x[cfg.num_blocks].data.data(), d_lnf.data.data(), N, d,
                 model.tensor("lnf.g"), acts.lnf_mean.data(), acts.lnf_rstd.data(),
                 dx.data.data(), g("lnf.g"), g("lnf.b"));

  // Rotation angles, shared with the forward pass.
  std::vector<double> angles(static_cast<size_t>(N) * pairs);
  for (int pos = 0; pos < N; ++pos) {
    std::vector<double> a = rope_angles(hd, acts.coords[pos], cfg.rope_base);
    std::copy(a.begin(), a.end(), angles.begin() + static_cast<size_t>(pos) * pairs);
  }
  std::vector<double> neg(pairs);

  for (int b = cfg.num_blocks - 1; b >= 0; --b) {
    const BlockActs& ba = acts.blk[b];
    const std::string p = "b" + std::to_string(b) + ".";

    // MLP branch: dx is the gradient at the block output.
    Matrix hidden(N, m, 0.0);
    for (size_t i = 0; i < hidden.data.size(); ++i) hidden.data[i] = gelu(ba.mlp_pre.data[i]);
    if (rate > 0.0) apply_dropout(hidden.data.data(), ba.mlp_keep, rate);

    linear_bwd_param(hidden.data.data(), dx.data.data(), N, m, d, g(p + "mlp.w2"),
                     g(p + "mlp.b2"));
    Matrix d_hidden(N, m, 0.0);
    linear_bwd_data(dx.data.data(), N, d, model.tensor(p + "mlp.w2"), m,
                    d_hidden.data.data());
    if (rate > 0.0) apply_dropout(d_hidden.data.data(), ba.mlp_keep, rate);
    for (size_t i = 0; i < d_hidden.data.size(); ++i) {
      d_hidden.data[i] *= gelu_grad(ba.mlp_pre.data[i]);
    }
    linear_bwd_param(ba.ln2_out.data.data(), d_hidden.data.data(), N, d, m,
                     g(p + "mlp.w1"), g(p + "mlp.b1"));
    Matrix d_ln2(N, d, 0.0);
    linear_bwd_data(d_hidden.data.data(), N, m, model.tensor(p + "mlp.w1"), d,
                    d_ln2.data.data());

    Matrix d_mid(N, d, 0.0);
    layer_norm_bwd(ba.x_mid.data.data(), d_ln2.data.data(), N, d,
                   model.tensor(p + "ln2.g"), ba.ln2_mean.data(), ba.ln2_rstd.data(),
                   d_mid.data.data(), g(p + "ln2.g"), g(p + "ln2.b"));
    for (size_t i = 0; i < d_mid.data.size(); ++i) d_mid.data[i] += dx.data[i];

    // Attention branch: d_mid is the gradient at the attention residual sum.
    Matrix d_attn_out = d_mid;
    if (rate > 0.0) apply_dropout(d_attn_out.data.data(), ba.attn_keep, rate);
    linear_bwd_param(ba.ctx.data.data(), d_attn_out.data.data(), N, d, d,
                     g(p + "attn.wo"), g(p + "attn.bo"));
    Matrix d_ctx(N, d, 0.0);
    linear_bwd_data(d_attn_out.data.data(), N, d, model.tensor(p + "attn.wo"), d,
                    d_ctx.data.data());

    Matrix d_q(N, d, 0.0), d_k(N, d, 0.0), d_v(N, d, 0.0);
    std::vector<double> d_prow(N);
    for (int head = 0; head < h; ++head) {
      const Matrix& P = ba.probs[head];
      const int off = head * hd;
      for (int i = 0; i < N; ++i) {
        const int end = (i / block + 1) * block;
        const double* dci = d_ctx.row(i) + off;
        const double* pi = P.row(i);
        // dV and dP.
        double dot_dp_p = 0.0;
        for (int j = 0; j < end; ++j) {
          const double* vj = ba.v.row(j) + off;
          double s = 0.0;
          for (int k = 0; k < hd; ++k) s += dci[k] * vj[k];
          d_prow[j] = s;
          dot_dp_p += s * pi[j];
          if (pi[j] != 0.0) {
            double* dvj = d_v.row(j) + off;
            for (int k = 0; k < hd; ++k) dvj[k] += pi[j] * dci[k];
          }
        }
        // Softmax backward, then score gradient into dQ/dK.
        double* dqi = d_q.row(i) + off;
        const double* qi = ba.q_rot.row(i) + off;
        for (int j = 0; j < end; ++j) {
          const double ds = pi[j] * (d_prow[j] - dot_dp_p) * scale;
          if (ds == 0.0) continue;
          const double* kj = ba.k_rot.row(j) + off;
          double* dkj = d_k.row(j) + off;
          for (int k = 0; k < hd; ++k) {
            dqi[k] += ds * kj[k];
            dkj[k] += ds * qi[k];
          }
        }
      }
    }

    // Un-rotate the q/k gradients and pack the qkv gradient.
    Matrix d_qkv(N, 3 * d, 0.0);
    for (int pos = 0; pos < N; ++pos) {
      const double* a = angles.data() + static_cast<size_t>(pos) * pairs;
      for (int q = 0; q < pairs; ++q) neg[q] = -a[q];
      double* dq = d_q.row(pos);
      double* dk = d_k.row(pos);
      for (int head = 0; head < h; ++head) {
        rotate_pairs(dq + head * hd, hd, neg.data());
        rotate_pairs(dk + head * hd, hd, neg.data());
      }
      double* dst = d_qkv.row(pos);
      std::memcpy(dst, dq, sizeof(double) * d);
      std::memcpy(dst + d, dk, sizeof(double) * d);
      std::memcpy(dst + 2 * d, d_v.row(pos), sizeof(double) * d);
    }

    linear_bwd_param(ba.ln1_out.data.data(), d_qkv.data.data(), N, d, 3 * d,
                     g(p + "attn.wqkv"), g(p + "attn.bqkv"));
    Matrix d_ln1(N, d, 0.0);
    linear_bwd_data(d_qkv.data.data(), N, 3 * d, model.tensor(p + "attn.wqkv"), d,
                    d_ln1.data.data());

    Matrix d_xin(N, d, 0.0);
    layer_norm_bwd(acts.x[b].data.data(), d_ln1.data.data(), N, d,
                   model.tensor(p + "ln1.g"), ba.ln1_mean.data(), ba.ln1_rstd.data(),
                   d_xin.data.data(), g(p + "ln1.g"), g(p + "ln1.b"));
    for (size_t i = 0; i < d_xin.data.size(); ++i) d_xin.data[i] += d_mid.data[i];
    dx = std::move(d_xin);
  }

  if (rate > 0.0) apply_dropout(dx.data.data(), acts.embed_keep, rate);

  // Embedding scatter. Token index layout matches forward_window.
  double* g_tok = g("tok_embed");
  double* g_act = g("act_embed");
  double* g_pos = g("pos_embed");
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < L; ++i) {
      const int pos = t * block + i;
      const double* src = dx.row(pos);
      double* dt = g_tok + static_cast<size_t>(frames[t * L + i]) * d;
      double* dp = g_pos + static_cast<size_t>(pos) * d;
      for (int k = 0; k < d; ++k) {
        dt[k] += src[k];
        dp[k] += src[k];
      }
    }
    const int pos = t * block + L;
    const double* src = dx.row(pos);
    double* da = g_act + static_cast<size_t>(actions[t]) * d;
    double* dp = g_pos + static_cast<size_t>(pos) * d;
    for (int k = 0; k < d; ++k) {
      da[k] += src[k];
      dp[k] += src[k];
    }
  }
}

void validate_window(const WmConfig& cfg, const TrainWindow& w) {
  const int L = cfg.tokens_per_frame();
  const size_t T = w.actions.size();
  if (T == 0) throw ConfigError("train window: empty");
  if (T > static_cast<size_t>(cfg.seq_len)) throw ConfigError("train window: too long");
  if (w.frames.size() != (T + 1) * L) throw ConfigError("train window: frame count mismatch");
  if (w.rewards.size() != T || w.dones.size() != T) {
    throw ConfigError("train window: reward/done count mismatch");
  }
  for (int tok : w.frames) {
    if (tok < 0 || tok >= cfg.codebook_size) throw ConfigError("train window: token out of range");
  }
  for (int a : w.actions) {
    if (a < 0 || a >= cfg.num_actions) throw ConfigError("train window: action out of range");
  }
  for (uint8_t r : w.rewards) {
    if (r > 1) throw ConfigError("train window: reward must be 0 or 1");
  }
  for (uint8_t dn : w.dones) {
    if (dn > 1) throw ConfigError("train window: done must be 0 or 1");
  }
}

uint64_t batch_fingerprint(const std::vector<TrainWindow>& batch) {
  uint64_t hash = 1469598103934665603ull;
  auto mix = [&hash](uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      hash ^= (v >> (8 * b)) & 0xff;
      hash *= 1099511628211ull;
    }
  };
  mix(batch.size());
  for (const TrainWindow& w : batch) {
    mix(w.frames.size());
    for (int tok : w.frames) mix(static_cast<uint64_t>(tok));
    for (int a : w.actions) mix(static_cast<uint64_t>(a));
    for (uint8_t r : w.rewards) mix(r);
    for (uint8_t dn : w.dones) mix(dn);
  }
  return hash;
}

}  // namespace

ForwardOutput forward(const Model& model, const std::vector<int>& frames,
                      const std::vector<int>& actions) {
  Acts acts;
  return forward_window(model, frames, actions, acts, 0.0, nullptr);
}

double loss_and_grad(const Model& model, const std::vector<TrainWindow>& batch,
                     std::vector<double>& grad, TrainMetrics* metrics,
                     uint64_t dropout_seed, double dropout_rate) {
  const WmConfig& cfg = model.cfg;
  if (batch.empty()) throw ConfigError("loss_and_grad: empty batch");
  const int L = cfg.tokens_per_frame();
  const int K = cfg.codebook_size;
  int64_t total_T = 0;
  for (const TrainWindow& w : batch) {
    validate_window(cfg, w);
    total_T += static_cast<int64_t>(w.actions.size());
  }
  const double coef = 1.0 / static_cast<double>(total_T);

  grad.assign(model.params.size(), 0.0);
  double obs_loss = 0.0, rew_loss = 0.0, done_loss = 0.0;
  int64_t token_errors = 0;

  std::vector<double> prob(K);
  for (size_t wi = 0; wi < batch.size(); ++wi) {
    const TrainWindow& w = batch[wi];
    const int T = static_cast<int>(w.actions.size());
    std::vector<int> input_frames(w.frames.begin(), w.frames.begin() + static_cast<size_t>(T) * L);

    SplitMixRng drop_rng = SplitMixRng(dropout_seed, 0x4d5a0000u).substream(wi);
    Acts acts;
    ForwardOutput out =
        forward_window(model, input_frames, w.actions, acts, dropout_rate,
                       dropout_rate > 0.0 ? &drop_rng : nullptr);

    Matrix d_obs(T * L, K, 0.0);
    Matrix d_rew(T, 2, 0.0);
    Matrix d_done(T, 2, 0.0);

    for (int t = 0; t < T; ++t) {
      for (int i = 0; i < L; ++i) {
        const int r = t * L + i;
        const int target = w.frames[static_cast<size_t>(t + 1) * L + i];
        const double* z = out.obs_logits.row(r);
        obs_loss += coef * (logsumexp_row(z, K) - z[target]);
        softmax_row(z, K, prob.data());
        double* dz = d_obs.row(r);
        for (int j = 0; j < K; ++j) dz[j] = coef * prob[j];
        dz[target] -= coef;
        int arg = 0;
        for (int j = 1; j < K; ++j) {
          if (z[j] > z[arg]) arg = j;
        }
        if (arg != target) ++token_errors;
      }
      auto scalar_ce = [&](const Matrix& logits, Matrix& dl, int target, double& acc) {
        const double* z = logits.row(t);
        acc += coef * (logsumexp_row(z, 2) - z[target]);
        double p2[2];
        softmax_row(z, 2, p2);
        double* dz = dl.row(t);
        dz[0] = coef * p2[0];
        dz[1] = coef * p2[1];
        dz[target] -= coef;
      };
      scalar_ce(out.reward_logits, d_rew, w.rewards[t], rew_loss);
      scalar_ce(out.done_logits, d_done, w.dones[t], done_loss);
    }

    backward_window(model, acts, input_frames, w.actions, d_obs, d_rew, d_done,
                    dropout_rate, grad);
  }

  const double loss = obs_loss + rew_loss + done_loss;
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "non-finite training loss (batch fingerprint " << std::hex
        << batch_fingerprint(batch) << ")";
    throw NumericalError(msg.str());
  }
  if (metrics != nullptr) {
    metrics->loss = loss;
    metrics->obs_loss = obs_loss;
    metrics->reward_loss = rew_loss;
    metrics->done_loss = done_loss;
    metrics->token_error_rate =
        static_cast<double>(token_errors) / (static_cast<double>(total_T) * L);
  }
  return loss;
}

TrainMetrics train_step(Model& model, const std::vector<TrainWindow>& batch,
                        AdamState& opt, uint64_t dropout_seed) {
  TrainMetrics metrics;
  std::vector<double> grad;
  loss_and_grad(model, batch, grad, &metrics, dropout_seed, model.cfg.dropout_rate);

  double sq = 0.0;
  for (double v : grad) sq += v * v;
  const double norm = std::sqrt(sq);
  metrics.grad_norm = norm;
  if (norm > model.cfg.grad_clip_norm) {
    const double s = model.cfg.grad_clip_norm / norm;
    for (double& v : grad) v *= s;
  }

  if (opt.m.empty()) {
    opt.m.assign(model.params.size(), 0.0);
    opt.v.assign(model.params.size(), 0.0);
  }
  if (opt.m.size() != model.params.size() || opt.v.size() != model.params.size()) {
    throw ConfigError("train_step: optimizer state size mismatch");
  }
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  opt.step += 1;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(opt.step));
  const double lr = model.cfg.learning_rate;
  for (size_t i = 0; i < grad.size(); ++i) {
    opt.m[i] = kBeta1 * opt.m[i] + (1.0 - kBeta1) * grad[i];
    opt.v[i] = kBeta2 * opt.v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
    const double mhat = opt.m[i] / bc1;
    const double vhat = opt.v[i] / bc2;
    model.params[i] -= lr * mhat / (std::sqrt(vhat) + kEps);
  }
  return metrics;
}

KvCache make_cache(const Model& model) {
  KvCache cache;
  cache.frames = 0;
  cache.k.assign(model.cfg.num_blocks,
                 Matrix(model.cfg.max_positions(), model.cfg.embed_dim, 0.0));
  cache.v = cache.k;
  return cache;
}

StepOutput forward_step(const Model& model, KvCache& cache,
                        const std::vector<int>& frame, int action) {
  const WmConfig& cfg = model.cfg;
  const int L = cfg.tokens_per_frame();
  const int d = cfg.embed_dim;
  const int m = cfg.mlp_dim;
  const int h = cfg.num_heads;
  const int hd = cfg.head_dim();
  const int block = L + 1;
  if (static_cast<int>(cache.k.size()) != cfg.num_blocks) {
    throw ConfigError("forward_step: cache does not match model");
  }
  if (cache.frames >= cfg.seq_len) throw ConfigError("forward_step: cache full");
  if (frame.size() != static_cast<size_t>(L)) throw ConfigError("forward_step: frame size mismatch");
  for (int tok : frame) {
    if (tok < 0 || tok >= cfg.codebook_size) throw ConfigError("forward_step: token out of range");
  }
  if (action < 0 || action >= cfg.num_actions) throw ConfigError("forward_step: action out of range");

  const int t = cache.frames;
  const int base = t * block;
  const int total = base + block;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const int pairs = hd / 2;
  const GridGeometry geom{cfg.grid_height, cfg.grid_width};

  // Embeddings for the new block.
  Matrix x(block, d, 0.0);
  const double* tok_embed = model.tensor("tok_embed");
  const double* act_embed = model.tensor("act_embed");
  const double* pos_embed = model.tensor("pos_embed");
  for (int i = 0; i < L; ++i) {
    const double* e = tok_embed + static_cast<size_t>(frame[i]) * d;
    const double* pe = pos_embed + static_cast<size_t>(base + i) * d;
    double* row = x.row(i);
    for (int k = 0; k < d; ++k) row[k] = e[k] + pe[k];
  }
  {
    const double* e = act_embed + static_cast<size_t>(action) * d;
    const double* pe = pos_embed + static_cast<size_t>(base + L) * d;
    double* row = x.row(L);
    for (int k = 0; k < d; ++k) row[k] = e[k] + pe[k];
  }

  std::vector<double> angles(static_cast<size_t>(block) * pairs);
  for (int i = 0; i < L; ++i) {
    GridCoord c = geom.coord_of(i);
    std::vector<double> a = rope_angles(hd, {c.x + t, c.y + t, 2 * t}, cfg.rope_base);
    std::copy(a.begin(), a.end(), angles.begin() + static_cast<size_t>(i) * pairs);
  }
  {
    std::vector<double> a = rope_angles(hd, {t, t, 2 * t + 1}, cfg.rope_base);
    std::copy(a.begin(), a.end(), angles.begin() + static_cast<size_t>(L) * pairs);
  }

  std::vector<double> mean(block), rstd(block), srow(total);
  for (int b = 0; b < cfg.num_blocks; ++b) {
    const std::string p = "b" + std::to_string(b) + ".";
    Matrix ln1(block, d, 0.0);
    layer_norm_fwd(x.data.data(), block, d, model.tensor(p + "ln1.g"),
                   model.tensor(p + "ln1.b"), ln1.data.data(), mean.data(), rstd.data());

    Matrix qkv(block, 3 * d, 0.0);
    linear_fwd(ln1.data.data(), block, d, model.tensor(p + "attn.wqkv"),
               model.tensor(p + "attn.bqkv"), 3 * d, qkv.data.data());

    Matrix q(block, d, 0.0);
    Matrix& ck = cache.k[b];
    Matrix& cv = cache.v[b];
    for (int i = 0; i < block; ++i) {
      const double* src = qkv.row(i);
      double* qi = q.row(i);
      double* ki = ck.row(base + i);
      double* vi = cv.row(base + i);
      std::memcpy(qi, src, sizeof(double) * d);
      std::memcpy(ki, src + d, sizeof(double) * d);
      std::memcpy(vi, src + 2 * d, sizeof(double) * d);
      const double* a = angles.data() + static_cast<size_t>(i) * pairs;
      for (int head = 0; head < h; ++head) {
        rotate_pairs(qi + head * hd, hd, a);
        rotate_pairs(ki + head * hd, hd, a);
      }
    }

    Matrix ctx(block, d, 0.0);
    for (int head = 0; head < h; ++head) {
      const int off = head * hd;
      for (int i = 0; i < block; ++i) {
        const double* qi = q.row(i) + off;
        for (int j = 0; j < total; ++j) {
          const double* kj = ck.row(j) + off;
          double s = 0.0;
          for (int k = 0; k < hd; ++k) s += qi[k] * kj[k];
          srow[j] = s * scale;
        }
        softmax_row(srow.data(), total, srow.data());
        double* ci = ctx.row(i) + off;
        for (int j = 0; j < total; ++j) {
          const double pij = srow[j];
          if (pij == 0.0) continue;
          const double* vj = cv.row(j) + off;
          for (int k = 0; k < hd; ++k) ci[k] += pij * vj[k];
        }
      }
    }

    Matrix attn_out(block, d, 0.0);
    linear_fwd(ctx.data.data(), block, d, model.tensor(p + "attn.wo"),
               model.tensor(p + "attn.bo"), d, attn_out.data.data());
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += attn_out.data[i];

    Matrix ln2(block, d, 0.0);
    layer_norm_fwd(x.data.data(), block, d, model.tensor(p + "ln2.g"),
                   model.tensor(p + "ln2.b"), ln2.data.data(), mean.data(), rstd.data());
    Matrix hidden(block, m, 0.0);
    linear_fwd(ln2.data.data(), block, d, model.tensor(p + "mlp.w1"),
               model.tensor(p + "mlp.b1"), m, hidden.data.data());
    for (double& v : hidden.data) v = gelu(v);
    Matrix mlp_out(block, d, 0.0);
    linear_fwd(hidden.data.data(), block, m, model.tensor(p + "mlp.w2"),
               model.tensor(p + "mlp.b2"), d, mlp_out.data.data());
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += mlp_out.data[i];
  }

  Matrix lnf(block, d, 0.0);
  layer_norm_fwd(x.data.data(), block, d, model.tensor("lnf.g"), model.tensor("lnf.b"),
                 lnf.data.data(), mean.data(), rstd.data());

  StepOutput out;
  out.obs_logits = Matrix(L, cfg.codebook_size, 0.0);
  Matrix hidden(L, d, 0.0);
  linear_fwd(lnf.data.data(), L, d, model.tensor("obs.w1"), model.tensor("obs.b1"), d,
             hidden.data.data());
  for (double& v : hidden.data) v = std::max(0.0, v);
  linear_fwd(hidden.data.data(), L, d, model.tensor("obs.w2"), model.tensor("obs.b2"),
             cfg.codebook_size, out.obs_logits.data.data());

  auto scalar_head = [&](const std::string& name, std::array<double, 2>& dst) {
    std::vector<double> hid(d);
    linear_fwd(lnf.row(L), 1, d, model.tensor(name + ".w1"), model.tensor(name + ".b1"),
               d, hid.data());
    for (double& v : hid) v = std::max(0.0, v);
    linear_fwd(hid.data(), 1, d, model.tensor(name + ".w2"), model.tensor(name + ".b2"),
               2, dst.data());
  };
  scalar_head("rew", out.reward_logits);
  scalar_head("done", out.done_logits);

  cache.frames += 1;
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_bytes(std::FILE* f, const void* p, size_t n, const std::string& path) {
  if (std::fwrite(p, 1, n, f) != n) throw IoError("write failed: " + path);
}

void read_bytes(std::FILE* f, void* p, size_t n, const std::string& path) {
  if (std::fread(p, 1, n, f) != n) throw IoError("truncated checkpoint: " + path);
}

void write_u32(std::FILE* f, uint32_t v, const std::string& path) {
  write_bytes(f, &v, sizeof(v), path);
}

uint32_t read_u32(std::FILE* f, const std::string& path) {
  uint32_t v = 0;
  read_bytes(f, &v, sizeof(v), path);
  return v;
}

void write_i32(std::FILE* f, int32_t v, const std::string& path) {
  write_bytes(f, &v, sizeof(v), path);
}

int32_t read_i32(std::FILE* f, const std::string& path) {
  int32_t v = 0;
  read_bytes(f, &v, sizeof(v), path);
  return v;
}

void write_f64(std::FILE* f, double v, const std::string& path) {
  write_bytes(f, &v, sizeof(v), path);
}

double read_f64(std::FILE* f, const std::string& path) {
  double v = 0;
  read_bytes(f, &v, sizeof(v), path);
  return v;
}

constexpr char kCkptMagic[4] = {'I', 'T', 'C', 'W'};
constexpr uint32_t kCkptVersion = 1;

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open for write: " + path);
  const WmConfig& cfg = model.cfg;
  write_bytes(f.get(), kCkptMagic, 4, path);
  write_u32(f.get(), kCkptVersion, path);
  write_i32(f.get(), cfg.num_blocks, path);
  write_i32(f.get(), cfg.num_heads, path);
  write_i32(f.get(), cfg.embed_dim, path);
  write_i32(f.get(), cfg.mlp_dim, path);
  write_i32(f.get(), cfg.seq_len, path);
  write_i32(f.get(), cfg.grid_height, path);
  write_i32(f.get(), cfg.grid_width, path);
  write_i32(f.get(), cfg.codebook_size, path);
  write_i32(f.get(), cfg.num_actions, path);
  write_f64(f.get(), cfg.dropout_rate, path);
  write_f64(f.get(), cfg.learning_rate, path);
  write_f64(f.get(), cfg.grad_clip_norm, path);
  write_f64(f.get(), cfg.rope_base, path);
  const uint64_t count = model.params.size();
  write_bytes(f.get(), &count, sizeof(count), path);
  write_u32(f.get(), static_cast<uint32_t>(model.specs.size()), path);
  std::vector<float> buf;
  for (const TensorSpec& s : model.specs) {
    write_u32(f.get(), static_cast<uint32_t>(s.name.size()), path);
    write_bytes(f.get(), s.name.data(), s.name.size(), path);
    write_u32(f.get(), static_cast<uint32_t>(s.rows), path);
    write_u32(f.get(), static_cast<uint32_t>(s.cols), path);
    buf.resize(s.size());
    const double* p = model.params.data() + s.offset;
    for (size_t i = 0; i < s.size(); ++i) buf[i] = static_cast<float>(p[i]);
    write_bytes(f.get(), buf.data(), sizeof(float) * buf.size(), path);
  }
}

Model load_checkpoint(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open: " + path);
  char magic[4];
  read_bytes(f.get(), magic, 4, path);
  if (std::memcmp(magic, kCkptMagic, 4) != 0) throw IoError("bad checkpoint magic: " + path);
  const uint32_t version = read_u32(f.get(), path);
  if (version != kCkptVersion) throw IoError("unsupported checkpoint version: " + path);
  WmConfig cfg;
  cfg.num_blocks = read_i32(f.get(), path);
  cfg.num_heads = read_i32(f.get(), path);
  cfg.embed_dim = read_i32(f.get(), path);
  cfg.mlp_dim = read_i32(f.get(), path);
  cfg.seq_len = read_i32(f.get(), path);
  cfg.grid_height = read_i32(f.get(), path);
  cfg.grid_width = read_i32(f.get(), path);
  cfg.codebook_size = read_i32(f.get(), path);
  cfg.num_actions = read_i32(f.get(), path);
  cfg.dropout_rate = read_f64(f.get(), path);
  cfg.learning_rate = read_f64(f.get(), path);
  cfg.grad_clip_norm = read_f64(f.get(), path);
  cfg.rope_base = read_f64(f.get(), path);
  cfg.validate();

  Model model;
  model.cfg = cfg;
  model.specs = build_layout(cfg);
  const TensorSpec& last = model.specs.back();
  model.params.assign(last.offset + last.size(), 0.0);

  uint64_t count = 0;
  read_bytes(f.get(), &count, sizeof(count), path);
  if (count != model.params.size()) throw IoError("checkpoint parameter count mismatch: " + path);
  const uint32_t n_tensors = read_u32(f.get(), path);
  if (n_tensors != model.specs.size()) throw IoError("checkpoint tensor count mismatch: " + path);
  std::vector<float> buf;
  for (uint32_t i = 0; i < n_tensors; ++i) {
    const uint32_t name_len = read_u32(f.get(), path);
    if (name_len > 256) throw IoError("corrupt checkpoint tensor name: " + path);
    std::string name(name_len, '\0');
    read_bytes(f.get(), name.data(), name_len, path);
    const uint32_t rows = read_u32(f.get(), path);
    const uint32_t cols = read_u32(f.get(), path);
    const TensorSpec& s = model.spec(name);
    if (static_cast<uint32_t>(s.rows) != rows || static_cast<uint32_t>(s.cols) != cols) {
      throw IoError("checkpoint tensor shape mismatch for " + name + ": " + path);
    }
    buf.resize(s.size());
    read_bytes(f.get(), buf.data(), sizeof(float) * buf.size(), path);
    double* p = model.params.data() + s.offset;
    for (size_t j = 0; j < s.size(); ++j) p[j] = static_cast<double>(buf[j]);
  }
  return model;
}

}  // namespace itc::wm
