#include "latentedit/mapper.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "binio.hpp"
#include "latentedit/error.hpp"

namespace latentedit {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr char kMagic[4] = {'L', 'E', 'M', 'P'};

std::string_view memory_name(TextMemory m) { return m == TextMemory::pooled ? "pooled" : "per_coordinate"; }

TextMemory parse_memory(const std::string& s) {
  if (s == "pooled") return TextMemory::pooled;
  if (s == "per_coordinate") return TextMemory::per_coordinate;
  throw ParseError("unknown text memory mode '" + s + "'");
}

struct ParamSpec {
  std::string name;
  int rows;
  int cols;
  double std;   // normal init when > 0
  double fill;  // constant init otherwise
};

struct AttnIdx {
  int qw, qb, kw, kb, vw, vb, ow, ob, sink_k, sink_v;
};

struct LayerIdx {
  int ln1g, ln1b;
  AttnIdx self;
  int ln2g, ln2b;
  AttnIdx cross;
  int ln3g, ln3b;
  int f1w, f1b, f2w, f2b;
};

struct Layout {
  std::vector<ParamSpec> specs;
  int embed_w, embed_b, embed_pos;
  int text_a, text_b;  // pooled: weight/bias; per-coordinate: scale/pos
  std::vector<LayerIdx> layers;
  int lnf_g, lnf_b, head_w, head_b;

  int add(std::string name, int rows, int cols, double std, double fill = 0.0) {
    specs.push_back({std::move(name), rows, cols, std, fill});
    return static_cast<int>(specs.size()) - 1;
  }
};

Layout make_layout(const MapperConfig& c) {
  Layout l;
  const int W = c.model_width, D = c.latent_shape.dims, L = c.latent_shape.layers, E = c.text_embedding_dim, F = c.ffn();
  const double sw = 1.0 / std::sqrt(static_cast<double>(W));
  l.embed_w = l.add("embed.w", D, W, 1.0 / std::sqrt(static_cast<double>(D)));
  l.embed_b = l.add("embed.b", 1, W, 0.0);
  l.embed_pos = l.add("embed.pos", L, W, 0.1);
  if (c.memory == TextMemory::pooled) {
    l.text_a = l.add("text.w", E, W, 1.0 / std::sqrt(static_cast<double>(E)));
    l.text_b = l.add("text.b", 1, W, 0.0);
  } else {
    l.text_a = l.add("text.scale", E, W, 1.0);
    l.text_b = l.add("text.pos", E, W, 0.1);
  }
  auto attn = [&](const std::string& p) {
    AttnIdx a;
    a.qw = l.add(p + ".q.w", W, W, sw);
    a.qb = l.add(p + ".q.b", 1, W, 0.0);
    a.kw = l.add(p + ".k.w", W, W, sw);
    a.kb = l.add(p + ".k.b", 1, W, 0.0);
    a.vw = l.add(p + ".v.w", W, W, sw);
    a.vb = l.add(p + ".v.b", 1, W, 0.0);
    a.ow = l.add(p + ".o.w", W, W, sw);
    a.ob = l.add(p + ".o.b", 1, W, 0.0);
    a.sink_k = l.add(p + ".sink_k", 1, W, sw);
    a.sink_v = l.add(p + ".sink_v", 1, W, sw);
    return a;
  };
  for (int i = 0; i < c.num_layers; ++i) {
    const std::string p = "layers." + std::to_string(i);
    LayerIdx li;
    li.ln1g = l.add(p + ".ln1.g", 1, W, 0.0, 1.0);
    li.ln1b = l.add(p + ".ln1.b", 1, W, 0.0);
    li.self = attn(p + ".self");
    li.ln2g = l.add(p + ".ln2.g", 1, W, 0.0, 1.0);
    li.ln2b = l.add(p + ".ln2.b", 1, W, 0.0);
    li.cross = attn(p + ".cross");
    li.ln3g = l.add(p + ".ln3.g", 1, W, 0.0, 1.0);
    li.ln3b = l.add(p + ".ln3.b", 1, W, 0.0);
    li.f1w = l.add(p + ".ffn.in.w", W, F, sw);
    li.f1b = l.add(p + ".ffn.in.b", 1, F, 0.0);
    li.f2w = l.add(p + ".ffn.out.w", F, W, 1.0 / std::sqrt(static_cast<double>(F)));
    li.f2b = l.add(p + ".ffn.out.b", 1, W, 0.0);
    l.layers.push_back(li);
  }
  l.lnf_g = l.add("final_ln.g", 1, W, 0.0, 1.0);
  l.lnf_b = l.add("final_ln.b", 1, W, 0.0);
  l.head_w = l.add("head.w", W, D, 0.0);
  l.head_b = l.add("head.b", 1, D, 0.0);
  return l;
}

MatrixXd add_row(MatrixXd x, const MatrixXd& b) {
  x.rowwise() += b.row(0);
  return x;
}

struct LNCache {
  MatrixXd xhat;
  VectorXd inv_std;
};

MatrixXd ln_forward(const MatrixXd& x, const MatrixXd& g, const MatrixXd& b, LNCache& c) {
  const double n = static_cast<double>(x.cols());
  VectorXd mean = x.rowwise().mean();
  MatrixXd centered = x.colwise() - mean;
  VectorXd var = centered.array().square().rowwise().sum() / n;
  c.inv_std = (var.array() + kLayerNormEps).rsqrt();
  c.xhat = centered.array().colwise() * c.inv_std.array();
  MatrixXd y = c.xhat.array().rowwise() * g.row(0).array();
  y.rowwise() += b.row(0);
  return y;
}

MatrixXd ln_backward(const MatrixXd& dy, const LNCache& c, const MatrixXd& g, MatrixXd& dg, MatrixXd& db) {
  const double n = static_cast<double>(dy.cols());
  dg.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db.row(0) += dy.colwise().sum();
  MatrixXd dxhat = dy.array().rowwise() * g.row(0).array();
  VectorXd sum_d = dxhat.rowwise().sum();
  VectorXd sum_dx = (dxhat.array() * c.xhat.array()).rowwise().sum();
  MatrixXd dx = (n * dxhat.array() - (c.xhat.array().colwise() * sum_dx.array())).colwise() - sum_d.array();
  dx = dx.array().colwise() * (c.inv_std.array() / n);
  return dx;
}

struct AttnCache {
  MatrixXd xq, xkv;  // inputs
  MatrixXd q, k, v;  // k, v include the learned extra row last
  std::vector<MatrixXd> probs;
  MatrixXd concat;
};

}  // namespace

struct MapperTrace::Data {
  std::vector<double> text;
  MatrixXd w_in;    // L x D
  MatrixXd memory;  // T x W
  struct Layer {
    MatrixXd x_in;
    LNCache ln1, ln2, ln3;
    AttnCache self, cross;
    MatrixXd x1, x2;
    MatrixXd h3, ffn_pre, ffn_hidden;
  };
  std::vector<Layer> layers;
  MatrixXd x_final;
  LNCache lnf;
  MatrixXd lnf_out;
};

MapperTrace::MapperTrace() : data_(std::make_unique<Data>()) {}
MapperTrace::~MapperTrace() = default;
MapperTrace::MapperTrace(MapperTrace&&) noexcept = default;
MapperTrace& MapperTrace::operator=(MapperTrace&&) noexcept = default;

namespace {

MatrixXd attn_forward(const MatrixXd& xq, const MatrixXd& xkv, const AttnIdx& a, const std::vector<const MatrixXd*>& p,
                      int heads, AttnCache& c) {
  const int W = static_cast<int>(xq.cols());
  const int dh = W / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.xq = xq;
  c.xkv = xkv;
  c.q = add_row(xq * *p[a.qw], *p[a.qb]);
  const Eigen::Index m = xkv.rows();
  c.k.resize(m + 1, W);
  c.v.resize(m + 1, W);
  c.k.topRows(m) = add_row(xkv * *p[a.kw], *p[a.kb]);
  c.v.topRows(m) = add_row(xkv * *p[a.vw], *p[a.vb]);
  c.k.row(m) = p[a.sink_k]->row(0);
  c.v.row(m) = p[a.sink_v]->row(0);
  c.probs.assign(static_cast<std::size_t>(heads), MatrixXd());
  c.concat.resize(xq.rows(), W);
  for (int h = 0; h < heads; ++h) {
    MatrixXd s = c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose() * scale;
    VectorXd mx = s.rowwise().maxCoeff();
    MatrixXd e = (s.colwise() - mx).array().exp();
    VectorXd sum = e.rowwise().sum();
    MatrixXd pr = e.array().colwise() / sum.array();
    c.concat.middleCols(h * dh, dh) = pr * c.v.middleCols(h * dh, dh);
    c.probs[static_cast<std::size_t>(h)] = std::move(pr);
  }
  return add_row(c.concat * *p[a.ow], *p[a.ob]);
}

// Returns d/dxq; adds d/dxkv into dxkv.
MatrixXd attn_backward(const MatrixXd& dout, const AttnCache& c, const AttnIdx& a, const std::vector<const MatrixXd*>& p,
                       int heads, Gradients& g, MatrixXd& dxkv) {
  const int W = static_cast<int>(c.q.cols());
  const int dh = W / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  g[a.ow] += c.concat.transpose() * dout;
  g[a.ob].row(0) += dout.colwise().sum();
  MatrixXd dconcat = dout * p[a.ow]->transpose();
  MatrixXd dq(c.q.rows(), W), dk(c.k.rows(), W), dv(c.v.rows(), W);
  for (int h = 0; h < heads; ++h) {
    const MatrixXd& pr = c.probs[static_cast<std::size_t>(h)];
    MatrixXd dO = dconcat.middleCols(h * dh, dh);
    dv.middleCols(h * dh, dh) = pr.transpose() * dO;
    MatrixXd dA = dO * c.v.middleCols(h * dh, dh).transpose();
    VectorXd rs = (dA.array() * pr.array()).rowwise().sum();
    MatrixXd dS = pr.array() * (dA.colwise() - rs).array();
    dq.middleCols(h * dh, dh) = dS * c.k.middleCols(h * dh, dh) * scale;
    dk.middleCols(h * dh, dh) = dS.transpose() * c.q.middleCols(h * dh, dh) * scale;
  }
  const Eigen::Index m = c.xkv.rows();
  g[a.sink_k].row(0) += dk.row(m);
  g[a.sink_v].row(0) += dv.row(m);
  MatrixXd dkt = dk.topRows(m), dvt = dv.topRows(m);
  g[a.qw] += c.xq.transpose() * dq;
  g[a.qb].row(0) += dq.colwise().sum();
  g[a.kw] += c.xkv.transpose() * dkt;
  g[a.kb].row(0) += dkt.colwise().sum();
  g[a.vw] += c.xkv.transpose() * dvt;
  g[a.vb].row(0) += dvt.colwise().sum();
  dxkv += dkt * p[a.kw]->transpose() + dvt * p[a.vw]->transpose();
  return dq * p[a.qw]->transpose();
}

const Layout& cached_layout(const MapperConfig& c) {
  thread_local MapperConfig last;
  thread_local Layout layout;
  thread_local bool have = false;
  if (!have || !(last == c)) {
    layout = make_layout(c);
    last = c;
    have = true;
  }
  return layout;
}

}  // namespace

void MapperConfig::validate() const {
  if (num_layers < 1) throw ValidationError("mapper needs at least one layer");
  if (num_heads < 1) throw ValidationError("mapper needs at least one head");
  if (model_width < 1 || model_width % num_heads != 0) {
    throw ValidationError("model width " + std::to_string(model_width) + " is not divisible by " + std::to_string(num_heads) +
                          " heads");
  }
  if (ffn_width < 0) throw ValidationError("ffn width must be >= 0");
  if (latent_shape.layers < 1 || latent_shape.dims < 1) throw ValidationError("mapper latent shape must be positive");
  if (text_embedding_dim < 1) throw ValidationError("text embedding dim must be positive");
}

nlohmann::json MapperConfig::to_json() const {
  return {{"num_layers", num_layers},
          {"num_heads", num_heads},
          {"model_width", model_width},
          {"ffn_width", ffn_width},
          {"latent_layers", latent_shape.layers},
          {"latent_dims", latent_shape.dims},
          {"text_embedding_dim", text_embedding_dim},
          {"memory", std::string(memory_name(memory))}};
}

MapperConfig MapperConfig::from_json(const nlohmann::json& doc) {
  MapperConfig c;
  if (doc.is_null()) return c;
  try {
    c.num_layers = doc.value("num_layers", c.num_layers);
    c.num_heads = doc.value("num_heads", c.num_heads);
    c.model_width = doc.value("model_width", c.model_width);
    c.ffn_width = doc.value("ffn_width", c.ffn_width);
    c.latent_shape.layers = doc.value("latent_layers", c.latent_shape.layers);
    c.latent_shape.dims = doc.value("latent_dims", c.latent_shape.dims);
    c.text_embedding_dim = doc.value("text_embedding_dim", c.text_embedding_dim);
    if (doc.contains("memory")) c.memory = parse_memory(doc["memory"].get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad mapper config: ") + e.what());
  }
  return c;
}

const MatrixXd& MapperState::param(const std::string& name) const {
  for (const auto& p : params) {
    if (p.name == name) return p.value;
  }
  throw ValidationError("mapper has no parameter '" + name + "'");
}

std::size_t MapperState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += static_cast<std::size_t>(p.value.size());
  return n;
}

MapperState init_mapper(const MapperConfig& config, std::uint64_t seed) {
  config.validate();
  MapperState s;
  s.config = config;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& spec : make_layout(config).specs) {
    MatrixXd m(spec.rows, spec.cols);
    if (spec.std > 0.0) {
      // Fill row-major so the draw order does not depend on Eigen's storage.
      for (int r = 0; r < spec.rows; ++r)
        for (int c = 0; c < spec.cols; ++c) m(r, c) = spec.std * normal(rng);
    } else {
      m.setConstant(spec.fill);
    }
    s.params.push_back({spec.name, std::move(m)});
  }
  return s;
}

Gradients zero_gradients(const MapperState& state) {
  Gradients g;
  g.reserve(state.params.size());
  for (const auto& p : state.params) g.push_back(MatrixXd::Zero(p.value.rows(), p.value.cols()));
  return g;
}

Mapper::Mapper(const MapperState& state) : state_(state) {
  state.config.validate();
  const auto& layout = cached_layout(state.config);
  if (layout.specs.size() != state.params.size()) throw ValidationError("mapper state does not match its config");
  for (std::size_t i = 0; i < layout.specs.size(); ++i) {
    const auto& spec = layout.specs[i];
    const auto& p = state.params[i];
    if (p.name != spec.name || p.value.rows() != spec.rows || p.value.cols() != spec.cols) {
      throw ShapeError("mapper parameter '" + p.name + "' does not match layout entry '" + spec.name + "'");
    }
    p_.push_back(&p.value);
  }
}

OffsetDelta Mapper::forward(std::span<const double> text, const LatentCode& w) const {
  MapperTrace trace;
  return forward(text, w, trace);
}

OffsetDelta Mapper::forward(std::span<const double> text, const LatentCode& w, MapperTrace& trace) const {
  auto& t = trace.data();
  const auto& cfg = state_.config;
  const auto& lay = cached_layout(cfg);
  if (w.shape() != cfg.latent_shape) {
    throw ShapeError("mapper expects latent " + cfg.latent_shape.to_string() + ", got " + w.shape().to_string());
  }
  if (text.size() != static_cast<std::size_t>(cfg.text_embedding_dim)) {
    throw ShapeError("mapper expects a " + std::to_string(cfg.text_embedding_dim) + "-dim text embedding, got " +
                     std::to_string(text.size()));
  }
  if (!w.all_finite()) throw NonFiniteError("latent code contains non-finite entries");
  for (double x : text) {
    if (!std::isfinite(x)) throw NonFiniteError("text embedding contains non-finite entries");
  }
  const int L = cfg.latent_shape.layers, D = cfg.latent_shape.dims, E = cfg.text_embedding_dim;
  t.text.assign(text.begin(), text.end());
  t.w_in.resize(L, D);
  for (int l = 0; l < L; ++l)
    for (int d = 0; d < D; ++d) t.w_in(l, d) = w.at(l, d);

  Eigen::Map<const Eigen::RowVectorXd> e(text.data(), E);
  if (cfg.memory == TextMemory::pooled) {
    t.memory = e * *p_[lay.text_a] + p_[lay.text_b]->row(0);
  } else {
    t.memory = (p_[lay.text_a]->array().colwise() * e.transpose().array()).matrix() + *p_[lay.text_b];
  }

  MatrixXd x = add_row(t.w_in * *p_[lay.embed_w], *p_[lay.embed_b]) + *p_[lay.embed_pos];
  t.layers.resize(lay.layers.size());
  for (std::size_t i = 0; i < lay.layers.size(); ++i) {
    const LayerIdx& li = lay.layers[i];
    auto& c = t.layers[i];
    c.x_in = x;
    MatrixXd h1 = ln_forward(x, *p_[li.ln1g], *p_[li.ln1b], c.ln1);
    c.x1 = x + attn_forward(h1, h1, li.self, p_, cfg.num_heads, c.self);
    MatrixXd h2 = ln_forward(c.x1, *p_[li.ln2g], *p_[li.ln2b], c.ln2);
    c.x2 = c.x1 + attn_forward(h2, t.memory, li.cross, p_, cfg.num_heads, c.cross);
    c.h3 = ln_forward(c.x2, *p_[li.ln3g], *p_[li.ln3b], c.ln3);
    c.ffn_pre = add_row(c.h3 * *p_[li.f1w], *p_[li.f1b]);
    c.ffn_hidden = c.ffn_pre.cwiseMax(0.0);
    x = c.x2 + add_row(c.ffn_hidden * *p_[li.f2w], *p_[li.f2b]);
  }
  t.x_final = x;
  t.lnf_out = ln_forward(x, *p_[lay.lnf_g], *p_[lay.lnf_b], t.lnf);
  MatrixXd out = add_row(t.lnf_out * *p_[lay.head_w], *p_[lay.head_b]);

  OffsetDelta delta(cfg.latent_shape);
  for (int l = 0; l < L; ++l)
    for (int d = 0; d < D; ++d) delta.at(l, d) = out(l, d);
  return delta;
}

void Mapper::backward(const MapperTrace& trace, const LatentTensor& grad_offset, Gradients& g) const {
  const auto& t = trace.data();
  const auto& cfg = state_.config;
  const auto& lay = cached_layout(cfg);
  if (grad_offset.shape() != cfg.latent_shape) throw ShapeError("offset gradient shape mismatch");
  if (g.size() != p_.size()) throw ShapeError("gradient buffer does not match the mapper");
  const int L = cfg.latent_shape.layers, D = cfg.latent_shape.dims;
  MatrixXd dout(L, D);
  for (int l = 0; l < L; ++l)
    for (int d = 0; d < D; ++d) dout(l, d) = grad_offset.at(l, d);

  g[lay.head_w] += t.lnf_out.transpose() * dout;
  g[lay.head_b].row(0) += dout.colwise().sum();
  MatrixXd dx = ln_backward(dout * p_[lay.head_w]->transpose(), t.lnf, *p_[lay.lnf_g], g[lay.lnf_g], g[lay.lnf_b]);
  MatrixXd dmem = MatrixXd::Zero(t.memory.rows(), t.memory.cols());

  for (std::size_t i = lay.layers.size(); i-- > 0;) {
    const LayerIdx& li = lay.layers[i];
    const auto& c = t.layers[i];
    // x = x2 + ffn(ln3(x2))
    g[li.f2w] += c.ffn_hidden.transpose() * dx;
    g[li.f2b].row(0) += dx.colwise().sum();
    MatrixXd dpre = ((dx * p_[li.f2w]->transpose()).array() * (c.ffn_pre.array() > 0.0).cast<double>()).matrix();
    g[li.f1w] += c.h3.transpose() * dpre;
    g[li.f1b].row(0) += dpre.colwise().sum();
    MatrixXd dx2 = dx + ln_backward(dpre * p_[li.f1w]->transpose(), c.ln3, *p_[li.ln3g], g[li.ln3g], g[li.ln3b]);
    // x2 = x1 + cross(ln2(x1), memory)
    MatrixXd dh2 = attn_backward(dx2, c.cross, li.cross, p_, cfg.num_heads, g, dmem);
    MatrixXd dx1 = dx2 + ln_backward(dh2, c.ln2, *p_[li.ln2g], g[li.ln2g], g[li.ln2b]);
    // x1 = x + self(ln1(x))
    MatrixXd dh1_kv = MatrixXd::Zero(c.self.xkv.rows(), c.self.xkv.cols());
    MatrixXd dh1 = attn_backward(dx1, c.self, li.self, p_, cfg.num_heads, g, dh1_kv);
    dh1 += dh1_kv;
    dx = dx1 + ln_backward(dh1, c.ln1, *p_[li.ln1g], g[li.ln1g], g[li.ln1b]);
  }

  // x0 = w We + be + pos
  g[lay.embed_w] += t.w_in.transpose() * dx;
  g[lay.embed_b].row(0) += dx.colwise().sum();
  g[lay.embed_pos] += dx;

  const int E = cfg.text_embedding_dim;
  Eigen::Map<const Eigen::RowVectorXd> e(t.text.data(), E);
  if (cfg.memory == TextMemory::pooled) {
    g[lay.text_a] += e.transpose() * dmem;
    g[lay.text_b].row(0) += dmem.row(0);
  } else {
    g[lay.text_a] += (dmem.array().colwise() * e.transpose().array()).matrix();
    g[lay.text_b] += dmem;
  }
}

OffsetDelta map_offsets(const MapperState& state, std::span<const double> text_embedding, const LatentCode& w) {
  return Mapper(state).forward(text_embedding, w);
}

std::vector<OffsetDelta> map_offsets(const MapperState& state, const std::vector<std::vector<double>>& text_embeddings,
                                     const std::vector<LatentCode>& codes) {
  if (text_embeddings.size() != codes.size()) {
    throw ShapeError("batch has " + std::to_string(text_embeddings.size()) + " text embeddings but " +
                     std::to_string(codes.size()) + " latent codes");
  }
  Mapper mapper(state);
  std::vector<OffsetDelta> out;
  out.reserve(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) out.push_back(mapper.forward(text_embeddings[i], codes[i]));
  return out;
}

void adam_step(MapperState& state, const Gradients& grads, const AdamOptions& o) {
  if (grads.size() != state.params.size()) throw ShapeError("gradient count does not match parameter count");
  if (!state.moments) {
    AdamMoments m;
    for (const auto& p : state.params) {
      m.m.push_back(MatrixXd::Zero(p.value.rows(), p.value.cols()));
      m.v.push_back(MatrixXd::Zero(p.value.rows(), p.value.cols()));
    }
    state.moments = std::move(m);
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  auto& mom = *state.moments;
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    mom.m[i] = o.beta1 * mom.m[i] + (1.0 - o.beta1) * grads[i];
    mom.v[i] = o.beta2 * mom.v[i] + (1.0 - o.beta2) * grads[i].cwiseProduct(grads[i]);
    state.params[i].value.array() -=
        o.learning_rate * (mom.m[i].array() / c1) / ((mom.v[i].array() / c2).sqrt() + o.epsilon);
  }
}

double gradient_norm(const Gradients& grads) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

void scale_gradients(Gradients& grads, double factor) {
  for (auto& g : grads) g *= factor;
}

namespace {

void put_matrix(std::ostream& out, const MatrixXd& m) {
  binio::put<std::int32_t>(out, static_cast<std::int32_t>(m.rows()));
  binio::put<std::int32_t>(out, static_cast<std::int32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) binio::put<double>(out, m(r, c));
}

MatrixXd get_matrix(std::istream& in, const std::string& what) {
  auto rows = binio::get<std::int32_t>(in, what.c_str());
  auto cols = binio::get<std::int32_t>(in, what.c_str());
  if (rows < 0 || cols < 0 || static_cast<std::int64_t>(rows) * cols > (1LL << 31)) {
    throw CorruptFileError("implausible tensor shape for " + what);
  }
  MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = binio::get<double>(in, what.c_str());
  return m;
}

}  // namespace

void save_mapper(const MapperState& state, const std::filesystem::path& path) {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, 4);
  binio::put<std::uint32_t>(out, kMapperFormatVersion);
  binio::put_string(out, state.config.to_json().dump());
  binio::put<std::int64_t>(out, state.step);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(state.params.size()));
  for (const auto& p : state.params) {
    binio::put_string(out, p.name);
    put_matrix(out, p.value);
  }
  binio::put<std::uint8_t>(out, state.moments ? 1 : 0);
  if (state.moments) {
    for (std::size_t i = 0; i < state.params.size(); ++i) {
      put_matrix(out, state.moments->m[i]);
      put_matrix(out, state.moments->v[i]);
    }
  }
  out.write(kMagic, 4);
  // Write to a sibling file then rename so readers never see half a checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + tmp.string());
    const std::string bytes = out.str();
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write to checkpoint " + tmp.string() + " failed");
  }
  std::filesystem::rename(tmp, path);
}

MapperState load_mapper(const std::filesystem::path& path, std::optional<LatentShape> expected_shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) throw CorruptFileError(path.string() + " is not a mapper checkpoint");
  auto version = binio::get<std::uint32_t>(in, "checkpoint version");
  if (version != kMapperFormatVersion) {
    throw VersionError("checkpoint " + path.string() + " has format version " + std::to_string(version) + ", expected " +
                       std::to_string(kMapperFormatVersion));
  }
  MapperState s;
  try {
    s.config = MapperConfig::from_json(nlohmann::json::parse(binio::get_string(in, "checkpoint config")));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError("checkpoint config is not valid JSON: " + std::string(e.what()));
  }
  s.config.validate();
  if (expected_shape && s.config.latent_shape != *expected_shape) {
    throw ShapeError("checkpoint " + path.string() + " was trained for latent " + s.config.latent_shape.to_string() +
                     ", backend uses " + expected_shape->to_string());
  }
  s.step = binio::get<std::int64_t>(in, "checkpoint step");
  const auto count = binio::get<std::uint32_t>(in, "parameter count");
  const auto& layout = make_layout(s.config);
  if (count != layout.specs.size()) throw CorruptFileError("checkpoint parameter count does not match its config");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = binio::get_string(in, "parameter name");
    MatrixXd m = get_matrix(in, name);
    const auto& spec = layout.specs[i];
    if (name != spec.name || m.rows() != spec.rows || m.cols() != spec.cols) {
      throw CorruptFileError("checkpoint parameter '" + name + "' does not match the layout");
    }
    s.params.push_back({std::move(name), std::move(m)});
  }
  if (binio::get<std::uint8_t>(in, "optimizer flag")) {
    AdamMoments mom;
    for (std::uint32_t i = 0; i < count; ++i) {
      mom.m.push_back(get_matrix(in, "adam m"));
      mom.v.push_back(get_matrix(in, "adam v"));
      if (mom.m.back().rows() != s.params[i].value.rows() || mom.m.back().cols() != s.params[i].value.cols() ||
          mom.v.back().rows() != s.params[i].value.rows() || mom.v.back().cols() != s.params[i].value.cols()) {
        throw CorruptFileError("checkpoint optimizer state does not match parameter '" + s.params[i].name + "'");
      }
    }
    s.moments = std::move(mom);
  }
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) throw CorruptFileError("checkpoint " + path.string() + " is truncated");
  return s;
}

}  // namespace latentedit
