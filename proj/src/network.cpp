#include "thinseg/network.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <sstream>

#include "thinseg/kernels.hpp"

namespace thinseg {

// ---------------------------------------------------------------------------
// Configuration and layout

void UNetConfig::validate() const {
  if (in_channels < 1 || out_channels < 2) throw Error("UNetConfig: invalid channel counts");
  if (level_channels.size() < 2) throw Error("UNetConfig: at least 2 levels are required");
  for (std::size_t i = 0; i < level_channels.size(); ++i) {
    if (level_channels[i] < 1) throw Error("UNetConfig: level channels must be positive");
    if (i > 0 && level_channels[i] <= level_channels[i - 1]) {
      throw Error("UNetConfig: level channels must strictly increase with depth");
    }
  }
}

std::string UNetConfig::fingerprint() const {
  std::ostringstream s;
  s << "resunet-v1/in" << in_channels << "/out" << out_channels << "/levels";
  for (int c : level_channels) s << "-" << c;
  s << "/norm-" << (norm == NormKind::Instance ? "instance" : "none");
  return s.str();
}

nlohmann::json UNetConfig::to_json() const {
  return {{"in_channels", in_channels},
          {"out_channels", out_channels},
          {"level_channels", level_channels},
          {"norm", norm == NormKind::Instance ? "instance" : "none"}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.out_channels = j.value("out_channels", c.out_channels);
  if (j.contains("level_channels")) c.level_channels = j["level_channels"].get<std::vector<int>>();
  std::string norm = j.value("norm", std::string("instance"));
  if (norm == "instance") {
    c.norm = NormKind::Instance;
  } else if (norm == "none") {
    c.norm = NormKind::None;
  } else {
    throw Error("UNetConfig: unknown norm '" + norm + "'");
  }
  c.validate();
  return c;
}

template <class T>
Tensor<T>::Tensor(std::vector<int> dims, T fill) : shape(std::move(dims)) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw Error("tensor dimensions must be non-negative");
    n *= static_cast<std::size_t>(d);
  }
  values.assign(n, fill);
}

template <class T>
std::size_t ModelParams<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

namespace {

struct BlockIdx {
  int cin = 0, cout = 0, stride = 1;
  int w1 = -1, b1 = -1, g1 = -1, s1 = -1, a1 = -1;
  int w2 = -1, b2 = -1, g2 = -1, s2 = -1, a2 = -1;
};

struct UpIdx {
  int cin = 0;   // channels of the coarse input
  int cout = 0;  // channels after upsampling
  int w = -1, b = -1, g = -1, s = -1, a = -1;
};

struct Layout {
  std::vector<ParamSpec> specs;
  std::vector<BlockIdx> enc, dec;
  std::vector<UpIdx> up;
  int head_w = -1, head_b = -1;
};

Layout make_layout(const UNetConfig& cfg) {
  cfg.validate();
  Layout L;
  const bool norm = cfg.norm == NormKind::Instance;
  auto add = [&](std::string name, std::vector<int> shape, ParamKind kind, int fan_in) {
    L.specs.push_back({std::move(name), std::move(shape), kind, fan_in});
    return static_cast<int>(L.specs.size()) - 1;
  };
  auto stage = [&](const std::string& p, const std::string& tag, int ch, int fan_in, int& b, int& g, int& s,
                   int& a) {
    if (norm) {
      g = add(p + ".norm" + tag + ".scale", {ch}, ParamKind::NormScale, 0);
      s = add(p + ".norm" + tag + ".shift", {ch}, ParamKind::NormShift, 0);
    } else {
      b = add(p + ".conv" + tag + ".bias", {ch}, ParamKind::Bias, fan_in);
    }
    a = add(p + ".act" + tag + ".slope", {1}, ParamKind::PReLUSlope, 0);
  };
  auto block = [&](const std::string& p, int cin, int cout, int stride) {
    BlockIdx b;
    b.cin = cin;
    b.cout = cout;
    b.stride = stride;
    b.w1 = add(p + ".conv1.weight", {cout, cin, 3, 3}, ParamKind::ConvWeight, cin * 9);
    stage(p, "1", cout, cin * 9, b.b1, b.g1, b.s1, b.a1);
    b.w2 = add(p + ".conv2.weight", {cout, cout, 3, 3}, ParamKind::ConvWeight, cout * 9);
    stage(p, "2", cout, cout * 9, b.b2, b.g2, b.s2, b.a2);
    return b;
  };

  const auto& ch = cfg.level_channels;
  const int levels = cfg.levels();
  for (int l = 0; l < levels; ++l) {
    L.enc.push_back(block("enc" + std::to_string(l), l == 0 ? cfg.in_channels : ch[l - 1], ch[l], l == 0 ? 1 : 2));
  }
  L.up.resize(levels - 1);
  L.dec.resize(levels - 1);
  for (int l = levels - 2; l >= 0; --l) {
    UpIdx u;
    u.cin = ch[l + 1];
    u.cout = ch[l];
    const std::string p = "up" + std::to_string(l);
    u.w = add(p + ".convT.weight", {ch[l + 1], ch[l], 3, 3}, ParamKind::TransposedConvWeight, ch[l + 1] * 9);
    stage(p, "", ch[l], ch[l + 1] * 9, u.b, u.g, u.s, u.a);
    L.up[l] = u;
    L.dec[l] = block("dec" + std::to_string(l), 2 * ch[l], ch[l], 1);
  }
  L.head_w = add("head.weight", {cfg.out_channels, ch[0], 1, 1}, ParamKind::ConvWeight, ch[0]);
  L.head_b = add("head.bias", {cfg.out_channels}, ParamKind::Bias, ch[0]);
  return L;
}

// ---------------------------------------------------------------------------
// Convolution via im2col / col2im over output-pixel tiles

struct Geom {
  int cin, cout, k, stride, pad, ih, iw, oh, ow;
  int K() const { return cin * k * k; }
  int out_px() const { return oh * ow; }
  int in_px() const { return ih * iw; }
};

Geom conv3x3(int cin, int cout, int stride, int ih, int iw) {
  return {cin, cout, 3, stride, 1, ih, iw, (ih - 1) / stride + 1, (iw - 1) / stride + 1};
}

int tile_pixels(int K, int total) {
  int tp = std::max(64, (1 << 17) / std::max(K, 1));
  tp = std::min(tp, total);
  if (tp > 16) tp -= tp % 16;
  return std::max(tp, 1);
}

// Valid output columns [lo, hi) for which ix = ox*s - pad + kx lies inside [0, iw).
inline void valid_range(const Geom& g, int kx, int& lo, int& hi) {
  const int off = kx - g.pad;
  lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  const int last = g.iw - 1 - off;
  hi = last < 0 ? 0 : std::min(g.ow, last / g.stride + 1);
  lo = std::min(lo, hi);
}

template <class T>
void im2col(const Geom& g, const T* in, int p0, int p1, T* col) {
  const int tp = p1 - p0;
  for (int ci = 0; ci < g.cin; ++ci) {
    const T* plane = in + static_cast<long>(ci) * g.in_px();
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* dst = col + static_cast<long>((ci * g.k + ky) * g.k + kx) * tp;
        int lo, hi;
        valid_range(g, kx, lo, hi);
        int p = p0;
        while (p < p1) {
          const int oy = p / g.ow;
          const int ox0 = p % g.ow;
          const int ox1 = std::min(g.ow, ox0 + (p1 - p));
          T* d = dst + (p - p0) - ox0;
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.ih) {
            std::fill(d + ox0, d + ox1, T(0));
          } else {
            const T* srow = plane + static_cast<long>(iy) * g.iw + kx - g.pad;
            const int a = std::max(ox0, lo), b = std::min(ox1, hi);
            for (int ox = ox0; ox < std::min(a, ox1); ++ox) d[ox] = T(0);
            if (g.stride == 1) {
              for (int ox = a; ox < b; ++ox) d[ox] = srow[ox];
            } else {
              for (int ox = a; ox < b; ++ox) d[ox] = srow[ox * g.stride];
            }
            for (int ox = std::max(b, ox0); ox < ox1; ++ox) d[ox] = T(0);
          }
          p += ox1 - ox0;
        }
      }
    }
  }
}

template <class T>
void col2im(const Geom& g, const T* col, int p0, int p1, T* in) {
  const int tp = p1 - p0;
  for (int ci = 0; ci < g.cin; ++ci) {
    T* plane = in + static_cast<long>(ci) * g.in_px();
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* src = col + static_cast<long>((ci * g.k + ky) * g.k + kx) * tp;
        int lo, hi;
        valid_range(g, kx, lo, hi);
        int p = p0;
        while (p < p1) {
          const int oy = p / g.ow;
          const int ox0 = p % g.ow;
          const int ox1 = std::min(g.ow, ox0 + (p1 - p));
          const T* s = src + (p - p0) - ox0;
          const int iy = oy * g.stride - g.pad + ky;
          if (iy >= 0 && iy < g.ih) {
            T* drow = plane + static_cast<long>(iy) * g.iw + kx - g.pad;
            const int a = std::max(ox0, lo), b = std::min(ox1, hi);
            for (int ox = a; ox < b; ++ox) drow[ox * g.stride] += s[ox];
          }
          p += ox1 - ox0;
        }
      }
    }
  }
}

template <class T>
void transpose(const T* src, int rows, int cols, std::vector<T>& dst) {
  dst.resize(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
  }
}

template <class T>
struct Scratch {
  std::vector<T> col;
  std::vector<T> wt;
};

// out[cout x out_px] += W[cout x K] * im2col(in)
template <class T>
void conv_forward(const Geom& g, const T* w, const T* in, T* out, Scratch<T>& s) {
  const int K = g.K(), total = g.out_px(), tp = tile_pixels(K, total);
  s.col.resize(static_cast<std::size_t>(K) * tp);
  for (int p0 = 0; p0 < total; p0 += tp) {
    const int p1 = std::min(total, p0 + tp), n = p1 - p0;
    im2col(g, in, p0, p1, s.col.data());
    kernels::gemm_nn(g.cout, n, K, w, K, s.col.data(), n, out + p0, total);
  }
}

template <class T>
void conv_backward(const Geom& g, const T* w, const T* in, const T* dout, T* dw, T* din, Scratch<T>& s) {
  const int K = g.K(), total = g.out_px(), tp = tile_pixels(K, total);
  s.col.resize(static_cast<std::size_t>(K) * tp);
  if (din != nullptr) transpose(w, g.cout, K, s.wt);
  for (int p0 = 0; p0 < total; p0 += tp) {
    const int p1 = std::min(total, p0 + tp), n = p1 - p0;
    im2col(g, in, p0, p1, s.col.data());
    kernels::gemm_nt(g.cout, K, n, dout + p0, total, s.col.data(), n, dw, K);
    if (din != nullptr) {
      std::fill(s.col.begin(), s.col.begin() + static_cast<long>(K) * n, T(0));
      kernels::gemm_nn(K, n, g.cout, s.wt.data(), g.cout, dout + p0, total, s.col.data(), n);
      col2im(g, s.col.data(), p0, p1, din);
    }
  }
}

// Transposed convolution as the adjoint of the conv described by g, which
// maps the fine grid (cin channels) onto the coarse one (cout channels).
template <class T>
void convT_forward(const Geom& g, const T* w, const T* x, T* y, Scratch<T>& s) {
  const int K = g.K(), total = g.out_px(), tp = tile_pixels(K, total);
  s.col.resize(static_cast<std::size_t>(K) * tp);
  transpose(w, g.cout, K, s.wt);
  for (int p0 = 0; p0 < total; p0 += tp) {
    const int p1 = std::min(total, p0 + tp), n = p1 - p0;
    std::fill(s.col.begin(), s.col.begin() + static_cast<long>(K) * n, T(0));
    kernels::gemm_nn(K, n, g.cout, s.wt.data(), g.cout, x + p0, total, s.col.data(), n);
    col2im(g, s.col.data(), p0, p1, y);
  }
}

template <class T>
void convT_backward(const Geom& g, const T* w, const T* x, const T* dy, T* dw, T* dx, Scratch<T>& s) {
  const int K = g.K(), total = g.out_px(), tp = tile_pixels(K, total);
  s.col.resize(static_cast<std::size_t>(K) * tp);
  for (int p0 = 0; p0 < total; p0 += tp) {
    const int p1 = std::min(total, p0 + tp), n = p1 - p0;
    im2col(g, dy, p0, p1, s.col.data());
    kernels::gemm_nn(g.cout, n, K, w, K, s.col.data(), n, dx + p0, total);
    kernels::gemm_nt(g.cout, K, n, x + p0, total, s.col.data(), n, dw, K);
  }
}

// ---------------------------------------------------------------------------
// Normalization + PReLU

constexpr double kNormEpsilon = 1e-5;

template <class T>
struct Stage {
  std::vector<T> xhat;
  std::vector<double> inv_std;
  std::vector<T> pre;
  std::vector<T> out;
};

struct StageIdx {
  int b, g, s, a;
};

template <class T>
class Engine {
 public:
  explicit Engine(const ModelParams<T>& p) : p_(p), L_(make_layout(p.config)) {
    if (p.tensors.size() != L_.specs.size()) throw Error("model parameters do not match the configuration");
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
      std::size_t n = 1;
      for (int d : L_.specs[i].shape) n *= static_cast<std::size_t>(d);
      if (p.tensors[i].size() != n) throw Error("parameter '" + L_.specs[i].name + "' has the wrong size");
    }
  }

  struct BlockCache {
    const T* in = nullptr;
    Geom g1{}, g2{};
    Stage<T> s1, s2;
    std::vector<T> out;
  };

  struct SampleCache {
    int h = 0, w = 0;
    const T* input = nullptr;
    std::vector<BlockCache> enc, dec;
    std::vector<Stage<T>> up;
    std::vector<Geom> up_geom;
    std::vector<std::vector<T>> cat;
  };

  // logits [out_channels x h*w]
  std::vector<T> forward_sample(const T* x, int h, int w, SampleCache& c, bool keep) {
    const int levels = p_.config.levels();
    c.h = h;
    c.w = w;
    c.input = x;
    c.enc.assign(levels, {});
    c.dec.assign(levels - 1, {});
    c.up.assign(levels - 1, {});
    c.up_geom.assign(levels - 1, {});
    c.cat.assign(levels - 1, {});

    const T* cur = x;
    int ch = h, cw = w;
    for (int l = 0; l < levels; ++l) {
      block_forward(L_.enc[l], cur, ch, cw, c.enc[l], keep);
      cur = c.enc[l].out.data();
      ch = c.enc[l].g1.oh;
      cw = c.enc[l].g1.ow;
    }
    for (int l = levels - 2; l >= 0; --l) {
      const UpIdx& u = L_.up[l];
      const Geom& below = c.enc[l].g1;
      const int fh = below.oh, fw = below.ow;
      // Conv from the fine grid (fh x fw, u.cout channels) down to the coarse one.
      Geom g{u.cout, u.cin, 3, 2, 1, fh, fw, ch, cw};
      if ((fh - 1) / 2 + 1 != ch || (fw - 1) / 2 + 1 != cw) throw Error("internal: level size mismatch");
      c.up_geom[l] = g;
      std::vector<T> y(static_cast<std::size_t>(u.cout) * fh * fw, T(0));
      convT_forward(g, param(u.w), cur, y.data(), scratch_);
      stage_forward({u.b, u.g, u.s, u.a}, u.cout, fh * fw, y, c.up[l], keep);
      const std::size_t half = static_cast<std::size_t>(u.cout) * fh * fw;
      c.cat[l].resize(2 * half);
      std::copy(c.up[l].out.begin(), c.up[l].out.end(), c.cat[l].begin());
      std::copy(c.enc[l].out.begin(), c.enc[l].out.end(), c.cat[l].begin() + static_cast<long>(half));
      if (!keep) {
        c.up[l] = {};
        if (l + 1 < levels - 1) c.dec[l + 1] = {};
        if (l + 1 == levels - 1) c.enc[l + 1].out = {};
      }
      block_forward(L_.dec[l], c.cat[l].data(), fh, fw, c.dec[l], keep);
      if (!keep) {
        c.cat[l] = {};
        c.enc[l].out = {};
      }
      cur = c.dec[l].out.data();
      ch = fh;
      cw = fw;
    }
    const int px = h * w;
    const int oc = p_.config.out_channels;
    const int c0 = p_.config.level_channels[0];
    std::vector<T> logits(static_cast<std::size_t>(oc) * px);
    const T* hb = param(L_.head_b);
    for (int o = 0; o < oc; ++o) std::fill_n(logits.begin() + static_cast<long>(o) * px, px, hb[o]);
    kernels::gemm_nn(oc, px, c0, param(L_.head_w), c0, cur, px, logits.data(), px);
    return logits;
  }

  void backward_sample(SampleCache& c, const std::vector<T>& dlogits, std::vector<Tensor<T>>& grads) {
    const int levels = p_.config.levels();
    const int px = c.h * c.w;
    const int oc = p_.config.out_channels;
    const int c0 = p_.config.level_channels[0];
    grads_ = &grads;

    const std::vector<T>& d0 = c.dec[0].out;
    kernels::gemm_nt(oc, c0, px, dlogits.data(), px, d0.data(), px, grad(L_.head_w), c0);
    T* dhb = grad(L_.head_b);
    for (int o = 0; o < oc; ++o) {
      double s = 0;
      for (int i = 0; i < px; ++i) s += dlogits[static_cast<std::size_t>(o) * px + i];
      dhb[o] += static_cast<T>(s);
    }
    std::vector<T> wt;
    transpose(param(L_.head_w), oc, c0, wt);
    std::vector<T> dd(static_cast<std::size_t>(c0) * px, T(0));
    kernels::gemm_nn(c0, px, oc, wt.data(), oc, dlogits.data(), px, dd.data(), px);

    std::vector<std::vector<T>> denc(levels);
    for (int l = 0; l < levels; ++l) denc[l].assign(c.enc[l].out.size(), T(0));

    for (int l = 0; l <= levels - 2; ++l) {
      std::vector<T> dcat(c.cat[l].size(), T(0));
      block_backward(L_.dec[l], c.dec[l], dd, dcat.data());
      const std::size_t half = dcat.size() / 2;
      std::vector<T> du(dcat.begin(), dcat.begin() + static_cast<long>(half));
      for (std::size_t i = 0; i < half; ++i) denc[l][i] += dcat[half + i];
      const UpIdx& u = L_.up[l];
      const Geom& g = c.up_geom[l];
      std::vector<T> dz(half);
      stage_backward({u.b, u.g, u.s, u.a}, u.cout, g.in_px(), c.up[l], du, dz);
      const T* x = (l + 1 == levels - 1) ? c.enc[levels - 1].out.data() : c.dec[l + 1].out.data();
      std::vector<T> dx(static_cast<std::size_t>(u.cin) * g.out_px(), T(0));
      convT_backward(g, param(u.w), x, dz.data(), grad(u.w), dx.data(), scratch_);
      dd = std::move(dx);
    }
    for (std::size_t i = 0; i < dd.size(); ++i) denc[levels - 1][i] += dd[i];

    for (int l = levels - 1; l >= 0; --l) {
      block_backward(L_.enc[l], c.enc[l], denc[l], l > 0 ? denc[l - 1].data() : nullptr);
    }
    grads_ = nullptr;
  }

 private:
  const T* param(int idx) const { return p_.tensors[idx].values.data(); }
  T* grad(int idx) { return (*grads_)[idx].values.data(); }

  void stage_forward(StageIdx idx, int ch, int px, std::vector<T>& z, Stage<T>& st, bool keep) {
    const bool norm = p_.config.norm == NormKind::Instance;
    const T slope = param(idx.a)[0];
    st.out.resize(z.size());
    if (keep) {
      st.pre.resize(z.size());
      if (norm) {
        st.xhat.resize(z.size());
        st.inv_std.resize(ch);
      }
    }
    for (int c = 0; c < ch; ++c) {
      T* zc = z.data() + static_cast<long>(c) * px;
      T* oc = st.out.data() + static_cast<long>(c) * px;
      if (norm) {
        double sum, sumsq;
        kernels::sum_sumsq(zc, px, &sum, &sumsq);
        const double mean = sum / px;
        const double var = std::max(sumsq / px - mean * mean, 0.0);
        const double inv = 1.0 / std::sqrt(var + kNormEpsilon);
        const T gamma = param(idx.g)[c], beta = param(idx.s)[c];
        const T m = static_cast<T>(mean), is = static_cast<T>(inv);
        if (keep) {
          st.inv_std[c] = inv;
          T* xh = st.xhat.data() + static_cast<long>(c) * px;
          T* pr = st.pre.data() + static_cast<long>(c) * px;
          for (int i = 0; i < px; ++i) {
            const T v = (zc[i] - m) * is;
            xh[i] = v;
            const T n = gamma * v + beta;
            pr[i] = n;
            oc[i] = n > T(0) ? n : slope * n;
          }
        } else {
          for (int i = 0; i < px; ++i) {
            const T n = gamma * ((zc[i] - m) * is) + beta;
            oc[i] = n > T(0) ? n : slope * n;
          }
        }
      } else {
        const T bias = param(idx.b)[c];
        T* pr = keep ? st.pre.data() + static_cast<long>(c) * px : nullptr;
        for (int i = 0; i < px; ++i) {
          const T n = zc[i] + bias;
          if (pr != nullptr) pr[i] = n;
          oc[i] = n > T(0) ? n : slope * n;
        }
      }
    }
  }

  // dout: gradient w.r.t. stage output; dz receives the gradient w.r.t. the conv output.
  void stage_backward(StageIdx idx, int ch, int px, const Stage<T>& st, const std::vector<T>& dout,
                      std::vector<T>& dz) {
    const bool norm = p_.config.norm == NormKind::Instance;
    const T slope = param(idx.a)[0];
    dz.resize(dout.size());
    double dslope = 0.0;
    for (int c = 0; c < ch; ++c) {
      const long off = static_cast<long>(c) * px;
      const T* pr = st.pre.data() + off;
      const T* go = dout.data() + off;
      T* gz = dz.data() + off;
      // gz temporarily holds d(pre)
      for (int i = 0; i < px; ++i) {
        if (pr[i] > T(0)) {
          gz[i] = go[i];
        } else {
          gz[i] = slope * go[i];
          dslope += static_cast<double>(go[i]) * pr[i];
        }
      }
      if (norm) {
        const T* xh = st.xhat.data() + off;
        const T gamma = param(idx.g)[c];
        double sum_dpre = 0.0, sum_dpre_xhat = 0.0;
        for (int i = 0; i < px; ++i) {
          sum_dpre += gz[i];
          sum_dpre_xhat += static_cast<double>(gz[i]) * xh[i];
        }
        grad(idx.g)[c] += static_cast<T>(sum_dpre_xhat);
        grad(idx.s)[c] += static_cast<T>(sum_dpre);
        // d(xhat) = gamma * d(pre)
        const double inv = st.inv_std[c];
        const double mean_dx = gamma * sum_dpre / px;
        const double mean_dx_xhat = gamma * sum_dpre_xhat / px;
        for (int i = 0; i < px; ++i) {
          gz[i] = static_cast<T>(inv * (gamma * static_cast<double>(gz[i]) - mean_dx - xh[i] * mean_dx_xhat));
        }
      } else {
        double s = 0.0;
        for (int i = 0; i < px; ++i) s += gz[i];
        grad(idx.b)[c] += static_cast<T>(s);
      }
    }
    grad(idx.a)[0] += static_cast<T>(dslope);
  }

  void block_forward(const BlockIdx& b, const T* in, int ih, int iw, BlockCache& bc, bool keep) {
    bc.in = in;
    bc.g1 = conv3x3(b.cin, b.cout, b.stride, ih, iw);
    bc.g2 = conv3x3(b.cout, b.cout, 1, bc.g1.oh, bc.g1.ow);
    const int px = bc.g1.out_px();
    std::vector<T> z(static_cast<std::size_t>(b.cout) * px, T(0));
    conv_forward(bc.g1, param(b.w1), in, z.data(), scratch_);
    stage_forward({b.b1, b.g1, b.s1, b.a1}, b.cout, px, z, bc.s1, keep);
    std::fill(z.begin(), z.end(), T(0));
    conv_forward(bc.g2, param(b.w2), bc.s1.out.data(), z.data(), scratch_);
    stage_forward({b.b2, b.g2, b.s2, b.a2}, b.cout, px, z, bc.s2, keep);
    bc.out.resize(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) bc.out[i] = bc.s1.out[i] + bc.s2.out[i];
    if (!keep) {
      bc.s1 = {};
      bc.s2 = {};
    }
  }

  void block_backward(const BlockIdx& b, BlockCache& bc, const std::vector<T>& dout, T* din) {
    const int px = bc.g1.out_px();
    std::vector<T> dz;
    stage_backward({b.b2, b.g2, b.s2, b.a2}, b.cout, px, bc.s2, dout, dz);
    std::vector<T> ds1 = dout;  // residual path
    conv_backward(bc.g2, param(b.w2), bc.s1.out.data(), dz.data(), grad(b.w2), ds1.data(), scratch_);
    stage_backward({b.b1, b.g1, b.s1, b.a1}, b.cout, px, bc.s1, ds1, dz);
    conv_backward(bc.g1, param(b.w1), bc.in, dz.data(), grad(b.w1), din, scratch_);
  }

  const ModelParams<T>& p_;
  Layout L_;
  Scratch<T> scratch_;
  std::vector<Tensor<T>>* grads_ = nullptr;
};

void check_input(const UNetConfig& cfg, const std::vector<int>& shape) {
  if (shape.size() != 4) throw Error("network input must be [B, C, H, W]");
  if (shape[1] != cfg.in_channels) {
    throw Error("network input has " + std::to_string(shape[1]) + " channels, expected " +
                std::to_string(cfg.in_channels));
  }
  const int d = cfg.size_divisor();
  if (shape[2] <= 0 || shape[3] <= 0 || shape[2] % d != 0 || shape[3] % d != 0) {
    throw Error("spatial size " + std::to_string(shape[2]) + "x" + std::to_string(shape[3]) +
                " is not divisible by " + std::to_string(d));
  }
}

template <class T>
bool all_finite(const std::vector<T>& v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

}  // namespace

// ---------------------------------------------------------------------------
// Public API

std::vector<ParamSpec> parameter_layout(const UNetConfig& config) { return make_layout(config).specs; }

template <class T>
ModelParams<T> init_model(const UNetConfig& config, std::uint64_t seed) {
  ModelParams<T> p;
  p.config = config;
  std::mt19937_64 rng(seed);
  for (const auto& spec : parameter_layout(config)) {
    Tensor<T> t(spec.shape);
    switch (spec.kind) {
      case ParamKind::ConvWeight:
      case ParamKind::TransposedConvWeight: {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / spec.fan_in));
        for (auto& v : t.values) v = static_cast<T>(dist(rng));
        break;
      }
      case ParamKind::NormScale: std::fill(t.values.begin(), t.values.end(), T(1)); break;
      case ParamKind::PReLUSlope: std::fill(t.values.begin(), t.values.end(), T(0.25)); break;
      case ParamKind::Bias:
      case ParamKind::NormShift: break;
    }
    p.tensors.push_back(std::move(t));
  }
  return p;
}

template <class T>
ModelParams<T> zero_model(const UNetConfig& config) {
  ModelParams<T> p;
  p.config = config;
  for (const auto& spec : parameter_layout(config)) {
    Tensor<T> t(spec.shape);
    if (spec.kind == ParamKind::NormScale) std::fill(t.values.begin(), t.values.end(), T(1));
    if (spec.kind == ParamKind::PReLUSlope) std::fill(t.values.begin(), t.values.end(), T(0.25));
    p.tensors.push_back(std::move(t));
  }
  return p;
}

template <class To, class From>
ModelParams<To> cast_model(const ModelParams<From>& params) {
  ModelParams<To> out;
  out.config = params.config;
  for (const auto& t : params.tensors) {
    Tensor<To> c(t.shape);
    std::transform(t.values.begin(), t.values.end(), c.values.begin(), [](From v) { return static_cast<To>(v); });
    out.tensors.push_back(std::move(c));
  }
  return out;
}

template <class T>
Tensor<T> forward(const ModelParams<T>& params, const Tensor<T>& input) {
  check_input(params.config, input.shape);
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int oc = params.config.out_channels;
  Tensor<T> out({B, oc, H, W});
  Engine<T> engine(params);
  for (int b = 0; b < B; ++b) {
    typename Engine<T>::SampleCache cache;
    auto logits = engine.forward_sample(input.values.data() + static_cast<std::size_t>(b) * C * H * W, H, W, cache,
                                        false);
    std::copy(logits.begin(), logits.end(), out.values.begin() + static_cast<long>(b) * oc * H * W);
  }
  return out;
}

template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  if (logits.shape.size() != 4) throw Error("softmax_channels expects [B, C, H, W]");
  const int B = logits.dim(0), C = logits.dim(1);
  const std::size_t px = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  Tensor<T> out(logits.shape);
  std::vector<double> e(C);
  for (int b = 0; b < B; ++b) {
    const T* z = logits.values.data() + static_cast<std::size_t>(b) * C * px;
    T* p = out.values.data() + static_cast<std::size_t>(b) * C * px;
    for (std::size_t i = 0; i < px; ++i) {
      double m = z[i];
      for (int c = 1; c < C; ++c) m = std::max(m, static_cast<double>(z[c * px + i]));
      double s = 0.0;
      for (int c = 0; c < C; ++c) {
        e[c] = std::exp(static_cast<double>(z[c * px + i]) - m);
        s += e[c];
      }
      for (int c = 0; c < C; ++c) p[c * px + i] = static_cast<T>(e[c] / s);
    }
  }
  return out;
}

template <class T>
double dice_loss_grad(const Tensor<T>& probs, std::span<const std::uint8_t> labels,
                      std::span<const std::uint8_t> soi, Tensor<T>* dprobs) {
  if (probs.shape.size() != 4 || probs.dim(1) < kNumClasses) throw Error("dice_loss expects [B, >=6, H, W]");
  const int B = probs.dim(0), C = probs.dim(1);
  const std::size_t px = static_cast<std::size_t>(probs.dim(2)) * probs.dim(3);
  if (labels.size() != B * px || soi.size() != B * px) throw Error("dice_loss: label/SOI size mismatch");

  std::array<double, kNumClasses> inter{}, psq{}, gsum{};
  std::size_t counted = 0;
  for (int b = 0; b < B; ++b) {
    const T* p = probs.values.data() + static_cast<std::size_t>(b) * C * px;
    for (std::size_t i = 0; i < px; ++i) {
      const std::size_t li = b * px + i;
      const std::uint8_t g = labels[li];
      if (soi[li] == 0 || g == kSentinel) continue;
      if (g >= kNumClasses) throw Error("dice_loss: label " + std::to_string(g) + " is not a class index");
      ++counted;
      for (int c = 0; c < kNumClasses; ++c) {
        const double v = p[c * px + i];
        psq[c] += v * v;
      }
      inter[g] += p[g * px + i];
      gsum[g] += 1.0;
    }
  }
  if (counted == 0) throw Error("dice_loss: no SOI-covered labeled pixels in the batch");

  double mean_dice = 0.0;
  std::array<double, kNumClasses> num{}, den{};
  for (int c = 0; c < kNumClasses; ++c) {
    num[c] = 2.0 * inter[c] + kDiceEpsilon;
    den[c] = psq[c] + gsum[c] + kDiceEpsilon;
    mean_dice += num[c] / den[c];
  }
  mean_dice /= kNumClasses;
  const double loss = 1.0 - mean_dice;

  if (dprobs != nullptr) {
    *dprobs = Tensor<T>(probs.shape);
    std::array<double, kNumClasses> a{}, bcoef{};
    for (int c = 0; c < kNumClasses; ++c) {
      // dL/dp = -(1/6) * (2 g den - num 2 p) / den^2
      a[c] = -2.0 / (kNumClasses * den[c]);
      bcoef[c] = 2.0 * num[c] / (kNumClasses * den[c] * den[c]);
    }
    for (int b = 0; b < B; ++b) {
      const T* p = probs.values.data() + static_cast<std::size_t>(b) * C * px;
      T* d = dprobs->values.data() + static_cast<std::size_t>(b) * C * px;
      for (std::size_t i = 0; i < px; ++i) {
        const std::size_t li = b * px + i;
        const std::uint8_t g = labels[li];
        if (soi[li] == 0 || g == kSentinel) continue;
        for (int c = 0; c < kNumClasses; ++c) {
          d[c * px + i] = static_cast<T>(bcoef[c] * p[c * px + i] + (c == g ? a[c] : 0.0));
        }
      }
    }
  }
  return loss;
}

template <class T>
double dice_loss(const Tensor<T>& probs, std::span<const std::uint8_t> labels, std::span<const std::uint8_t> soi) {
  return dice_loss_grad<T>(probs, labels, soi, nullptr);
}

template <class T>
Gradients<T> backward(const ModelParams<T>& params, const Tensor<T>& input, std::span<const std::uint8_t> labels,
                      std::span<const std::uint8_t> soi) {
  check_input(params.config, input.shape);
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int oc = params.config.out_channels;
  const std::size_t px = static_cast<std::size_t>(H) * W;
  Engine<T> engine(params);

  // Keep per-sample activations; the Dice sums couple the whole batch.
  std::vector<typename Engine<T>::SampleCache> caches(B);
  Tensor<T> logits({B, oc, H, W});
  for (int b = 0; b < B; ++b) {
    auto l = engine.forward_sample(input.values.data() + b * C * px, H, W, caches[b], true);
    std::copy(l.begin(), l.end(), logits.values.begin() + static_cast<long>(b) * oc * px);
  }
  Gradients<T> out;
  out.probabilities = softmax_channels(logits);
  Tensor<T> dprobs;
  out.loss = dice_loss_grad(out.probabilities, labels, soi, &dprobs);
  if (!std::isfinite(out.loss)) throw NumericalError("non-finite loss");

  for (const auto& spec : parameter_layout(params.config)) out.grads.emplace_back(spec.shape);
  std::vector<T> dlogits(static_cast<std::size_t>(oc) * px);
  for (int b = 0; b < B; ++b) {
    const T* p = out.probabilities.values.data() + b * oc * px;
    const T* dp = dprobs.values.data() + b * oc * px;
    for (std::size_t i = 0; i < px; ++i) {
      double dot = 0.0;
      for (int c = 0; c < oc; ++c) dot += static_cast<double>(p[c * px + i]) * dp[c * px + i];
      for (int c = 0; c < oc; ++c) {
        dlogits[c * px + i] = static_cast<T>(p[c * px + i] * (dp[c * px + i] - dot));
      }
    }
    engine.backward_sample(caches[b], dlogits, out.grads);
    caches[b] = {};
  }
  for (const auto& g : out.grads) {
    if (!all_finite(g.values)) throw NumericalError("non-finite gradient");
  }
  return out;
}

#define THINSEG_INSTANTIATE(T)                                                                                      \
  template struct Tensor<T>;                                                                                        \
  template struct ModelParams<T>;                                                                                   \
  template ModelParams<T> init_model<T>(const UNetConfig&, std::uint64_t);                                          \
  template ModelParams<T> zero_model<T>(const UNetConfig&);                                                         \
  template Tensor<T> forward<T>(const ModelParams<T>&, const Tensor<T>&);                                           \
  template Tensor<T> softmax_channels<T>(const Tensor<T>&);                                                         \
  template double dice_loss<T>(const Tensor<T>&, std::span<const std::uint8_t>, std::span<const std::uint8_t>);     \
  template double dice_loss_grad<T>(const Tensor<T>&, std::span<const std::uint8_t>,                               \
                                    std::span<const std::uint8_t>, Tensor<T>*);                                     \
  template Gradients<T> backward<T>(const ModelParams<T>&, const Tensor<T>&, std::span<const std::uint8_t>,         \
                                    std::span<const std::uint8_t>);

THINSEG_INSTANTIATE(float)
THINSEG_INSTANTIATE(double)
#undef THINSEG_INSTANTIATE

template Tensor<std::uint8_t>::Tensor(std::vector<int>, std::uint8_t);
template ModelParams<float> cast_model<float, double>(const ModelParams<double>&);
template ModelParams<double> cast_model<double, float>(const ModelParams<float>&);
template ModelParams<float> cast_model<float, float>(const ModelParams<float>&);
template ModelParams<double> cast_model<double, double>(const ModelParams<double>&);

}  // namespace thinseg
