#pragma once

// Loop-based reference forward pass of the residual U-Net. Written directly
// from the architecture description with no shared code from the library
// beyond parameter_layout() for tensor ordering.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "thinseg/network.hpp"

namespace oracle {

using Image = std::vector<std::vector<std::vector<double>>>;  // [c][y][x]

inline Image zeros(int c, int h, int w) { return Image(c, std::vector<std::vector<double>>(h, std::vector<double>(w, 0.0))); }

class NaiveUNet {
 public:
  explicit NaiveUNet(const thinseg::ModelParams<double>& p) : cfg_(p.config) {
    auto specs = thinseg::parameter_layout(p.config);
    for (std::size_t i = 0; i < specs.size(); ++i) t_[specs[i].name] = p.tensors[i].values;
  }

  // x[c][y][x] -> logits
  Image forward(const Image& x) const {
    const int L = cfg_.levels();
    std::vector<Image> enc;
    Image cur = x;
    for (int l = 0; l < L; ++l) {
      cur = block("enc" + std::to_string(l), cur, l == 0 ? 1 : 2);
      enc.push_back(cur);
    }
    for (int l = L - 2; l >= 0; --l) {
      const std::string p = "up" + std::to_string(l);
      Image u = conv_transpose(cur, t_.at(p + ".convT.weight"), cfg_.level_channels[l]);
      u = norm_act(u, p, "");
      Image cat = u;
      cat.insert(cat.end(), enc[l].begin(), enc[l].end());
      cur = block("dec" + std::to_string(l), cat, 1);
    }
    const int oc = cfg_.out_channels, c0 = cfg_.level_channels[0];
    const auto& w = t_.at("head.weight");
    const auto& b = t_.at("head.bias");
    const int h = static_cast<int>(cur[0].size()), wd = static_cast<int>(cur[0][0].size());
    Image out = zeros(oc, h, wd);
    for (int o = 0; o < oc; ++o) {
      for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < wd; ++xx) {
          double s = b[o];
          for (int c = 0; c < c0; ++c) s += w[o * c0 + c] * cur[c][y][xx];
          out[o][y][xx] = s;
        }
      }
    }
    return out;
  }

 private:
  Image block(const std::string& p, const Image& in, int stride) const {
    const auto& w1 = t_.at(p + ".conv1.weight");
    const int cout = static_cast<int>(w1.size()) / (static_cast<int>(in.size()) * 9);
    Image a1 = norm_act(conv(in, w1, cout, stride, bias(p + ".conv1.bias")), p, "1");
    Image a2 = norm_act(conv(a1, t_.at(p + ".conv2.weight"), cout, 1, bias(p + ".conv2.bias")), p, "2");
    for (int c = 0; c < cout; ++c) {
      for (std::size_t y = 0; y < a1[c].size(); ++y) {
        for (std::size_t x = 0; x < a1[c][y].size(); ++x) a2[c][y][x] += a1[c][y][x];
      }
    }
    return a2;
  }

  const std::vector<double>* bias(const std::string& name) const {
    auto it = t_.find(name);
    return it == t_.end() ? nullptr : &it->second;
  }

  // Zero padding 1, 3x3 kernel; w[o][i][ky][kx].
  static Image conv(const Image& in, const std::vector<double>& w, int cout, int stride,
                    const std::vector<double>* b) {
    const int cin = static_cast<int>(in.size());
    const int ih = static_cast<int>(in[0].size()), iw = static_cast<int>(in[0][0].size());
    const int oh = (ih - 1) / stride + 1, ow = (iw - 1) / stride + 1;
    Image out = zeros(cout, oh, ow);
    for (int o = 0; o < cout; ++o) {
      for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
          double s = b ? (*b)[o] : 0.0;
          for (int i = 0; i < cin; ++i) {
            for (int ky = 0; ky < 3; ++ky) {
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = y * stride - 1 + ky, ix = x * stride - 1 + kx;
                if (iy < 0 || iy >= ih || ix < 0 || ix >= iw) continue;
                s += w[((o * cin + i) * 3 + ky) * 3 + kx] * in[i][iy][ix];
              }
            }
          }
          out[o][y][x] = s;
        }
      }
    }
    return out;
  }

  // Stride-2 transposed conv (padding 1, output padding 1); w[i][o][ky][kx].
  // Input pixel (y, x) scatters into output (2y - 1 + ky, 2x - 1 + kx).
  static Image conv_transpose(const Image& in, const std::vector<double>& w, int cout) {
    const int cin = static_cast<int>(in.size());
    const int ih = static_cast<int>(in[0].size()), iw = static_cast<int>(in[0][0].size());
    Image out = zeros(cout, 2 * ih, 2 * iw);
    for (int i = 0; i < cin; ++i) {
      for (int y = 0; y < ih; ++y) {
        for (int x = 0; x < iw; ++x) {
          for (int o = 0; o < cout; ++o) {
            for (int ky = 0; ky < 3; ++ky) {
              for (int kx = 0; kx < 3; ++kx) {
                const int oy = 2 * y - 1 + ky, ox = 2 * x - 1 + kx;
                if (oy < 0 || oy >= 2 * ih || ox < 0 || ox >= 2 * iw) continue;
                out[o][oy][ox] += w[((i * cout + o) * 3 + ky) * 3 + kx] * in[i][y][x];
              }
            }
          }
        }
      }
    }
    return out;
  }

  Image norm_act(Image z, const std::string& p, const std::string& tag) const {
    const bool inorm = cfg_.norm == thinseg::NormKind::Instance;
    if (!inorm && tag.empty()) {
      const auto& b = t_.at(p + ".conv.bias");
      for (std::size_t c = 0; c < z.size(); ++c) {
        for (auto& row : z[c]) {
          for (auto& v : row) v += b[c];
        }
      }
    }
    const double a = t_.at(p + ".act" + tag + ".slope")[0];
    for (std::size_t c = 0; c < z.size(); ++c) {
      if (inorm) {
        double n = 0, mean = 0, var = 0;
        for (auto& row : z[c]) {
          for (double v : row) {
            mean += v;
            ++n;
          }
        }
        mean /= n;
        for (auto& row : z[c]) {
          for (double v : row) var += (v - mean) * (v - mean);
        }
        var /= n;
        const double g = t_.at(p + ".norm" + tag + ".scale")[c];
        const double s = t_.at(p + ".norm" + tag + ".shift")[c];
        for (auto& row : z[c]) {
          for (auto& v : row) v = g * (v - mean) / std::sqrt(var + 1e-5) + s;
        }
      }
      for (auto& row : z[c]) {
        for (auto& v : row) v = v > 0 ? v : a * v;
      }
    }
    return z;
  }

  thinseg::UNetConfig cfg_;
  std::map<std::string, std::vector<double>> t_;
};

}  // namespace oracle
