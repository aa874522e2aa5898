#include "hsi/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>

#include <json.hpp>

#include "hsi/binary_io.hpp"
#include "hsi/error.hpp"

namespace hsi::nn {

namespace {

constexpr std::uint16_t kNetworkVersion = 1;

/// y[0..n) += a * x[0..n)
inline void axpy(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void resize(Tensor4& t, std::size_t n, Shape3 s) {
  t.n = n;
  t.h = s.h;
  t.w = s.w;
  t.c = s.c;
  t.v.assign(n * s.size(), 0.0);
}

// ---------------------------------------------------------------------------

/// Learnable 1x1 linear map across channels, no bias (zero pixels stay zero).
class ChannelCompress final : public Layer {
 public:
  ChannelCompress(std::size_t in_c, std::size_t out_c) : in_c_(in_c), out_c_(out_c) {
    if (out_c == 0) throw DomainError("channel-compress needs at least one output channel");
    params_.assign(in_c * out_c, 0.0);
    grads_.assign(params_.size(), 0.0);
  }
  LayerKind kind() const override { return LayerKind::channel_compress; }
  Shape3 output_shape(Shape3 in) const override { return {in.h, in.w, out_c_}; }

  // Contiguous channel groups, each averaged into one output channel.
  void initialize(Rng&) override {
    std::fill(params_.begin(), params_.end(), 0.0);
    std::vector<std::size_t> group_size(out_c_, 0);
    for (std::size_t c = 0; c < in_c_; ++c) ++group_size[c * out_c_ / in_c_];
    for (std::size_t c = 0; c < in_c_; ++c) {
      const std::size_t j = c * out_c_ / in_c_;
      params_[c * out_c_ + j] = 1.0 / static_cast<double>(group_size[j]);
    }
  }

  void forward(const Tensor4& in, Tensor4& out, Mode) override {
    resize(out, in.n, output_shape(in.shape()));
    const std::size_t pixels = in.n * in.h * in.w;
    for (std::size_t p = 0; p < pixels; ++p) {
      const double* x = in.v.data() + p * in_c_;
      double* y = out.v.data() + p * out_c_;
      for (std::size_t c = 0; c < in_c_; ++c) {
        if (x[c] != 0.0) axpy(x[c], params_.data() + c * out_c_, y, out_c_);
      }
    }
  }

  void backward(const Tensor4& in, const Tensor4&, const Tensor4& gout, Tensor4* gin, bool param_grads) override {
    const std::size_t pixels = in.n * in.h * in.w;
    if (gin) resize(*gin, in.n, in.shape());
    for (std::size_t p = 0; p < pixels; ++p) {
      const double* x = in.v.data() + p * in_c_;
      const double* g = gout.v.data() + p * out_c_;
      if (param_grads) {
        for (std::size_t c = 0; c < in_c_; ++c) {
          if (x[c] != 0.0) axpy(x[c], g, grads_.data() + c * out_c_, out_c_);
        }
      }
      if (gin) {
        double* gi = gin->v.data() + p * in_c_;
        for (std::size_t c = 0; c < in_c_; ++c) {
          const double* wr = params_.data() + c * out_c_;
          double s = 0.0;
          for (std::size_t j = 0; j < out_c_; ++j) s += wr[j] * g[j];
          gi[c] = s;
        }
      }
    }
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ChannelCompress>(*this); }

 private:
  std::size_t in_c_, out_c_;
};

/// Square kernel, zero "same" padding; weights laid out [ky][kx][ci][co], then bias[co].
class Conv2d final : public Layer {
 public:
  Conv2d(Shape3 in, std::size_t out_c, std::size_t kernel, std::size_t stride)
      : in_c_(in.c), out_c_(out_c), k_(kernel), stride_(stride) {
    if (kernel % 2 == 0 || kernel == 0) throw DomainError("conv2d kernel must be odd");
    if (stride == 0 || out_c == 0) throw DomainError("conv2d needs positive stride and features");
    params_.assign(k_ * k_ * in_c_ * out_c_ + out_c_, 0.0);
    grads_.assign(params_.size(), 0.0);
  }
  LayerKind kind() const override { return LayerKind::conv2d; }
  Shape3 output_shape(Shape3 in) const override {
    return {(in.h + stride_ - 1) / stride_, (in.w + stride_ - 1) / stride_, out_c_};
  }
  void initialize(Rng& rng) override {
    const double limit = std::sqrt(6.0 / static_cast<double>(k_ * k_ * in_c_));
    const std::size_t nw = k_ * k_ * in_c_ * out_c_;
    for (std::size_t i = 0; i < nw; ++i) params_[i] = rng.uniform(-limit, limit);
    std::fill(params_.begin() + static_cast<std::ptrdiff_t>(nw), params_.end(), 0.0);
  }

  void forward(const Tensor4& in, Tensor4& out, Mode) override {
    const Shape3 os = output_shape(in.shape());
    resize(out, in.n, os);
    const double* bias = params_.data() + k_ * k_ * in_c_ * out_c_;
    const auto pad = static_cast<std::ptrdiff_t>(k_ / 2);
    for (std::size_t n = 0; n < in.n; ++n) {
      for (std::size_t y = 0; y < os.h; ++y) {
        for (std::size_t x = 0; x < os.w; ++x) {
          double* o = out.pixel(n, y, x);
          std::copy(bias, bias + out_c_, o);
          for (std::size_t ky = 0; ky < k_; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(y * stride_ + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
            for (std::size_t kx = 0; kx < k_; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(x * stride_ + kx) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
              const double* ip = in.pixel(n, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
              const double* wp = params_.data() + (ky * k_ + kx) * in_c_ * out_c_;
              for (std::size_t ci = 0; ci < in_c_; ++ci) {
                if (ip[ci] != 0.0) axpy(ip[ci], wp + ci * out_c_, o, out_c_);
              }
            }
          }
        }
      }
    }
  }

  void backward(const Tensor4& in, const Tensor4& out, const Tensor4& gout, Tensor4* gin, bool param_grads) override {
    const std::size_t nw = k_ * k_ * in_c_ * out_c_;
    double* gbias = grads_.data() + nw;
    const auto pad = static_cast<std::ptrdiff_t>(k_ / 2);
    // Transposed weights [ky][kx][co][ci] turn the input gradient into axpys.
    std::vector<double> wt;
    if (gin) {
      resize(*gin, in.n, in.shape());
      wt.resize(nw);
      for (std::size_t kk = 0; kk < k_ * k_; ++kk) {
        for (std::size_t ci = 0; ci < in_c_; ++ci) {
          for (std::size_t co = 0; co < out_c_; ++co) {
            wt[(kk * out_c_ + co) * in_c_ + ci] = params_[(kk * in_c_ + ci) * out_c_ + co];
          }
        }
      }
    }
    for (std::size_t n = 0; n < in.n; ++n) {
      for (std::size_t y = 0; y < out.h; ++y) {
        for (std::size_t x = 0; x < out.w; ++x) {
          const double* g = gout.pixel(n, y, x);
          if (param_grads) axpy(1.0, g, gbias, out_c_);
          for (std::size_t ky = 0; ky < k_; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(y * stride_ + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
            for (std::size_t kx = 0; kx < k_; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(x * stride_ + kx) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
              const auto uy = static_cast<std::size_t>(iy), ux = static_cast<std::size_t>(ix);
              const std::size_t kk = ky * k_ + kx;
              if (param_grads) {
                const double* ip = in.pixel(n, uy, ux);
                double* gw = grads_.data() + kk * in_c_ * out_c_;
                for (std::size_t ci = 0; ci < in_c_; ++ci) {
                  if (ip[ci] != 0.0) axpy(ip[ci], g, gw + ci * out_c_, out_c_);
                }
              }
              if (gin) {
                double* gi = gin->pixel(n, uy, ux);
                const double* wk = wt.data() + kk * out_c_ * in_c_;
                for (std::size_t co = 0; co < out_c_; ++co) {
                  if (g[co] != 0.0) axpy(g[co], wk + co * in_c_, gi, in_c_);
                }
              }
            }
          }
        }
      }
    }
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

 private:
  std::size_t in_c_, out_c_, k_, stride_;
};

class MaxPool final : public Layer {
 public:
  MaxPool(std::size_t window, std::size_t stride) : k_(window), stride_(stride) {
    if (window == 0 || stride == 0) throw DomainError("maxpool needs positive window and stride");
  }
  LayerKind kind() const override { return LayerKind::maxpool; }
  Shape3 output_shape(Shape3 in) const override {
    if (in.h < k_ || in.w < k_) throw ShapeError("maxpool window larger than input");
    return {(in.h - k_) / stride_ + 1, (in.w - k_) / stride_ + 1, in.c};
  }
  void forward(const Tensor4& in, Tensor4& out, Mode) override {
    const Shape3 os = output_shape(in.shape());
    resize(out, in.n, os);
    argmax_.assign(out.size(), 0);
    for (std::size_t n = 0; n < in.n; ++n) {
      for (std::size_t y = 0; y < os.h; ++y) {
        for (std::size_t x = 0; x < os.w; ++x) {
          double* o = out.pixel(n, y, x);
          std::size_t* am = argmax_.data() + (o - out.v.data());
          for (std::size_t ch = 0; ch < in.c; ++ch) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t where = 0;
            for (std::size_t dy = 0; dy < k_; ++dy) {
              for (std::size_t dx = 0; dx < k_; ++dx) {
                const double* ip = in.pixel(n, y * stride_ + dy, x * stride_ + dx);
                // First maximum wins, so each window routes to one input.
                if (ip[ch] > best) {
                  best = ip[ch];
                  where = static_cast<std::size_t>(ip + ch - in.v.data());
                }
              }
            }
            o[ch] = best;
            am[ch] = where;
          }
        }
      }
    }
  }
  void backward(const Tensor4& in, const Tensor4&, const Tensor4& gout, Tensor4* gin, bool) override {
    if (!gin) return;
    resize(*gin, in.n, in.shape());
    for (std::size_t i = 0; i < gout.size(); ++i) gin->v[argmax_[i]] += gout.v[i];
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPool>(*this); }

 private:
  std::size_t k_, stride_;
  std::vector<std::size_t> argmax_;
};

/// Per-channel batch normalization. params = [gamma | beta],
/// state = [running mean | running var].
class BatchNorm final : public Layer {
 public:
  explicit BatchNorm(std::size_t channels) : c_(channels) {
    params_.assign(2 * c_, 0.0);
    std::fill(params_.begin(), params_.begin() + static_cast<std::ptrdiff_t>(c_), 1.0);
    grads_.assign(2 * c_, 0.0);
    state_.assign(2 * c_, 0.0);
    std::fill(state_.begin() + static_cast<std::ptrdiff_t>(c_), state_.end(), 1.0);
  }
  LayerKind kind() const override { return LayerKind::batchnorm; }
  Shape3 output_shape(Shape3 in) const override { return in; }
  void initialize(Rng&) override {
    std::fill(params_.begin(), params_.begin() + static_cast<std::ptrdiff_t>(c_), 1.0);
    std::fill(params_.begin() + static_cast<std::ptrdiff_t>(c_), params_.end(), 0.0);
    std::fill(state_.begin(), state_.begin() + static_cast<std::ptrdiff_t>(c_), 0.0);
    std::fill(state_.begin() + static_cast<std::ptrdiff_t>(c_), state_.end(), 1.0);
  }

  void forward(const Tensor4& in, Tensor4& out, Mode mode) override {
    resize(out, in.n, in.shape());
    const std::size_t pixels = in.n * in.h * in.w;
    mode_ = mode;
    mean_.assign(c_, 0.0);
    inv_std_.assign(c_, 0.0);
    if (mode == Mode::train) {
      if (in.n < 2) throw DomainError("batchnorm in training mode needs a batch of at least 2");
      std::vector<double> var(c_, 0.0);
      for (std::size_t p = 0; p < pixels; ++p) axpy(1.0, in.v.data() + p * c_, mean_.data(), c_);
      for (auto& m : mean_) m /= static_cast<double>(pixels);
      for (std::size_t p = 0; p < pixels; ++p) {
        const double* x = in.v.data() + p * c_;
        for (std::size_t ch = 0; ch < c_; ++ch) var[ch] += (x[ch] - mean_[ch]) * (x[ch] - mean_[ch]);
      }
      for (std::size_t ch = 0; ch < c_; ++ch) {
        const double biased = var[ch] / static_cast<double>(pixels);
        inv_std_[ch] = 1.0 / std::sqrt(biased + kEps);
        const double unbiased = var[ch] / static_cast<double>(pixels - 1);
        state_[ch] = (1.0 - kMomentum) * state_[ch] + kMomentum * mean_[ch];
        state_[c_ + ch] = (1.0 - kMomentum) * state_[c_ + ch] + kMomentum * unbiased;
      }
    } else {
      for (std::size_t ch = 0; ch < c_; ++ch) {
        mean_[ch] = state_[ch];
        inv_std_[ch] = 1.0 / std::sqrt(state_[c_ + ch] + kEps);
      }
    }
    const double* gamma = params_.data();
    const double* beta = params_.data() + c_;
    for (std::size_t p = 0; p < pixels; ++p) {
      const double* x = in.v.data() + p * c_;
      double* y = out.v.data() + p * c_;
      for (std::size_t ch = 0; ch < c_; ++ch) y[ch] = gamma[ch] * (x[ch] - mean_[ch]) * inv_std_[ch] + beta[ch];
    }
  }

  void backward(const Tensor4& in, const Tensor4&, const Tensor4& gout, Tensor4* gin, bool param_grads) override {
    const std::size_t pixels = in.n * in.h * in.w;
    const double* gamma = params_.data();
    std::vector<double> sum_g(c_, 0.0), sum_gx(c_, 0.0);
    for (std::size_t p = 0; p < pixels; ++p) {
      const double* x = in.v.data() + p * c_;
      const double* g = gout.v.data() + p * c_;
      for (std::size_t ch = 0; ch < c_; ++ch) {
        const double xhat = (x[ch] - mean_[ch]) * inv_std_[ch];
        sum_g[ch] += g[ch];
        sum_gx[ch] += g[ch] * xhat;
      }
    }
    if (param_grads) {
      for (std::size_t ch = 0; ch < c_; ++ch) {
        grads_[ch] += sum_gx[ch];
        grads_[c_ + ch] += sum_g[ch];
      }
    }
    if (!gin) return;
    resize(*gin, in.n, in.shape());
    const double m = static_cast<double>(pixels);
    for (std::size_t p = 0; p < pixels; ++p) {
      const double* x = in.v.data() + p * c_;
      const double* g = gout.v.data() + p * c_;
      double* gi = gin->v.data() + p * c_;
      for (std::size_t ch = 0; ch < c_; ++ch) {
        if (mode_ == Mode::train) {
          const double xhat = (x[ch] - mean_[ch]) * inv_std_[ch];
          gi[ch] = gamma[ch] * inv_std_[ch] * (g[ch] - sum_g[ch] / m - xhat * sum_gx[ch] / m);
        } else {
          gi[ch] = gamma[ch] * inv_std_[ch] * g[ch];
        }
      }
    }
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm>(*this); }

 private:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;
  std::size_t c_;
  Mode mode_ = Mode::eval;
  std::vector<double> mean_, inv_std_;
};

class Relu final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::relu; }
  Shape3 output_shape(Shape3 in) const override { return in; }
  void forward(const Tensor4& in, Tensor4& out, Mode) override {
    resize(out, in.n, in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) out.v[i] = in.v[i] > 0.0 ? in.v[i] : 0.0;
  }
  void backward(const Tensor4& in, const Tensor4&, const Tensor4& gout, Tensor4* gin, bool) override {
    if (!gin) return;
    resize(*gin, in.n, in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) gin->v[i] = in.v[i] > 0.0 ? gout.v[i] : 0.0;
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }
};

class GlobalAvgPool final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::global_avg_pool; }
  Shape3 output_shape(Shape3 in) const override { return {1, 1, in.c}; }
  void forward(const Tensor4& in, Tensor4& out, Mode) override {
    resize(out, in.n, output_shape(in.shape()));
    const double inv = 1.0 / static_cast<double>(in.h * in.w);
    for (std::size_t n = 0; n < in.n; ++n) {
      double* o = out.pixel(n, 0, 0);
      for (std::size_t p = 0; p < in.h * in.w; ++p) axpy(1.0, in.v.data() + (n * in.h * in.w + p) * in.c, o, in.c);
      for (std::size_t ch = 0; ch < in.c; ++ch) o[ch] *= inv;
    }
  }
  void backward(const Tensor4& in, const Tensor4&, const Tensor4& gout, Tensor4* gin, bool) override {
    if (!gin) return;
    resize(*gin, in.n, in.shape());
    const double inv = 1.0 / static_cast<double>(in.h * in.w);
    for (std::size_t n = 0; n < in.n; ++n) {
      const double* g = gout.pixel(n, 0, 0);
      for (std::size_t p = 0; p < in.h * in.w; ++p) axpy(inv, g, gin->v.data() + (n * in.h * in.w + p) * in.c, in.c);
    }
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }
};

/// Fully connected on the flattened sample; weights [in][out], then bias[out].
class Dense final : public Layer {
 public:
  Dense(std::size_t in_features, std::size_t out_features) : in_(in_features), out_(out_features) {
    if (out_features == 0) throw DomainError("dense layer needs at least one output");
    params_.assign(in_ * out_ + out_, 0.0);
    grads_.assign(params_.size(), 0.0);
  }
  LayerKind kind() const override { return LayerKind::dense; }
  Shape3 output_shape(Shape3) const override { return {1, 1, out_}; }
  void initialize(Rng& rng) override {
    const double limit = std::sqrt(6.0 / static_cast<double>(in_));
    for (std::size_t i = 0; i < in_ * out_; ++i) params_[i] = rng.uniform(-limit, limit);
    std::fill(params_.begin() + static_cast<std::ptrdiff_t>(in_ * out_), params_.end(), 0.0);
  }
  void forward(const Tensor4& in, Tensor4& out, Mode) override {
    if (in.sample_size() != in_) throw ShapeError("dense layer input size mismatch");
    resize(out, in.n, {1, 1, out_});
    const double* bias = params_.data() + in_ * out_;
    for (std::size_t n = 0; n < in.n; ++n) {
      const double* x = in.sample(n).data();
      double* y = out.pixel(n, 0, 0);
      std::copy(bias, bias + out_, y);
      for (std::size_t i = 0; i < in_; ++i) {
        if (x[i] != 0.0) axpy(x[i], params_.data() + i * out_, y, out_);
      }
    }
  }
  void backward(const Tensor4& in, const Tensor4&, const Tensor4& gout, Tensor4* gin, bool param_grads) override {
    if (gin) resize(*gin, in.n, in.shape());
    for (std::size_t n = 0; n < in.n; ++n) {
      const double* x = in.sample(n).data();
      const double* g = gout.pixel(n, 0, 0);
      if (param_grads) {
        axpy(1.0, g, grads_.data() + in_ * out_, out_);
        for (std::size_t i = 0; i < in_; ++i) {
          if (x[i] != 0.0) axpy(x[i], g, grads_.data() + i * out_, out_);
        }
      }
      if (gin) {
        double* gi = gin->sample(n).data();
        for (std::size_t i = 0; i < in_; ++i) {
          const double* wr = params_.data() + i * out_;
          double s = 0.0;
          for (std::size_t j = 0; j < out_; ++j) s += wr[j] * g[j];
          gi[i] = s;
        }
      }
    }
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }

 private:
  std::size_t in_, out_;
};

class Softmax final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::softmax; }
  Shape3 output_shape(Shape3 in) const override { return {1, 1, in.size()}; }
  void forward(const Tensor4& in, Tensor4& out, Mode) override {
    const std::size_t k = in.sample_size();
    resize(out, in.n, {1, 1, k});
    for (std::size_t n = 0; n < in.n; ++n) {
      const auto z = in.sample(n);
      auto p = out.sample(n);
      const double mx = *std::max_element(z.begin(), z.end());
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        p[j] = std::exp(z[j] - mx);
        s += p[j];
      }
      for (auto& v : p) v /= s;
    }
  }
  void backward(const Tensor4& in, const Tensor4& out, const Tensor4& gout, Tensor4* gin, bool) override {
    if (!gin) return;
    resize(*gin, in.n, in.shape());
    const std::size_t k = in.sample_size();
    for (std::size_t n = 0; n < in.n; ++n) {
      const auto p = out.sample(n);
      const auto g = gout.sample(n);
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += g[j] * p[j];
      auto gi = gin->sample(n);
      for (std::size_t j = 0; j < k; ++j) gi[j] = p[j] * (g[j] - dot);
    }
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Softmax>(*this); }
};

double log_softmax_at(std::span<const double> z, std::size_t j) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (const double v : z) s += std::exp(v - mx);
  return z[j] - mx - std::log(s);
}

}  // namespace

bool Tensor4::all_finite() const {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::channel_compress: return "channel-compress";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::global_avg_pool: return "global-avg-pool";
    case LayerKind::dense: return "dense";
    case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (const auto k : {LayerKind::channel_compress, LayerKind::conv2d, LayerKind::maxpool, LayerKind::batchnorm,
                       LayerKind::relu, LayerKind::global_avg_pool, LayerKind::dense, LayerKind::softmax}) {
    if (name == to_string(k)) return k;
  }
  throw FormatError("unknown layer kind '" + name + "'");
}

std::optional<std::size_t> NetworkSpec::compress_to() const {
  if (!layers.empty() && layers.front().kind == LayerKind::channel_compress) return layers.front().out_features;
  return std::nullopt;
}

std::size_t NetworkSpec::classes() const {
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    if (it->kind == LayerKind::dense) return it->out_features;
  }
  return input.size();
}

NetworkSpec tissue_cnn_spec(std::size_t input_channels, std::optional<std::size_t> compress_to,
                            std::vector<std::size_t> block_features, std::size_t side, std::size_t classes) {
  NetworkSpec spec;
  spec.input = {side, side, input_channels};
  if (compress_to) spec.layers.push_back({LayerKind::channel_compress, *compress_to, 1, 1});
  for (const auto f : block_features) {
    spec.layers.push_back({LayerKind::conv2d, f, 3, 1});
    spec.layers.push_back({LayerKind::relu, 0, 0, 1});
    spec.layers.push_back({LayerKind::maxpool, 0, 2, 2});
    spec.layers.push_back({LayerKind::batchnorm, 0, 0, 1});
  }
  spec.layers.push_back({LayerKind::global_avg_pool, 0, 0, 1});
  spec.layers.push_back({LayerKind::dense, classes, 0, 1});
  spec.layers.push_back({LayerKind::softmax, 0, 0, 1});
  return spec;
}

NetworkSpec mlp_spec(std::size_t features, std::size_t hidden, std::size_t classes) {
  NetworkSpec spec;
  spec.input = {1, 1, features};
  spec.layers = {{LayerKind::dense, hidden, 0, 1},
                 {LayerKind::relu, 0, 0, 1},
                 {LayerKind::dense, classes, 0, 1},
                 {LayerKind::softmax, 0, 0, 1}};
  return spec;
}

std::unique_ptr<Layer> make_layer(const LayerSpec& spec, Shape3 in) {
  switch (spec.kind) {
    case LayerKind::channel_compress: return std::make_unique<ChannelCompress>(in.c, spec.out_features);
    case LayerKind::conv2d: return std::make_unique<Conv2d>(in, spec.out_features, spec.kernel, spec.stride);
    case LayerKind::maxpool: return std::make_unique<MaxPool>(spec.kernel, spec.stride);
    case LayerKind::batchnorm: return std::make_unique<BatchNorm>(in.c);
    case LayerKind::relu: return std::make_unique<Relu>();
    case LayerKind::global_avg_pool: return std::make_unique<GlobalAvgPool>();
    case LayerKind::dense: return std::make_unique<Dense>(in.size(), spec.out_features);
    case LayerKind::softmax: return std::make_unique<Softmax>();
  }
  throw DomainError("unknown layer kind");
}

Network::Network(NetworkSpec spec, std::uint64_t init_seed) : spec_(std::move(spec)) {
  if (spec_.layers.empty() || spec_.layers.back().kind != LayerKind::softmax) {
    throw DomainError("network spec must end with a softmax layer");
  }
  if (spec_.input.size() == 0) throw DomainError("network input shape is empty");
  Rng rng(init_seed);
  Shape3 shape = spec_.input;
  for (const auto& ls : spec_.layers) {
    auto layer = make_layer(ls, shape);
    layer->initialize(rng);
    shape = layer->output_shape(shape);
    layers_.push_back(std::move(layer));
  }
  acts_.resize(layers_.size() + 1);
}

Network::Network(const Network& other) : spec_(other.spec_), acts_(other.layers_.size() + 1) {
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Network& Network::operator=(const Network& other) {
  if (this != &other) {
    Network copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void Network::check_input(const Tensor4& x) const {
  if (x.shape() != spec_.input) {
    throw ShapeError("network expects " + std::to_string(spec_.input.h) + "x" + std::to_string(spec_.input.w) + "x" +
                     std::to_string(spec_.input.c) + " inputs, got " + std::to_string(x.h) + "x" +
                     std::to_string(x.w) + "x" + std::to_string(x.c));
  }
  if (x.n == 0) throw ShapeError("empty batch");
}

const Tensor4& Network::forward(const Tensor4& x, Mode mode) {
  check_input(x);
  acts_[0] = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->forward(acts_[i], acts_[i + 1], mode);
  return acts_.back();
}

void Network::backward_from_logits(const Tensor4& glogits, bool param_grads, Tensor4* gin) {
  Tensor4 g = glogits, next;
  const std::size_t last = layers_.size() - 1;  // softmax is skipped
  for (std::size_t i = last; i-- > 0;) {
    const bool need_input = i > 0 || gin != nullptr;
    layers_[i]->backward(acts_[i], acts_[i + 1], g, need_input ? &next : nullptr, param_grads);
    if (need_input) std::swap(g, next);
  }
  if (gin) *gin = std::move(g);
}

double Network::loss(const Tensor4& x, std::span<const int> labels, std::span<const double> class_weights,
                     Mode mode) {
  forward(x, mode);
  const Tensor4& z = logits();
  if (labels.size() != x.n) throw ShapeError("label count differs from batch size");
  double total = 0.0;
  for (std::size_t n = 0; n < x.n; ++n) {
    const auto y = static_cast<std::size_t>(labels[n]);
    if (y >= z.sample_size()) throw DomainError("label outside class range");
    const double w = class_weights.empty() ? 1.0 : class_weights[y];
    total -= w * log_softmax_at(z.sample(n), y);
  }
  return total / static_cast<double>(x.n);
}

double Network::loss_and_gradients(const Tensor4& x, std::span<const int> labels,
                                   std::span<const double> class_weights) {
  const double l = loss(x, labels, class_weights, Mode::train);
  const Tensor4& p = acts_.back();
  Tensor4 g(x.n, 1, 1, p.c);
  const double inv_n = 1.0 / static_cast<double>(x.n);
  for (std::size_t n = 0; n < x.n; ++n) {
    const auto y = static_cast<std::size_t>(labels[n]);
    const double w = class_weights.empty() ? 1.0 : class_weights[y];
    for (std::size_t j = 0; j < p.c; ++j) g.at(n, 0, 0, j) = w * inv_n * (p.at(n, 0, 0, j) - (j == y ? 1.0 : 0.0));
  }
  zero_grads();
  backward_from_logits(g, true, nullptr);
  return l;
}

Tensor4 Network::input_gradient(const Tensor4& x, std::span<const int> targets) {
  forward(x, Mode::eval);
  if (targets.size() != x.n) throw ShapeError("target count differs from batch size");
  Tensor4 g(x.n, 1, 1, logits().sample_size());
  for (std::size_t n = 0; n < x.n; ++n) g.sample(n)[static_cast<std::size_t>(targets[n])] = 1.0;
  Tensor4 gin;
  backward_from_logits(g, false, &gin);
  return gin;
}

std::size_t Network::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l->params().size();
  return n;
}

std::vector<double> Network::flat_params() const {
  std::vector<double> out;
  out.reserve(param_count());
  for (const auto& l : layers_) out.insert(out.end(), l->params().begin(), l->params().end());
  return out;
}

void Network::set_flat_params(std::span<const double> values) {
  if (values.size() != param_count()) throw ShapeError("parameter vector length mismatch");
  std::size_t off = 0;
  for (auto& l : layers_) {
    auto p = l->params();
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(off),
              values.begin() + static_cast<std::ptrdiff_t>(off + p.size()), p.begin());
    off += p.size();
  }
}

std::vector<double> Network::flat_grads() const {
  std::vector<double> out;
  for (const auto& l : layers_) out.insert(out.end(), l->grads().begin(), l->grads().end());
  return out;
}

std::vector<double> Network::flat_state() const {
  std::vector<double> out;
  for (const auto& l : layers_) out.insert(out.end(), l->state().begin(), l->state().end());
  return out;
}

void Network::set_flat_state(std::span<const double> values) {
  std::size_t total = 0;
  for (const auto& l : layers_) total += l->state().size();
  if (values.size() != total) throw ShapeError("state vector length mismatch");
  std::size_t off = 0;
  for (auto& l : layers_) {
    auto s = l->state();
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(off),
              values.begin() + static_cast<std::ptrdiff_t>(off + s.size()), s.begin());
    off += s.size();
  }
}

void Network::zero_grads() {
  for (auto& l : layers_) std::fill(l->grads().begin(), l->grads().end(), 0.0);
}

Tensor4 make_batch(std::span<const ExampleView> examples, std::span<const std::size_t> indices, Shape3 shape) {
  Tensor4 t(indices.size(), shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& ex = examples[indices[i]];
    if (ex.input.size() != shape.size()) throw ShapeError("example size does not match network input");
    std::copy(ex.input.begin(), ex.input.end(), t.sample(i).begin());
  }
  return t;
}

std::vector<std::vector<double>> predict_proba(const Network& net, std::span<const ExampleView> examples,
                                               std::size_t batch_size, Exec exec) {
  std::vector<std::vector<double>> out(examples.size());
  if (examples.empty()) return out;
  batch_size = std::max<std::size_t>(batch_size, 1);
  const auto chunks = static_cast<std::ptrdiff_t>((examples.size() + batch_size - 1) / batch_size);
#pragma omp parallel if (exec == Exec::parallel)
  {
    Network local(net);
#pragma omp for schedule(dynamic, 1)
    for (std::ptrdiff_t ci = 0; ci < chunks; ++ci) {
      const std::size_t begin = static_cast<std::size_t>(ci) * batch_size;
      const std::size_t end = std::min(examples.size(), begin + batch_size);
      std::vector<std::size_t> idx(end - begin);
      std::iota(idx.begin(), idx.end(), begin);
      const Tensor4& p = local.forward(make_batch(examples, idx, net.spec().input), Mode::eval);
      for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]].assign(p.sample(i).begin(), p.sample(i).end());
    }
  }
  return out;
}

std::vector<double> inverse_frequency_weights(std::span<const ExampleView> examples, std::size_t classes) {
  std::vector<double> counts(classes, 0.0);
  for (const auto& e : examples) {
    if (e.label < 0 || static_cast<std::size_t>(e.label) >= classes) throw DomainError("label outside class range");
    counts[static_cast<std::size_t>(e.label)] += 1.0;
  }
  std::vector<double> w(classes, 0.0);
  const double n = static_cast<double>(examples.size());
  for (std::size_t k = 0; k < classes; ++k) w[k] = counts[k] > 0.0 ? n / (static_cast<double>(classes) * counts[k]) : 0.0;
  return w;
}

namespace {

class OptimizerState {
 public:
  OptimizerState(const TrainConfig& cfg, std::size_t n) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(Network& net) {
    ++t_;
    std::size_t off = 0;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t li = 0; li < net.layer_count(); ++li) {
      auto p = net.layer(li).params();
      const auto g = net.layer(li).grads();
      for (std::size_t i = 0; i < p.size(); ++i, ++off) {
        if (cfg_.optimizer == Optimizer::adam) {
          m_[off] = b1 * m_[off] + (1.0 - b1) * g[i];
          v_[off] = b2 * v_[off] + (1.0 - b2) * g[i] * g[i];
          p[i] -= cfg_.learning_rate * (m_[off] / c1) / (std::sqrt(v_[off] / c2) + eps);
        } else {
          m_[off] = cfg_.momentum * m_[off] + g[i];
          p[i] -= cfg_.learning_rate * m_[off];
        }
      }
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

struct Accuracy {
  double loss = 0.0;
  double accuracy = 0.0;
};

Accuracy evaluate_loss(Network& net, std::span<const ExampleView> examples, std::span<const std::size_t> idx,
                       std::span<const double> weights, std::size_t batch) {
  double total = 0.0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < idx.size(); b += batch) {
    const auto chunk = idx.subspan(b, std::min(batch, idx.size() - b));
    const Tensor4 x = make_batch(examples, chunk, net.spec().input);
    std::vector<int> labels(chunk.size());
    for (std::size_t i = 0; i < chunk.size(); ++i) labels[i] = examples[chunk[i]].label;
    total += net.loss(x, labels, weights, Mode::eval) * static_cast<double>(chunk.size());
    const Tensor4& z = net.logits();
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto s = z.sample(i);
      const auto pred = static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
      correct += pred == labels[i] ? 1 : 0;
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(idx.size(), 1));
  return {total / n, static_cast<double>(correct) / n};
}

}  // namespace

TrainResult train(const NetworkSpec& spec, std::span<const ExampleView> examples, const TrainConfig& config) {
  return train(Network(spec, config.seed), examples, config);
}

TrainResult train(Network network, std::span<const ExampleView> examples, const TrainConfig& config) {
  if (examples.empty()) throw DomainError("training set is empty");
  if (config.epochs == 0 || config.batch_size == 0) throw DomainError("epochs and batch size must be positive");
  if (!(config.learning_rate >= 0.0)) throw DomainError("learning rate must be non-negative");
  if (!(config.validation_fraction >= 0.0 && config.validation_fraction < 1.0)) {
    throw DomainError("validation fraction must lie in [0, 1)");
  }
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& in = examples[i].input;
    if (!std::all_of(in.begin(), in.end(), [](double v) { return std::isfinite(v); })) {
      throw NumericError("training example " + std::to_string(i) + " has a non-finite input value");
    }
  }
  const std::uint64_t order_seed = config.shuffle_seed.value_or(config.seed);
  Rng order_rng(derive_seed(order_seed, 1));

  std::vector<std::size_t> all(examples.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> train_idx = all, val_idx;
  if (config.validation_fraction > 0.0) {
    Rng split_rng(derive_seed(order_seed, 2));
    split_rng.shuffle(std::span<std::size_t>(all));
    const auto n_val = static_cast<std::size_t>(std::llround(config.validation_fraction * static_cast<double>(all.size())));
    if (n_val > 0 && n_val < all.size()) {
      val_idx.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_val));
      train_idx.assign(all.begin() + static_cast<std::ptrdiff_t>(n_val), all.end());
      std::sort(val_idx.begin(), val_idx.end());
      std::sort(train_idx.begin(), train_idx.end());
    }
  }

  const std::size_t classes = network.classes();
  std::vector<double> weights = config.class_weights;
  if (weights.empty()) {
    std::vector<ExampleView> portion;
    for (const auto i : train_idx) portion.push_back(examples[i]);
    weights = inverse_frequency_weights(portion, classes);
  }
  if (weights.size() != classes) throw ShapeError("class weight count differs from class count");

  TrainResult result;
  OptimizerState opt(config, network.param_count());
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<double> best_params, best_state;
  const Shape3 shape = network.spec().input;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(train_idx));
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    const std::size_t n = train_idx.size();
    for (std::size_t b = 0; b < n;) {
      std::size_t end = std::min(n, b + config.batch_size);
      if (n - end == 1) end = n;  // no trailing batch of one (batchnorm)
      const std::span<const std::size_t> chunk(train_idx.data() + b, end - b);
      b = end;
      const Tensor4 x = make_batch(examples, chunk, shape);
      std::vector<int> labels(chunk.size());
      for (std::size_t i = 0; i < chunk.size(); ++i) labels[i] = examples[chunk[i]].label;
      const double l = network.loss_and_gradients(x, labels, weights);
      if (!std::isfinite(l)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + " (lr " +
                           std::to_string(config.learning_rate) + ")");
      }
      const Tensor4& z = network.logits();
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        const auto s = z.sample(i);
        correct += static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin()) == labels[i] ? 1 : 0;
      }
      loss_sum += l * static_cast<double>(chunk.size());
      seen += chunk.size();
      opt.step(network);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    if (!val_idx.empty()) {
      const auto va = evaluate_loss(network, examples, val_idx, weights, 64);
      rec.validation_loss = va.loss;
      rec.validation_accuracy = va.accuracy;
      if (!std::isfinite(va.loss)) throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
      if (va.loss < best_val) {
        best_val = va.loss;
        best_params = network.flat_params();
        best_state = network.flat_state();
        result.best_epoch = epoch;
      }
    } else {
      result.best_epoch = epoch;
    }
    result.history.push_back(rec);
  }
  if (!best_params.empty()) {
    network.set_flat_params(best_params);
    network.set_flat_state(best_state);
  }
  result.network = std::move(network);
  return result;
}

std::string spec_to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["input"] = {spec.input.h, spec.input.w, spec.input.c};
  j["layers"] = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    j["layers"].push_back(
        {{"kind", to_string(l.kind)}, {"out_features", l.out_features}, {"kernel", l.kernel}, {"stride", l.stride}});
  }
  return j.dump();
}

NetworkSpec spec_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    NetworkSpec spec;
    spec.input = {j.at("input").at(0).get<std::size_t>(), j.at("input").at(1).get<std::size_t>(),
                  j.at("input").at(2).get<std::size_t>()};
    for (const auto& l : j.at("layers")) {
      spec.layers.push_back({layer_kind_from_string(l.at("kind").get<std::string>()),
                             l.at("out_features").get<std::size_t>(), l.at("kernel").get<std::size_t>(),
                             l.at("stride").get<std::size_t>()});
    }
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid network spec: ") + e.what());
  }
}

void save_network(const Network& net, const std::filesystem::path& path, const std::string& normalization_ref) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  io::put_magic(out, "HSIN");
  io::put<std::uint16_t>(out, kNetworkVersion);
  io::put_string(out, spec_to_json(net.spec()));
  io::put_string(out, normalization_ref);
  const auto params = net.flat_params();
  const auto state = net.flat_state();
  io::put<std::uint64_t>(out, params.size());
  io::put_array<double>(out, params);
  io::put<std::uint64_t>(out, state.size());
  io::put_array<double>(out, state);
  if (!out) throw IoError("write failed: " + path.string());
}

Network load_network(const std::filesystem::path& path, std::string* normalization_ref) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  io::expect_magic(in, "HSIN");
  if (io::get<std::uint16_t>(in, "version") != kNetworkVersion) throw FormatError("unsupported network version");
  Network net(spec_from_json(io::get_string(in, "spec")), 0);
  const std::string ref = io::get_string(in, "normalization reference");
  if (normalization_ref) *normalization_ref = ref;
  const auto np = io::get<std::uint64_t>(in, "parameter count");
  if (np != net.param_count()) throw FormatError("parameter count does not match spec");
  std::vector<double> params(np);
  io::get_array<double>(in, params, "parameters");
  const auto ns = io::get<std::uint64_t>(in, "state count");
  if (ns > (1u << 24)) throw FormatError("implausible state size");
  std::vector<double> state(ns);
  io::get_array<double>(in, state, "state");
  net.set_flat_params(params);
  net.set_flat_state(state);
  return net;
}

}  // namespace hsi::nn
