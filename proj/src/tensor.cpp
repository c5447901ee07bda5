#include "tfd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace tfd {

std::string Shape::str() const {
  return "(" + std::to_string(b) + "," + std::to_string(h) + "," + std::to_string(w) + "," +
         std::to_string(c) + ")";
}

ShapeError::ShapeError(std::string axis, const std::string& message)
    : std::runtime_error("shape error on axis '" + axis + "': " + message),
      axis_(std::move(axis)) {}

Tensor::Tensor(const Shape& s, bool requires_grad) {
  if (s.b <= 0 || s.h <= 0 || s.w <= 0 || s.c <= 0) {
    throw ShapeError("batch", "all dims must be positive, got " + s.str());
  }
  node_ = std::make_shared<detail::TensorNode>();
  node_->shape = s;
  node_->data.assign(static_cast<std::size_t>(s.numel()), 0.0);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& s) { return Tensor(s); }

Tensor Tensor::full(const Shape& s, double value) {
  Tensor t(s);
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

Tensor Tensor::from(const Shape& s, std::vector<double> values) {
  Tensor t(s);
  if (static_cast<std::int64_t>(values.size()) != s.numel()) {
    throw ShapeError("batch", "value count " + std::to_string(values.size()) +
                                  " does not match shape " + s.str());
  }
  t.node_->data = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value) { return full(Shape{1, 1, 1, 1}, value); }

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("batch", "item() requires a single-element tensor, shape is " + shape().str());
  }
  return node_->data[0];
}

std::vector<double>& Tensor::grad() {
  if (node_->grad.empty()) {
    node_->grad.assign(node_->data.size(), 0.0);
  }
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }
}

Tensor Tensor::clone() const {
  Tensor t(shape());
  t.node_->data = node_->data;
  return t;
}

namespace {
thread_local GradTape* g_active_tape = nullptr;
}

GradTape::Scope::Scope(GradTape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
GradTape::Scope::~Scope() { g_active_tape = previous_; }

GradTape::Pause::Pause() : previous_(g_active_tape) { g_active_tape = nullptr; }
GradTape::Pause::~Pause() { g_active_tape = previous_; }

GradTape* GradTape::current() { return g_active_tape; }

void GradTape::record(const Tensor& output, std::function<void(const std::vector<double>&)> backward) {
  records_.push_back(Record{output.node(), std::move(backward)});
}

void GradTape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("batch", "backward() expects a scalar loss, shape is " + loss.shape().str());
  }
  Tensor seed = loss;
  seed.grad()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // branch without gradient flow
    it->backward(it->output->grad);
  }
}

namespace {

bool want_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

struct ConvDims {
  int oh = 0, ow = 0;     // output spatial
  int pt = 0, pl = 0;     // top/left padding
};

ConvDims conv_dims(const Shape& in, const Shape& k, int stride, Padding padding) {
  ConvDims d;
  if (padding == Padding::Same) {
    d.oh = (in.h + stride - 1) / stride;
    d.ow = (in.w + stride - 1) / stride;
    const int pad_h = std::max((d.oh - 1) * stride + k.b - in.h, 0);
    const int pad_w = std::max((d.ow - 1) * stride + k.h - in.w, 0);
    d.pt = pad_h / 2;
    d.pl = pad_w / 2;
  } else {
    if (in.h < k.b) throw ShapeError("height", "valid conv needs input height >= kernel height");
    if (in.w < k.h) throw ShapeError("width", "valid conv needs input width >= kernel width");
    d.oh = (in.h - k.b) / stride + 1;
    d.ow = (in.w - k.h) / stride + 1;
  }
  return d;
}

void conv2d_forward(const double* in, const Shape& is, const double* kernel, const Shape& ks,
                    const double* bias, double* out, const Shape& os, int stride, const ConvDims& d) {
  const int KH = ks.b, KW = ks.h, CI = ks.w, CO = ks.c;
  for (int b = 0; b < is.b; ++b) {
    for (int oy = 0; oy < os.h; ++oy) {
      for (int ox = 0; ox < os.w; ++ox) {
        double* out_px = out + (((static_cast<std::int64_t>(b) * os.h + oy) * os.w) + ox) * CO;
        for (int co = 0; co < CO; ++co) out_px[co] = bias[co];
        for (int ky = 0; ky < KH; ++ky) {
          const int iy = oy * stride + ky - d.pt;
          if (iy < 0 || iy >= is.h) continue;
          for (int kx = 0; kx < KW; ++kx) {
            const int ix = ox * stride + kx - d.pl;
            if (ix < 0 || ix >= is.w) continue;
            const double* in_px = in + (((static_cast<std::int64_t>(b) * is.h + iy) * is.w) + ix) * CI;
            const double* k_px = kernel + ((static_cast<std::int64_t>(ky) * KW + kx) * CI) * CO;
            for (int ci = 0; ci < CI; ++ci) {
              const double v = in_px[ci];
              const double* k_row = k_px + static_cast<std::int64_t>(ci) * CO;
              for (int co = 0; co < CO; ++co) out_px[co] += v * k_row[co];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              Padding padding) {
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const Shape is = input.shape();
  const Shape ks = kernel.shape();
  if (ks.w != is.c) {
    throw ShapeError("channels", "kernel cin " + std::to_string(ks.w) +
                                     " does not match input channels " + std::to_string(is.c));
  }
  const Shape bs = bias.shape();
  if (bs.b != 1 || bs.h != 1 || bs.w != 1 || bs.c != ks.c) {
    throw ShapeError("channels", "bias shape " + bs.str() + " must be (1,1,1," +
                                     std::to_string(ks.c) + ")");
  }
  const ConvDims d = conv_dims(is, ks, stride, padding);
  Tensor out(Shape{is.b, d.oh, d.ow, ks.c});
  conv2d_forward(input.data(), is, kernel.data(), ks, bias.data(), out.data(), out.shape(), stride, d);

  if (want_record({&input, &kernel, &bias})) {
    out.set_requires_grad(true);
    Tensor in_t = input, k_t = kernel, b_t = bias;
    const bool gi = input.requires_grad(), gk = kernel.requires_grad(), gb = bias.requires_grad();
    const Shape os = out.shape();
    GradTape::current()->record(out, [=](const std::vector<double>& go) mutable {
      const int KH = ks.b, KW = ks.h, CI = ks.w, CO = ks.c;
      double* din = gi ? in_t.grad().data() : nullptr;
      double* dk = gk ? k_t.grad().data() : nullptr;
      double* db = gb ? b_t.grad().data() : nullptr;
      const double* in = in_t.data();
      const double* kn = k_t.data();
      for (int b = 0; b < is.b; ++b) {
        for (int oy = 0; oy < os.h; ++oy) {
          for (int ox = 0; ox < os.w; ++ox) {
            const double* g_px = go.data() + (((static_cast<std::int64_t>(b) * os.h + oy) * os.w) + ox) * CO;
            if (db) {
              for (int co = 0; co < CO; ++co) db[co] += g_px[co];
            }
            for (int ky = 0; ky < KH; ++ky) {
              const int iy = oy * stride + ky - d.pt;
              if (iy < 0 || iy >= is.h) continue;
              for (int kx = 0; kx < KW; ++kx) {
                const int ix = ox * stride + kx - d.pl;
                if (ix < 0 || ix >= is.w) continue;
                const std::int64_t in_off = (((static_cast<std::int64_t>(b) * is.h + iy) * is.w) + ix) * CI;
                const std::int64_t k_off = ((static_cast<std::int64_t>(ky) * KW + kx) * CI) * CO;
                for (int ci = 0; ci < CI; ++ci) {
                  const double v = in[in_off + ci];
                  const double* k_row = kn + k_off + static_cast<std::int64_t>(ci) * CO;
                  double acc = 0.0;
                  if (dk) {
                    double* dk_row = dk + k_off + static_cast<std::int64_t>(ci) * CO;
                    for (int co = 0; co < CO; ++co) {
                      acc += k_row[co] * g_px[co];
                      dk_row[co] += v * g_px[co];
                    }
                  } else {
                    for (int co = 0; co < CO; ++co) acc += k_row[co] * g_px[co];
                  }
                  if (din) din[in_off + ci] += acc;
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& input) {
  Tensor out(input.shape());
  const double* in = input.data();
  double* o = out.data();
  const std::int64_t n = input.numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;

  if (want_record({&input})) {
    out.set_requires_grad(true);
    Tensor in_t = input;
    GradTape::current()->record(out, [=](const std::vector<double>& go) mutable {
      double* din = in_t.grad().data();
      const double* x = in_t.data();
      for (std::int64_t i = 0; i < n; ++i) {
        if (x[i] > 0.0) din[i] += go[i];  // subgradient at 0 is 0
      }
    });
  }
  return out;
}

Tensor maxpool2(const Tensor& input) {
  const Shape is = input.shape();
  if (is.h % 2 != 0) throw ShapeError("height", "maxpool2 needs even height, got " + std::to_string(is.h));
  if (is.w % 2 != 0) throw ShapeError("width", "maxpool2 needs even width, got " + std::to_string(is.w));
  const Shape os{is.b, is.h / 2, is.w / 2, is.c};
  Tensor out(os);
  const double* in = input.data();
  double* o = out.data();
  for (int b = 0; b < is.b; ++b) {
    for (int oy = 0; oy < os.h; ++oy) {
      for (int ox = 0; ox < os.w; ++ox) {
        double* out_px = o + (((static_cast<std::int64_t>(b) * os.h + oy) * os.w) + ox) * is.c;
        for (int c = 0; c < is.c; ++c) {
          double best = -std::numeric_limits<double>::infinity();
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const double v = in[(((static_cast<std::int64_t>(b) * is.h + 2 * oy + dy) * is.w) +
                                   (2 * ox + dx)) * is.c + c];
              if (v > best) best = v;
            }
          }
          out_px[c] = best;
        }
      }
    }
  }

  if (want_record({&input})) {
    out.set_requires_grad(true);
    Tensor in_t = input;
    GradTape::current()->record(out, [=](const std::vector<double>& go) mutable {
      double* din = in_t.grad().data();
      const double* x = in_t.data();
      for (int b = 0; b < os.b; ++b) {
        for (int oy = 0; oy < os.h; ++oy) {
          for (int ox = 0; ox < os.w; ++ox) {
            const std::int64_t g_off = (((static_cast<std::int64_t>(b) * os.h + oy) * os.w) + ox) * is.c;
            for (int c = 0; c < is.c; ++c) {
              // first occurrence in (dy, dx) scan order wins on ties
              double best = -std::numeric_limits<double>::infinity();
              std::int64_t best_idx = -1;
              for (int dy = 0; dy < 2; ++dy) {
                for (int dx = 0; dx < 2; ++dx) {
                  const std::int64_t idx = (((static_cast<std::int64_t>(b) * is.h + 2 * oy + dy) * is.w) +
                                            (2 * ox + dx)) * is.c + c;
                  if (x[idx] > best) {
                    best = x[idx];
                    best_idx = idx;
                  }
                }
              }
              din[best_idx] += go[g_off + c];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor upsample_nearest2(const Tensor& input) {
  const Shape is = input.shape();
  const Shape os{is.b, is.h * 2, is.w * 2, is.c};
  Tensor out(os);
  const double* in = input.data();
  double* o = out.data();
  for (int b = 0; b < is.b; ++b) {
    for (int y = 0; y < os.h; ++y) {
      for (int x = 0; x < os.w; ++x) {
        const double* in_px = in + (((static_cast<std::int64_t>(b) * is.h + y / 2) * is.w) + x / 2) * is.c;
        double* out_px = o + (((static_cast<std::int64_t>(b) * os.h + y) * os.w) + x) * is.c;
        for (int c = 0; c < is.c; ++c) out_px[c] = in_px[c];
      }
    }
  }

  if (want_record({&input})) {
    out.set_requires_grad(true);
    Tensor in_t = input;
    GradTape::current()->record(out, [=](const std::vector<double>& go) mutable {
      double* din = in_t.grad().data();
      for (int b = 0; b < os.b; ++b) {
        for (int y = 0; y < os.h; ++y) {
          for (int x = 0; x < os.w; ++x) {
            const std::int64_t g_off = (((static_cast<std::int64_t>(b) * os.h + y) * os.w) + x) * is.c;
            const std::int64_t i_off = (((static_cast<std::int64_t>(b) * is.h + y / 2) * is.w) + x / 2) * is.c;
            for (int c = 0; c < is.c; ++c) din[i_off + c] += go[g_off + c];
          }
        }
      }
    });
  }
  return out;
}

Tensor concat_channels(const std::vector<Tensor>& inputs) {
  if (inputs.empty()) throw std::invalid_argument("concat_channels: empty input list");
  const Shape first = inputs[0].shape();
  int total_c = 0;
  for (const Tensor& t : inputs) {
    const Shape s = t.shape();
    if (s.b != first.b) throw ShapeError("batch", "concat inputs disagree: " + s.str() + " vs " + first.str());
    if (s.h != first.h) throw ShapeError("height", "concat inputs disagree: " + s.str() + " vs " + first.str());
    if (s.w != first.w) throw ShapeError("width", "concat inputs disagree: " + s.str() + " vs " + first.str());
    total_c += s.c;
  }
  const Shape os{first.b, first.h, first.w, total_c};
  Tensor out(os);
  double* o = out.data();
  const std::int64_t pixels = static_cast<std::int64_t>(first.b) * first.h * first.w;
  for (std::int64_t p = 0; p < pixels; ++p) {
    double* out_px = o + p * total_c;
    int off = 0;
    for (const Tensor& t : inputs) {
      const int c = t.shape().c;
      const double* in_px = t.data() + p * c;
      for (int i = 0; i < c; ++i) out_px[off + i] = in_px[i];
      off += c;
    }
  }

  bool any_grad = false;
  for (const Tensor& t : inputs) any_grad = any_grad || t.requires_grad();
  if (GradTape::current() != nullptr && any_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor> ins = inputs;
    GradTape::current()->record(out, [=](const std::vector<double>& go) mutable {
      for (std::int64_t p = 0; p < pixels; ++p) {
        const double* g_px = go.data() + p * total_c;
        int off = 0;
        for (Tensor& t : ins) {
          const int c = t.shape().c;
          if (t.requires_grad()) {
            double* din = t.grad().data() + p * c;
            for (int i = 0; i < c; ++i) din[i] += g_px[off + i];
          }
          off += c;
        }
      }
    });
  }
  return out;
}

Tensor gather_channel(const std::vector<Tensor>& inputs, int channel) {
  if (inputs.empty()) throw std::invalid_argument("gather_channel: empty input list");
  const Shape first = inputs[0].shape();
  for (const Tensor& t : inputs) {
    if (!(t.shape() == first)) {
      throw ShapeError("channels", "gather_channel inputs must share a shape, got " +
                                       t.shape().str() + " vs " + first.str());
    }
  }
  if (channel < 0 || channel >= first.c) {
    throw ShapeError("channels", "gather_channel: channel " + std::to_string(channel) +
                                     " out of range [0," + std::to_string(first.c) + ")");
  }
  const int m = static_cast<int>(inputs.size());
  const Shape os{first.b, first.h, first.w, m};
  Tensor out(os);
  double* o = out.data();
  const std::int64_t pixels = static_cast<std::int64_t>(first.b) * first.h * first.w;
  for (std::int64_t p = 0; p < pixels; ++p) {
    double* out_px = o + p * m;
    for (int j = 0; j < m; ++j) out_px[j] = inputs[j].data()[p * first.c + channel];
  }

  bool any_grad = false;
  for (const Tensor& t : inputs) any_grad = any_grad || t.requires_grad();
  if (GradTape::current() != nullptr && any_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor> ins = inputs;
    GradTape::current()->record(out, [=](const std::vector<double>& go) mutable {
      for (int j = 0; j < m; ++j) {
        if (!ins[j].requires_grad()) continue;
        double* din = ins[j].grad().data();
        for (std::int64_t p = 0; p < pixels; ++p) {
          din[p * first.c + channel] += go[p * m + j];
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("channels", "add needs matching shapes, got " + a.shape().str() + " vs " +
                                     b.shape().str());
  }
  Tensor out(a.shape());
  const std::int64_t n = a.numel();
  const double* pa = a.data();
  const double* pb = b.data();
  double* o = out.data();
  for (std::int64_t i = 0; i < n; ++i) o[i] = pa[i] + pb[i];

  if (want_record({&a, &b})) {
    out.set_requires_grad(true);
    Tensor at = a, bt = b;
    GradTape::current()->record(out, [=](const std::vector<double>& go) mutable {
      if (at.requires_grad()) {
        double* da = at.grad().data();
        for (std::int64_t i = 0; i < n; ++i) da[i] += go[i];
      }
      if (bt.requires_grad()) {
        double* db = bt.grad().data();
        for (std::int64_t i = 0; i < n; ++i) db[i] += go[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("channels", "mul needs matching shapes, got " + a.shape().str() + " vs " +
                                     b.shape().str());
  }
  Tensor out(a.shape());
  const std::int64_t n = a.numel();
  const double* pa = a.data();
  const double* pb = b.data();
  double* o = out.data();
  for (std::int64_t i = 0; i < n; ++i) o[i] = pa[i] * pb[i];

  if (want_record({&a, &b})) {
    out.set_requires_grad(true);
    Tensor at = a, bt = b;
    GradTape::current()->record(out, [=](const std::vector<double>& go) mutable {
      if (at.requires_grad()) {
        double* da = at.grad().data();
        const double* vb = bt.data();
        for (std::int64_t i = 0; i < n; ++i) da[i] += go[i] * vb[i];
      }
      if (bt.requires_grad()) {
        double* db = bt.grad().data();
        const double* va = at.data();
        for (std::int64_t i = 0; i < n; ++i) db[i] += go[i] * va[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& input, double factor) {
  Tensor out(input.shape());
  const std::int64_t n = input.numel();
  const double* in = input.data();
  double* o = out.data();
  for (std::int64_t i = 0; i < n; ++i) o[i] = in[i] * factor;

  if (want_record({&input})) {
    out.set_requires_grad(true);
    Tensor in_t = input;
    GradTape::current()->record(out, [=](const std::vector<double>& go) mutable {
      double* din = in_t.grad().data();
      for (std::int64_t i = 0; i < n; ++i) din[i] += go[i] * factor;
    });
  }
  return out;
}

Tensor reduce_sum(const Tensor& input) {
  double total = 0.0;
  const std::int64_t n = input.numel();
  const double* in = input.data();
  for (std::int64_t i = 0; i < n; ++i) total += in[i];
  Tensor out = Tensor::scalar(total);

  if (want_record({&input})) {
    out.set_requires_grad(true);
    Tensor in_t = input;
    GradTape::current()->record(out, [=](const std::vector<double>& go) mutable {
      double* din = in_t.grad().data();
      for (std::int64_t i = 0; i < n; ++i) din[i] += go[0];
    });
  }
  return out;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps,
                  int max_coords) {
  Tensor xg = x.clone();
  xg.set_requires_grad(true);
  std::vector<double> analytic;
  {
    GradTape tape;
    GradTape::Scope scope(tape);
    Tensor y = f(xg);
    if (y.numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
    tape.backward(y);
    analytic = xg.has_grad() ? xg.grad() : std::vector<double>(static_cast<std::size_t>(x.numel()), 0.0);
  }

  std::vector<std::int64_t> coords;
  const std::int64_t n = x.numel();
  if (max_coords > 0 && n > max_coords) {
    std::vector<std::int64_t> all(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
    std::mt19937_64 g(12345);
    for (int i = 0; i < max_coords; ++i) {
      const std::int64_t j = i + static_cast<std::int64_t>(g() % static_cast<std::uint64_t>(n - i));
      std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
      coords.push_back(all[static_cast<std::size_t>(i)]);
    }
  } else {
    for (std::int64_t i = 0; i < n; ++i) coords.push_back(i);
  }

  GradTape::Pause pause;
  double worst = 0.0;
  for (std::int64_t i : coords) {
    Tensor xp = x.clone();
    xp.data()[i] += eps;
    Tensor xm = x.clone();
    xm.data()[i] -= eps;
    const double numeric = (f(xp).item() - f(xm).item()) / (2.0 * eps);
    const double a = analytic[static_cast<std::size_t>(i)];
    const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace tfd
