#include "tfd/fusion.hpp"

#include <stdexcept>

namespace tfd {

std::string fusion_mode_name(FusionMode mode) {
  switch (mode) {
    case FusionMode::learned_fusion: return "learned_fusion";
    case FusionMode::concat_no_fusion: return "concat_no_fusion";
    case FusionMode::single_frame: return "single_frame";
  }
  return "unknown";
}

FusionMode fusion_mode_from_name(const std::string& name) {
  if (name == "learned_fusion") return FusionMode::learned_fusion;
  if (name == "concat_no_fusion") return FusionMode::concat_no_fusion;
  if (name == "single_frame") return FusionMode::single_frame;
  throw std::invalid_argument("unknown fusion mode '" + name + "'");
}

FusionSlice init_fusion(int channels, int n, FusionInit policy) {
  if (channels <= 0) throw std::invalid_argument("init_fusion: channels must be positive");
  if (n < 0) throw std::invalid_argument("init_fusion: n must be >= 0");
  const int m = 2 * n + 1;
  FusionSlice slice;
  slice.weights = Tensor::zeros(Shape{1, 1, channels, m});
  slice.bias = Tensor::zeros(Shape{1, 1, 1, channels});
  double* w = slice.weights.data();
  if (policy == FusionInit::center_one_hot) {
    for (int k = 0; k < channels; ++k) w[static_cast<std::int64_t>(k) * m + n] = 1.0;
  } else {
    const double v = 1.0 / m;
    for (std::int64_t i = 0; i < slice.weights.numel(); ++i) w[i] = v;
  }
  return slice;
}

namespace {

void check_fuse_args(const std::vector<Tensor>& maps, const FusionSlice& params) {
  if (maps.empty()) throw std::invalid_argument("fuse: empty frame list");
  const Shape s = maps[0].shape();
  for (const Tensor& m : maps) {
    if (!(m.shape() == s)) {
      throw ShapeError("channels", "fuse frames must share a shape, got " + m.shape().str() +
                                       " vs " + s.str());
    }
  }
  if (static_cast<int>(maps.size()) != params.frames()) {
    throw ShapeError("channels", "fuse: got " + std::to_string(maps.size()) +
                                     " frames, params expect " + std::to_string(params.frames()));
  }
  if (s.c != params.channels()) {
    throw ShapeError("channels", "fuse params cover " + std::to_string(params.channels()) +
                                     " channels, maps have " + std::to_string(s.c));
  }
}

}  // namespace

Tensor fuse(const std::vector<Tensor>& maps, const FusionSlice& params) {
  check_fuse_args(maps, params);
  const Shape s = maps[0].shape();
  const int c = s.c;
  const int m = static_cast<int>(maps.size());
  const std::int64_t pixels = static_cast<std::int64_t>(s.b) * s.h * s.w;

  Tensor out(s);
  double* o = out.data();
  const double* w = params.weights.data();
  const double* bias = params.bias.data();
  for (std::int64_t p = 0; p < pixels; ++p) {
    double* out_px = o + p * c;
    for (int k = 0; k < c; ++k) out_px[k] = bias[k];
    // j ascending, matching the 1x1-conv input-channel order of fuse_via_gather
    for (int j = 0; j < m; ++j) {
      const double* in_px = maps[j].data() + p * c;
      for (int k = 0; k < c; ++k) out_px[k] += w[static_cast<std::int64_t>(k) * m + j] * in_px[k];
    }
  }

  bool any_grad = params.weights.requires_grad() || params.bias.requires_grad();
  for (const Tensor& t : maps) any_grad = any_grad || t.requires_grad();
  if (GradTape::current() != nullptr && any_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor> ins = maps;
    FusionSlice ps = params;
    GradTape::current()->record(out, [=](const std::vector<double>& go) mutable {
      const double* wv = ps.weights.data();
      double* dw = ps.weights.requires_grad() ? ps.weights.grad().data() : nullptr;
      double* db = ps.bias.requires_grad() ? ps.bias.grad().data() : nullptr;
      if (db) {
        for (std::int64_t p = 0; p < pixels; ++p) {
          const double* g_px = go.data() + p * c;
          for (int k = 0; k < c; ++k) db[k] += g_px[k];
        }
      }
      for (int j = 0; j < m; ++j) {
        const double* in = ins[j].data();
        double* din = ins[j].requires_grad() ? ins[j].grad().data() : nullptr;
        for (std::int64_t p = 0; p < pixels; ++p) {
          const double* g_px = go.data() + p * c;
          for (int k = 0; k < c; ++k) {
            const std::int64_t wi = static_cast<std::int64_t>(k) * m + j;
            if (din) din[p * c + k] += wv[wi] * g_px[k];
            if (dw) dw[wi] += in[p * c + k] * g_px[k];
          }
        }
      }
    });
  }
  return out;
}

Tensor fuse_via_gather(const std::vector<Tensor>& maps, const FusionSlice& params) {
  check_fuse_args(maps, params);
  const int c = maps[0].shape().c;
  const int m = static_cast<int>(maps.size());
  const double* w = params.weights.data();
  const double* bias = params.bias.data();

  std::vector<Tensor> per_channel;
  per_channel.reserve(c);
  for (int k = 0; k < c; ++k) {
    Tensor stacked = gather_channel(maps, k);  // (b,h,w,m), temporal order
    Tensor kernel(Shape{1, 1, m, 1});
    for (int j = 0; j < m; ++j) kernel.data()[j] = w[static_cast<std::int64_t>(k) * m + j];
    Tensor b = Tensor::scalar(bias[k]);
    per_channel.push_back(conv2d(stacked, kernel, b, 1, Padding::Same));
  }
  return concat_channels(per_channel);
}

Tensor concat_variant(const std::vector<Tensor>& maps) {
  if (maps.empty()) throw std::invalid_argument("concat_variant: empty frame list");
  return concat_channels(maps);
}

}  // namespace tfd
