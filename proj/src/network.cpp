#include "mvae/network.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

namespace mvae {

namespace {

// Upper bound on im2col scratch elements; images are processed in chunks.
constexpr std::size_t kColumnBudget = std::size_t(1) << 21;

template <class T>
void im2col(const T* big, int images, const ConvGeometry& g, int channels,
            T* cols) {
  const int k = g.kernel;
  const std::size_t row_len = std::size_t(k) * k * channels;
  const std::size_t patch = std::size_t(channels);
  for (int b = 0; b < images; ++b) {
    const T* image = big + std::size_t(b) * g.big_h * g.big_w * channels;
    for (int oy = 0; oy < g.small_h; ++oy) {
      for (int ox = 0; ox < g.small_w; ++ox) {
        T* row = cols + ((std::size_t(b) * g.small_h + oy) * g.small_w + ox) * row_len;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * g.stride - g.pad_top + ky;
          T* dst = row + std::size_t(ky) * k * patch;
          if (iy < 0 || iy >= g.big_h) {
            std::fill(dst, dst + k * patch, T(0));
            continue;
          }
          for (int kx = 0; kx < k; ++kx, dst += patch) {
            const int ix = ox * g.stride - g.pad_left + kx;
            if (ix < 0 || ix >= g.big_w) {
              std::fill(dst, dst + patch, T(0));
            } else {
              std::memcpy(dst, image + (std::size_t(iy) * g.big_w + ix) * patch,
                          patch * sizeof(T));
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, int images, const ConvGeometry& g, int channels,
            T* big) {
  const int k = g.kernel;
  const std::size_t row_len = std::size_t(k) * k * channels;
  const std::size_t patch = std::size_t(channels);
  for (int b = 0; b < images; ++b) {
    T* image = big + std::size_t(b) * g.big_h * g.big_w * channels;
    for (int oy = 0; oy < g.small_h; ++oy) {
      for (int ox = 0; ox < g.small_w; ++ox) {
        const T* row =
            cols + ((std::size_t(b) * g.small_h + oy) * g.small_w + ox) * row_len;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * g.stride - g.pad_top + ky;
          if (iy < 0 || iy >= g.big_h) continue;
          const T* src = row + std::size_t(ky) * k * patch;
          for (int kx = 0; kx < k; ++kx, src += patch) {
            const int ix = ox * g.stride - g.pad_left + kx;
            if (ix < 0 || ix >= g.big_w) continue;
            T* dst = image + (std::size_t(iy) * g.big_w + ix) * patch;
            for (std::size_t c = 0; c < patch; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

int chunk_images(const ConvGeometry& g, int big_channels) {
  const std::size_t per_image = std::size_t(g.small_h) * g.small_w * g.kernel *
                                g.kernel * big_channels;
  return int(std::max<std::size_t>(1, kColumnBudget / std::max<std::size_t>(per_image, 1)));
}

template <class T>
using ConstMap = Eigen::Map<const Matrix<T>>;
template <class T>
using MutMap = Eigen::Map<Matrix<T>>;

template <class T>
ConstMap<T> view(const ParamTensor<T>& t, Eigen::Index rows, Eigen::Index cols) {
  return ConstMap<T>(t.values.data(), rows, cols);
}

template <class T>
MutMap<T> view(ParamTensor<T>& t, Eigen::Index rows, Eigen::Index cols) {
  return MutMap<T>(t.values.data(), rows, cols);
}

template <class T>
void apply_activation(Activation a, Matrix<T>& z) {
  switch (a) {
    case Activation::Relu:
      z = z.cwiseMax(T(0));
      break;
    case Activation::Sigmoid:
      z = (T(1) / (T(1) + (-z.array()).exp())).matrix();
      break;
    case Activation::Softplus:
      z = (z.array().max(T(0)) + (T(1) + (-z.array().abs()).exp()).log()).matrix();
      break;
    case Activation::Exponential:
      z = z.array().exp().matrix();
      break;
    case Activation::Linear:
      break;
  }
}

// d_out becomes d_pre in place.
template <class T>
void activation_backward(Activation a, const Matrix<T>& out, const Matrix<T>* pre,
                         Matrix<T>& d) {
  switch (a) {
    case Activation::Relu:
      d = d.cwiseProduct((out.array() > T(0)).template cast<T>().matrix());
      break;
    case Activation::Sigmoid:
      d = (d.array() * out.array() * (T(1) - out.array())).matrix();
      break;
    case Activation::Softplus:
      d = (d.array() / (T(1) + (-pre->array()).exp())).matrix();
      break;
    case Activation::Exponential:
      d = d.cwiseProduct(out);
      break;
    case Activation::Linear:
      break;
  }
}

}  // namespace

std::vector<PlannedLayer> infer_layer_shapes(const std::vector<LayerSpec>& layers,
                                             ImageShape input) {
  std::vector<PlannedLayer> plan;
  ImageShape cur = input;
  for (const auto& l : layers) {
    ImageShape out = cur;
    switch (l.kind) {
      case LayerKind::Conv:
        out = {(cur.height + l.stride - 1) / l.stride,
               (cur.width + l.stride - 1) / l.stride, l.filters};
        break;
      case LayerKind::TransposedConv:
        out = {cur.height * l.stride, cur.width * l.stride, l.filters};
        break;
      case LayerKind::Dense:
        out = {l.out_height, l.out_width, l.filters};
        break;
      case LayerKind::ConcatMask:
        out.channels = cur.channels + 1;
        break;
    }
    plan.push_back({l, cur, out});
    cur = out;
  }
  return plan;
}

ConvGeometry ConvGeometry::same(int big_h, int big_w, int kernel, int stride) {
  ConvGeometry g;
  g.big_h = big_h;
  g.big_w = big_w;
  g.kernel = kernel;
  g.stride = stride;
  g.small_h = (big_h + stride - 1) / stride;
  g.small_w = (big_w + stride - 1) / stride;
  g.pad_top = std::max((g.small_h - 1) * stride + kernel - big_h, 0) / 2;
  g.pad_left = std::max((g.small_w - 1) * stride + kernel - big_w, 0) / 2;
  return g;
}

template <class T>
std::size_t Parameters<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.values.size();
  return n;
}

template <class T>
Parameters<T> Parameters<T>::zeros_like() const {
  Parameters out;
  for (const auto& t : tensors) {
    out.tensors.push_back({t.name, t.shape, AlignedVector<T>(t.values.size(), T(0))});
  }
  return out;
}

template <class T>
const ParamTensor<T>& Parameters<T>::at(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw std::out_of_range("no parameter tensor named '" + name + "'");
}

template <class T>
ParamTensor<T>& Parameters<T>::at(const std::string& name) {
  return const_cast<ParamTensor<T>&>(std::as_const(*this).at(name));
}

template <class T>
LayerStack<T>::LayerStack(const std::string& prefix,
                          const std::vector<LayerSpec>& layers, ImageShape input,
                          bool raw_output, std::vector<ParamDescriptor>& registry)
    : plan_(infer_layer_shapes(layers, input)) {
  for (std::size_t i = 0; i < plan_.size(); ++i) {
    const auto& p = plan_[i];
    Compiled c{p, {}, -1, -1, !(raw_output && i + 1 == plan_.size())};
    const std::string name = prefix + "." + std::to_string(i) + "." + to_string(p.spec.kind);
    const auto k = std::size_t(p.spec.kernel);
    switch (p.spec.kind) {
      case LayerKind::Conv:
        c.geometry = ConvGeometry::same(p.in.height, p.in.width, p.spec.kernel,
                                        p.spec.stride);
        c.weight = int(registry.size());
        registry.push_back({name + ".weight",
                            {k, k, std::size_t(p.in.channels), std::size_t(p.out.channels)},
                            k * k * p.in.channels, k * k * p.out.channels, false});
        break;
      case LayerKind::TransposedConv: {
        c.geometry = ConvGeometry::same(p.out.height, p.out.width, p.spec.kernel,
                                        p.spec.stride);
        c.weight = int(registry.size());
        registry.push_back({name + ".weight",
                            {k, k, std::size_t(p.out.channels), std::size_t(p.in.channels)},
                            k * k * p.in.channels, k * k * p.out.channels, false});
        break;
      }
      case LayerKind::Dense:
        c.weight = int(registry.size());
        registry.push_back({name + ".weight",
                            {p.in.elements(), p.out.elements()},
                            p.in.elements(), p.out.elements(), false});
        break;
      case LayerKind::ConcatMask:
        break;
    }
    if (c.weight >= 0) {
      const std::size_t bias_len = p.spec.kind == LayerKind::Dense
                                       ? p.out.elements()
                                       : std::size_t(p.out.channels);
      c.bias = int(registry.size());
      registry.push_back({name + ".bias", {bias_len}, 0, 0, true});
    }
    layers_.push_back(c);
  }
}

template <class T>
Matrix<T> LayerStack<T>::forward(const Parameters<T>& params,
                                 const Matrix<T>& input, const Matrix<T>* mask,
                                 int batch, StackTrace<T>* trace) const {
  if (input.rows() != Eigen::Index(batch) * Eigen::Index(plan_.front().in.pixels()) ||
      input.cols() != plan_.front().in.channels) {
    throw std::invalid_argument("layer stack input has shape " +
                                std::to_string(input.rows()) + "x" +
                                std::to_string(input.cols()));
  }
  if (trace) {
    trace->batch = batch;
    trace->input = input;
    trace->out.assign(layers_.size(), {});
    trace->pre.assign(layers_.size(), {});
  }
  Matrix<T> cur = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& c = layers_[i];
    const auto& in = c.layer.in;
    const auto& out = c.layer.out;
    Matrix<T> next;
    switch (c.layer.spec.kind) {
      case LayerKind::Conv: {
        const auto& g = c.geometry;
        const Eigen::Index kkc = Eigen::Index(g.kernel) * g.kernel * in.channels;
        const auto w = view(params.tensors[c.weight], kkc, out.channels);
        const Eigen::Index small = Eigen::Index(out.pixels());
        next.resize(Eigen::Index(batch) * small, out.channels);
        const int chunk = chunk_images(g, in.channels);
        Matrix<T> cols;
        for (int b0 = 0; b0 < batch; b0 += chunk) {
          const int nb = std::min(chunk, batch - b0);
          cols.resize(nb * small, kkc);
          im2col(cur.data() + std::size_t(b0) * in.elements(), nb, g, in.channels,
                 cols.data());
          next.middleRows(b0 * small, nb * small).noalias() = cols * w;
        }
        next.rowwise() += view(params.tensors[c.bias], 1, out.channels).row(0);
        break;
      }
      case LayerKind::TransposedConv: {
        const auto& g = c.geometry;
        const Eigen::Index kkc = Eigen::Index(g.kernel) * g.kernel * out.channels;
        const auto w = view(params.tensors[c.weight], kkc, in.channels);
        const Eigen::Index small = Eigen::Index(in.pixels());
        next.setZero(Eigen::Index(batch) * out.pixels(), out.channels);
        const int chunk = chunk_images(g, out.channels);
        Matrix<T> cols;
        for (int b0 = 0; b0 < batch; b0 += chunk) {
          const int nb = std::min(chunk, batch - b0);
          cols.noalias() = cur.middleRows(b0 * small, nb * small) * w.transpose();
          col2im(cols.data(), nb, g, out.channels,
                 next.data() + std::size_t(b0) * out.elements());
        }
        next.rowwise() += view(params.tensors[c.bias], 1, out.channels).row(0);
        break;
      }
      case LayerKind::Dense: {
        const auto w = view(params.tensors[c.weight], in.elements(), out.elements());
        ConstMap<T> flat(cur.data(), batch, Eigen::Index(in.elements()));
        Matrix<T> y = flat * w;
        y.rowwise() += view(params.tensors[c.bias], 1, out.elements()).row(0);
        next = MutMap<T>(y.data(), Eigen::Index(batch) * out.pixels(), out.channels);
        break;
      }
      case LayerKind::ConcatMask: {
        if (!mask || mask->rows() != cur.rows() || mask->cols() != 1) {
          throw std::invalid_argument("concat_mask needs a mask with one row per position");
        }
        next.resize(cur.rows(), cur.cols() + 1);
        next.leftCols(cur.cols()) = cur;
        next.col(cur.cols()) = mask->col(0);
        break;
      }
    }
    if (c.weight >= 0 && c.apply_activation) {
      if (trace && c.layer.spec.activation == Activation::Softplus) trace->pre[i] = next;
      apply_activation(c.layer.spec.activation, next);
    }
    cur = std::move(next);
    if (trace) trace->out[i] = cur;
  }
  return cur;
}

template <class T>
Matrix<T> LayerStack<T>::backward(const Parameters<T>& params,
                                  const StackTrace<T>& trace, Matrix<T> d_out,
                                  Parameters<T>& grads, bool want_input_grad) const {
  const int batch = trace.batch;
  for (std::size_t idx = layers_.size(); idx-- > 0;) {
    const auto& c = layers_[idx];
    const auto& in = c.layer.in;
    const auto& out = c.layer.out;
    const Matrix<T>& x = idx == 0 ? trace.input : trace.out[idx - 1];
    const bool need_dx = idx > 0 || want_input_grad;
    if (c.weight >= 0 && c.apply_activation) {
      activation_backward(c.layer.spec.activation, trace.out[idx], &trace.pre[idx], d_out);
    }
    Matrix<T> dx;
    switch (c.layer.spec.kind) {
      case LayerKind::Conv: {
        const auto& g = c.geometry;
        const Eigen::Index kkc = Eigen::Index(g.kernel) * g.kernel * in.channels;
        const auto w = view(params.tensors[c.weight], kkc, out.channels);
        auto dw = view(grads.tensors[c.weight], kkc, out.channels);
        const Eigen::Index small = Eigen::Index(out.pixels());
        if (need_dx) dx.setZero(x.rows(), x.cols());
        const int chunk = chunk_images(g, in.channels);
        Matrix<T> cols, dcols;
        for (int b0 = 0; b0 < batch; b0 += chunk) {
          const int nb = std::min(chunk, batch - b0);
          const auto dy = d_out.middleRows(b0 * small, nb * small);
          cols.resize(nb * small, kkc);
          im2col(x.data() + std::size_t(b0) * in.elements(), nb, g, in.channels,
                 cols.data());
          dw.noalias() += cols.transpose() * dy;
          if (need_dx) {
            dcols.noalias() = dy * w.transpose();
            col2im(dcols.data(), nb, g, in.channels,
                   dx.data() + std::size_t(b0) * in.elements());
          }
        }
        view(grads.tensors[c.bias], 1, out.channels) += d_out.colwise().sum();
        break;
      }
      case LayerKind::TransposedConv: {
        const auto& g = c.geometry;
        const Eigen::Index kkc = Eigen::Index(g.kernel) * g.kernel * out.channels;
        const auto w = view(params.tensors[c.weight], kkc, in.channels);
        auto dw = view(grads.tensors[c.weight], kkc, in.channels);
        const Eigen::Index small = Eigen::Index(in.pixels());
        if (need_dx) dx.resize(x.rows(), x.cols());
        const int chunk = chunk_images(g, out.channels);
        Matrix<T> dcols;
        for (int b0 = 0; b0 < batch; b0 += chunk) {
          const int nb = std::min(chunk, batch - b0);
          dcols.resize(nb * small, kkc);
          im2col(d_out.data() + std::size_t(b0) * out.elements(), nb, g,
                 out.channels, dcols.data());
          dw.noalias() += dcols.transpose() * x.middleRows(b0 * small, nb * small);
          if (need_dx) dx.middleRows(b0 * small, nb * small).noalias() = dcols * w;
        }
        view(grads.tensors[c.bias], 1, out.channels) += d_out.colwise().sum();
        break;
      }
      case LayerKind::Dense: {
        const auto w = view(params.tensors[c.weight], in.elements(), out.elements());
        auto dw = view(grads.tensors[c.weight], in.elements(), out.elements());
        ConstMap<T> flat_x(x.data(), batch, Eigen::Index(in.elements()));
        ConstMap<T> flat_dy(d_out.data(), batch, Eigen::Index(out.elements()));
        dw.noalias() += flat_x.transpose() * flat_dy;
        view(grads.tensors[c.bias], 1, out.elements()) += flat_dy.colwise().sum();
        if (need_dx) {
          Matrix<T> flat_dx = flat_dy * w.transpose();
          dx = MutMap<T>(flat_dx.data(), x.rows(), x.cols());
        }
        break;
      }
      case LayerKind::ConcatMask:
        if (need_dx) dx = d_out.leftCols(in.channels);
        break;
    }
    if (!need_dx) return {};
    d_out = std::move(dx);
  }
  return d_out;
}

template struct Parameters<float>;
template struct Parameters<double>;
template class LayerStack<float>;
template class LayerStack<double>;

}  // namespace mvae
