#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/StdVector>

#include "mvae/data_io.hpp"
#include "mvae/model_spec.hpp"

namespace mvae {

// Activations are stored NHWC as row-major matrices: one row per
// (image, row, column) position, one column per channel.
template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct PlannedLayer {
  LayerSpec spec;
  ImageShape in;
  ImageShape out;
};

// "SAME" padding throughout: a stride-s conv maps n to ceil(n/s) positions, a
// stride-s transposed conv maps n to n*s.
std::vector<PlannedLayer> infer_layer_shapes(const std::vector<LayerSpec>& layers,
                                             ImageShape input);

// Geometry of a strided convolution from a large grid to a small one. A
// transposed convolution uses the geometry of the conv running the other way.
struct ConvGeometry {
  int big_h = 0, big_w = 0;
  int small_h = 0, small_w = 0;
  int kernel = 0, stride = 1;
  int pad_top = 0, pad_left = 0;

  static ConvGeometry same(int big_h, int big_w, int kernel, int stride);
};

// Parameter storage starts on Eigen's maximum alignment so vectorised
// reductions over mapped tensors split the same way in every process.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
struct ParamTensor {
  std::string name;
  std::vector<std::size_t> shape;
  AlignedVector<T> values;
};

template <class T>
struct Parameters {
  std::vector<ParamTensor<T>> tensors;

  std::size_t scalar_count() const;
  Parameters zeros_like() const;
  const ParamTensor<T>& at(const std::string& name) const;
  ParamTensor<T>& at(const std::string& name);
  template <class U>
  Parameters<U> cast() const {
    Parameters<U> out;
    for (const auto& t : tensors) {
      out.tensors.push_back({t.name, t.shape, AlignedVector<U>(t.values.begin(), t.values.end())});
    }
    return out;
  }
};

// Weights are drawn uniform on ±sqrt(6 / (fan_in + fan_out)); biases start
// at zero. A conv kernel's fans include the k² receptive field.
struct ParamDescriptor {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
  bool is_bias = false;
};

template <class T>
struct StackTrace {
  int batch = 0;
  Matrix<T> input;
  std::vector<Matrix<T>> out;  // post-activation output of every layer
  std::vector<Matrix<T>> pre;  // pre-activation, kept only for softplus
};

// A feed-forward chain of layers. Parameter tensors are registered in the
// caller's descriptor list so encoder and decoder share one Parameters set.
template <class T>
class LayerStack {
 public:
  LayerStack() = default;
  // With raw_output the last layer's activation is not applied.
  LayerStack(const std::string& prefix, const std::vector<LayerSpec>& layers,
             ImageShape input, bool raw_output,
             std::vector<ParamDescriptor>& registry);

  const std::vector<PlannedLayer>& plan() const { return plan_; }
  ImageShape output_shape() const { return plan_.back().out; }

  // input: (batch*H*W) × C. mask: (batch*H*W_mask) × 1, read by concat_mask.
  Matrix<T> forward(const Parameters<T>& params, const Matrix<T>& input,
                    const Matrix<T>* mask, int batch,
                    StackTrace<T>* trace = nullptr) const;

  // Accumulates parameter gradients of Σ d_out ⊙ output into grads and
  // returns the gradient with respect to the input (empty if not wanted).
  Matrix<T> backward(const Parameters<T>& params, const StackTrace<T>& trace,
                     Matrix<T> d_out, Parameters<T>& grads,
                     bool want_input_grad) const;

 private:
  struct Compiled {
    PlannedLayer layer;
    ConvGeometry geometry;
    int weight = -1;
    int bias = -1;
    bool apply_activation = true;
  };
  std::vector<PlannedLayer> plan_;
  std::vector<Compiled> layers_;
};

}  // namespace mvae
