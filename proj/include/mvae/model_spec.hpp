#pragma once

#include <string>
#include <vector>

#include "mvae/data_io.hpp"

namespace mvae {

// Which networks see the missingness mask.
enum class Variant {
  NoInd,  // neither encoder nor decoder
  EoInd,  // encoder only
  EdInd,  // encoder and decoder
};

enum class LayerKind { Conv, TransposedConv, Dense, ConcatMask };
enum class Activation { Relu, Sigmoid, Softplus, Exponential, Linear };
enum class LikelihoodKind { Bernoulli, DiscretizedLogistic };

std::string to_string(Variant v);
std::string to_string(LayerKind k);
std::string to_string(Activation a);
std::string to_string(LikelihoodKind k);
Variant parse_variant(const std::string& text);
LayerKind parse_layer_kind(const std::string& text);
Activation parse_activation(const std::string& text);
LikelihoodKind parse_likelihood(const std::string& text);

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  int filters = 0;  // output channels (dense: channels of the reshaped output)
  int kernel = 0;
  int stride = 1;
  Activation activation = Activation::Linear;
  // Dense only: spatial size of the reshaped output (1×1 = plain vector).
  int out_height = 1;
  int out_width = 1;

  static LayerSpec conv(int filters, int kernel, int stride, Activation act);
  static LayerSpec transposed_conv(int filters, int kernel, int stride,
                                   Activation act);
  static LayerSpec dense(int height, int width, int channels, Activation act);
  static LayerSpec concat_mask();

  bool operator==(const LayerSpec&) const = default;
};

// Architecture plus conditioning variant and pixel likelihood.
//
// The encoder layer list is followed by an implicit fully-connected posterior
// head: a linear mean and a softplus standard deviation (+1e-3), each of
// latent_dim units. The last decoder layer is the output layer: for the
// Bernoulli likelihood it emits C channels and is declared `sigmoid`; for the
// discretised logistic it emits 2C channels (C linear means, then C
// exponential scales floored at 1e-2) and is declared `exponential`. Its raw
// output is handed to the likelihood, which applies the link.
//
// A `concat_mask` layer appends the mask as one extra channel. EO/ED place one
// at the start of the encoder; ED also places one in the decoder.
struct ModelSpec {
  ImageShape input;
  int latent_dim = 0;
  std::vector<LayerSpec> encoder_layers;
  std::vector<LayerSpec> decoder_layers;
  LikelihoodKind likelihood = LikelihoodKind::Bernoulli;
  Variant variant = Variant::EdInd;

  static ModelSpec mnist(Variant variant);
  static ModelSpec svhn(Variant variant);
  // "mnist" or "svhn".
  static ModelSpec for_dataset(const std::string& dataset, Variant variant);

  int output_channels() const;
  // Throws std::invalid_argument describing the first inconsistency.
  void validate() const;

  std::string to_json() const;
  static ModelSpec from_json(const std::string& text);

  bool operator==(const ModelSpec&) const = default;
};

}  // namespace mvae
