#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ncmi/tensor.hpp"

namespace ncmi {

enum class Arch { linear, mlp, tinyconv };
enum class Activation { relu, tanh };

struct ModelSpec {
  Arch arch = Arch::mlp;
  std::vector<int> hidden = {64};  // mlp only
  int feature_dim = 16;            // simplex dimension after the head
  Activation activation = Activation::relu;
  std::uint64_t seed = 1;
};

Arch arch_from_string(const std::string& s);
std::string arch_to_string(Arch a);
Activation activation_from_string(const std::string& s);
std::string activation_to_string(Activation a);

// Differentiable 2-D convolution/pooling, NHWC layout, used by the tinyconv
// backbone. Exposed for gradient checks.
Tensor conv3x3_valid(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor maxpool2x2(const Tensor& x);

// A small trainable backbone producing feature rows, optionally with a
// linear classification head (for cross-entropy training and probing).
class Model {
 public:
  // image_shape is (H, W, channels) for tinyconv, zeros for tabular input.
  Model(const ModelSpec& spec, std::size_t input_dim, std::array<std::size_t, 3> image_shape,
        int head_classes);

  // Autodiff-tracked features of a [B, input_dim] batch, before any
  // centering / normalization / simplex head.
  Tensor forward_features(const Tensor& batch) const;
  // features -> linear head logits [B, head_classes].
  Tensor forward_logits(const Tensor& batch) const;

  std::span<const Tensor> parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  Tensor parameter(const std::string& name) const;

  const ModelSpec& spec() const { return spec_; }
  bool has_head() const { return head_classes_ > 0; }
  int head_classes() const { return head_classes_; }
  std::size_t input_dim() const { return input_dim_; }

 private:
  ModelSpec spec_;
  std::size_t input_dim_ = 0;
  std::array<std::size_t, 3> image_shape_{0, 0, 0};
  int head_classes_ = 0;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;

  Tensor& add_param(const std::string& name, Tensor t);
};

}  // namespace ncmi
