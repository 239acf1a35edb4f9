#include "ncmi/model.hpp"

#include <cmath>

#include "ncmi/error.hpp"

namespace ncmi {

Arch arch_from_string(const std::string& s) {
  if (s == "linear") return Arch::linear;
  if (s == "mlp") return Arch::mlp;
  if (s == "tinyconv") return Arch::tinyconv;
  throw ContractError("unknown architecture '" + s + "' (expected linear|mlp|tinyconv)");
}

std::string arch_to_string(Arch a) {
  switch (a) {
    case Arch::linear: return "linear";
    case Arch::mlp: return "mlp";
    case Arch::tinyconv: return "tinyconv";
  }
  return "?";
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ContractError("unknown activation '" + s + "' (expected relu|tanh)");
}

std::string activation_to_string(Activation a) {
  return a == Activation::relu ? "relu" : "tanh";
}

// ---- conv ops ---------------------------------------------------------------

Tensor conv3x3_valid(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 4 || w.rank() != 4 || w.shape()[0] != 3 || w.shape()[1] != 3 ||
      w.shape()[2] != x.shape()[3] || bias.shape() != Shape{w.shape()[3]}) {
    throw ContractError("conv3x3: shapes " + shape_str(x.shape()) + ", " + shape_str(w.shape()) +
                        " incompatible");
  }
  const std::size_t b = x.shape()[0], h = x.shape()[1], wd = x.shape()[2], ci = x.shape()[3];
  const std::size_t co = w.shape()[3];
  if (h < 3 || wd < 3) throw ContractError("conv3x3: input smaller than the kernel");
  const std::size_t oh = h - 2, ow = wd - 2;
  const auto xv = x.value(), wv = w.value(), bv = bias.value();
  auto xat = [&](std::size_t n, std::size_t i, std::size_t j, std::size_t c) {
    return xv[((n * h + i) * wd + j) * ci + c];
  };
  auto wat = [&](std::size_t ki, std::size_t kj, std::size_t c, std::size_t o) {
    return wv[((ki * 3 + kj) * ci + c) * co + o];
  };
  std::vector<double> out(b * oh * ow * co);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j)
        for (std::size_t o = 0; o < co; ++o) {
          double s = bv[o];
          for (std::size_t ki = 0; ki < 3; ++ki)
            for (std::size_t kj = 0; kj < 3; ++kj)
              for (std::size_t c = 0; c < ci; ++c)
                s += xat(n, i + ki, j + kj, c) * wat(ki, kj, c, o);
          out[((n * oh + i) * ow + j) * co + o] = s;
        }
  return make_op(
      "conv3x3", {x, w, bias}, {b, oh, ow, co}, std::move(out),
      [b, h, wd, ci, co, oh, ow](TensorImpl& o, const std::vector<Tensor>& in) {
        const auto& g = o.grad;
        const auto xv = in[0].value(), wv = in[1].value();
        auto gat = [&](std::size_t n, std::size_t i, std::size_t j, std::size_t oc) {
          return g[((n * oh + i) * ow + j) * co + oc];
        };
        if (in[0].requires_grad()) {
          auto& gx = grad_buffer(in[0]);
          for (std::size_t n = 0; n < b; ++n)
            for (std::size_t i = 0; i < oh; ++i)
              for (std::size_t j = 0; j < ow; ++j)
                for (std::size_t oc = 0; oc < co; ++oc) {
                  const double gv = gat(n, i, j, oc);
                  for (std::size_t ki = 0; ki < 3; ++ki)
                    for (std::size_t kj = 0; kj < 3; ++kj)
                      for (std::size_t c = 0; c < ci; ++c)
                        gx[((n * h + i + ki) * wd + j + kj) * ci + c] +=
                            gv * wv[((ki * 3 + kj) * ci + c) * co + oc];
                }
        }
        if (in[1].requires_grad()) {
          auto& gw = grad_buffer(in[1]);
          for (std::size_t n = 0; n < b; ++n)
            for (std::size_t i = 0; i < oh; ++i)
              for (std::size_t j = 0; j < ow; ++j)
                for (std::size_t oc = 0; oc < co; ++oc) {
                  const double gv = gat(n, i, j, oc);
                  for (std::size_t ki = 0; ki < 3; ++ki)
                    for (std::size_t kj = 0; kj < 3; ++kj)
                      for (std::size_t c = 0; c < ci; ++c)
                        gw[((ki * 3 + kj) * ci + c) * co + oc] +=
                            gv * xv[((n * h + i + ki) * wd + j + kj) * ci + c];
                }
        }
        if (in[2].requires_grad()) {
          auto& gb = grad_buffer(in[2]);
          for (std::size_t n = 0; n < b; ++n)
            for (std::size_t i = 0; i < oh; ++i)
              for (std::size_t j = 0; j < ow; ++j)
                for (std::size_t oc = 0; oc < co; ++oc) gb[oc] += gat(n, i, j, oc);
        }
      });
}

Tensor maxpool2x2(const Tensor& x) {
  if (x.rank() != 4) throw ContractError("maxpool2x2: expected NHWC, got " + shape_str(x.shape()));
  const std::size_t b = x.shape()[0], h = x.shape()[1], w = x.shape()[2], c = x.shape()[3];
  if (h < 2 || w < 2) throw ContractError("maxpool2x2: input smaller than the window");
  const std::size_t oh = h / 2, ow = w / 2;
  const auto xv = x.value();
  std::vector<double> out(b * oh * ow * c);
  std::vector<std::size_t> argmax(out.size());  // ties resolve to the first scan position
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double best = -1e308;
          std::size_t best_idx = 0;
          for (std::size_t di = 0; di < 2; ++di)
            for (std::size_t dj = 0; dj < 2; ++dj) {
              const std::size_t idx = ((n * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
              if (xv[idx] > best) {
                best = xv[idx];
                best_idx = idx;
              }
            }
          const std::size_t oidx = ((n * oh + i) * ow + j) * c + ch;
          out[oidx] = best;
          argmax[oidx] = best_idx;
        }
  return make_op("maxpool2x2", {x}, {b, oh, ow, c}, std::move(out),
                 [argmax = std::move(argmax)](TensorImpl& o, const std::vector<Tensor>& in) {
                   if (!in[0].requires_grad()) return;
                   auto& gx = grad_buffer(in[0]);
                   for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += o.grad[i];
                 });
}

// ---- model -------------------------------------------------------------------

namespace {

// Kaiming-style fan-in scaled uniform init.
Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return Tensor::rand_uniform(std::move(shape), rng, -bound, bound, /*requires_grad=*/true);
}

Tensor apply_activation(const Tensor& t, Activation act) {
  return act == Activation::relu ? relu(t) : tanh(t);
}

}  // namespace

Tensor& Model::add_param(const std::string& name, Tensor t) {
  names_.push_back(name);
  params_.push_back(std::move(t));
  return params_.back();
}

Model::Model(const ModelSpec& spec, std::size_t input_dim, std::array<std::size_t, 3> image_shape,
             int head_classes)
    : spec_(spec), input_dim_(input_dim), image_shape_(image_shape), head_classes_(head_classes) {
  if (spec.feature_dim < 2) {
    throw ContractError("model: feature_dim must be >= 2 (it is the simplex dimension), got " +
                        std::to_string(spec.feature_dim));
  }
  Rng rng = stream_rng(spec.seed, RngStream::model_init);
  const std::size_t feat = static_cast<std::size_t>(spec.feature_dim);
  switch (spec.arch) {
    case Arch::linear: {
      add_param("w0", init_weight({input_dim, feat}, input_dim, rng));
      add_param("b0", Tensor::zeros({feat}, true));
      break;
    }
    case Arch::mlp: {
      if (spec.hidden.empty()) throw ContractError("mlp: needs at least one hidden width");
      std::size_t prev = input_dim;
      for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
        if (spec.hidden[l] < 1) throw ContractError("mlp: hidden widths must be positive");
        const std::size_t width = static_cast<std::size_t>(spec.hidden[l]);
        add_param("w" + std::to_string(l), init_weight({prev, width}, prev, rng));
        add_param("b" + std::to_string(l), Tensor::zeros({width}, true));
        prev = width;
      }
      add_param("w_out", init_weight({prev, feat}, prev, rng));
      add_param("b_out", Tensor::zeros({feat}, true));
      break;
    }
    case Arch::tinyconv: {
      if (image_shape_[0] == 0) {
        throw ContractError("tinyconv: dataset does not carry an image shape");
      }
      const std::size_t ch = image_shape_[2];
      add_param("conv1_w", init_weight({3, 3, ch, 8}, 9 * ch, rng));
      add_param("conv1_b", Tensor::zeros({8}, true));
      add_param("conv2_w", init_weight({3, 3, 8, 16}, 9 * 8, rng));
      add_param("conv2_b", Tensor::zeros({16}, true));
      const std::size_t h1 = (image_shape_[0] - 2) / 2, w1 = (image_shape_[1] - 2) / 2;
      if (h1 < 3 || w1 < 3) throw ContractError("tinyconv: image too small for two conv stages");
      const std::size_t h2 = (h1 - 2) / 2, w2 = (w1 - 2) / 2;
      const std::size_t flat = h2 * w2 * 16;
      add_param("dense_w", init_weight({flat, feat}, flat, rng));
      add_param("dense_b", Tensor::zeros({feat}, true));
      break;
    }
  }
  if (head_classes_ > 0) {
    const std::size_t c = static_cast<std::size_t>(head_classes_);
    add_param("head_w", init_weight({feat, c}, feat, rng));
    add_param("head_b", Tensor::zeros({c}, true));
  }
}

Tensor Model::parameter(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return params_[i];
  }
  throw ContractError("model: no parameter named '" + name + "'");
}

Tensor Model::forward_features(const Tensor& batch) const {
  if (batch.rank() != 2 || batch.cols() != input_dim_) {
    throw ContractError("forward: batch shape " + shape_str(batch.shape()) +
                        " does not match input dim " + std::to_string(input_dim_));
  }
  switch (spec_.arch) {
    case Arch::linear:
      return add(matmul(batch, parameter("w0")), parameter("b0"));
    case Arch::mlp: {
      Tensor h = batch;
      for (std::size_t l = 0; l < spec_.hidden.size(); ++l) {
        h = apply_activation(add(matmul(h, parameter("w" + std::to_string(l))),
                                 parameter("b" + std::to_string(l))),
                             spec_.activation);
      }
      return add(matmul(h, parameter("w_out")), parameter("b_out"));
    }
    case Arch::tinyconv: {
      const std::size_t b = batch.rows();
      Tensor x = reshape(batch, {b, image_shape_[0], image_shape_[1], image_shape_[2]});
      x = maxpool2x2(apply_activation(
          conv3x3_valid(x, parameter("conv1_w"), parameter("conv1_b")), spec_.activation));
      x = maxpool2x2(apply_activation(
          conv3x3_valid(x, parameter("conv2_w"), parameter("conv2_b")), spec_.activation));
      const std::size_t flat = x.shape()[1] * x.shape()[2] * x.shape()[3];
      return add(matmul(reshape(x, {b, flat}), parameter("dense_w")), parameter("dense_b"));
    }
  }
  throw ContractError("forward: unreachable");
}

Tensor Model::forward_logits(const Tensor& batch) const {
  if (!has_head()) throw ContractError("forward_logits: model has no classification head");
  return add(matmul(forward_features(batch), parameter("head_w")), parameter("head_b"));
}

}  // namespace ncmi
