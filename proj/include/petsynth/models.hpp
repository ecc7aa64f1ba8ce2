#pragma once

#include <cstdint>
#include <vector>

#include "petsynth/image.hpp"
#include "petsynth/rng.hpp"
#include "petsynth/tensor.hpp"
#include "petsynth/util.hpp"

namespace petsynth {

enum class ModelKind : int {
  kSynthesis = 0,  // MR -> M pseudo-CT hypotheses
  kImitation = 1,  // (pCT, CT) -> predicted PET-residual map
};

// Architecture descriptor. Embedded in checkpoints so loading can validate.
struct ModelArch {
  ModelKind kind = ModelKind::kSynthesis;
  int in_channels = 1;
  int channels = 16;
  std::vector<int> dilations = {1, 1, 2, 2, 4, 4};  // one residual block each
  int heads = 1;
  double dropout_rate = 0.0;   // applied inside every residual block
  double input_scale = 1.0;    // multiplies the input before the stem
  double output_scale = 1.0;   // multiplies every head output
  double alpha_init = 0.25;    // PReLU slope initialization

  void validate() const;
};

// Standard descriptors: the synthesis net maps MR to HU through a fixed
// affine output scale; the imitation net reads HU scaled down by 1000.
ModelArch synthesis_arch(int heads, double dropout_rate = 0.0);
ModelArch imitation_arch();

struct ConvLayer {
  Tensor kernel;
  Tensor bias;
  Tensor alpha;  // PReLU slope; null for the linear 1x1 heads
  int dilation = 1;
};

// Shared trunk (stem + residual dilated blocks) with `heads` independent 1x1
// output convolutions. Spatial size is preserved throughout.
struct Model {
  ModelArch arch;
  ConvLayer stem;
  std::vector<ConvLayer> blocks;
  std::vector<ConvLayer> heads;

  std::vector<Tensor> params() const;
  void set_requires_grad(bool value) const;
};

// He fan-in initialization drawn from Rng(seed) in a fixed order.
Model make_model(const ModelArch& arch, std::uint64_t seed);

// Batched forward pass; input is [N, in_channels, H, W]. Dropout needs an rng
// unless the mode is kOff or the rate is zero.
std::vector<Tensor> model_forward(const Model& m, const Tensor& input,
                                  DropoutMode mode = DropoutMode::kOff,
                                  Rng* rng = nullptr);

// Image-level wrappers. Synthesis outputs are clamped to the -1000 HU air
// floor so they satisfy the CT image invariants downstream.
std::vector<Image2D> synth_forward(const Model& m, const Image2D& mr);
Image2D imitation_forward(const Model& m, const Image2D& pct,
                          const Image2D& ct);

// M stochastic passes with dropout active. Requires a single-head model built
// with a positive dropout rate.
std::vector<Image2D> mc_dropout_sample(const Model& m, const Image2D& mr,
                                       int n_samples, Rng& rng);

// Tensor helpers shared with the training code.
Tensor image_to_tensor(const Image2D& img);
Image2D tensor_plane_to_image(const Tensor& t, int batch, int channel,
                              double pixel_spacing_mm, Modality modality);

void save_model(const Model& m, const fs::path& path);
Model load_model(const fs::path& path, ModelKind expected);

}  // namespace petsynth
