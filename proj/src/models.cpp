#include "petsynth/models.hpp"

#include <cmath>

#include "petsynth/container.hpp"
#include "petsynth/errors.hpp"

namespace petsynth {

void ModelArch::validate() const {
  if (in_channels <= 0 || channels <= 0 || heads <= 0)
    throw ContractViolation("ModelArch: channel and head counts must be > 0");
  if (dilations.empty())
    throw ContractViolation("ModelArch: at least one residual block required");
  for (int d : dilations)
    if (d < 1) throw ContractViolation("ModelArch: dilation must be >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw ContractViolation("ModelArch: dropout rate outside [0, 1)");
  if (!(input_scale != 0.0) || !(output_scale != 0.0))
    throw ContractViolation("ModelArch: scales must be nonzero");
}

ModelArch synthesis_arch(int heads, double dropout_rate) {
  ModelArch a;
  a.kind = ModelKind::kSynthesis;
  a.in_channels = 1;
  a.heads = heads;
  a.dropout_rate = dropout_rate;
  a.output_scale = 1000.0;  // network emits roughly [-1, 1]; heads speak HU
  return a;
}

ModelArch imitation_arch() {
  ModelArch a;
  a.kind = ModelKind::kImitation;
  a.in_channels = 2;
  a.heads = 1;
  a.input_scale = 1e-3;  // HU pairs arrive scaled to roughly [-1, 1.4]
  a.output_scale = 1.0;
  return a;
}

namespace {

Tensor named_param(const std::string& name, const std::vector<int64_t>& shape,
                   double std_dev, Rng& rng) {
  Tensor t = make_tensor(shape, true);
  t->name = name;
  if (std_dev > 0.0)
    for (double& v : t->value) v = rng.normal() * std_dev;
  return t;
}

}  // namespace

Model make_model(const ModelArch& arch, std::uint64_t seed) {
  arch.validate();
  Model m;
  m.arch = arch;
  Rng rng(seed);
  const int c = arch.channels;

  // Draw order: stem kernel, each block kernel, each head kernel. Biases are
  // zero and PReLU slopes start at alpha_init, so they consume no draws.
  double stem_std = std::sqrt(2.0 / (arch.in_channels * 9.0));
  m.stem.kernel = named_param("stem.kernel", {c, arch.in_channels, 3, 3},
                              stem_std, rng);
  m.stem.bias = named_param("stem.bias", {c}, 0.0, rng);
  m.stem.alpha = make_scalar(arch.alpha_init, true);
  m.stem.alpha->name = "stem.alpha";
  m.stem.dilation = 1;

  double block_std = std::sqrt(2.0 / (c * 9.0));
  for (size_t i = 0; i < arch.dilations.size(); ++i) {
    ConvLayer b;
    std::string base = strfmt("block%zu", i);
    b.kernel = named_param(base + ".kernel", {c, c, 3, 3}, block_std, rng);
    b.bias = named_param(base + ".bias", {c}, 0.0, rng);
    b.alpha = make_scalar(arch.alpha_init, true);
    b.alpha->name = base + ".alpha";
    b.dilation = arch.dilations[i];
    m.blocks.push_back(b);
  }

  double head_std = std::sqrt(1.0 / c);
  for (int j = 0; j < arch.heads; ++j) {
    ConvLayer h;
    std::string base = strfmt("head%d", j);
    h.kernel = named_param(base + ".kernel", {1, c, 1, 1}, head_std, rng);
    h.bias = named_param(base + ".bias", {1}, 0.0, rng);
    h.dilation = 1;
    m.heads.push_back(h);
  }
  return m;
}

std::vector<Tensor> Model::params() const {
  std::vector<Tensor> out = {stem.kernel, stem.bias, stem.alpha};
  for (const ConvLayer& b : blocks) {
    out.push_back(b.kernel);
    out.push_back(b.bias);
    out.push_back(b.alpha);
  }
  for (const ConvLayer& h : heads) {
    out.push_back(h.kernel);
    out.push_back(h.bias);
  }
  return out;
}

void Model::set_requires_grad(bool value) const {
  for (const Tensor& p : params()) p->requires_grad = value;
}

std::vector<Tensor> model_forward(const Model& m, const Tensor& input,
                                  DropoutMode mode, Rng* rng) {
  if (input->shape.size() != 4)
    throw ContractViolation("model_forward: input must be [N, C, H, W]");
  if (input->shape[1] != m.arch.in_channels)
    throw ContractViolation(
        strfmt("model_forward: expected %d input channels, got %lld",
               m.arch.in_channels, static_cast<long long>(input->shape[1])));
  const bool use_dropout =
      m.arch.dropout_rate > 0.0 && mode != DropoutMode::kOff;
  if (use_dropout && rng == nullptr)
    throw ContractViolation("model_forward: dropout needs an rng");

  Tensor x = input;
  if (m.arch.input_scale != 1.0)
    x = mul(x, make_scalar(m.arch.input_scale, false));
  Tensor h = prelu(conv2d(x, m.stem.kernel, m.stem.bias, 1), m.stem.alpha);
  for (const ConvLayer& b : m.blocks) {
    Tensor t = prelu(conv2d(h, b.kernel, b.bias, b.dilation), b.alpha);
    if (use_dropout) t = dropout(t, m.arch.dropout_rate, *rng, mode);
    h = add(h, t);
  }
  std::vector<Tensor> out;
  out.reserve(m.heads.size());
  for (const ConvLayer& head : m.heads) {
    Tensor y = conv2d(h, head.kernel, head.bias, 1);
    if (m.arch.output_scale != 1.0)
      y = mul(y, make_scalar(m.arch.output_scale, false));
    out.push_back(y);
  }
  return out;
}

Tensor image_to_tensor(const Image2D& img) {
  Tensor t = make_tensor({1, 1, img.height, img.width}, false);
  t->value = img.values;
  return t;
}

Image2D tensor_plane_to_image(const Tensor& t, int batch, int channel,
                              double pixel_spacing_mm, Modality modality) {
  if (t->shape.size() != 4)
    throw ContractViolation("tensor_plane_to_image: tensor must be 4-D");
  const int64_t h = t->shape[2], w = t->shape[3];
  Image2D img(static_cast<int>(w), static_cast<int>(h), pixel_spacing_mm,
              modality);
  const int64_t plane = h * w;
  const int64_t base = (batch * t->shape[1] + channel) * plane;
  for (int64_t i = 0; i < plane; ++i) img.values[i] = t->value[base + i];
  return img;
}

namespace {

Image2D head_output_to_ct(const Tensor& y, const Image2D& mr) {
  Image2D out = tensor_plane_to_image(y, 0, 0, mr.pixel_spacing_mm,
                                      Modality::kCtHu);
  // Air floor, per the CT image invariant; training works on the raw tensor.
  for (double& v : out.values) v = std::max(-1000.0, v);
  return out;
}

}  // namespace

std::vector<Image2D> synth_forward(const Model& m, const Image2D& mr) {
  if (m.arch.kind != ModelKind::kSynthesis)
    throw ContractViolation("synth_forward: not a synthesis model");
  std::vector<Tensor> ys = model_forward(m, image_to_tensor(mr));
  std::vector<Image2D> out;
  for (const Tensor& y : ys) out.push_back(head_output_to_ct(y, mr));
  return out;
}

Image2D imitation_forward(const Model& m, const Image2D& pct,
                          const Image2D& ct) {
  if (m.arch.kind != ModelKind::kImitation)
    throw ContractViolation("imitation_forward: not an imitation model");
  if (!pct.same_grid(ct))
    throw ContractViolation("imitation_forward: pCT and CT grids differ");
  Tensor x = concat_channels(image_to_tensor(pct), image_to_tensor(ct));
  Tensor y = model_forward(m, x)[0];
  return tensor_plane_to_image(y, 0, 0, pct.pixel_spacing_mm,
                               Modality::kResidual);
}

std::vector<Image2D> mc_dropout_sample(const Model& m, const Image2D& mr,
                                       int n_samples, Rng& rng) {
  if (m.arch.kind != ModelKind::kSynthesis)
    throw ContractViolation("mc_dropout_sample: not a synthesis model");
  if (m.arch.dropout_rate <= 0.0)
    throw ContractViolation(
        "mc_dropout_sample: model has no dropout; samples would be identical");
  if (m.arch.heads != 1)
    throw ContractViolation("mc_dropout_sample: expected a single-head model");
  if (n_samples <= 0)
    throw ContractViolation("mc_dropout_sample: sample count must be > 0");
  Tensor x = image_to_tensor(mr);
  std::vector<Image2D> out;
  for (int s = 0; s < n_samples; ++s) {
    Tensor y = model_forward(m, x, DropoutMode::kSample, &rng)[0];
    out.push_back(head_output_to_ct(y, mr));
  }
  return out;
}

void save_model(const Model& m, const fs::path& path) {
  Container c;
  c.put("meta/arch", {7},
        {double(static_cast<int>(m.arch.kind)), double(m.arch.in_channels),
         double(m.arch.channels), double(m.arch.heads), m.arch.dropout_rate,
         m.arch.input_scale, m.arch.output_scale});
  c.put_scalar("meta/alpha_init", m.arch.alpha_init);
  std::vector<double> dils(m.arch.dilations.begin(), m.arch.dilations.end());
  c.put("meta/dilations", {int64_t(dils.size())}, dils);
  for (const Tensor& p : m.params())
    c.put("param/" + p->name, p->shape, p->value);
  c.save(path);
}

Model load_model(const fs::path& path, ModelKind expected) {
  Container c = Container::load(path);
  const NamedTensor& a = c.get("meta/arch");
  if (a.numel() != 7)
    throw IoError("load_model: bad architecture descriptor in '" +
                  path.string() + "'");
  ModelArch arch;
  arch.kind = static_cast<ModelKind>(int(a.values[0]));
  arch.in_channels = int(a.values[1]);
  arch.channels = int(a.values[2]);
  arch.heads = int(a.values[3]);
  arch.dropout_rate = a.values[4];
  arch.input_scale = a.values[5];
  arch.output_scale = a.values[6];
  arch.alpha_init = c.get_scalar("meta/alpha_init");
  arch.dilations.clear();
  for (double d : c.get("meta/dilations").values)
    arch.dilations.push_back(int(d));
  if (arch.kind != expected)
    throw IoError("load_model: checkpoint '" + path.string() +
                  "' holds the wrong model kind");
  arch.validate();

  Model m = make_model(arch, 0);
  for (const Tensor& p : m.params()) {
    const NamedTensor& stored = c.get("param/" + p->name);
    if (stored.extents != p->shape)
      throw IoError("load_model: shape mismatch for parameter '" + p->name +
                    "' in '" + path.string() + "'");
    p->value = stored.values;
  }
  return m;
}

}  // namespace petsynth
