#include "xsite/model.hpp"

#include <cmath>
#include <random>

#include "xsite/errors.hpp"
#include "xsite/ops.hpp"

namespace xsite {

void ModelConfig::apply_variant(ModelVariant v) {
  switch (v) {
    case ModelVariant::kOriginal:
      norm = NormKind::kNone;
      use_gap = false;
      break;
    case ModelVariant::kRedesign:
      norm = NormKind::kSharedBn;
      use_gap = true;
      break;
    case ModelVariant::kRedesignDsbn:
      norm = NormKind::kPerSiteDsbn;
      use_gap = true;
      break;
  }
}

ModelConfig ModelConfig::from_variant(ModelVariant v) {
  ModelConfig c;
  c.apply_variant(v);
  return c;
}

std::string to_string(NormKind k) {
  switch (k) {
    case NormKind::kNone: return "none";
    case NormKind::kSharedBn: return "shared_bn";
    case NormKind::kPerSiteDsbn: return "per_site_dsbn";
  }
  return "none";
}

NormKind norm_kind_from_string(const std::string& s) {
  if (s == "none") return NormKind::kNone;
  if (s == "shared_bn") return NormKind::kSharedBn;
  if (s == "per_site_dsbn") return NormKind::kPerSiteDsbn;
  throw ConfigError("unknown norm mode '" + s + "' (expected none|shared_bn|per_site_dsbn)");
}

Tensor NormLayer::forward(const Tensor& x, std::optional<SiteId> site, NormMode mode) {
  switch (kind) {
    case NormKind::kNone:
      return x;
    case NormKind::kSharedBn:
      return bn_forward(x, states.site(0), mode);
    case NormKind::kPerSiteDsbn:
      if (!site) throw ConfigError("DSBN layer '" + name + "' needs a site id");
      return dsbn_forward(x, states, *site, mode);
  }
  return x;
}

namespace {

// He-style fan-in initialization.
Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

ConvLayer make_conv(std::string name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                    bool with_bias, std::mt19937_64& rng) {
  ConvLayer layer;
  layer.name = std::move(name);
  layer.weight = he_normal({out, in, k, k}, in * k * k, rng);
  if (with_bias) layer.bias = Tensor::zeros({out}, true);
  layer.stride = stride;
  layer.padding = k / 2;
  return layer;
}

DenseLayer make_dense(std::string name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
  DenseLayer layer;
  layer.name = std::move(name);
  layer.weight = he_normal({in, out}, in, rng);
  layer.bias = Tensor::zeros({out}, true);
  return layer;
}

NormLayer make_norm(std::string name, const ModelConfig& c, std::size_t channels) {
  NormLayer layer;
  layer.name = std::move(name);
  layer.kind = c.norm;
  if (c.norm != NormKind::kNone) {
    const std::size_t sites = c.norm == NormKind::kPerSiteDsbn ? c.sites : 1;
    layer.states = DsbnState(channels, sites, c.bn_momentum, c.bn_epsilon);
  }
  return layer;
}

Tensor apply_conv(const ConvLayer& l, const Tensor& x) { return ops::conv2d(x, l.weight, l.bias, l.stride, l.padding); }

void push_conv(std::vector<std::pair<std::string, Tensor>>& out, const ConvLayer& l) {
  out.emplace_back(l.name + ".weight", l.weight);
  if (l.bias.defined()) out.emplace_back(l.name + ".bias", l.bias);
}

}  // namespace

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  const ModelConfig& c = config_;
  if (c.num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (c.lower_blocks == 0 || c.layers_per_block == 0 || c.growth == 0) {
    throw ConfigError("model: lower branch needs at least one block with one layer");
  }
  if (c.norm == NormKind::kPerSiteDsbn && c.sites == 0) throw ConfigError("model: DSBN needs at least one site");
  // Stem halves the input; the upper branch halves twice more; lower block b runs at stem/2^(b+1).
  const std::size_t down = std::size_t{1} << std::max<std::size_t>(3, c.lower_blocks + 1);
  if (c.input_h % down != 0 || c.input_w % down != 0 || c.input_h < down || c.input_w < down) {
    throw ConfigError("model: input " + std::to_string(c.input_h) + "x" + std::to_string(c.input_w) +
                      " too small or not divisible by " + std::to_string(down) + " for the downsampling schedule");
  }

  std::mt19937_64 rng(seed);
  const bool normed = c.norm != NormKind::kNone;
  stem_ = make_conv("stem.conv", 1, c.stem_channels, 3, 2, !normed, rng);
  stem_norm_ = make_norm("stem.bn", c, c.stem_channels);

  const std::size_t stem_h = c.input_h / 2;
  std::array<std::size_t, 4> upper_h{};
  std::size_t in = c.stem_channels, h = stem_h;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t stride = (i % 2 == 1) ? 2 : 1;
    upper_[i] = make_conv("upper" + std::to_string(i) + ".conv", in, c.upper_channels[i], 3, stride, !normed, rng);
    upper_norm_[i] = make_norm("upper" + std::to_string(i) + ".bn", c, c.upper_channels[i]);
    h /= stride;
    upper_h[i] = h;
    in = c.upper_channels[i];
  }

  // Upper level fused after block b, spread evenly over the four levels.
  block0_pool_ = 2;
  std::size_t channels = c.stem_channels;
  std::size_t lower_h = stem_h / 2;
  for (std::size_t b = 0; b < c.lower_blocks; ++b) {
    if (b > 0) {
      transitions_.push_back(make_conv("trans" + std::to_string(b) + ".conv", channels, c.transition_channels, 1, 1,
                                       true, rng));
      channels = c.transition_channels;
      lower_h /= 2;
    }
    DenseBlock block;
    for (std::size_t l = 0; l < c.layers_per_block; ++l) {
      block.layers.push_back(make_conv("block" + std::to_string(b) + ".layer" + std::to_string(l) + ".conv",
                                       channels + l * c.growth, c.growth, 3, 1, true, rng));
    }
    blocks_.push_back(std::move(block));
    channels += c.layers_per_block * c.growth;

    std::size_t level = std::min<std::size_t>(3, ((b + 1) * 4 + c.lower_blocks - 1) / c.lower_blocks - 1);
    while (level > 0 && upper_h[level] < lower_h) --level;
    if (upper_h[level] < lower_h || upper_h[level] % lower_h != 0) {
      throw ConfigError("model: upper level " + std::to_string(level) + " cannot be pooled to lower resolution " +
                        std::to_string(lower_h));
    }
    fusion_source_.push_back(level);
    fusion_pool_.push_back(upper_h[level] / lower_h);
    channels += c.upper_channels[level];
  }

  feature_channels_ = channels;
  feature_w_ = (c.input_w / 2) >> c.lower_blocks;
  feature_h_ = (c.input_h / 2) >> c.lower_blocks;
  embedding_dim_ = c.use_gap ? feature_channels_ : feature_channels_ * feature_h_ * feature_w_;
  classifier_ = make_dense("classifier", embedding_dim_, c.num_classes, rng);
}

ForwardResult Model::forward(const Tensor& images, std::optional<SiteId> site, NormMode mode) {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != config_.input_h ||
      images.dim(3) != config_.input_w) {
    throw ShapeError("model: expected [N,1," + std::to_string(config_.input_h) + "," +
                     std::to_string(config_.input_w) + "] images, got " + shape_str(images.shape()));
  }
  if (config_.norm == NormKind::kPerSiteDsbn && !site) throw ConfigError("model: DSBN forward requires a site id");

  Tensor stem = ops::relu(stem_norm_.forward(apply_conv(stem_, images), site, mode));

  std::array<Tensor, 4> upper;
  Tensor u = stem;
  for (std::size_t i = 0; i < 4; ++i) {
    u = ops::relu(upper_norm_[i].forward(apply_conv(upper_[i], u), site, mode));
    upper[i] = u;
  }

  Tensor lower = ops::avg_pool2d(stem, block0_pool_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    if (b > 0) lower = ops::avg_pool2d(ops::relu(apply_conv(transitions_[b - 1], lower)), 2);
    std::vector<Tensor> dense_inputs{lower};
    for (const ConvLayer& layer : blocks_[b].layers) {
      Tensor in = dense_inputs.size() == 1 ? dense_inputs.front() : ops::concat_channels(dense_inputs);
      dense_inputs.push_back(ops::relu(apply_conv(layer, in)));
    }
    dense_inputs.push_back(ops::avg_pool2d(upper[fusion_source_[b]], fusion_pool_[b]));
    lower = ops::concat_channels(dense_inputs);
  }

  ForwardResult out;
  out.features = lower;
  out.embedding = config_.use_gap ? ops::global_avg_pool(lower) : ops::flatten(lower);
  out.logits = ops::dense(out.embedding, classifier_.weight, classifier_.bias);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Model::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto push_norm = [&](const NormLayer& n) {
    if (n.kind == NormKind::kNone) return;
    for (std::size_t s = 0; s < n.states.sites(); ++s) {
      const std::string prefix = n.kind == NormKind::kPerSiteDsbn ? n.name + "." + std::to_string(s) : n.name;
      out.emplace_back(prefix + ".gamma", n.states.site(s).gamma);
      out.emplace_back(prefix + ".beta", n.states.site(s).beta);
    }
  };
  push_conv(out, stem_);
  push_norm(stem_norm_);
  for (std::size_t i = 0; i < 4; ++i) {
    push_conv(out, upper_[i]);
    push_norm(upper_norm_[i]);
  }
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    if (b > 0) push_conv(out, transitions_[b - 1]);
    for (const ConvLayer& l : blocks_[b].layers) push_conv(out, l);
  }
  out.emplace_back("classifier.weight", classifier_.weight);
  out.emplace_back("classifier.bias", classifier_.bias);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Model::classifier_parameters() const {
  return {{"classifier.weight", classifier_.weight}, {"classifier.bias", classifier_.bias}};
}

std::vector<NormLayer*> Model::norm_layers() {
  std::vector<NormLayer*> out{&stem_norm_};
  for (auto& n : upper_norm_) out.push_back(&n);
  return out;
}

std::vector<const NormLayer*> Model::norm_layers() const {
  std::vector<const NormLayer*> out{&stem_norm_};
  for (const auto& n : upper_norm_) out.push_back(&n);
  return out;
}

ParameterCount Model::parameter_count() const {
  ParameterCount pc;
  for (const auto& [name, t] : parameters()) {
    if (name.ends_with(".gamma") || name.ends_with(".beta")) {
      pc.norm_affine += t.numel();
    } else {
      pc.weights += t.numel();
      if (name.starts_with("classifier.")) pc.classifier += t.numel();
    }
  }
  for (const NormLayer* n : norm_layers()) {
    if (n->kind == NormKind::kNone) continue;
    pc.norm_stats += 2 * n->states.sites() * n->states.channels();
  }
  return pc;
}

ProjectionHead::ProjectionHead(std::size_t in_dim, std::array<std::size_t, 2> dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  first_ = make_dense("head.fc0", in_dim, dims[0], rng);
  second_ = make_dense("head.fc1", dims[0], dims[1], rng);
}

ProjectionHead::ProjectionHead(DenseLayer first, DenseLayer second) : first_(std::move(first)), second_(std::move(second)) {
  if (first_.weight.dim(1) != second_.weight.dim(0)) throw ShapeError("projection head: layer widths do not chain");
}

Tensor ProjectionHead::project(const Tensor& embedding) const {
  if (embedding.rank() != 2 || embedding.dim(1) != in_dim()) {
    throw ShapeError("projection head: expects [N," + std::to_string(in_dim()) + "] embeddings, got " +
                     shape_str(embedding.shape()));
  }
  Tensor hidden = ops::relu(ops::dense(embedding, first_.weight, first_.bias));
  return ops::dense(hidden, second_.weight, second_.bias);
}

std::vector<std::pair<std::string, Tensor>> ProjectionHead::parameters() const {
  return {{"head.fc0.weight", first_.weight},
          {"head.fc0.bias", first_.bias},
          {"head.fc1.weight", second_.weight},
          {"head.fc1.bias", second_.bias}};
}

GradientRouting gradient_partition(Model& model, ProjectionHead& head, const Tensor& ce, const Tensor& con,
                                   double alpha) {
  auto model_params = model.parameters();
  auto head_params = head.parameters();
  auto snapshot = [](std::vector<std::pair<std::string, Tensor>>& params) {
    std::vector<std::vector<double>> out;
    for (auto& [name, t] : params) {
      out.emplace_back(t.numel(), 0.0);
      if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), out.back().begin());
      t.zero_grad();
    }
    return out;
  };
  auto clear = [](std::vector<std::pair<std::string, Tensor>>& params) {
    for (auto& p : params) p.second.zero_grad();
  };

  clear(model_params);
  clear(head_params);
  ce.backward();
  auto model_ce = snapshot(model_params);
  auto head_ce = snapshot(head_params);
  ops::scale(con, alpha).backward();
  auto model_con = snapshot(model_params);
  auto head_con = snapshot(head_params);

  GradientRouting routing;
  auto fill = [](std::vector<std::pair<std::string, Tensor>>& params, std::vector<std::vector<double>>& a,
                 std::vector<std::vector<double>>& b, std::vector<GradientRouting::Entry>& out) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      GradientRouting::Entry e{params[i].first, std::move(a[i]), std::move(b[i]), {}};
      e.total.resize(e.from_ce.size());
      for (std::size_t j = 0; j < e.total.size(); ++j) e.total[j] = e.from_ce[j] + e.from_con[j];
      auto g = params[i].second.mutable_grad();
      std::copy(e.total.begin(), e.total.end(), g.begin());
      out.push_back(std::move(e));
    }
  };
  fill(model_params, model_ce, model_con, routing.model);
  fill(head_params, head_ce, head_con, routing.head);
  return routing;
}

}  // namespace xsite
