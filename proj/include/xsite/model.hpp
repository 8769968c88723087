#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xsite/batch_norm.hpp"
#include "xsite/tensor.hpp"

namespace xsite {

enum class NormKind { kNone, kSharedBn, kPerSiteDsbn };

enum class ModelVariant { kOriginal, kRedesign, kRedesignDsbn };

/// Two-branch classifier configuration. Defaults are the desk-scale toy model.
struct ModelConfig {
  std::size_t input_h = 32;
  std::size_t input_w = 32;
  std::size_t stem_channels = 8;
  std::array<std::size_t, 4> upper_channels{8, 16, 16, 32};
  std::size_t lower_blocks = 2;
  std::size_t layers_per_block = 3;
  std::size_t growth = 8;
  std::size_t transition_channels = 16;
  NormKind norm = NormKind::kSharedBn;
  bool use_gap = true;
  std::size_t num_classes = 2;
  std::size_t sites = 2;
  std::array<std::size_t, 2> head_dims{64, 32};
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  void apply_variant(ModelVariant v);
  static ModelConfig from_variant(ModelVariant v);
};

std::string to_string(NormKind k);
NormKind norm_kind_from_string(const std::string& s);

struct ConvLayer {
  std::string name;
  Tensor weight;  // [F,C,kh,kw]
  Tensor bias;    // [F], undefined when a norm layer follows
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// A normalization slot: one state for shared BN, one per site for DSBN.
struct NormLayer {
  std::string name;
  NormKind kind = NormKind::kNone;
  DsbnState states;

  Tensor forward(const Tensor& x, std::optional<SiteId> site, NormMode mode);
};

struct DenseLayer {
  std::string name;
  Tensor weight;  // [D,O]
  Tensor bias;    // [O]
};

struct ForwardResult {
  Tensor logits;     // [N, classes]
  Tensor embedding;  // [N, E]; post-GAP vector (or flattened features without GAP)
  Tensor features;   // [N, E_c, h, w]; fused maps just before pooling
};

struct ParameterCount {
  std::size_t weights = 0;       // conv + dense weights and biases
  std::size_t classifier = 0;    // classifier weights and biases (subset of `weights`)
  std::size_t norm_affine = 0;   // gamma + beta, all sites
  std::size_t norm_stats = 0;    // running mean + var, all sites
  std::size_t trainable() const { return weights + norm_affine; }
};

class Model {
 public:
  // Throws ConfigError when the input is too small for the downsampling schedule.
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  /// Forward pass. DSBN models need `site`; shared/none ignore it.
  ForwardResult forward(const Tensor& images, std::optional<SiteId> site, NormMode mode);

  std::vector<std::pair<std::string, Tensor>> parameters() const;  // trainable, stable order
  std::vector<std::pair<std::string, Tensor>> classifier_parameters() const;
  std::vector<NormLayer*> norm_layers();
  std::vector<const NormLayer*> norm_layers() const;
  ParameterCount parameter_count() const;

  std::size_t embedding_dim() const { return embedding_dim_; }
  std::size_t feature_channels() const { return feature_channels_; }
  std::size_t feature_h() const { return feature_h_; }
  std::size_t feature_w() const { return feature_w_; }

  DenseLayer& classifier() { return classifier_; }

 private:
  struct DenseBlock {
    std::vector<ConvLayer> layers;
  };

  ModelConfig config_;
  ConvLayer stem_;
  NormLayer stem_norm_;
  std::array<ConvLayer, 4> upper_;
  std::array<NormLayer, 4> upper_norm_;
  std::vector<DenseBlock> blocks_;
  std::vector<ConvLayer> transitions_;        // 1x1 compressors between blocks
  std::vector<std::size_t> fusion_source_;    // upper level fused after each block
  std::vector<std::size_t> fusion_pool_;      // avg-pool factor for that fusion
  std::size_t block0_pool_ = 1;
  DenseLayer classifier_;
  std::size_t embedding_dim_ = 0, feature_channels_ = 0, feature_h_ = 0, feature_w_ = 0;
};

/// Two dense layers with ReLU between: e [N,E] -> z [N, head_dims[1]].
class ProjectionHead {
 public:
  ProjectionHead(std::size_t in_dim, std::array<std::size_t, 2> dims, std::uint64_t seed);
  ProjectionHead(DenseLayer first, DenseLayer second);

  Tensor project(const Tensor& embedding) const;
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  std::size_t in_dim() const { return first_.weight.dim(0); }
  std::size_t out_dim() const { return second_.weight.dim(1); }

  DenseLayer& first() { return first_; }
  DenseLayer& second() { return second_; }

 private:
  DenseLayer first_, second_;
};

// Per-parameter gradients split by objective for one forward pass.
struct GradientRouting {
  struct Entry {
    std::string name;
    std::vector<double> from_ce;
    std::vector<double> from_con;  // already multiplied by alpha
    std::vector<double> total;     // from_ce + from_con
  };
  std::vector<Entry> model;
  std::vector<Entry> head;
};

/// Backpropagates L_ce and alpha * L_con separately from a shared graph and
/// records where each parameter's gradient came from. Leaves the parameters'
/// grad buffers holding the combined gradient of L_ce + alpha * L_con.
GradientRouting gradient_partition(Model& model, ProjectionHead& head, const Tensor& ce, const Tensor& con,
                                   double alpha);

}  // namespace xsite
