#pragma once

// Small tensor/layer engine with explicit forward and backward passes. All
// tensors are NHWC, 64-bit.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hsi/parallel.hpp"
#include "hsi/random.hpp"

namespace hsi::nn {

struct Shape3 {
  std::size_t h = 1, w = 1, c = 1;
  std::size_t size() const { return h * w * c; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

struct Tensor4 {
  std::size_t n = 0, h = 0, w = 0, c = 0;
  std::vector<double> v;

  Tensor4() = default;
  Tensor4(std::size_t n_, std::size_t h_, std::size_t w_, std::size_t c_, double fill = 0.0)
      : n(n_), h(h_), w(w_), c(c_), v(n_ * h_ * w_ * c_, fill) {}
  Tensor4(std::size_t n_, Shape3 s, double fill = 0.0) : Tensor4(n_, s.h, s.w, s.c, fill) {}

  Shape3 shape() const { return {h, w, c}; }
  std::size_t size() const { return v.size(); }
  std::size_t sample_size() const { return h * w * c; }
  double* pixel(std::size_t i, std::size_t y, std::size_t x) { return v.data() + ((i * h + y) * w + x) * c; }
  const double* pixel(std::size_t i, std::size_t y, std::size_t x) const {
    return v.data() + ((i * h + y) * w + x) * c;
  }
  std::span<double> sample(std::size_t i) { return {v.data() + i * sample_size(), sample_size()}; }
  std::span<const double> sample(std::size_t i) const { return {v.data() + i * sample_size(), sample_size()}; }
  double& at(std::size_t i, std::size_t y, std::size_t x, std::size_t ch) { return pixel(i, y, x)[ch]; }
  double at(std::size_t i, std::size_t y, std::size_t x, std::size_t ch) const { return pixel(i, y, x)[ch]; }
  bool all_finite() const;
};

enum class LayerKind { channel_compress, conv2d, maxpool, batchnorm, relu, global_avg_pool, dense, softmax };

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t out_features = 0;  ///< channel_compress, conv2d, dense
  std::size_t kernel = 3;        ///< conv2d (odd, same padding), maxpool window
  std::size_t stride = 1;        ///< conv2d, maxpool
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  Shape3 input;
  std::vector<LayerSpec> layers;  ///< must end with softmax
  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;

  std::optional<std::size_t> compress_to() const;
  std::size_t classes() const;
};

/// [channel-compress to k] -> per block: conv 3x3 (same) -> relu -> maxpool 2x2
/// -> batchnorm; then global average pool -> dense(classes) -> softmax.
NetworkSpec tissue_cnn_spec(std::size_t input_channels, std::optional<std::size_t> compress_to,
                            std::vector<std::size_t> block_features = {16, 32, 64}, std::size_t side = 40,
                            std::size_t classes = 2);

/// features -> dense(hidden) -> relu -> dense(classes) -> softmax, on 1x1xC inputs.
NetworkSpec mlp_spec(std::size_t features, std::size_t hidden, std::size_t classes = 2);

enum class Mode { train, eval };

class Layer {
 public:
  virtual ~Layer() = default;
  virtual LayerKind kind() const = 0;
  virtual Shape3 output_shape(Shape3 in) const = 0;
  virtual void initialize(Rng& rng) { (void)rng; }
  virtual void forward(const Tensor4& in, Tensor4& out, Mode mode) = 0;
  /// Accumulates parameter gradients (if `param_grads`) and writes the input
  /// gradient into `gin` when non-null. Must follow a forward() on `in`.
  virtual void backward(const Tensor4& in, const Tensor4& out, const Tensor4& gout, Tensor4* gin,
                        bool param_grads) = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  std::span<double> grads() { return grads_; }
  std::span<const double> grads() const { return grads_; }
  /// Non-trainable state (batchnorm running statistics).
  std::span<double> state() { return state_; }
  std::span<const double> state() const { return state_; }

 protected:
  std::vector<double> params_, grads_, state_;
};

std::unique_ptr<Layer> make_layer(const LayerSpec& spec, Shape3 in);

class Network {
 public:
  Network() = default;
  /// Builds the layers and initializes parameters from `init_seed`.
  Network(NetworkSpec spec, std::uint64_t init_seed);
  Network(const Network& other);
  Network& operator=(const Network& other);
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const NetworkSpec& spec() const { return spec_; }
  std::size_t layer_count() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }
  const Layer& layer(std::size_t i) const { return *layers_[i]; }
  std::size_t classes() const { return spec_.classes(); }

  /// Class probabilities, shape (n, 1, 1, classes). Throws ShapeError on an
  /// input shape mismatch.
  const Tensor4& forward(const Tensor4& x, Mode mode);
  /// Output of the layer before the final softmax, valid after forward().
  const Tensor4& logits() const { return acts_[acts_.size() - 2]; }

  /// Weighted cross-entropy (1/n) sum_i w[y_i] * -log p_i[y_i]; fills gradients
  /// of every parameter. Runs in training mode.
  double loss_and_gradients(const Tensor4& x, std::span<const int> labels, std::span<const double> class_weights);
  /// Same loss without gradients.
  double loss(const Tensor4& x, std::span<const int> labels, std::span<const double> class_weights, Mode mode);

  /// d logit[target_i] / d x for each sample, evaluation mode.
  Tensor4 input_gradient(const Tensor4& x, std::span<const int> targets);

  std::vector<double> flat_params() const;
  void set_flat_params(std::span<const double> values);
  std::vector<double> flat_grads() const;
  std::vector<double> flat_state() const;
  void set_flat_state(std::span<const double> values);
  std::size_t param_count() const;
  void zero_grads();

 private:
  void check_input(const Tensor4& x) const;
  void backward_from_logits(const Tensor4& glogits, bool param_grads, Tensor4* gin);

  NetworkSpec spec_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<Tensor4> acts_;  ///< acts_[0] = input, acts_[i + 1] = output of layer i
};

/// Read-only view of one example (input laid out h x w x c, channel fastest).
struct ExampleView {
  std::span<const double> input;
  int label = 0;
};

Tensor4 make_batch(std::span<const ExampleView> examples, std::span<const std::size_t> indices, Shape3 shape);

/// Evaluation-mode class probabilities for every example; chunks run in
/// parallel on private network copies.
std::vector<std::vector<double>> predict_proba(const Network& net, std::span<const ExampleView> examples,
                                               std::size_t batch_size = 64, Exec exec = Exec::parallel);

enum class Optimizer { sgd_momentum, adam };

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  Optimizer optimizer = Optimizer::adam;
  double momentum = 0.9;
  /// Empty: inverse class frequency of the training portion.
  std::vector<double> class_weights;
  std::uint64_t seed = 0;                      ///< parameter initialization
  std::optional<std::uint64_t> shuffle_seed;   ///< data order and validation split; defaults to seed
  /// Held out from the training examples for best-epoch selection. 0 keeps the
  /// final parameters.
  double validation_fraction = 0.15;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double validation_loss = 0.0;
  double validation_accuracy = 0.0;
};

struct TrainResult {
  Network network;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

/// Builds a network from `spec` with `config.seed` and trains it. Throws
/// NumericError on a non-finite loss.
TrainResult train(const NetworkSpec& spec, std::span<const ExampleView> examples, const TrainConfig& config);
/// Continues training an existing network.
TrainResult train(Network network, std::span<const ExampleView> examples, const TrainConfig& config);

std::vector<double> inverse_frequency_weights(std::span<const ExampleView> examples, std::size_t classes);

/// "HSIN", u16 version, spec JSON, normalization reference, f64 params, f64 state.
void save_network(const Network& net, const std::filesystem::path& path, const std::string& normalization_ref = "");
Network load_network(const std::filesystem::path& path, std::string* normalization_ref = nullptr);

std::string spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const std::string& text);

}  // namespace hsi::nn
