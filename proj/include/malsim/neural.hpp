#pragma once

// Fully connected networks trained with Adam and hand-written backprop:
// binary / family classifiers and an autoencoder, each with a designated
// embedding layer.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "malsim/common.hpp"

namespace malsim::neural {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::RowVectorXd;

enum class LayerKind { dense, batchnorm, relu, dropout, sigmoid, softmax };

std::string_view layer_kind_name(LayerKind kind);
LayerKind layer_kind_from_name(std::string_view name);

struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    int width = 0;          // dense
    double rate = 0.0;      // dropout
    double epsilon = 1e-5;  // batchnorm
    double momentum = 0.9;  // batchnorm: running = momentum * running + (1 - momentum) * batch
};

struct Layer {
    LayerSpec spec;
    int in_dim = 0;
    int out_dim = 0;
    Mat W;  // in_dim x out_dim
    Vec b;
    Vec gamma, beta, running_mean, running_var;
};

struct NeuralModel {
    int input_dim = 0;
    std::vector<Layer> layers;
    int embedding_layer_index = -1;  // this layer's output is the embedding
    std::uint64_t seed = 0;

    int output_dim() const { return layers.empty() ? input_dim : layers.back().out_dim; }
    int embedding_dim() const;
};

/// Builds layers with He-normal dense weights (seeded), unit batchnorm scale.
NeuralModel build_model(int input_dim, const std::vector<LayerSpec>& specs, int embedding_layer_index,
                        std::uint64_t seed);

enum class Mode { train, inference };

struct ForwardResult {
    std::vector<Mat> inputs;   // input of layer i
    Mat output;
    std::vector<Mat> masks;    // dropout masks (already scaled by 1/(1-rate))
    std::vector<Mat> xhat;     // batchnorm normalized input
    std::vector<Vec> inv_std;  // batchnorm 1/sqrt(var + eps)
    std::vector<Vec> batch_mean, batch_var;
    Mode mode = Mode::inference;

    const Mat& activation(std::size_t layer) const { return layer + 1 < inputs.size() ? inputs[layer + 1] : output; }
};

/// Pure in both modes; train mode draws dropout masks from `dropout_rng` and
/// uses batch statistics. Throws numeric_overflow naming the first layer whose
/// output is non-finite.
ForwardResult forward(const NeuralModel& model, const Mat& batch, Mode mode, Rng* dropout_rng = nullptr);

/// Folds the batch statistics of a train-mode pass into the running stats.
void update_running_stats(NeuralModel& model, const ForwardResult& pass);

enum class LossKind { bce, categorical_ce, mse };

struct LayerGrad {
    Mat dW;
    Vec db;
    Vec dgamma, dbeta;
};

struct Gradients {
    std::vector<LayerGrad> layers;
    Mat d_input;
};

/// Weighted mean loss: (1/M) sum_i w_i * l_i. MSE per sample is the squared
/// norm of the residual. BCE/CCE read the pre-activation of a trailing
/// sigmoid/softmax when present for stability.
double compute_loss(const NeuralModel& model, const ForwardResult& pass, const Mat& targets, LossKind loss,
                    std::span<const double> sample_weights = {});

Gradients backward(const NeuralModel& model, const ForwardResult& pass, const Mat& targets, LossKind loss,
                   std::span<const double> sample_weights = {});

/// Backpropagates an explicit gradient with respect to the model output.
Gradients backward_from_output(const NeuralModel& model, const ForwardResult& pass, const Mat& d_output);

/// Trainable tensors in a fixed order (dense W, b; batchnorm gamma, beta).
std::vector<std::span<double>> parameter_spans(NeuralModel& model);
std::vector<std::span<const double>> gradient_spans(const NeuralModel& model, const Gradients& grads);

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    long step = 0;
    std::vector<std::vector<double>> m, v;
};

void adam_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
               AdamState& state, double learning_rate = 1e-3);

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 256;
    int max_epochs = 50;
    int patience = 5;
    LossKind loss = LossKind::bce;
    std::vector<double> class_weights;  // empty: unweighted
    std::uint64_t seed = 42;
    double validation_fraction = 0.1;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    // binary heads only
    double val_auc = 0.0;
    double val_precision = 0.0;
    double val_recall = 0.0;
};

struct TrainingHistory {
    double initial_train_loss = 0.0;
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    bool stopped_early = false;
};

/// Patience counter over validation loss; improvement means strictly lower.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience);
    /// Returns true when the value improved on the best so far.
    bool observe(double val_loss);
    bool should_stop() const noexcept { return bad_epochs_ >= patience_; }
    double best() const noexcept { return best_; }

private:
    int patience_;
    int bad_epochs_ = 0;
    double best_;
};

struct ClassifierArch {
    std::vector<int> hidden{512, 256, 128};
    int embedding_dim = 128;
    double dropout = 0.3;
    int num_outputs = 1;  // 1: sigmoid head; >1: softmax head
    bool batchnorm = true;
};

std::vector<LayerSpec> classifier_layers(const ClassifierArch& arch, int* embedding_index);

struct TrainedClassifier {
    NeuralModel model;
    TrainingHistory history;
    std::vector<std::size_t> validation_rows;  // rows of the input used for early stopping
};

/// labels: {0,1} with a 1-unit head, 0..K-1 with a K-unit softmax head.
TrainedClassifier train_classifier(const Matrix& x, std::span<const int> labels, const ClassifierArch& arch,
                                   const TrainConfig& config);

Mat to_mat(const Matrix& m);
Matrix from_mat(const Mat& m);
Mat targets_for(std::span<const int> labels, int num_outputs);

/// Inference-mode class probabilities (N x 1 for sigmoid heads).
Mat predict(const NeuralModel& model, const Matrix& x);

/// Inference-mode activations at the embedding layer.
Matrix extract_embedding(const NeuralModel& model, const Matrix& x);

enum class AeActivation { relu, linear };

struct AutoencoderConfig {
    double fraction = 0.25;
    std::vector<int> hidden{256, 64};
    int bottleneck = 8;
    AeActivation activation = AeActivation::relu;
    double learning_rate = 1e-3;
    std::size_t batch_size = 256;
    int epochs = 30;
    std::uint64_t seed = 42;
};

struct AutoencoderPair {
    NeuralModel encoder;
    NeuralModel decoder;
    std::vector<double> epoch_losses;  // mean reconstruction loss per epoch
    double initial_loss = 0.0;
    std::size_t trained_rows = 0;
};

/// Mean squared reconstruction error (1/M) sum_j ||x_j - D(E(x_j))||^2.
double reconstruction_loss(const AutoencoderPair& ae, const Matrix& x);
Matrix reconstruct(const AutoencoderPair& ae, const Matrix& x);

/// Trains on a seeded `fraction` of the rows of x (labels unused), fixed epochs.
AutoencoderPair train_autoencoder(const Matrix& x, const AutoencoderConfig& config);

nlohmann::json history_to_json(const TrainingHistory& h);

/// Manifest JSON plus a little-endian float64 tensor blob next to it.
void save_model(const NeuralModel& model, const std::filesystem::path& manifest_path,
                const nlohmann::json& extra = nlohmann::json::object());
NeuralModel load_model(const std::filesystem::path& manifest_path);

}  // namespace malsim::neural
