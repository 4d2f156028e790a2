#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "malsim/features.hpp"
#include "malsim/metrics.hpp"
#include "malsim/neural.hpp"

namespace malsim::neural {

EarlyStopping::EarlyStopping(int patience)
    : patience_(patience), best_(std::numeric_limits<double>::infinity()) {
    if (patience < 1) throw Error(ErrorCode::config, "patience must be at least 1");
}

bool EarlyStopping::observe(double val_loss) {
    if (val_loss < best_) {
        best_ = val_loss;
        bad_epochs_ = 0;
        return true;
    }
    ++bad_epochs_;
    return false;
}

std::vector<LayerSpec> classifier_layers(const ClassifierArch& arch, int* embedding_index) {
    if (arch.num_outputs < 1) throw Error(ErrorCode::config, "classifier needs at least one output");
    std::vector<LayerSpec> specs;
    for (int width : arch.hidden) {
        specs.push_back({LayerKind::dense, width});
        if (arch.batchnorm) specs.push_back({LayerKind::batchnorm});
        specs.push_back({LayerKind::relu});
        if (arch.dropout > 0.0) specs.push_back({LayerKind::dropout, 0, arch.dropout});
    }
    specs.push_back({LayerKind::dense, arch.embedding_dim});
    specs.push_back({LayerKind::relu});
    if (embedding_index) *embedding_index = static_cast<int>(specs.size()) - 1;
    specs.push_back({LayerKind::dense, arch.num_outputs});
    specs.push_back({arch.num_outputs == 1 ? LayerKind::sigmoid : LayerKind::softmax});
    return specs;
}

namespace {

std::vector<std::size_t> iota_rows(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), 0);
    return v;
}

Mat gather(const Mat& x, std::span<const std::size_t> rows) {
    Mat out(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
    return out;
}

std::vector<int> predicted_classes(const Mat& probs) {
    std::vector<int> out(static_cast<std::size_t>(probs.rows()));
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        if (probs.cols() == 1) {
            out[static_cast<std::size_t>(i)] = probs(i, 0) >= 0.5 ? 1 : 0;
        } else {
            Eigen::Index best = 0;
            probs.row(i).maxCoeff(&best);
            out[static_cast<std::size_t>(i)] = static_cast<int>(best);
        }
    }
    return out;
}

void fill_validation_metrics(EpochRecord& rec, const Mat& probs, std::span<const int> y, int num_outputs) {
    const auto pred = predicted_classes(probs);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < y.size(); ++i) hits += pred[i] == y[i] ? 1 : 0;
    rec.val_accuracy = y.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(y.size());
    if (num_outputs != 1) return;
    std::vector<double> scores(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) scores[i] = probs(static_cast<Eigen::Index>(i), 0);
    const bool both = std::find(y.begin(), y.end(), 0) != y.end() && std::find(y.begin(), y.end(), 1) != y.end();
    rec.val_auc = both ? metrics::roc_auc_binary(y, scores) : 0.0;
    const auto report = metrics::classification_report(y, pred, 2);
    rec.val_precision = report.per_class[1].precision;
    rec.val_recall = report.per_class[1].recall;
}

}  // namespace

TrainedClassifier train_classifier(const Matrix& x, std::span<const int> labels, const ClassifierArch& arch,
                                   const TrainConfig& config) {
    if (x.rows() != labels.size()) throw Error(ErrorCode::dimension_mismatch, "label count differs from row count");
    if (x.rows() < 2) throw Error(ErrorCode::config, "classifier training needs at least two rows");
    if (!(config.learning_rate > 0.0)) throw Error(ErrorCode::config, "learning rate must be positive");
    if (config.batch_size == 0) throw Error(ErrorCode::config, "batch size must be positive");
    if (config.max_epochs < 1) throw Error(ErrorCode::config, "max_epochs must be at least 1");
    if (!(config.validation_fraction > 0.0 && config.validation_fraction < 1.0))
        throw Error(ErrorCode::config, "validation fraction must lie in (0, 1)");
    const int k = arch.num_outputs;
    for (int l : labels)
        if (l < 0 || l >= std::max(k, 2)) throw Error(ErrorCode::config, "label outside head width");
    const LossKind loss = k == 1 ? LossKind::bce : LossKind::categorical_ce;

    const auto assignment = features::stratified_assignment(labels, 1.0 - config.validation_fraction, config.seed);
    std::vector<std::size_t> fit_rows, val_rows;
    for (std::size_t i = 0; i < assignment.size(); ++i)
        (assignment[i] == features::Split::train ? fit_rows : val_rows).push_back(i);
    if (fit_rows.empty() || val_rows.empty())
        throw Error(ErrorCode::config, "validation carve left an empty fit or validation set");

    const Mat all = to_mat(x);
    const Mat x_fit = gather(all, fit_rows);
    const Mat x_val = gather(all, val_rows);
    std::vector<int> y_fit, y_val;
    for (auto r : fit_rows) y_fit.push_back(labels[r]);
    for (auto r : val_rows) y_val.push_back(labels[r]);
    const Mat t_fit = targets_for(y_fit, k);
    const Mat t_val = targets_for(y_val, k);
    std::vector<double> w_fit;
    if (!config.class_weights.empty()) {
        for (int l : y_fit) {
            if (static_cast<std::size_t>(l) >= config.class_weights.size())
                throw Error(ErrorCode::config, "class weight missing for label " + std::to_string(l));
            w_fit.push_back(config.class_weights[static_cast<std::size_t>(l)]);
        }
    }

    int emb = -1;
    const auto specs = classifier_layers(arch, &emb);
    TrainedClassifier out;
    out.model = build_model(static_cast<int>(x.cols()), specs, emb, config.seed);
    out.validation_rows = val_rows;
    NeuralModel& model = out.model;

    Rng order_rng(config.seed ^ 0x5bd1e995ULL);
    Rng dropout_rng(config.seed ^ 0x27d4eb2fULL);
    {
        Rng probe(config.seed ^ 0x165667b1ULL);
        out.history.initial_train_loss =
            compute_loss(model, forward(model, x_fit, Mode::train, &probe), t_fit, loss, w_fit);
    }

    AdamState adam;
    EarlyStopping stopper(config.patience);
    NeuralModel best = model;
    std::vector<std::size_t> order = iota_rows(fit_rows.size());
    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        try {
            order_rng.shuffle(order);
            CompensatedSum epoch_loss;
            for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
                const std::size_t end = std::min(order.size(), start + config.batch_size);
                std::span<const std::size_t> idx(order.data() + start, end - start);
                const Mat xb = gather(x_fit, idx);
                const Mat tb = gather(t_fit, idx);
                std::vector<double> wb;
                for (auto r : idx)
                    if (!w_fit.empty()) wb.push_back(w_fit[r]);
                const auto pass = forward(model, xb, Mode::train, &dropout_rng);
                const double batch_loss = compute_loss(model, pass, tb, loss, wb);
                if (!std::isfinite(batch_loss))
                    throw Error(ErrorCode::training, "loss diverged at epoch " + std::to_string(epoch));
                epoch_loss.add(batch_loss * static_cast<double>(idx.size()));
                const auto grads = backward(model, pass, tb, loss, wb);
                const auto params = parameter_spans(model);
                const auto gspans = gradient_spans(model, grads);
                adam_step(params, gspans, adam, config.learning_rate);
                update_running_stats(model, pass);
            }
            rec.train_loss = epoch_loss.value() / static_cast<double>(order.size());
            const auto val_pass = forward(model, x_val, Mode::inference);
            rec.val_loss = compute_loss(model, val_pass, t_val, loss);
            if (!std::isfinite(rec.val_loss))
                throw Error(ErrorCode::training, "validation loss diverged at epoch " + std::to_string(epoch));
            fill_validation_metrics(rec, val_pass.output, y_val, k);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::training) throw;
            throw Error(ErrorCode::training, "training failed at epoch " + std::to_string(epoch) + ": " + e.what());
        }
        out.history.epochs.push_back(rec);
        if (stopper.observe(rec.val_loss)) {
            best = model;
            out.history.best_epoch = epoch;
        }
        if (stopper.should_stop()) {
            out.history.stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    model = std::move(best);
    return out;
}

namespace {

std::vector<LayerSpec> stack(const std::vector<int>& widths, int last, AeActivation act) {
    std::vector<LayerSpec> specs;
    for (int w : widths) {
        specs.push_back({LayerKind::dense, w});
        if (act == AeActivation::relu) specs.push_back({LayerKind::relu});
    }
    specs.push_back({LayerKind::dense, last});
    return specs;
}

}  // namespace

Matrix reconstruct(const AutoencoderPair& ae, const Matrix& x) {
    const auto code = forward(ae.encoder, to_mat(x), Mode::inference).output;
    return from_mat(forward(ae.decoder, code, Mode::inference).output);
}

double reconstruction_loss(const AutoencoderPair& ae, const Matrix& x) {
    if (x.rows() == 0) throw Error(ErrorCode::config, "reconstruction loss of an empty batch");
    const Mat in = to_mat(x);
    const auto code = forward(ae.encoder, in, Mode::inference).output;
    const auto dec = forward(ae.decoder, code, Mode::inference);
    return compute_loss(ae.decoder, dec, in, LossKind::mse);
}

AutoencoderPair train_autoencoder(const Matrix& x, const AutoencoderConfig& config) {
    if (!(config.fraction > 0.0 && config.fraction <= 1.0))
        throw Error(ErrorCode::config, "autoencoder fraction must lie in (0, 1]");
    if (!(config.learning_rate > 0.0)) throw Error(ErrorCode::config, "learning rate must be positive");
    if (config.batch_size == 0 || config.epochs < 1 || config.bottleneck < 1)
        throw Error(ErrorCode::config, "autoencoder batch size, epochs and bottleneck must be positive");
    if (x.rows() == 0) throw Error(ErrorCode::config, "autoencoder needs training rows");

    std::vector<std::size_t> rows = iota_rows(x.rows());
    Rng pick(config.seed);
    pick.shuffle(rows);
    const auto m = static_cast<std::size_t>(std::lround(static_cast<double>(x.rows()) * config.fraction));
    if (m == 0) throw Error(ErrorCode::config, "autoencoder fraction selects no rows");
    rows.resize(m);
    std::sort(rows.begin(), rows.end());
    const Matrix subset = x.select_rows(rows);
    const Mat data = to_mat(subset);

    AutoencoderPair ae;
    ae.trained_rows = m;
    const int d = static_cast<int>(x.cols());
    const auto enc_specs = stack(config.hidden, config.bottleneck, config.activation);
    std::vector<int> rev(config.hidden.rbegin(), config.hidden.rend());
    const auto dec_specs = stack(rev, d, config.activation);
    ae.encoder = build_model(d, enc_specs, static_cast<int>(enc_specs.size()) - 1, config.seed);
    ae.decoder = build_model(config.bottleneck, dec_specs, -1, config.seed + 1);
    ae.initial_loss = reconstruction_loss(ae, subset);

    AdamState adam;
    Rng order_rng(config.seed ^ 0x5bd1e995ULL);
    std::vector<std::size_t> order = iota_rows(m);
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        try {
            order_rng.shuffle(order);
            for (std::size_t start = 0; start < m; start += config.batch_size) {
                const std::size_t end = std::min(m, start + config.batch_size);
                const Mat xb = gather(data, std::span<const std::size_t>(order.data() + start, end - start));
                const auto enc = forward(ae.encoder, xb, Mode::train);
                const auto dec = forward(ae.decoder, enc.output, Mode::train);
                const auto gd = backward(ae.decoder, dec, xb, LossKind::mse);
                const auto ge = backward_from_output(ae.encoder, enc, gd.d_input);
                auto params = parameter_spans(ae.encoder);
                auto dec_params = parameter_spans(ae.decoder);
                params.insert(params.end(), dec_params.begin(), dec_params.end());
                auto grads = gradient_spans(ae.encoder, ge);
                auto dec_grads = gradient_spans(ae.decoder, gd);
                grads.insert(grads.end(), dec_grads.begin(), dec_grads.end());
                adam_step(params, grads, adam, config.learning_rate);
            }
            const double l = reconstruction_loss(ae, subset);
            if (!std::isfinite(l)) throw Error(ErrorCode::training, "loss diverged at epoch " + std::to_string(epoch));
            ae.epoch_losses.push_back(l);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::training) throw;
            throw Error(ErrorCode::training, "training failed at epoch " + std::to_string(epoch) + ": " + e.what());
        }
    }
    return ae;
}

nlohmann::json history_to_json(const TrainingHistory& h) {
    nlohmann::json j;
    j["initial_train_loss"] = h.initial_train_loss;
    j["best_epoch"] = h.best_epoch;
    j["stopped_early"] = h.stopped_early;
    auto& epochs = j["epochs"] = nlohmann::json::array();
    for (const auto& e : h.epochs)
        epochs.push_back({{"epoch", e.epoch},
                          {"train_loss", e.train_loss},
                          {"val_loss", e.val_loss},
                          {"val_accuracy", e.val_accuracy},
                          {"val_auc", e.val_auc},
                          {"val_precision", e.val_precision},
                          {"val_recall", e.val_recall}});
    return j;
}

}  // namespace malsim::neural
