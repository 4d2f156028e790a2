#include <algorithm>
#include <cmath>

#include "malsim/neural.hpp"

namespace malsim::neural {

std::string_view layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::dense: return "dense";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::relu: return "relu";
        case LayerKind::dropout: return "dropout";
        case LayerKind::sigmoid: return "sigmoid";
        case LayerKind::softmax: return "softmax";
    }
    return "?";
}

LayerKind layer_kind_from_name(std::string_view name) {
    for (auto k : {LayerKind::dense, LayerKind::batchnorm, LayerKind::relu, LayerKind::dropout, LayerKind::sigmoid,
                   LayerKind::softmax})
        if (layer_kind_name(k) == name) return k;
    throw Error(ErrorCode::config, "unknown layer kind '" + std::string(name) + "'");
}

int NeuralModel::embedding_dim() const {
    if (embedding_layer_index < 0 || static_cast<std::size_t>(embedding_layer_index) >= layers.size())
        throw Error(ErrorCode::config, "model has no embedding layer");
    return layers[static_cast<std::size_t>(embedding_layer_index)].out_dim;
}

NeuralModel build_model(int input_dim, const std::vector<LayerSpec>& specs, int embedding_layer_index,
                        std::uint64_t seed) {
    if (input_dim <= 0) throw Error(ErrorCode::config, "input dimension must be positive");
    NeuralModel m;
    m.input_dim = input_dim;
    m.seed = seed;
    m.embedding_layer_index = embedding_layer_index;
    Rng rng(seed);
    int width = input_dim;
    for (const auto& spec : specs) {
        Layer layer;
        layer.spec = spec;
        layer.in_dim = width;
        switch (spec.kind) {
            case LayerKind::dense: {
                if (spec.width <= 0) throw Error(ErrorCode::config, "dense width must be positive");
                layer.out_dim = spec.width;
                const double scale = std::sqrt(2.0 / static_cast<double>(width));
                layer.W.resize(width, spec.width);
                for (Eigen::Index i = 0; i < layer.W.size(); ++i) layer.W.data()[i] = rng.normal(0.0, scale);
                layer.b = Vec::Zero(spec.width);
                break;
            }
            case LayerKind::batchnorm:
                layer.out_dim = width;
                layer.gamma = Vec::Ones(width);
                layer.beta = Vec::Zero(width);
                layer.running_mean = Vec::Zero(width);
                layer.running_var = Vec::Ones(width);
                break;
            case LayerKind::dropout:
                if (spec.rate < 0.0 || spec.rate >= 1.0) throw Error(ErrorCode::config, "dropout rate must lie in [0, 1)");
                layer.out_dim = width;
                break;
            default:
                layer.out_dim = width;
        }
        width = layer.out_dim;
        m.layers.push_back(std::move(layer));
    }
    if (embedding_layer_index >= static_cast<int>(m.layers.size()))
        throw Error(ErrorCode::config, "embedding layer index outside the model");
    return m;
}

namespace {

void sigmoid_inplace(Mat& z) {
    z = z.unaryExpr([](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
    });
}

void softmax_rows(Mat& z) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        auto row = z.row(i);
        const double mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
    }
}

double log_sum_exp(const Eigen::Ref<const Vec>& row) {
    const double mx = row.maxCoeff();
    return mx + std::log((row.array() - mx).exp().sum());
}

double weight_of(std::span<const double> w, Eigen::Index i) {
    return w.empty() ? 1.0 : w[static_cast<std::size_t>(i)];
}

bool fused_head(const NeuralModel& model, LossKind loss) {
    if (model.layers.empty()) return false;
    const auto kind = model.layers.back().spec.kind;
    return (kind == LayerKind::sigmoid && loss == LossKind::bce) ||
           (kind == LayerKind::softmax && loss == LossKind::categorical_ce);
}

void check_targets(const ForwardResult& pass, const Mat& targets, std::span<const double> w) {
    if (targets.rows() != pass.output.rows() || targets.cols() != pass.output.cols())
        throw Error(ErrorCode::dimension_mismatch, "targets shape differs from model output");
    if (!w.empty() && static_cast<Eigen::Index>(w.size()) != targets.rows())
        throw Error(ErrorCode::dimension_mismatch, "sample weight count differs from batch size");
}

Gradients backprop(const NeuralModel& model, const ForwardResult& pass, Mat grad, std::size_t start) {
    Gradients out;
    out.layers.resize(model.layers.size());
    for (std::size_t idx = start; idx-- > 0;) {
        const Layer& layer = model.layers[idx];
        const Mat& x = pass.inputs[idx];
        auto& lg = out.layers[idx];
        switch (layer.spec.kind) {
            case LayerKind::dense:
                lg.dW = x.transpose() * grad;
                lg.db = grad.colwise().sum();
                grad = grad * layer.W.transpose();
                break;
            case LayerKind::batchnorm: {
                const Mat& xhat = pass.xhat[idx];
                lg.dgamma = grad.cwiseProduct(xhat).colwise().sum();
                lg.dbeta = grad.colwise().sum();
                Mat dxhat = grad.array().rowwise() * layer.gamma.array();
                if (pass.mode == Mode::train) {
                    const double m = static_cast<double>(x.rows());
                    Vec sum_d = dxhat.colwise().sum();
                    Vec sum_dx = dxhat.cwiseProduct(xhat).colwise().sum();
                    Mat inner = (dxhat * m).rowwise() - sum_d;
                    inner -= (xhat.array().rowwise() * sum_dx.array()).matrix();
                    grad = (inner.array().rowwise() * (pass.inv_std[idx].array() / m)).matrix();
                } else {
                    grad = (dxhat.array().rowwise() * pass.inv_std[idx].array()).matrix();
                }
                break;
            }
            case LayerKind::relu:
                grad = grad.cwiseProduct((x.array() > 0.0).cast<double>().matrix());
                break;
            case LayerKind::dropout:
                if (pass.masks[idx].size() > 0) grad = grad.cwiseProduct(pass.masks[idx]);
                break;
            case LayerKind::sigmoid: {
                const Mat& s = pass.activation(idx);
                grad = grad.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix()));
                break;
            }
            case LayerKind::softmax: {
                const Mat& s = pass.activation(idx);
                Eigen::VectorXd dots = grad.cwiseProduct(s).rowwise().sum();
                grad = s.cwiseProduct((grad.colwise() - dots).eval());
                break;
            }
        }
    }
    out.d_input = std::move(grad);
    return out;
}

}  // namespace

ForwardResult forward(const NeuralModel& model, const Mat& batch, Mode mode, Rng* dropout_rng) {
    if (batch.cols() != model.input_dim)
        throw Error(ErrorCode::dimension_mismatch, "batch has " + std::to_string(batch.cols()) +
                                                       " columns, model expects " + std::to_string(model.input_dim));
    const std::size_t n_layers = model.layers.size();
    ForwardResult r;
    r.mode = mode;
    r.inputs.reserve(n_layers);
    r.masks.resize(n_layers);
    r.xhat.resize(n_layers);
    r.inv_std.resize(n_layers);
    r.batch_mean.resize(n_layers);
    r.batch_var.resize(n_layers);

    Mat cur = batch;
    for (std::size_t i = 0; i < n_layers; ++i) {
        const Layer& layer = model.layers[i];
        r.inputs.push_back(cur);
        switch (layer.spec.kind) {
            case LayerKind::dense:
                cur = (cur * layer.W).rowwise() + layer.b;
                break;
            case LayerKind::batchnorm: {
                Vec mean, var;
                if (mode == Mode::train) {
                    mean = cur.colwise().mean();
                    var = (cur.rowwise() - mean).array().square().matrix().colwise().mean();
                    r.batch_mean[i] = mean;
                    r.batch_var[i] = var;
                } else {
                    mean = layer.running_mean;
                    var = layer.running_var;
                }
                r.inv_std[i] = (var.array() + layer.spec.epsilon).rsqrt().matrix();
                r.xhat[i] = ((cur.rowwise() - mean).array().rowwise() * r.inv_std[i].array()).matrix();
                cur = (r.xhat[i].array().rowwise() * layer.gamma.array()).matrix().rowwise() + layer.beta;
                break;
            }
            case LayerKind::relu:
                cur = cur.cwiseMax(0.0);
                break;
            case LayerKind::dropout:
                if (mode == Mode::train && layer.spec.rate > 0.0) {
                    if (dropout_rng == nullptr) throw Error(ErrorCode::config, "train-mode dropout needs an RNG");
                    const double keep = 1.0 / (1.0 - layer.spec.rate);
                    Mat mask(cur.rows(), cur.cols());
                    for (Eigen::Index k = 0; k < mask.size(); ++k)
                        mask.data()[k] = dropout_rng->uniform() < layer.spec.rate ? 0.0 : keep;
                    cur = cur.cwiseProduct(mask);
                    r.masks[i] = std::move(mask);
                }
                break;
            case LayerKind::sigmoid:
                sigmoid_inplace(cur);
                break;
            case LayerKind::softmax:
                softmax_rows(cur);
                break;
        }
        if (!cur.allFinite())
            throw Error(ErrorCode::numeric_overflow,
                        "non-finite activation at layer " + std::to_string(i) + " (" +
                            std::string(layer_kind_name(layer.spec.kind)) + ")");
    }
    r.output = std::move(cur);
    return r;
}

void update_running_stats(NeuralModel& model, const ForwardResult& pass) {
    if (pass.mode != Mode::train) return;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        Layer& layer = model.layers[i];
        if (layer.spec.kind != LayerKind::batchnorm) continue;
        const double m = layer.spec.momentum;
        layer.running_mean = m * layer.running_mean + (1.0 - m) * pass.batch_mean[i];
        layer.running_var = m * layer.running_var + (1.0 - m) * pass.batch_var[i];
    }
}

double compute_loss(const NeuralModel& model, const ForwardResult& pass, const Mat& targets, LossKind loss,
                    std::span<const double> w) {
    check_targets(pass, targets, w);
    const Mat& out = pass.output;
    const Eigen::Index m = out.rows();
    const bool fused = fused_head(model, loss);
    const Mat& pre = fused ? pass.inputs.back() : out;
    CompensatedSum total;
    for (Eigen::Index i = 0; i < m; ++i) {
        double li = 0.0;
        switch (loss) {
            case LossKind::mse:
                li = (out.row(i) - targets.row(i)).squaredNorm();
                break;
            case LossKind::bce:
                for (Eigen::Index j = 0; j < out.cols(); ++j) {
                    const double y = targets(i, j);
                    if (fused) {
                        const double z = pre(i, j);
                        li += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
                    } else {
                        const double p = std::clamp(out(i, j), 1e-15, 1.0 - 1e-15);
                        li -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
                    }
                }
                break;
            case LossKind::categorical_ce:
                if (fused) {
                    const double lse = log_sum_exp(pre.row(i));
                    for (Eigen::Index j = 0; j < out.cols(); ++j) li += targets(i, j) * (lse - pre(i, j));
                } else {
                    for (Eigen::Index j = 0; j < out.cols(); ++j)
                        li -= targets(i, j) * std::log(std::max(out(i, j), 1e-15));
                }
                break;
        }
        total.add(weight_of(w, i) * li);
    }
    return total.value() / static_cast<double>(m);
}

Gradients backward(const NeuralModel& model, const ForwardResult& pass, const Mat& targets, LossKind loss,
                   std::span<const double> w) {
    check_targets(pass, targets, w);
    const Mat& out = pass.output;
    const double inv_m = 1.0 / static_cast<double>(out.rows());
    Vec scale(out.rows());
    Eigen::VectorXd row_scale(out.rows());
    for (Eigen::Index i = 0; i < out.rows(); ++i) row_scale(i) = weight_of(w, i) * inv_m;

    if (fused_head(model, loss)) {
        Mat dz;
        if (loss == LossKind::bce) {
            dz = out - targets;
        } else {
            Eigen::VectorXd tsum = targets.rowwise().sum();
            dz = (out.array().colwise() * tsum.array()).matrix() - targets;
        }
        dz = (dz.array().colwise() * row_scale.array()).matrix();
        return backprop(model, pass, std::move(dz), model.layers.size() - 1);
    }

    Mat d_out;
    switch (loss) {
        case LossKind::mse:
            d_out = 2.0 * (out - targets);
            break;
        case LossKind::bce: {
            Mat p = out.cwiseMax(1e-15).cwiseMin(1.0 - 1e-15);
            d_out = (p - targets).cwiseQuotient(p.cwiseProduct((1.0 - p.array()).matrix()));
            break;
        }
        case LossKind::categorical_ce:
            d_out = -targets.cwiseQuotient(out.cwiseMax(1e-15));
            break;
    }
    d_out = (d_out.array().colwise() * row_scale.array()).matrix();
    return backprop(model, pass, std::move(d_out), model.layers.size());
}

Gradients backward_from_output(const NeuralModel& model, const ForwardResult& pass, const Mat& d_output) {
    if (d_output.rows() != pass.output.rows() || d_output.cols() != pass.output.cols())
        throw Error(ErrorCode::dimension_mismatch, "output gradient shape differs from model output");
    return backprop(model, pass, d_output, model.layers.size());
}

std::vector<std::span<double>> parameter_spans(NeuralModel& model) {
    std::vector<std::span<double>> out;
    for (auto& layer : model.layers) {
        if (layer.spec.kind == LayerKind::dense) {
            out.emplace_back(layer.W.data(), static_cast<std::size_t>(layer.W.size()));
            out.emplace_back(layer.b.data(), static_cast<std::size_t>(layer.b.size()));
        } else if (layer.spec.kind == LayerKind::batchnorm) {
            out.emplace_back(layer.gamma.data(), static_cast<std::size_t>(layer.gamma.size()));
            out.emplace_back(layer.beta.data(), static_cast<std::size_t>(layer.beta.size()));
        }
    }
    return out;
}

std::vector<std::span<const double>> gradient_spans(const NeuralModel& model, const Gradients& grads) {
    std::vector<std::span<const double>> out;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& g = grads.layers[i];
        const auto& layer = model.layers[i];
        auto span_of = [](const auto& m, Eigen::Index expected) {
            if (m.size() != expected) throw Error(ErrorCode::dimension_mismatch, "gradient missing for a parameter");
            return std::span<const double>(m.data(), static_cast<std::size_t>(m.size()));
        };
        if (layer.spec.kind == LayerKind::dense) {
            out.push_back(span_of(g.dW, layer.W.size()));
            out.push_back(span_of(g.db, layer.b.size()));
        } else if (layer.spec.kind == LayerKind::batchnorm) {
            out.push_back(span_of(g.dgamma, layer.gamma.size()));
            out.push_back(span_of(g.dbeta, layer.beta.size()));
        }
    }
    return out;
}

void adam_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
               AdamState& s, double lr) {
    if (params.size() != grads.size()) throw Error(ErrorCode::dimension_mismatch, "parameter/gradient count mismatch");
    if (s.m.empty()) {
        for (const auto& p : params) {
            s.m.emplace_back(p.size(), 0.0);
            s.v.emplace_back(p.size(), 0.0);
        }
    }
    ++s.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto p = params[t];
        auto g = grads[t];
        if (p.size() != g.size() || s.m[t].size() != p.size())
            throw Error(ErrorCode::dimension_mismatch, "parameter/gradient size mismatch");
        auto& m = s.m[t];
        auto& v = s.v[t];
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * g[k];
            v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * g[k] * g[k];
            const double mhat = m[k] / c1;
            const double vhat = v[k] / c2;
            p[k] -= lr * mhat / (std::sqrt(vhat) + s.epsilon);
        }
    }
}

Mat to_mat(const Matrix& m) {
    Mat out(static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
    std::copy(m.data().begin(), m.data().end(), out.data());
    return out;
}

Matrix from_mat(const Mat& m) {
    Matrix out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
    std::copy(m.data(), m.data() + m.size(), out.data().begin());
    return out;
}

Mat targets_for(std::span<const int> labels, int num_outputs) {
    Mat t = Mat::Zero(static_cast<Eigen::Index>(labels.size()), num_outputs);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        if (num_outputs == 1) {
            t(r, 0) = labels[i] == 1 ? 1.0 : 0.0;
        } else {
            if (labels[i] < 0 || labels[i] >= num_outputs)
                throw Error(ErrorCode::config, "label " + std::to_string(labels[i]) + " outside head width");
            t(r, labels[i]) = 1.0;
        }
    }
    return t;
}

Mat predict(const NeuralModel& model, const Matrix& x) { return forward(model, to_mat(x), Mode::inference).output; }

Matrix extract_embedding(const NeuralModel& model, const Matrix& x) {
    if (model.embedding_layer_index < 0) throw Error(ErrorCode::config, "model has no embedding layer");
    if (x.cols() != static_cast<std::size_t>(model.input_dim))
        throw Error(ErrorCode::dimension_mismatch, "input has " + std::to_string(x.cols()) +
                                                       " columns, model expects " + std::to_string(model.input_dim));
    NeuralModel head = model;
    head.layers.resize(static_cast<std::size_t>(model.embedding_layer_index) + 1);
    return from_mat(forward(head, to_mat(x), Mode::inference).output);
}

}  // namespace malsim::neural
