#include <bit>
#include <cstring>
#include <fstream>

#include "malsim/neural.hpp"

namespace malsim::neural {

namespace {

constexpr const char* kFormat = "malsim-mlp-v1";

std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
    auto p = manifest;
    p.replace_extension(".bin");
    return p;
}

void append_le(std::vector<unsigned char>& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xffu));
}

double read_le(const std::vector<unsigned char>& in, std::size_t pos) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(in[pos + static_cast<std::size_t>(i)]) << (8 * i);
    return std::bit_cast<double>(bits);
}

template <typename M>
nlohmann::json put(std::vector<unsigned char>& blob, const M& m) {
    nlohmann::json entry{{"offset", blob.size()}, {"rows", m.rows()}, {"cols", m.cols()}};
    for (Eigen::Index i = 0; i < m.size(); ++i) append_le(blob, m.data()[i]);
    return entry;
}

template <typename M>
void take(const std::vector<unsigned char>& blob, const nlohmann::json& entry, M& m) {
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    m.resize(rows, cols);
    if (offset + static_cast<std::size_t>(m.size()) * 8 > blob.size())
        throw Error(ErrorCode::io, "tensor blob is truncated");
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = read_le(blob, offset + static_cast<std::size_t>(i) * 8);
}

}  // namespace

void save_model(const NeuralModel& model, const std::filesystem::path& manifest_path, const nlohmann::json& extra) {
    std::vector<unsigned char> blob;
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : model.layers) {
        nlohmann::json l{{"kind", layer_kind_name(layer.spec.kind)},
                         {"width", layer.spec.width},
                         {"rate", layer.spec.rate},
                         {"epsilon", layer.spec.epsilon},
                         {"momentum", layer.spec.momentum},
                         {"in_dim", layer.in_dim},
                         {"out_dim", layer.out_dim}};
        nlohmann::json tensors = nlohmann::json::object();
        if (layer.spec.kind == LayerKind::dense) {
            tensors["W"] = put(blob, layer.W);
            tensors["b"] = put(blob, layer.b);
        } else if (layer.spec.kind == LayerKind::batchnorm) {
            tensors["gamma"] = put(blob, layer.gamma);
            tensors["beta"] = put(blob, layer.beta);
            tensors["running_mean"] = put(blob, layer.running_mean);
            tensors["running_var"] = put(blob, layer.running_var);
        }
        l["tensors"] = std::move(tensors);
        layers.push_back(std::move(l));
    }
    const auto blob_path = blob_path_for(manifest_path);
    nlohmann::json manifest{{"format", kFormat},
                            {"input_dim", model.input_dim},
                            {"embedding_layer_index", model.embedding_layer_index},
                            {"seed", model.seed},
                            {"layers", std::move(layers)},
                            {"blob", blob_path.filename().string()},
                            {"blob_bytes", blob.size()},
                            {"extra", extra}};
    std::ofstream b(blob_path, std::ios::binary);
    if (!b) throw Error(ErrorCode::io, "cannot write " + blob_path.string());
    b.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    std::ofstream m(manifest_path);
    if (!m) throw Error(ErrorCode::io, "cannot write " + manifest_path.string());
    m << manifest.dump(2) << '\n';
}

NeuralModel load_model(const std::filesystem::path& manifest_path) {
    std::ifstream m(manifest_path);
    if (!m) throw Error(ErrorCode::missing_artifact, "missing model manifest " + manifest_path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(m);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::io, "malformed model manifest: " + std::string(e.what()));
    }
    if (j.value("format", "") != kFormat) throw Error(ErrorCode::io, "unrecognized model format");
    const auto blob_path = manifest_path.parent_path() / j.at("blob").get<std::string>();
    std::ifstream b(blob_path, std::ios::binary);
    if (!b) throw Error(ErrorCode::missing_artifact, "missing tensor blob " + blob_path.string());
    std::vector<unsigned char> blob((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());

    NeuralModel model;
    model.input_dim = j.at("input_dim").get<int>();
    model.embedding_layer_index = j.at("embedding_layer_index").get<int>();
    model.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& l : j.at("layers")) {
        Layer layer;
        layer.spec.kind = layer_kind_from_name(l.at("kind").get<std::string>());
        layer.spec.width = l.at("width").get<int>();
        layer.spec.rate = l.at("rate").get<double>();
        layer.spec.epsilon = l.at("epsilon").get<double>();
        layer.spec.momentum = l.at("momentum").get<double>();
        layer.in_dim = l.at("in_dim").get<int>();
        layer.out_dim = l.at("out_dim").get<int>();
        const auto& t = l.at("tensors");
        if (layer.spec.kind == LayerKind::dense) {
            take(blob, t.at("W"), layer.W);
            take(blob, t.at("b"), layer.b);
        } else if (layer.spec.kind == LayerKind::batchnorm) {
            take(blob, t.at("gamma"), layer.gamma);
            take(blob, t.at("beta"), layer.beta);
            take(blob, t.at("running_mean"), layer.running_mean);
            take(blob, t.at("running_var"), layer.running_var);
        }
        model.layers.push_back(std::move(layer));
    }
    return model;
}

}  // namespace malsim::neural
