#include <fstream>

#include "malsim/gbdt.hpp"

namespace malsim::gbdt {

using nlohmann::json;

namespace {

json node_to_json(const Tree& tree, int id) {
    const auto& nd = tree.nodes[static_cast<std::size_t>(id)];
    if (nd.is_leaf()) return {{"leaf_id", nd.leaf_id}, {"weight", nd.weight}};
    return {{"feature_index", nd.feature},
            {"threshold", nd.threshold},
            {"children", {node_to_json(tree, nd.left), node_to_json(tree, nd.right)}}};
}

int node_from_json(const json& j, Tree& tree) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    if (j.contains("leaf_id")) {
        auto& nd = tree.nodes.back();
        nd.leaf_id = j.at("leaf_id").get<int>();
        nd.weight = j.at("weight").get<double>();
        tree.n_leaves = std::max(tree.n_leaves, nd.leaf_id + 1);
        return id;
    }
    const auto& children = j.at("children");
    if (!children.is_array() || children.size() != 2) throw Error(ErrorCode::io, "internal node needs two children");
    const int left = node_from_json(children[0], tree);
    const int right = node_from_json(children[1], tree);
    auto& nd = tree.nodes[static_cast<std::size_t>(id)];
    nd.feature = j.at("feature_index").get<int>();
    nd.threshold = j.at("threshold").get<double>();
    nd.left = left;
    nd.right = right;
    return id;
}

}  // namespace

json to_json(const GbdtModel& model) {
    const auto& p = model.params;
    json trees = json::array();
    for (const auto& t : model.trees) trees.push_back(node_to_json(t, 0));
    return {
        {"objective", model.objective == Objective::logistic ? "logistic" : "softmax"},
        {"num_classes", model.num_classes},
        {"num_features", model.num_features},
        {"base_score", p.base_score},
        {"hyperparams",
         {{"max_depth", p.max_depth},
          {"learning_rate", p.learning_rate},
          {"rounds", p.rounds},
          {"lambda", p.lambda},
          {"gamma", p.gamma},
          {"min_child_weight", p.min_child_weight}}},
        {"trees", trees},
    };
}

GbdtModel model_from_json(const json& j) {
    GbdtModel m;
    const auto obj = j.at("objective").get<std::string>();
    if (obj == "logistic")
        m.objective = Objective::logistic;
    else if (obj == "softmax")
        m.objective = Objective::softmax;
    else
        throw Error(ErrorCode::io, "unknown objective '" + obj + "'");
    m.num_classes = j.at("num_classes").get<int>();
    m.num_features = j.at("num_features").get<std::size_t>();
    const auto& hp = j.at("hyperparams");
    m.params.max_depth = hp.at("max_depth").get<int>();
    m.params.learning_rate = hp.at("learning_rate").get<double>();
    m.params.rounds = hp.at("rounds").get<int>();
    m.params.lambda = hp.at("lambda").get<double>();
    m.params.gamma = hp.at("gamma").get<double>();
    m.params.min_child_weight = hp.at("min_child_weight").get<double>();
    m.params.base_score = j.at("base_score").get<double>();
    for (const auto& t : j.at("trees")) {
        Tree tree;
        node_from_json(t, tree);
        m.trees.push_back(std::move(tree));
    }
    if (m.trees.size() % static_cast<std::size_t>(m.trees_per_round()) != 0)
        throw Error(ErrorCode::io, "tree count is not a multiple of trees per round");
    return m;
}

void save_model(const GbdtModel& model, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out << to_json(model).dump() << '\n';
}

GbdtModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::missing_artifact, "cannot open model " + path.string());
    return model_from_json(json::parse(in));
}

}  // namespace malsim::gbdt
