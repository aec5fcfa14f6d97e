#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "catnet/errors.hpp"
#include "catnet/trainer.hpp"

namespace catnet {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& known, const std::string& where) {
    for (const auto& [key, value] : obj.items()) {
        if (!known.count(key)) throw ConfigError("unknown " + where + " field '" + key + "'");
    }
}

template <typename V>
void read_if(const json& obj, const char* key, V& dst) {
    if (obj.contains(key)) dst = obj.at(key).get<V>();
}

} // namespace

void TrainConfig::validate() const {
    network.validate();
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (batch < 1) throw ConfigError("batch must be at least 1");
}

TrainConfig config_from_json(const std::string& text) {
    TrainConfig c;
    try {
        const json doc = json::parse(text);
        if (!doc.is_object()) throw ConfigError("config must be a JSON object");
        reject_unknown(doc,
                       {"network", "epochs", "lr", "weight_decay", "batch", "seed", "precision", "data", "output",
                        "capture_attention"},
                       "config");
        if (doc.contains("network")) {
            const json& n = doc.at("network");
            reject_unknown(n,
                           {"scales", "filters", "slices", "height", "width", "in_channels", "blocks", "heads", "pool",
                            "cat_layers", "pe", "transformer"},
                           "network");
            auto& net = c.network;
            read_if(n, "scales", net.scales);
            read_if(n, "filters", net.filters);
            read_if(n, "slices", net.slices);
            read_if(n, "height", net.height);
            read_if(n, "width", net.width);
            read_if(n, "in_channels", net.in_channels);
            read_if(n, "blocks", net.blocks);
            read_if(n, "heads", net.heads);
            read_if(n, "pool", net.pool);
            read_if(n, "cat_layers", net.cat_layers);
            read_if(n, "pe", net.pe_enabled);
            read_if(n, "transformer", net.transformer_enabled);
        }
        read_if(doc, "epochs", c.epochs);
        read_if(doc, "lr", c.lr);
        read_if(doc, "weight_decay", c.weight_decay);
        read_if(doc, "batch", c.batch);
        read_if(doc, "seed", c.seed);
        read_if(doc, "capture_attention", c.capture_attention);
        if (doc.contains("precision")) {
            const auto p = doc.at("precision").get<std::string>();
            if (p == "f32") {
                c.precision = Precision::f32;
            } else if (p == "f64") {
                c.precision = Precision::f64;
            } else {
                throw ConfigError("precision must be \"f32\" or \"f64\", got \"" + p + "\"");
            }
        }
        if (doc.contains("data")) c.data = doc.at("data").get<std::string>();
        if (doc.contains("output")) c.output = doc.at("output").get<std::string>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    return c;
}

std::string config_to_json(const TrainConfig& c) {
    const auto& n = c.network;
    json doc{{"network",
              {{"scales", n.scales},
               {"filters", n.filters},
               {"slices", n.slices},
               {"height", n.height},
               {"width", n.width},
               {"in_channels", n.in_channels},
               {"blocks", n.blocks},
               {"heads", n.heads},
               {"pool", n.pool},
               {"cat_layers", n.cat_layers},
               {"pe", n.pe_enabled},
               {"transformer", n.transformer_enabled}}},
             {"epochs", c.epochs},
             {"lr", c.lr},
             {"weight_decay", c.weight_decay},
             {"batch", c.batch},
             {"seed", c.seed},
             {"precision", c.precision == Precision::f32 ? "f32" : "f64"},
             {"data", c.data.string()},
             {"output", c.output.string()},
             {"capture_attention", c.capture_attention}};
    return doc.dump(2);
}

TrainConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return config_from_json(ss.str());
}

} // namespace catnet
