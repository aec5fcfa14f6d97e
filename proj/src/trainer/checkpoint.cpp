#include <bit>
#include <cstring>
#include <sstream>

#include "json.hpp"

#include "catnet/errors.hpp"
#include "catnet/trainer.hpp"
#include "catnet/volume_io.hpp"

namespace catnet {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'C', 'A', 'T', 'C'};
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kPrefix = 10;

template <typename T>
constexpr const char* dtype_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

template <typename T>
void append_values(std::vector<std::uint8_t>& out, const std::vector<T>& values) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (T v : values) {
        const U bits = std::bit_cast<U>(v);
        for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
}

template <typename T>
std::vector<T> read_values(const std::vector<std::uint8_t>& bytes, std::size_t offset, std::size_t count) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    std::vector<T> out(count);
    for (std::size_t k = 0; k < count; ++k) {
        U bits = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) bits |= U{bytes[offset + k * sizeof(T) + i]} << (8 * i);
        out[k] = std::bit_cast<T>(bits);
    }
    return out;
}

struct Parsed {
    json header;
    std::size_t payload_offset = 0;
};

Parsed parse_header(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < kPrefix) throw FormatError("truncated checkpoint header", bytes.size());
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad checkpoint magic", 0);
    const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | bytes[5] << 8);
    if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
    const std::uint32_t len = std::uint32_t{bytes[6]} | std::uint32_t{bytes[7]} << 8 | std::uint32_t{bytes[8]} << 16 |
                              std::uint32_t{bytes[9]} << 24;
    if (bytes.size() - kPrefix < len) throw FormatError("truncated checkpoint header", bytes.size());
    Parsed p;
    try {
        p.header = json::parse(bytes.begin() + kPrefix, bytes.begin() + kPrefix + len);
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed checkpoint header: ") + e.what(), kPrefix);
    }
    p.payload_offset = kPrefix + len;
    return p;
}

} // namespace

template <typename T>
TrainState<T> init_train_state(const TrainConfig& config) {
    config.validate();
    TrainState<T> s;
    s.config = config;
    s.net = make_segnet<T>(config.network, config.seed);
    s.optimizer.resize(named_parameters(s.net).size());
    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::ostringstream os;
    os << rng;
    s.rng_state = os.str();
    return s;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, TrainState<T>& state) {
    auto params = named_parameters(state.net);
    if (state.optimizer.size() != params.size()) throw UsageError("optimizer state does not match the parameters");
    std::vector<std::uint8_t> payload;
    json tensors = json::array();
    auto add = [&](const std::string& name, const std::string& role, const Shape& shape, const std::vector<T>& v) {
        tensors.push_back(json{{"name", name}, {"role", role}, {"shape", shape}, {"offset", payload.size()}});
        append_values(payload, v);
    };
    json steps = json::array();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        add(p.name, "param", p.tensor->shape(), p.tensor->values());
        const auto& opt = state.optimizer[i];
        if (!opt.m.empty()) {
            add(p.name, "adam_m", p.tensor->shape(), opt.m);
            add(p.name, "adam_v", p.tensor->shape(), opt.v);
        }
        steps.push_back(opt.step);
    }
    json header{{"format", "catnet-checkpoint"},
                {"dtype", dtype_name<T>()},
                {"epoch", state.epoch},
                {"best_val", state.best_val},
                {"best_epoch", state.best_epoch},
                {"rng", state.rng_state},
                {"config", json::parse(config_to_json(state.config))},
                {"adam_steps", steps},
                {"tensors", tensors}};
    const std::string text = header.dump();
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    out.push_back(static_cast<std::uint8_t>(kVersion));
    out.push_back(static_cast<std::uint8_t>(kVersion >> 8));
    const auto len = static_cast<std::uint32_t>(text.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), payload.begin(), payload.end());
    // Write-then-rename keeps an existing checkpoint intact if writing fails.
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    write_file(tmp, out);
    std::filesystem::rename(tmp, path);
}

Precision checkpoint_precision(const std::filesystem::path& path) {
    const auto p = parse_header(read_file(path));
    const auto dtype = p.header.value("dtype", std::string());
    if (dtype == "f32") return Precision::f32;
    if (dtype == "f64") return Precision::f64;
    throw FormatError("unknown checkpoint dtype '" + dtype + "'", kPrefix);
}

template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    const auto parsed = parse_header(bytes);
    const json& h = parsed.header;
    try {
        if (h.at("dtype").get<std::string>() != dtype_name<T>()) {
            throw FormatError("checkpoint dtype " + h.at("dtype").get<std::string>() + " does not match requested " +
                                  dtype_name<T>(),
                              kPrefix);
        }
        TrainState<T> s;
        s.config = config_from_json(h.at("config").dump());
        s.net = make_segnet<T>(s.config.network, s.config.seed);
        s.epoch = h.at("epoch").get<std::size_t>();
        s.best_val = h.at("best_val").get<double>();
        s.best_epoch = h.at("best_epoch").get<std::size_t>();
        s.rng_state = h.at("rng").get<std::string>();
        auto params = named_parameters(s.net);
        s.optimizer.resize(params.size());
        const auto steps = h.at("adam_steps").get<std::vector<std::uint64_t>>();
        if (steps.size() != params.size()) throw FormatError("checkpoint parameter count mismatch", kPrefix);

        std::map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < params.size(); ++i) index[params[i].name] = i;
        std::vector<bool> seen(params.size(), false);
        for (const auto& t : h.at("tensors")) {
            const auto name = t.at("name").get<std::string>();
            const auto it = index.find(name);
            if (it == index.end()) throw FormatError("checkpoint has unknown tensor '" + name + "'", kPrefix);
            auto& target = *params[it->second].tensor;
            const Shape shape = t.at("shape").get<Shape>();
            if (shape != target.shape()) {
                throw FormatError("tensor '" + name + "' has shape " + shape_str(shape) + ", network expects " +
                                      shape_str(target.shape()),
                                  kPrefix);
            }
            const std::size_t offset = parsed.payload_offset + t.at("offset").get<std::size_t>();
            const std::size_t count = target.size();
            if (offset + count * sizeof(T) > bytes.size()) throw FormatError("truncated tensor '" + name + "'", bytes.size());
            auto values = read_values<T>(bytes, offset, count);
            const auto role = t.at("role").get<std::string>();
            auto& opt = s.optimizer[it->second];
            if (role == "param") {
                target.values() = std::move(values);
                seen[it->second] = true;
            } else if (role == "adam_m") {
                opt.m = std::move(values);
            } else if (role == "adam_v") {
                opt.v = std::move(values);
            } else {
                throw FormatError("unknown tensor role '" + role + "'", kPrefix);
            }
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!seen[i]) throw FormatError("checkpoint lacks parameter '" + params[i].name + "'", kPrefix);
            s.optimizer[i].step = steps[i];
        }
        return s;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed checkpoint header: ") + e.what(), kPrefix);
    }
}

template TrainState<float> init_train_state<float>(const TrainConfig&);
template TrainState<double> init_train_state<double>(const TrainConfig&);
template void save_checkpoint<float>(const std::filesystem::path&, TrainState<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, TrainState<double>&);
template TrainState<float> load_checkpoint<float>(const std::filesystem::path&);
template TrainState<double> load_checkpoint<double>(const std::filesystem::path&);

} // namespace catnet
