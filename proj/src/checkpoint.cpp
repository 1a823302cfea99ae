#include "lacoste/checkpoint.hpp"

#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lacoste::checkpoint {

namespace {

json read_manifest(const std::string& dir) {
    const fs::path p = fs::path(dir) / "manifest.json";
    std::ifstream in(p);
    if (!in) throw data_error("checkpoint: cannot open " + p.string());
    json m;
    try {
        in >> m;
    } catch (const json::exception& e) {
        throw data_error("checkpoint: malformed manifest " + p.string() + ": " + e.what());
    }
    return m;
}

void write_f32(const fs::path& p, const Tensor& t) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw data_error("checkpoint: cannot write " + p.string());
    std::vector<float> buf(static_cast<size_t>(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(t[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

Tensor read_f32(const fs::path& p, const std::vector<int64_t>& shape) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw data_error("checkpoint: cannot open " + p.string());
    Tensor t(shape);
    std::vector<float> buf(static_cast<size_t>(t.numel()));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
        throw data_error("checkpoint: short read on " + p.string());
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = buf[static_cast<size_t>(i)];
    return t;
}

std::string bin_name(const std::string& param) {
    std::string s = param;
    for (char& c : s)
        if (c == '/') c = '_';
    return s + ".bin";
}

}  // namespace

void save_component(const std::string& dir, const std::string& component,
                    const nn::ParamStore& params, const std::string& config_json_echo) {
    fs::create_directories(dir);
    json m;
    if (fs::exists(fs::path(dir) / "manifest.json")) m = read_manifest(dir);
    if (!m.contains("format")) m["format"] = "lacoste-checkpoint-v1";
    if (!m.contains("components")) m["components"] = json::object();
    m["components"][component] =
        config_json_echo.empty() ? json::object() : json::parse(config_json_echo);

    // Drop stale entries for this component, then append current ones in
    // registration order (sorted-stable bytes for a fixed param set).
    json kept = json::array();
    if (m.contains("params"))
        for (const auto& e : m["params"])
            if (e["name"].get<std::string>().rfind(component + ".", 0) != 0) kept.push_back(e);
    const std::string prefix = component + ".";
    for (const auto& name : params.names()) {
        if (name.rfind(prefix, 0) != 0) continue;
        const Tensor& t = params.get(name)->val;
        json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["dtype"] = "float32";
        e["file"] = bin_name(name);
        kept.push_back(e);
        write_f32(fs::path(dir) / bin_name(name), t);
    }
    m["params"] = kept;
    std::ofstream out(fs::path(dir) / "manifest.json");
    out << m.dump(2) << "\n";
}

void load_component(const std::string& dir, const std::string& component,
                    nn::ParamStore& params) {
    json m = read_manifest(dir);
    const std::string prefix = component + ".";
    size_t loaded = 0;
    for (const auto& e : m.at("params")) {
        const std::string name = e.at("name").get<std::string>();
        if (name.rfind(prefix, 0) != 0) continue;
        if (!params.has(name))
            throw data_error("checkpoint: parameter " + name + " not expected by this model");
        std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
        Tensor& dst = params.get(name)->val;
        if (dst.shape() != shape)
            throw data_error("checkpoint: shape mismatch for " + name);
        dst = read_f32(fs::path(dir) / e.at("file").get<std::string>(), shape);
        ++loaded;
    }
    if (loaded == 0)
        throw config_error("checkpoint: component '" + component + "' missing in " + dir);
}

bool has_component(const std::string& dir, const std::string& component) {
    if (!fs::exists(fs::path(dir) / "manifest.json")) return false;
    json m = read_manifest(dir);
    return m.contains("components") && m["components"].contains(component);
}

std::string component_config(const std::string& dir, const std::string& component) {
    json m = read_manifest(dir);
    if (m.contains("components") && m["components"].contains(component))
        return m["components"][component].dump();
    return "{}";
}

}  // namespace lacoste::checkpoint
