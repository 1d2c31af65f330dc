#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ctrlab/common.hpp"
#include "ctrlab/tensor.hpp"

namespace ctrlab {

/// Versioned JSON checkpoint: named parameter arrays stored as nested lists
/// of reals. Round-trips are value-exact for every representable double
/// (shortest round-trip decimal on write, correctly rounded strtod on read).
struct Checkpoint {
    int format_version = 1;
    std::string model_kind;
    std::vector<std::pair<std::string, Tensor>> params;

    const Tensor& find(const std::string& name) const {
        for (const auto& [n, t] : params) {
            if (n == name) {
                return t;
            }
        }
        throw IoError("checkpoint: missing parameter '" + name + "'");
    }
};

namespace detail {

inline nlohmann::json tensor_to_json(const Tensor& t) {
    nlohmann::json j;
    if (t.rank() == 1) {
        j = nlohmann::json::array();
        for (std::size_t i = 0; i < t.size(); ++i) {
            j.push_back(t[i]);
        }
    } else if (t.rank() == 2) {
        j = nlohmann::json::array();
        for (int r = 0; r < t.rows(); ++r) {
            nlohmann::json rowj = nlohmann::json::array();
            for (int c = 0; c < t.cols(); ++c) {
                rowj.push_back(t.at(r, c));
            }
            j.push_back(std::move(rowj));
        }
    } else {
        throw IoError("checkpoint: only rank-1/2 tensors are serializable");
    }
    return j;
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.empty()) {
        throw IoError("checkpoint: parameter must be a non-empty array");
    }
    if (j[0].is_array()) {
        int rows = static_cast<int>(j.size());
        int cols = static_cast<int>(j[0].size());
        std::vector<double> data;
        data.reserve(static_cast<std::size_t>(rows) * cols);
        for (const auto& rowj : j) {
            if (!rowj.is_array() || static_cast<int>(rowj.size()) != cols) {
                throw IoError("checkpoint: ragged matrix rows");
            }
            for (const auto& v : rowj) {
                data.push_back(v.get<double>());
            }
        }
        return Tensor({rows, cols}, std::move(data));
    }
    std::vector<double> data;
    data.reserve(j.size());
    for (const auto& v : j) {
        data.push_back(v.get<double>());
    }
    int n = static_cast<int>(data.size());
    return Tensor({n}, std::move(data));
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
    nlohmann::json j;
    j["format_version"] = ckpt.format_version;
    j["model_kind"] = ckpt.model_kind;
    nlohmann::json params = nlohmann::json::object();
    for (const auto& [name, tensor] : ckpt.params) {
        params[name] = detail::tensor_to_json(tensor);
    }
    j["params"] = std::move(params);
    return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    Checkpoint ckpt;
    try {
        ckpt.format_version = j.at("format_version").get<int>();
        if (ckpt.format_version != 1) {
            throw IoError("checkpoint: unsupported format_version " + std::to_string(ckpt.format_version));
        }
        ckpt.model_kind = j.at("model_kind").get<std::string>();
        for (const auto& [name, value] : j.at("params").items()) {
            ckpt.params.emplace_back(name, detail::tensor_from_json(value));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: malformed document: ") + e.what());
    }
    return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot open for write: " + path.string());
    }
    out << checkpoint_to_json(ckpt).dump(2) << "\n";
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open for read: " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: parse error in ") + path.string() + ": " + e.what());
    }
    return checkpoint_from_json(j);
}

}  // namespace ctrlab
