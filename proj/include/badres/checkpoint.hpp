#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "badres/errors.hpp"
#include "badres/model.hpp"

// Checkpoint = <stem>.json manifest + <stem>.bin little-endian float32 blob.
// The manifest records the model config and, per tensor, name/shape/dtype and
// the byte range inside the blob. Round-trips are bit-exact.

namespace badres {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts unsupported");

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"image_size", c.image_size},
                          {"channels", c.channels},
                          {"patch_size", c.patch_size},
                          {"embed_dim", c.embed_dim},
                          {"num_layers", c.num_layers},
                          {"num_heads", c.num_heads},
                          {"num_classes", c.num_classes},
                          {"mlp_ratio", c.mlp_ratio},
                          {"block_mode", block_mode_name(c.block_mode)},
                          {"poisoned_layer_index", c.poisoned_layer_index},
                          {"alpha", c.alpha},
                          {"beta", c.beta}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig defaults;
    ModelConfig c;
    try {
        c.image_size = j.value("image_size", defaults.image_size);
        c.channels = j.value("channels", defaults.channels);
        c.patch_size = j.value("patch_size", defaults.patch_size);
        c.embed_dim = j.value("embed_dim", defaults.embed_dim);
        c.num_layers = j.value("num_layers", defaults.num_layers);
        c.num_heads = j.value("num_heads", defaults.num_heads);
        c.num_classes = j.value("num_classes", defaults.num_classes);
        c.mlp_ratio = j.value("mlp_ratio", defaults.mlp_ratio);
        c.block_mode = block_mode_from_string(j.value("block_mode", std::string{"clean"}));
        c.poisoned_layer_index = j.value("poisoned_layer_index", defaults.poisoned_layer_index);
        c.alpha = j.value("alpha", defaults.alpha);
        c.beta = j.value("beta", defaults.beta);
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("model config json: ") + e.what());
    }
    return c;
}

inline void save_checkpoint(const ModelParams& params, const std::string& stem) {
    nlohmann::json manifest;
    manifest["format"] = "badres-checkpoint";
    manifest["version"] = 1;
    manifest["dtype"] = "float32";
    manifest["byte_order"] = "little-endian";
    manifest["model"] = model_config_to_json(params.config);

    const std::filesystem::path blob_path = stem + ".bin";
    std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
    if (!blob) throw io_error("cannot open " + blob_path.string() + " for writing");

    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : params.entries) {
        const std::size_t nbytes = t.numel() * sizeof(float);
        tensors.push_back({{"name", name},
                           {"shape", t.shape()},
                           {"dtype", "float32"},
                           {"offset", offset},
                           {"nbytes", nbytes}});
        blob.write(reinterpret_cast<const char*>(t.data().data()),
                   static_cast<std::streamsize>(nbytes));
        offset += nbytes;
    }
    if (!blob) throw io_error("write failed for " + blob_path.string());
    blob.close();

    manifest["tensors"] = std::move(tensors);
    manifest["blob"] = blob_path.filename().string();
    manifest["total_bytes"] = offset;

    std::ofstream mf(stem + ".json", std::ios::trunc);
    if (!mf) throw io_error("cannot open " + stem + ".json for writing");
    mf << manifest.dump(2) << "\n";
}

inline ModelParams load_checkpoint(const std::string& stem) {
    std::ifstream mf(stem + ".json");
    if (!mf) throw io_error("cannot open " + stem + ".json");
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("malformed manifest " + stem + ".json: " + e.what());
    }
    if (manifest.value("format", "") != "badres-checkpoint")
        throw io_error(stem + ".json is not a checkpoint manifest");
    if (manifest.value("dtype", "") != "float32" ||
        manifest.value("byte_order", "") != "little-endian")
        throw io_error("unsupported checkpoint encoding in " + stem + ".json");

    const std::filesystem::path blob_path =
        std::filesystem::path(stem).parent_path() / manifest.at("blob").get<std::string>();
    std::ifstream blob(blob_path, std::ios::binary);
    if (!blob) throw io_error("cannot open blob " + blob_path.string());

    ModelParams params;
    params.config = model_config_from_json(manifest.at("model"));
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        const std::size_t nbytes = entry.at("nbytes").get<std::size_t>();
        if (nbytes != shape_numel(shape) * sizeof(float))
            throw io_error("tensor " + name + ": nbytes inconsistent with shape " +
                           shape_str(shape));
        std::vector<float> data(shape_numel(shape));
        blob.seekg(static_cast<std::streamoff>(offset));
        blob.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(nbytes));
        if (blob.gcount() != static_cast<std::streamsize>(nbytes))
            throw io_error("tensor " + name + ": blob truncated at offset " +
                           std::to_string(offset));
        params.add(name, Tensor(shape, std::move(data), true));
    }
    return params;
}

}  // namespace badres
