#include "dsmoe/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsmoe/error.hpp"
#include "dsmoe/log.hpp"

namespace dsmoe {

namespace {

using nlohmann::json;

std::uint64_t fnv1a64(const unsigned char* data, std::size_t len) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t bswap64(std::uint64_t v) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r = (r << 8) | ((v >> (8 * i)) & 0xffULL);
    return r;
}

std::uint64_t to_le_bits(double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = bswap64(bits);
    return bits;
}

double from_le_bits(std::uint64_t bits) {
    if constexpr (std::endian::native == std::endian::big) bits = bswap64(bits);
    return std::bit_cast<double>(bits);
}

json get_field(const json& obj, const char* key, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end())
        throw IntegrityError("checkpoint manifest: missing field '" + std::string(key) + "' in " + where);
    return *it;
}

// Zero-weight model with the shapes the manifest promises; the blob fills it.
Model build_skeleton(const json& manifest) {
    const json mj = get_field(manifest, "model", "manifest");
    ModelConfig config;
    config.vocab_size = get_field(mj, "vocab_size", "model").get<int>();
    config.hidden_dim = get_field(mj, "hidden_dim", "model").get<int>();
    config.inter_dim = get_field(mj, "inter_dim", "model").get<int>();
    config.layer_count = get_field(mj, "layer_count", "model").get<int>();
    config.head_count = get_field(mj, "head_count", "model").get<int>();
    config.max_seq_len = get_field(mj, "max_seq_len", "model").get<int>();
    config.validate();

    Model model;
    model.config = config;
    model.tok_emb = Matrix(config.vocab_size, config.hidden_dim);
    model.pos_emb = Matrix(config.max_seq_len, config.hidden_dim);
    model.out_proj = Matrix(config.hidden_dim, config.vocab_size);
    for (int l = 0; l < config.layer_count; ++l) {
        TransformerLayer layer;
        layer.attn_norm = Matrix(1, config.hidden_dim);
        layer.ffn_norm = Matrix(1, config.hidden_dim);
        layer.attn.wq = Matrix(config.hidden_dim, config.hidden_dim);
        layer.attn.wk = Matrix(config.hidden_dim, config.hidden_dim);
        layer.attn.wv = Matrix(config.hidden_dim, config.hidden_dim);
        layer.attn.wo = Matrix(config.hidden_dim, config.hidden_dim);
        layer.attn.head_count = config.head_count;
        layer.ffn = DenseFFN{Matrix(config.hidden_dim, config.inter_dim),
                             Matrix(config.hidden_dim, config.inter_dim),
                             Matrix(config.inter_dim, config.hidden_dim)};
        model.layers.push_back(std::move(layer));
    }

    const std::string mode = get_field(manifest, "mode", "manifest").get<std::string>();
    if (mode == "dsmoe") {
        const json dj = get_field(manifest, "dsmoe", "manifest");
        const int n = get_field(dj, "n", "dsmoe").get<int>();
        const double tau = get_field(dj, "tau", "dsmoe").get<double>();
        for (TransformerLayer& layer : model.layers) {
            DSMoELayer moe = partition_ffn(std::get<DenseFFN>(layer.ffn), n);
            moe.tau = tau;
            layer.ffn = std::move(moe);
        }
    } else if (mode != "dense") {
        throw VersionError("checkpoint manifest: unknown mode '" + mode + "'");
    }
    return model;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& dir) {
    model.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("checkpoint: cannot create directory '" + dir + "': " + ec.message());

    json tensors = json::array();
    std::vector<unsigned char> blob;
    std::uint64_t offset = 0;
    visit_params(model, [&](const std::string& name, const Matrix& m) {
        tensors.push_back({{"name", name},
                           {"shape", {m.rows(), m.cols()}},
                           {"offset", offset}});
        const std::size_t bytes = static_cast<std::size_t>(m.size()) * 8;
        blob.resize(blob.size() + bytes);
        unsigned char* dst = blob.data() + offset;
        for (int i = 0; i < m.size(); ++i) {
            const std::uint64_t bits = to_le_bits(m.data()[i]);
            std::memcpy(dst + static_cast<std::size_t>(i) * 8, &bits, 8);
        }
        offset += bytes;
    });

    json manifest;
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["model"] = {{"vocab_size", model.config.vocab_size},
                         {"hidden_dim", model.config.hidden_dim},
                         {"inter_dim", model.config.inter_dim},
                         {"layer_count", model.config.layer_count},
                         {"head_count", model.config.head_count},
                         {"max_seq_len", model.config.max_seq_len}};
    if (model.is_dsmoe()) {
        const DSMoELayer& moe = std::get<DSMoELayer>(model.layers[0].ffn);
        manifest["mode"] = "dsmoe";
        manifest["dsmoe"] = {{"n", moe.n}, {"tau", moe.tau}};
    } else {
        manifest["mode"] = "dense";
    }
    manifest["tensors"] = std::move(tensors);
    manifest["blob_bytes"] = offset;
    manifest["checksum_fnv1a64"] = hex64(fnv1a64(blob.data(), blob.size()));

    const std::string blob_path = dir + "/weights.bin";
    {
        std::ofstream out(blob_path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("checkpoint: cannot write '" + blob_path + "'");
        out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
        if (!out) throw IoError("checkpoint: write failed for '" + blob_path + "'");
    }
    const std::string manifest_path = dir + "/manifest.json";
    {
        std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("checkpoint: cannot write '" + manifest_path + "'");
        out << manifest.dump(2) << "\n";
        if (!out) throw IoError("checkpoint: write failed for '" + manifest_path + "'");
    }
    logging::info("checkpoint: saved %s (%llu bytes of weights)", dir.c_str(),
                  static_cast<unsigned long long>(offset));
}

Model load_checkpoint(const std::string& dir) {
    const std::string manifest_path = dir + "/manifest.json";
    std::ifstream min(manifest_path, std::ios::binary);
    if (!min) throw IoError("checkpoint: cannot open '" + manifest_path + "'");
    json manifest;
    try {
        manifest = json::parse(min);
    } catch (const json::exception& e) {
        throw IntegrityError("checkpoint: manifest parse failure in '" + manifest_path + "': " + e.what());
    }

    const int version = get_field(manifest, "format_version", "manifest").get<int>();
    if (version != kCheckpointFormatVersion)
        throw VersionError("checkpoint: format_version " + std::to_string(version) +
                           " incompatible with supported version " +
                           std::to_string(kCheckpointFormatVersion));

    Model model = build_skeleton(manifest);

    const std::string blob_path = dir + "/weights.bin";
    std::ifstream bin(blob_path, std::ios::binary);
    if (!bin) throw IoError("checkpoint: cannot open '" + blob_path + "'");
    std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    if (bin.bad()) throw IoError("checkpoint: read failed for '" + blob_path + "'");

    const std::uint64_t expected_bytes = get_field(manifest, "blob_bytes", "manifest").get<std::uint64_t>();
    if (blob.size() != expected_bytes)
        throw IntegrityError("checkpoint: weights blob is " + std::to_string(blob.size()) +
                             " bytes, manifest promises " + std::to_string(expected_bytes));
    const std::string checksum = get_field(manifest, "checksum_fnv1a64", "manifest").get<std::string>();
    const std::string actual = hex64(fnv1a64(blob.data(), blob.size()));
    if (checksum != actual)
        throw IntegrityError("checkpoint: weights blob checksum " + actual + " does not match manifest " +
                             checksum);

    const json tensors = get_field(manifest, "tensors", "manifest");
    std::size_t index = 0;
    visit_params(model, [&](const std::string& name, Matrix& m) {
        if (index >= tensors.size())
            throw IntegrityError("checkpoint: tensor table ended before '" + name + "'");
        const json& entry = tensors[index++];
        const std::string tname = get_field(entry, "name", "tensors").get<std::string>();
        if (tname != name)
            throw IntegrityError("checkpoint: tensor " + std::to_string(index - 1) + " is '" + tname +
                                 "', expected '" + name + "'");
        const json shape = get_field(entry, "shape", "tensors");
        if (shape.size() != 2 || shape[0].get<int>() != m.rows() || shape[1].get<int>() != m.cols())
            throw IntegrityError("checkpoint: tensor '" + name + "' shape mismatch");
        const std::uint64_t offset = get_field(entry, "offset", "tensors").get<std::uint64_t>();
        const std::uint64_t extent = static_cast<std::uint64_t>(m.size()) * 8;
        if (offset + extent > blob.size())
            throw IntegrityError("checkpoint: tensor '" + name + "' extends past blob end");
        for (int i = 0; i < m.size(); ++i) {
            std::uint64_t bits;
            std::memcpy(&bits, blob.data() + offset + static_cast<std::uint64_t>(i) * 8, 8);
            m.data()[i] = from_le_bits(bits);
        }
    });
    if (index != tensors.size())
        throw IntegrityError("checkpoint: tensor table has " + std::to_string(tensors.size()) +
                             " entries, model expects " + std::to_string(index));
    model.validate();
    return model;
}

}  // namespace dsmoe
