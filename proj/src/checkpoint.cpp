#include "flowforge/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "binary_io.hpp"
#include "flowforge/errors.hpp"

namespace flowforge {

namespace {

nlohmann::json tensor_index(const DenoiserParams<float>& p) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : p.tensors()) {
        arr.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}, {"size", t.size}});
    }
    return arr;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::size_t n = ckpt.params.values.size();
    if (ckpt.optimizer && (ckpt.optimizer->m.size() != n || ckpt.optimizer->v.size() != n)) {
        throw DimensionMismatch("optimizer state does not match the parameter count");
    }
    nlohmann::json header{{"net", ckpt.params.config.to_json()},
                          {"schedule", ckpt.schedule.to_json()},
                          {"parameter_count", n},
                          {"tensors", tensor_index(ckpt.params)},
                          {"meta", ckpt.meta}};
    if (ckpt.optimizer) {
        const AdamConfig& a = ckpt.optimizer->config;
        header["optimizer"] = {{"step", ckpt.optimizer->step},
                               {"learning_rate", a.learning_rate},
                               {"beta1", a.beta1},
                               {"beta2", a.beta2},
                               {"epsilon", a.epsilon}};
    }
    const std::string text = header.dump();

    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(kCheckpointMagic, 4);
        detail::put_u32(out, kCheckpointVersion);
        detail::put_u32(out, std::uint32_t(text.size()));
        out.write(text.data(), std::streamsize(text.size()));
        detail::put_f32s(out, ckpt.params.values);
        if (ckpt.optimizer) {
            detail::put_f32s(out, ckpt.optimizer->m);
            detail::put_f32s(out, ckpt.optimizer->v);
        }
        out.flush();
        if (!out) throw IoError("failed writing " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::string name = path.string();
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw FormatError(FormatError::Kind::BadMagic, name + " is not a VFCK checkpoint");
    }
    if (bytes.size() < 12) throw FormatError(FormatError::Kind::Truncated, name + ": truncated header");
    const std::uint32_t version = detail::get_u32(p + 4);
    if (version != kCheckpointVersion) {
        throw FormatError(FormatError::Kind::VersionMismatch,
                          name + ": checkpoint version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
    }
    const std::size_t header_len = detail::get_u32(p + 8);
    if (bytes.size() < 12 + header_len) throw FormatError(FormatError::Kind::Truncated, name + ": truncated header");

    Checkpoint ckpt;
    std::size_t n = 0;
    bool has_opt = false;
    try {
        const auto header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + std::ptrdiff_t(12 + header_len));
        ckpt.schedule = ScheduleConfig::from_json(header.at("schedule"));
        ckpt.params = zero_params<float>(NetConfig::from_json(header.at("net")));
        n = header.at("parameter_count").get<std::size_t>();
        if (n != ckpt.params.values.size()) {
            throw FormatError(FormatError::Kind::Malformed, name + ": parameter count does not match the architecture");
        }
        const auto& tensors = header.at("tensors");
        const auto& expected = ckpt.params.tensors();
        if (tensors.size() != expected.size()) {
            throw FormatError(FormatError::Kind::Malformed, name + ": tensor index does not match the architecture");
        }
        for (std::size_t i = 0; i < expected.size(); ++i) {
            if (tensors[i].at("name") != expected[i].name || tensors[i].at("offset") != expected[i].offset ||
                tensors[i].at("size") != expected[i].size) {
                throw FormatError(FormatError::Kind::Malformed, name + ": tensor " + expected[i].name + " mismatch");
            }
        }
        ckpt.meta = header.value("meta", nlohmann::json::object());
        if (header.contains("optimizer")) {
            has_opt = true;
            const auto& o = header["optimizer"];
            AdamConfig a;
            a.learning_rate = o.at("learning_rate");
            a.beta1 = o.at("beta1");
            a.beta2 = o.at("beta2");
            a.epsilon = o.at("epsilon");
            ckpt.optimizer = OptimizerState<float>::zeros(n, a);
            ckpt.optimizer->step = o.at("step");
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::Malformed, name + ": bad header: " + e.what());
    } catch (const InvalidInput& e) {
        throw FormatError(FormatError::Kind::Malformed, name + ": bad header: " + e.what());
    }

    const std::size_t arrays = has_opt ? 3 : 1;
    const std::size_t expected_size = 12 + header_len + arrays * n * 4;
    if (bytes.size() < expected_size) {
        throw FormatError(FormatError::Kind::Truncated, name + ": payload is truncated");
    }
    if (bytes.size() > expected_size) {
        throw FormatError(FormatError::Kind::Malformed, name + ": trailing bytes after payload");
    }
    const char* payload = bytes.data() + 12 + header_len;
    auto read_into = [&](std::vector<float>& dst, std::size_t k) {
        std::memcpy(dst.data(), payload + k * n * 4, n * 4);
        detail::fix_f32s_from_le(dst);
    };
    read_into(ckpt.params.values, 0);
    if (has_opt) {
        read_into(ckpt.optimizer->m, 1);
        read_into(ckpt.optimizer->v, 2);
    }
    return ckpt;
}

}  // namespace flowforge
