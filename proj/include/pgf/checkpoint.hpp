#pragma once

// Flat binary checkpoint: magic "PGF1", the full model configuration as
// embedded JSON, then every named parameter as shape + little-endian float64.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "pgf/config.hpp"
#include "pgf/model.hpp"

namespace pgf {

namespace detail {

inline void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (v >> (8 * i)) & 0xff;
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw io_error("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

inline void write_f64_array(std::ostream& os, const std::vector<double>& xs) {
    for (double x : xs) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, 8);
        write_u64(os, bits);
    }
}

inline void read_f64_array(std::istream& is, std::vector<double>& xs) {
    for (double& x : xs) {
        std::uint64_t bits = read_u64(is);
        std::memcpy(&x, &bits, 8);
    }
}

}  // namespace detail

inline void save_checkpoint(const PgfNet& net, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("checkpoint: cannot open " + path + " for writing");
    os.write("PGF1", 4);
    std::string cfg = to_json(net.cfg).dump();
    detail::write_u64(os, cfg.size());
    os.write(cfg.data(), std::streamsize(cfg.size()));
    auto params = net.named_parameters();
    detail::write_u64(os, params.size());
    for (const auto& np : params) {
        detail::write_u64(os, np.name.size());
        os.write(np.name.data(), std::streamsize(np.name.size()));
        detail::write_u64(os, np.tensor.rank());
        for (auto d : np.tensor.shape()) detail::write_u64(os, d);
        detail::write_f64_array(os, np.tensor.vec());
    }
    if (!os) throw io_error("checkpoint: write failed for " + path);
}

inline PgfNet load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "PGF1")
        throw io_error("checkpoint: bad magic in " + path);
    std::uint64_t cfg_len = detail::read_u64(is);
    std::string cfg_text(cfg_len, '\0');
    is.read(cfg_text.data(), std::streamsize(cfg_len));
    if (!is) throw io_error("checkpoint: truncated config block");
    ModelConfig cfg;
    json j = json::parse(cfg_text, nullptr, false);
    if (j.is_discarded()) throw io_error("checkpoint: embedded config is not valid JSON");
    from_json_strict(j, cfg, "checkpoint.model");

    PgfNet net(cfg, /*seed=*/0);  // shapes from the config; values overwritten below
    auto params = net.named_parameters();
    std::uint64_t count = detail::read_u64(is);
    if (count != params.size())
        throw io_error("checkpoint: holds " + std::to_string(count) + " tensors, model expects " +
                       std::to_string(params.size()));
    for (std::uint64_t i = 0; i < count; ++i) {
        std::uint64_t name_len = detail::read_u64(is);
        std::string name(name_len, '\0');
        is.read(name.data(), std::streamsize(name_len));
        std::uint64_t rank = detail::read_u64(is);
        Shape shape(rank);
        for (auto& d : shape) d = detail::read_u64(is);
        if (name != params[i].name)
            throw io_error("checkpoint: tensor " + std::to_string(i) + " is '" + name +
                           "', expected '" + params[i].name + "'");
        if (shape != params[i].tensor.shape())
            throw io_error("checkpoint: shape of '" + name + "' is " + shape_str(shape) +
                           ", expected " + shape_str(params[i].tensor.shape()));
        detail::read_f64_array(is, params[i].tensor.vec());
    }
    if (!is) throw io_error("checkpoint: truncated tensor data");
    return net;
}

}  // namespace pgf
