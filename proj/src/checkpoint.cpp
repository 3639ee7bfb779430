#include <bit>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "convmr/model.hpp"

namespace convmr {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char magic[8] = {'C', 'O', 'N', 'V', 'M', 'R', 'C', 'K'};

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& at, const std::string& path) {
    if (in.size() < at + sizeof(T)) throw CheckpointError(path + ": truncated checkpoint");
    T v;
    std::memcpy(&v, in.data() + at, sizeof(T));
    at += sizeof(T);
    return v;
}

bool is_gru_block(const std::string& name, const char* prefix) { return name.starts_with(prefix); }

}  // namespace

const Matrix* TensorFile::find(std::string_view name) const {
    for (const auto& [n, m] : tensors)
        if (n == name) return &m;
    return nullptr;
}

void write_tensor_file(const TensorFile& file, const std::filesystem::path& path) {
    nlohmann::json header;
    header["format_version"] = checkpoint_format_version;
    header["k"] = file.k;
    header["tau"] = file.tau;
    header["encoder_kind"] = file.encoder_kind;
    header["attn_divide_by_n"] = file.attn_divide_by_n;
    header["vocab_hash"] = hex64(file.vocab_hash);
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, m] : file.tensors) tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    header["tensors"] = tensors;
    const std::string header_text = header.dump();

    std::string out(magic, sizeof(magic));
    put<std::uint32_t>(out, checkpoint_format_version);
    put<std::uint64_t>(out, header_text.size());
    out += header_text;
    for (const auto& [name, m] : file.tensors)
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) put<double>(out, m(i, j));

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + path.string());
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os) throw CheckpointError("write failure on " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
    const std::string where = path.string();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open " + where);
    std::ostringstream buf;
    buf << is.rdbuf();
    const std::string in = buf.str();

    if (in.size() < sizeof(magic) || std::memcmp(in.data(), magic, sizeof(magic)) != 0)
        throw CheckpointError(where + ": not a checkpoint file");
    std::size_t at = sizeof(magic);
    const auto version = take<std::uint32_t>(in, at, where);
    if (version != checkpoint_format_version)
        throw CheckpointError(where + ": unsupported format version " + std::to_string(version));
    const auto header_len = take<std::uint64_t>(in, at, where);
    if (in.size() - at < header_len) throw CheckpointError(where + ": truncated checkpoint");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(in.substr(at, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(where + ": malformed header: " + e.what());
    }
    at += header_len;

    TensorFile file;
    try {
        if (header.at("format_version").get<std::uint32_t>() != version)
            throw CheckpointError(where + ": header version disagrees with preamble");
        file.k = header.at("k").get<int>();
        file.tau = header.at("tau").get<int>();
        file.encoder_kind = header.at("encoder_kind").get<std::string>();
        file.attn_divide_by_n = header.at("attn_divide_by_n").get<bool>();
        file.vocab_hash = std::stoull(header.at("vocab_hash").get<std::string>(), nullptr, 16);
        std::size_t payload = 0;
        for (const auto& t : header.at("tensors")) payload += t.at("rows").get<std::size_t>() * t.at("cols").get<std::size_t>();
        if (in.size() - at < payload * sizeof(double)) throw CheckpointError(where + ": truncated checkpoint");
        if (in.size() - at > payload * sizeof(double)) throw CheckpointError(where + ": trailing bytes after payload");
        for (const auto& t : header.at("tensors")) {
            Matrix m(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
            for (Eigen::Index i = 0; i < m.rows(); ++i)
                for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = take<double>(in, at, where);
            file.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(where + ": malformed header: " + e.what());
    } catch (const std::invalid_argument&) {
        throw CheckpointError(where + ": malformed vocab hash");
    }
    return file;
}

void save_checkpoint(const ModelParams& params, std::uint64_t vocab_hash, const std::filesystem::path& path) {
    TensorFile file;
    file.k = params.k;
    file.tau = params.tau;
    file.encoder_kind = std::string(to_string(params.encoder));
    file.attn_divide_by_n = params.attn_divide_by_n;
    file.vocab_hash = vocab_hash;
    for (const auto& [name, m] : params.named_tensors()) file.tensors.emplace_back(name, *m);
    write_tensor_file(file, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_vocab_hash) {
    const TensorFile file = read_tensor_file(path);
    const std::string where = path.string();

    LoadedCheckpoint out;
    ModelParams& p = out.params;
    try {
        p.encoder = parse_encoder_kind(file.encoder_kind);
    } catch (const std::invalid_argument&) {
        throw CheckpointError(where + ": not a model checkpoint (encoder_kind \"" + file.encoder_kind + "\")");
    }
    p.k = file.k;
    p.tau = file.tau;
    p.attn_divide_by_n = file.attn_divide_by_n;

    auto need = [&](const char* name) -> const Matrix& {
        const Matrix* m = file.find(name);
        if (m == nullptr) throw CheckpointError(where + ": missing tensor " + name);
        return *m;
    };
    p.entity = need("entity");
    p.relation = need("relation");
    p.attn_w = need("attn_w");
    p.filters = need("filters");
    p.score_w = need("score_w");
    for (const auto& [name, m] : file.tensors) {
        if (is_gru_block(name, "gru_forward.") && !p.gru_forward) p.gru_forward = GruParams::zeros(p.k);
        if (is_gru_block(name, "gru_backward.") && !p.gru_backward) p.gru_backward = GruParams::zeros(p.k);
    }
    for (auto& [name, m] : p.dense_blocks()) *m = need(name.c_str());
    if (file.tensors.size() != p.named_tensors().size()) throw CheckpointError(where + ": unexpected tensors present");
    try {
        p.validate();
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(where + ": " + e.what());
    }

    out.vocab_hash = file.vocab_hash;
    if (expected_vocab_hash && *expected_vocab_hash != file.vocab_hash) {
        out.vocab_hash_matches = false;
        std::cerr << "warning: " << where << " was trained against a different vocabulary (hash " << hex64(file.vocab_hash)
                  << ", expected " << hex64(*expected_vocab_hash) << ")\n";
    }
    return out;
}

}  // namespace convmr
