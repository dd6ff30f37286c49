#include "dirmag/weights_io.hpp"

#include "dirmag/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dirmag {

namespace {

std::uint64_t read_u64_le(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

void write_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

float read_f32_le(const std::uint8_t* p) {
    std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    return std::bit_cast<float>(bits);
}

void write_f32_le(std::uint8_t* p, float v) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    p[0] = static_cast<std::uint8_t>(bits & 0xff);
    p[1] = static_cast<std::uint8_t>((bits >> 8) & 0xff);
    p[2] = static_cast<std::uint8_t>((bits >> 16) & 0xff);
    p[3] = static_cast<std::uint8_t>((bits >> 24) & 0xff);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + path.string());
}

} // namespace

TensorContainer TensorContainer::from_tensors(std::map<std::string, Tensor> tensors, nlohmann::json metadata) {
    TensorContainer c;
    c.metadata_ = std::move(metadata);
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        if (!all_finite(t.data())) throw FormatError("tensor '" + name + "' contains non-finite values");
        ContainerEntry e{t.shape(), offset, 4ull * t.size()};
        offset += e.byte_length;
        c.layout_.emplace(name, std::move(e));
    }
    c.payload_size_ = offset;
    c.tensors_ = std::move(tensors);
    return c;
}

TensorContainer parse_container(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kContainerMagicSize + 8 ||
        std::memcmp(bytes.data(), kContainerMagic, kContainerMagicSize) != 0) {
        throw FormatError("missing GPTC1 magic");
    }
    const std::uint64_t header_len = read_u64_le(bytes.data() + kContainerMagicSize);
    const std::uint64_t header_start = kContainerMagicSize + 8;
    if (header_len > bytes.size() - header_start) throw FormatError("header length exceeds file size");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(header_start),
                                       bytes.begin() + static_cast<std::ptrdiff_t>(header_start + header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("header is not valid JSON: ") + e.what());
    }
    if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_object()) {
        throw FormatError("header lacks a 'tensors' object");
    }

    TensorContainer c;
    if (header.contains("metadata")) c.metadata_ = header["metadata"];
    const std::uint8_t* payload = bytes.data() + header_start + header_len;
    c.payload_size_ = bytes.size() - header_start - header_len;

    std::vector<std::pair<std::uint64_t, std::uint64_t>> regions;
    for (const auto& [name, desc] : header["tensors"].items()) {
        ContainerEntry e;
        try {
            if (desc.at("dtype").get<std::string>() != "f32") throw FormatError("tensor '" + name + "' is not f32");
            e.shape = desc.at("shape").get<std::vector<std::size_t>>();
            e.byte_offset = desc.at("byte_offset").get<std::uint64_t>();
            e.byte_length = desc.at("byte_length").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError("tensor '" + name + "' has a malformed descriptor: " + ex.what());
        }
        if (e.shape.empty() || std::find(e.shape.begin(), e.shape.end(), 0u) != e.shape.end()) {
            throw FormatError("tensor '" + name + "' has an empty or zero extent shape");
        }
        if (e.byte_length != 4ull * shape_product(e.shape)) {
            throw FormatError("tensor '" + name + "' byte_length does not match its shape");
        }
        if (e.byte_offset > c.payload_size_ || e.byte_length > c.payload_size_ - e.byte_offset) {
            throw FormatError("tensor '" + name + "' extends past the payload");
        }
        std::vector<float> data(shape_product(e.shape));
        for (std::size_t i = 0; i < data.size(); ++i) {
            data[i] = read_f32_le(payload + e.byte_offset + 4 * i);
            if (!std::isfinite(data[i])) throw FormatError("tensor '" + name + "' contains non-finite values");
        }
        regions.emplace_back(e.byte_offset, e.byte_length);
        c.tensors_.emplace(name, Tensor(e.shape, std::move(data)));
        c.layout_.emplace(name, std::move(e));
    }

    std::sort(regions.begin(), regions.end());
    for (std::size_t i = 1; i < regions.size(); ++i) {
        if (regions[i - 1].first + regions[i - 1].second > regions[i].first) {
            throw FormatError("tensor regions overlap");
        }
    }
    return c;
}

std::vector<std::uint8_t> serialize_container(const TensorContainer& c) {
    nlohmann::json header;
    header["metadata"] = c.metadata();
    header["tensors"] = nlohmann::json::object();
    for (const auto& [name, e] : c.layout()) {
        header["tensors"][name] = {
            {"dtype", "f32"}, {"shape", e.shape}, {"byte_offset", e.byte_offset}, {"byte_length", e.byte_length}};
    }
    const std::string text = header.dump();

    std::vector<std::uint8_t> out(kContainerMagic, kContainerMagic + kContainerMagicSize);
    write_u64_le(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    const std::size_t payload_start = out.size();
    out.resize(payload_start + c.payload_size(), 0);
    for (const auto& [name, e] : c.layout()) {
        const Tensor& t = c.tensors().at(name);
        for (std::size_t i = 0; i < t.size(); ++i) write_f32_le(out.data() + payload_start + e.byte_offset + 4 * i, t[i]);
    }
    return out;
}

TensorContainer load_container(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return parse_container(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void save_container(const std::filesystem::path& path, const TensorContainer& container) {
    write_file(path, serialize_container(container));
}

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},
            {"d_model", c.d_model},
            {"n_heads", c.n_heads},
            {"d_mlp", c.d_mlp},
            {"vocab_size", c.vocab_size},
            {"norm_type", to_string(c.norm_type)},
            {"residual_topology", to_string(c.topology)},
            {"rotary_fraction", c.rotary_fraction},
            {"rotary_base", c.rotary_base},
            {"max_seq_len", c.max_seq_len},
            {"norm_eps", c.norm_eps}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.d_mlp = j.at("d_mlp").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.norm_type = parse_norm_type(j.value("norm_type", "layernorm"));
        c.topology = parse_topology(j.value("residual_topology", "parallel"));
        c.rotary_fraction = j.value("rotary_fraction", 0.25);
        c.rotary_base = j.value("rotary_base", 10000.0);
        c.max_seq_len = j.value("max_seq_len", std::size_t{2048});
        c.norm_eps = j.value("norm_eps", 1e-5);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

Model load_model(const std::filesystem::path& path) {
    TensorContainer c = load_container(path);
    if (!c.metadata().contains("config")) throw FormatError(path.string() + ": metadata lacks 'config'");
    ModelConfig config = config_from_json(c.metadata()["config"]);
    return Model(std::move(config), ModelWeights(c.take_tensors()));
}

void save_model(const std::filesystem::path& path, const Model& model) {
    nlohmann::json meta;
    meta["config"] = config_to_json(model.config);
    save_container(path, TensorContainer::from_tensors(model.weights.tensors(), meta));
}

namespace {

std::vector<int> int_list(const nlohmann::json& j, const char* field, std::size_t line) {
    if (!j.is_array()) throw DatasetError(line, std::string("'") + field + "' must be an array of integers");
    std::vector<int> out;
    out.reserve(j.size());
    for (const auto& v : j) {
        if (!v.is_number_integer()) throw DatasetError(line, std::string("'") + field + "' must hold integers");
        out.push_back(v.get<int>());
    }
    return out;
}

std::vector<int> token_list(const nlohmann::json& j, const char* field, std::size_t line) {
    auto tokens = int_list(j, field, line);
    if (tokens.empty()) throw DatasetError(line, std::string("'") + field + "' is empty");
    for (int t : tokens) {
        if (t < 0) throw DatasetError(line, std::string("'") + field + "' holds a negative token id");
    }
    return tokens;
}

DatasetRecord parse_record(const std::string& text, std::size_t line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError(line, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw DatasetError(line, "record is not an object");

    DatasetRecord r;
    if (!j.contains("id") || !j["id"].is_string()) throw DatasetError(line, "missing string field 'id'");
    r.id = j["id"].get<std::string>();

    if (j.contains("good_tokens") || j.contains("bad_tokens")) {
        if (!j.contains("good_tokens") || !j.contains("bad_tokens")) {
            throw DatasetError(line, "minimal-pair record needs both 'good_tokens' and 'bad_tokens'");
        }
        r.pair = MinimalPair{token_list(j["good_tokens"], "good_tokens", line),
                             token_list(j["bad_tokens"], "bad_tokens", line)};
    } else {
        if (!j.contains("tokens")) throw DatasetError(line, "missing field 'tokens'");
        r.tokens = token_list(j["tokens"], "tokens", line);
    }
    if (j.contains("text")) {
        if (!j["text"].is_string()) throw DatasetError(line, "'text' must be a string");
        r.text = j["text"].get<std::string>();
    }
    if (j.contains("annotations")) {
        const auto& a = j["annotations"];
        if (!a.is_object()) throw DatasetError(line, "'annotations' must be an object");
        if (a.contains("pos")) {
            auto pos = int_list(a["pos"], "pos", line);
            if (pos.size() != r.tokens.size()) throw DatasetError(line, "'pos' length differs from 'tokens'");
            for (int p : pos) {
                if (p < 0 || p >= kPosClasses) throw DatasetError(line, "'pos' classes must lie in 0..5");
            }
            r.pos = std::move(pos);
        }
        if (a.contains("depth")) {
            auto depth = int_list(a["depth"], "depth", line);
            if (depth.size() != r.tokens.size()) throw DatasetError(line, "'depth' length differs from 'tokens'");
            for (int dd : depth) {
                if (dd < 0) throw DatasetError(line, "'depth' must be nonnegative");
            }
            r.depth = std::move(depth);
        }
    }
    return r;
}

} // namespace

void TokenizedDataset::validate_vocab(std::size_t vocab_size) const {
    auto check = [&](const std::vector<int>& toks, const DatasetRecord& r) {
        for (int t : toks) {
            if (static_cast<std::size_t>(t) >= vocab_size) {
                throw InputError("record '" + r.id + "' has token id " + std::to_string(t) +
                                 " outside vocabulary of " + std::to_string(vocab_size));
            }
        }
    };
    for (const auto& r : records) {
        check(r.tokens, r);
        if (r.pair) {
            check(r.pair->good_tokens, r);
            check(r.pair->bad_tokens, r);
        }
    }
}

TokenizedDataset parse_dataset(std::istream& in) {
    TokenizedDataset ds;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) throw DatasetError(number, "blank line");
        ds.records.push_back(parse_record(line, number));
    }
    return ds;
}

TokenizedDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open dataset " + path.string());
    return parse_dataset(in);
}

nlohmann::json record_to_json(const DatasetRecord& r) {
    nlohmann::json j;
    j["id"] = r.id;
    if (r.pair) {
        j["good_tokens"] = r.pair->good_tokens;
        j["bad_tokens"] = r.pair->bad_tokens;
    } else {
        j["tokens"] = r.tokens;
    }
    if (r.text) j["text"] = *r.text;
    if (r.pos || r.depth) {
        j["annotations"] = nlohmann::json::object();
        if (r.pos) j["annotations"]["pos"] = *r.pos;
        if (r.depth) j["annotations"]["depth"] = *r.depth;
    }
    return j;
}

void save_dataset(const std::filesystem::path& path, const TokenizedDataset& dataset) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot write dataset " + path.string());
    for (const auto& r : dataset.records) out << record_to_json(r).dump() << '\n';
}

} // namespace dirmag
