#include "stylebank/checkpoint.hpp"

#include <cstring>
#include <map>

#include <json.hpp>

#include "stylebank/image.hpp"

namespace stylebank {
namespace {

constexpr char kMagic[4] = {'S', 'B', 'N', 'K'};
constexpr const char* kMetaName = "meta/config";

class Writer {
public:
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        out_.insert(out_.end(), p, p + n);
    }
    template <class T>
    void le(T value) {
        for (std::size_t i = 0; i < sizeof(T); ++i)
            out_.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
    }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::span<const std::uint8_t> take(std::size_t n) {
        require(n <= bytes_.size() - pos_, ErrorCode::Format, "checkpoint is truncated");
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    template <class T>
    T le() {
        auto s = take(sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
        return static_cast<T>(v);
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::size_t element_size(EntryType type) { return type == EntryType::F32 ? 4 : 1; }

std::size_t element_count(const std::vector<std::uint32_t>& dims) {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

Tensor tensor_entry(const Checkpoint& ckpt, const std::string& name) {
    const CheckpointEntry* e = ckpt.find(name);
    require(e != nullptr, ErrorCode::Format, "checkpoint lacks entry '" + name + "'");
    return e->to_tensor();
}

} // namespace

CheckpointEntry CheckpointEntry::from_tensor(std::string name, const Tensor& tensor) {
    const Tensor t = tensor.to(DType::F32);
    const auto& s = t.shape();
    CheckpointEntry e;
    e.name = std::move(name);
    e.type = EntryType::F32;
    e.dims = {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
              static_cast<std::uint32_t>(s.w)};
    e.payload.resize(t.numel() * 4);
    auto d = t.data<float>();
    for (std::size_t i = 0; i < d.size(); ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, &d[i], 4);
        for (std::size_t b = 0; b < 4; ++b) e.payload[i * 4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
    return e;
}

CheckpointEntry CheckpointEntry::from_text(std::string name, const std::string& text) {
    CheckpointEntry e;
    e.name = std::move(name);
    e.type = EntryType::Bytes;
    e.dims = {static_cast<std::uint32_t>(text.size())};
    e.payload.assign(text.begin(), text.end());
    return e;
}

Tensor CheckpointEntry::to_tensor() const {
    require(type == EntryType::F32, ErrorCode::Format, "entry '" + name + "' is not a float tensor");
    require(!dims.empty() && dims.size() <= 4, ErrorCode::Format, "entry '" + name + "' has unsupported rank");
    std::size_t d[4] = {1, 1, 1, 1};
    for (std::size_t i = 0; i < dims.size(); ++i) d[4 - dims.size() + i] = dims[i];
    Tensor t(Shape{d[0], d[1], d[2], d[3]});
    auto out = t.data<float>();
    require(payload.size() == out.size() * 4, ErrorCode::Format, "entry '" + name + "' payload size mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits = 0;
        for (std::size_t b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(payload[i * 4 + b]) << (8 * b);
        std::memcpy(&out[i], &bits, 4);
    }
    return t;
}

std::string CheckpointEntry::to_text() const {
    require(type == EntryType::Bytes, ErrorCode::Format, "entry '" + name + "' is not a byte entry");
    return std::string(payload.begin(), payload.end());
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
    Writer w;
    w.bytes(kMagic, 4);
    w.le<std::uint16_t>(kCheckpointVersion);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        require(e.name.size() <= 0xffff, ErrorCode::InvalidArgument, "entry name too long");
        require(e.dims.size() <= 0xff, ErrorCode::InvalidArgument, "entry rank too large");
        require(e.payload.size() == element_count(e.dims) * element_size(e.type), ErrorCode::InvalidArgument,
                "entry '" + e.name + "' payload does not match its dims");
        w.le<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
        w.bytes(e.name.data(), e.name.size());
        w.le<std::uint8_t>(static_cast<std::uint8_t>(e.type));
        w.le<std::uint8_t>(static_cast<std::uint8_t>(e.dims.size()));
        for (auto d : e.dims) w.le<std::uint32_t>(d);
        w.bytes(e.payload.data(), e.payload.size());
    }
    return w.take();
}

Checkpoint Checkpoint::parse(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    auto magic = r.take(4);
    require(std::memcmp(magic.data(), kMagic, 4) == 0, ErrorCode::Format, "not a checkpoint (bad magic)");
    const auto version = r.le<std::uint16_t>();
    require(version == kCheckpointVersion, ErrorCode::Format,
            "unsupported checkpoint version " + std::to_string(version));
    const auto count = r.le<std::uint32_t>();
    Checkpoint ckpt;
    std::map<std::string, int> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        const auto name_len = r.le<std::uint16_t>();
        auto name = r.take(name_len);
        e.name.assign(name.begin(), name.end());
        require(seen[e.name]++ == 0, ErrorCode::Format, "duplicate checkpoint entry '" + e.name + "'");
        const auto tag = r.le<std::uint8_t>();
        require(tag <= 1, ErrorCode::Format, "unknown dtype tag " + std::to_string(tag));
        e.type = static_cast<EntryType>(tag);
        const auto rank = r.le<std::uint8_t>();
        for (std::uint8_t d = 0; d < rank; ++d) e.dims.push_back(r.le<std::uint32_t>());
        auto payload = r.take(element_count(e.dims) * element_size(e.type));
        e.payload.assign(payload.begin(), payload.end());
        ckpt.entries.push_back(std::move(e));
    }
    require(r.done(), ErrorCode::Format, "trailing bytes after the last checkpoint entry");
    return ckpt;
}

Checkpoint to_checkpoint(const StyleBankModel& model) {
    model.validate();
    nlohmann::json meta;
    meta["format"] = "stylebank";
    meta["channels"] = model.config().channels;
    meta["bank_kernel"] = model.config().bank_kernel;
    meta["styles"] = model.style_names();
    Checkpoint ckpt;
    ckpt.entries.push_back(CheckpointEntry::from_text(kMetaName, meta.dump()));
    model.for_each_autoencoder_param(ConstParamVisitor([&](const std::string& name, const Tensor& t) {
        ckpt.entries.push_back(CheckpointEntry::from_tensor(name, t));
    }));
    for (const auto& b : model.banks())
        ckpt.entries.push_back(CheckpointEntry::from_tensor("bank/" + b.name + "/kernel", b.kernel));
    return ckpt;
}

StyleBankModel model_from_checkpoint(const Checkpoint& ckpt) {
    const CheckpointEntry* meta_entry = ckpt.find(kMetaName);
    require(meta_entry != nullptr, ErrorCode::Format, "checkpoint lacks meta/config");
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_entry->to_text());
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::Format, std::string("meta/config is not valid JSON: ") + e.what());
    }
    ModelConfig config;
    std::vector<std::string> styles;
    try {
        config.channels = meta.at("channels").get<std::size_t>();
        config.bank_kernel = meta.at("bank_kernel").get<std::size_t>();
        styles = meta.at("styles").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::Format, std::string("meta/config is incomplete: ") + e.what());
    }

    auto layer = [&](const std::string& prefix) {
        return ConvNormLayer{tensor_entry(ckpt, prefix + "/kernel"), tensor_entry(ckpt, prefix + "/scale"),
                             tensor_entry(ckpt, prefix + "/shift")};
    };
    EncoderParams enc{layer("encoder/conv1"), layer("encoder/conv2"), layer("encoder/conv3")};
    DecoderParams dec{layer("decoder/deconv1"), layer("decoder/deconv2"), tensor_entry(ckpt, "decoder/out/kernel"),
                      tensor_entry(ckpt, "decoder/out/bias")};
    std::vector<FilterBank> banks;
    for (const auto& name : styles) banks.push_back(FilterBank{name, tensor_entry(ckpt, "bank/" + name + "/kernel")});
    std::size_t bank_entries = 0;
    for (const auto& e : ckpt.entries)
        if (e.name.rfind("bank/", 0) == 0) ++bank_entries;
    require(bank_entries == styles.size(), ErrorCode::Format, "checkpoint banks disagree with meta/config styles");
    try {
        return StyleBankModel::assemble(config, std::move(enc), std::move(dec), std::move(banks));
    } catch (const Error& e) {
        fail(ErrorCode::Format, std::string("checkpoint violates model invariants: ") + e.what());
    }
}

Checkpoint to_checkpoint(const FeatureExtractor& extractor) {
    Checkpoint ckpt;
    for (const auto& [name, t] : extractor.named_tensors()) ckpt.entries.push_back(CheckpointEntry::from_tensor(name, t));
    return ckpt;
}

FeatureExtractor extractor_from_checkpoint(const Checkpoint& ckpt) {
    std::map<std::string, Tensor> tensors;
    for (const auto& e : ckpt.entries)
        if (e.name.rfind("extractor/", 0) == 0) tensors.emplace(e.name, e.to_tensor());
    return FeatureExtractor::from_tensors(tensors);
}

void save_model(const std::filesystem::path& path, const StyleBankModel& model) {
    write_file_atomic(path, to_checkpoint(model).serialize());
}

StyleBankModel load_model(const std::filesystem::path& path) {
    return model_from_checkpoint(Checkpoint::parse(read_file(path)));
}

void save_extractor(const std::filesystem::path& path, const FeatureExtractor& extractor) {
    write_file_atomic(path, to_checkpoint(extractor).serialize());
}

FeatureExtractor load_extractor(const std::filesystem::path& path) {
    return extractor_from_checkpoint(Checkpoint::parse(read_file(path)));
}

} // namespace stylebank
