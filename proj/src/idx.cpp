// Binary readers and writers: IDX archives, CIFAR-10 batches, dataset cache.

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>

#include "flgames/datagen.hpp"
#include "flgames/errors.hpp"

namespace flgames {

namespace {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::string hex_magic(std::uint32_t magic) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08X", magic);
    return buf;
}

class Writer {
public:
    template <typename T>
    void put(T value) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
        bytes.insert(bytes.end(), p, p + sizeof(T));
    }
    std::vector<std::uint8_t> bytes;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename T>
    T get() {
        if (offset_ + sizeof(T) > bytes_.size()) throw LengthError("dataset cache truncated");
        T value;
        std::memcpy(&value, bytes_.data() + offset_, sizeof(T));
        offset_ += sizeof(T);
        return value;
    }

    std::size_t remaining() const { return bytes_.size() - offset_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t offset_ = 0;
};

static_assert(std::endian::native == std::endian::little, "dataset cache assumes little-endian host");

}  // namespace

RawImageSet parse_idx(std::span<const std::uint8_t> image_bytes,
                      std::span<const std::uint8_t> label_bytes) {
    if (image_bytes.size() < 16) throw LengthError("IDX image file shorter than its header");
    if (label_bytes.size() < 8) throw LengthError("IDX label file shorter than its header");
    const auto image_magic = read_be32(image_bytes, 0);
    if (image_magic != kIdxImageMagic) {
        throw FormatError("IDX image magic " + hex_magic(image_magic) + ", expected 0x00000803");
    }
    const auto label_magic = read_be32(label_bytes, 0);
    if (label_magic != kIdxLabelMagic) {
        throw FormatError("IDX label magic " + hex_magic(label_magic) + ", expected 0x00000801");
    }
    RawImageSet set;
    set.count = read_be32(image_bytes, 4);
    set.height = read_be32(image_bytes, 8);
    set.width = read_be32(image_bytes, 12);
    set.channels = 1;
    const std::size_t label_count = read_be32(label_bytes, 4);
    const std::size_t payload = set.count * set.height * set.width;
    if (image_bytes.size() - 16 != payload) {
        throw LengthError("IDX image payload is " + std::to_string(image_bytes.size() - 16) +
                          " bytes, header declares " + std::to_string(payload));
    }
    if (label_bytes.size() - 8 != label_count) {
        throw LengthError("IDX label payload is " + std::to_string(label_bytes.size() - 8) +
                          " bytes, header declares " + std::to_string(label_count));
    }
    if (label_count != set.count) {
        throw LengthError("IDX image count " + std::to_string(set.count) + " != label count " +
                          std::to_string(label_count));
    }
    set.pixels.assign(image_bytes.begin() + 16, image_bytes.end());
    set.labels.assign(label_bytes.begin() + 8, label_bytes.end());
    return set;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (raw.size() < 2 || raw[0] != 0x1f || raw[1] != 0x8b) return raw;

    gzFile gz = gzopen(path.string().c_str(), "rb");
    if (gz == nullptr) throw Error("cannot open gzip stream " + path.string());
    std::vector<std::uint8_t> out;
    std::uint8_t chunk[1 << 16];
    int got = 0;
    while ((got = gzread(gz, chunk, sizeof chunk)) > 0) out.insert(out.end(), chunk, chunk + got);
    const bool failed = got < 0;
    gzclose(gz);
    if (failed) throw FormatError("corrupt gzip stream in " + path.string());
    return out;
}

RawImageSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const auto image_bytes = read_file_bytes(images);
    const auto label_bytes = read_file_bytes(labels);
    return parse_idx(image_bytes, label_bytes);
}

RawImageSet parse_cifar10(std::span<const std::uint8_t> bytes) {
    constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
    if (bytes.size() % kRecord != 0) {
        throw LengthError("CIFAR-10 batch length " + std::to_string(bytes.size()) +
                          " is not a multiple of the 3073-byte record");
    }
    RawImageSet set;
    set.count = bytes.size() / kRecord;
    set.channels = 3;
    set.height = 32;
    set.width = 32;
    set.pixels.reserve(set.count * set.image_size());
    set.labels.reserve(set.count);
    for (std::size_t i = 0; i < set.count; ++i) {
        const auto* rec = bytes.data() + i * kRecord;
        if (rec[0] > 9) throw LabelError("CIFAR-10 label byte out of range");
        set.labels.push_back(rec[0]);
        set.pixels.insert(set.pixels.end(), rec + 1, rec + kRecord);
    }
    return set;
}

std::vector<std::uint8_t> encode_dataset(const SpuriousDataset& data) {
    data.validate();
    Writer w;
    for (char c : {'F', 'L', 'G', 'D'}) w.put(static_cast<std::uint8_t>(c));
    w.put<std::uint32_t>(kCacheVersion);
    w.put<std::uint64_t>(data.size());
    w.put<std::uint64_t>(data.dim());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(data.num_classes));
    for (double v : data.inputs.values()) w.put(v);
    for (int v : data.labels) w.put(static_cast<std::uint8_t>(v));
    for (int v : data.preliminary) w.put(static_cast<std::uint8_t>(v));
    for (int v : data.spurious) w.put(static_cast<std::uint8_t>(v));
    w.put<std::int32_t>(data.provenance.client_id);
    w.put<double>(data.provenance.delta);
    w.put<double>(data.provenance.p_spurious);
    w.put<std::uint8_t>(data.provenance.role == EnvRole::Test ? 1 : 0);
    return std::move(w.bytes);
}

SpuriousDataset decode_dataset(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    char magic[4];
    for (char& c : magic) c = static_cast<char>(r.get<std::uint8_t>());
    if (std::memcmp(magic, "FLGD", 4) != 0) throw FormatError("not a dataset cache (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCacheVersion) throw FormatError("unsupported dataset cache version " + std::to_string(version));
    const auto n = r.get<std::uint64_t>();
    const auto d = r.get<std::uint64_t>();
    const auto classes = r.get<std::uint32_t>();
    const std::uint64_t need = n * d * sizeof(double) + 3 * n + 4 + 8 + 8 + 1;
    if (r.remaining() != need) throw LengthError("dataset cache payload length does not match header");
    SpuriousDataset data;
    data.num_classes = static_cast<int>(classes);
    std::vector<double> values(n * d);
    for (double& v : values) v = r.get<double>();
    data.inputs = Matrix(n, d, std::move(values));
    auto read_codes = [&](std::vector<int>& out) {
        out.resize(n);
        for (int& v : out) v = r.get<std::uint8_t>();
    };
    read_codes(data.labels);
    read_codes(data.preliminary);
    read_codes(data.spurious);
    data.provenance.client_id = r.get<std::int32_t>();
    data.provenance.delta = r.get<double>();
    data.provenance.p_spurious = r.get<double>();
    data.provenance.role = r.get<std::uint8_t>() ? EnvRole::Test : EnvRole::Train;
    data.provenance.n_samples = n;
    data.validate();
    return data;
}

void save_dataset(const SpuriousDataset& data, const std::filesystem::path& path) {
    const auto bytes = encode_dataset(data);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

SpuriousDataset load_dataset(const std::filesystem::path& path) {
    return decode_dataset(read_file_bytes(path));
}

}  // namespace flgames
