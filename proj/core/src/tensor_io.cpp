#include "coatsim/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace coatsim {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; byte-swapping is not implemented");

namespace {

constexpr uint16_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("unexpected end of stream");
    return v;
}

void write_magic(std::ostream& os, const char magic[4]) {
    os.write(magic, 4);
}

void expect_magic(std::istream& is, const char magic[4]) {
    char buf[4] = {};
    is.read(buf, 4);
    if (!is || std::memcmp(buf, magic, 4) != 0) {
        throw BadMagic(std::string("expected record magic ") + std::string(magic, 4));
    }
}

void write_dims(std::ostream& os, const std::vector<int64_t>& shape) {
    write_pod<uint16_t>(os, uint16_t(shape.size()));
    for (int64_t d : shape) write_pod<uint64_t>(os, uint64_t(d));
}

std::vector<int64_t> read_dims(std::istream& is) {
    const uint16_t rank = read_pod<uint16_t>(is);
    std::vector<int64_t> shape(rank);
    for (auto& d : shape) d = int64_t(read_pod<uint64_t>(is));
    return shape;
}

void check_version(uint16_t v) {
    if (v != kVersion) throw IoError("unsupported record version");
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    write_magic(os, "CTEN");
    write_pod<uint16_t>(os, kVersion);
    write_dims(os, t.shape);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             std::streamsize(t.data.size() * sizeof(float)));
    if (!os) throw IoError("write_tensor: stream failure");
}

Tensor read_tensor(std::istream& is) {
    expect_magic(is, "CTEN");
    check_version(read_pod<uint16_t>(is));
    Tensor t;
    t.shape = read_dims(is);
    const int64_t n = shape_numel(t.shape);
    t.data.resize(size_t(n));
    is.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(n * sizeof(float)));
    if (is.gcount() != std::streamsize(n * sizeof(float))) {
        throw ShapeMismatch("read_tensor: payload shorter than declared shape");
    }
    return t;
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path);
    return read_tensor(is);
}

void write_quantized(std::ostream& os, const QuantizedTensor& q) {
    write_magic(os, "CQT8");
    write_pod<uint16_t>(os, kVersion);
    write_pod<uint8_t>(os, uint8_t(q.format));
    uint8_t axis = 0xFF;
    uint32_t size = 0;
    switch (q.geometry.mode) {
        case QuantMode::PerTensor: break;
        case QuantMode::PerGroup:
            axis = uint8_t(q.source_shape.size() - 1);
            size = uint32_t(q.geometry.group_size);
            break;
        case QuantMode::PerBlock:
            axis = 0xFE;
            size = uint32_t(q.geometry.block_size);
            break;
    }
    write_pod<uint8_t>(os, axis);
    write_pod<uint32_t>(os, size);
    write_dims(os, q.source_shape);
    os.write(reinterpret_cast<const char*>(q.scales.data()),
             std::streamsize(q.scales.size() * sizeof(float)));
    os.write(reinterpret_cast<const char*>(q.codes.data()), std::streamsize(q.codes.size()));
    if (!os) throw IoError("write_quantized: stream failure");
}

QuantizedTensor read_quantized(std::istream& is) {
    expect_magic(is, "CQT8");
    check_version(read_pod<uint16_t>(is));
    QuantizedTensor q;
    q.format = Fp8Tag(read_pod<uint8_t>(is));
    const uint8_t axis = read_pod<uint8_t>(is);
    const uint32_t size = read_pod<uint32_t>(is);
    q.source_shape = read_dims(is);
    if (axis == 0xFF) {
        q.geometry = QuantGeometry::per_tensor();
    } else if (axis == 0xFE) {
        q.geometry = QuantGeometry::per_block(int64_t(size));
    } else {
        if (axis + 1 != q.source_shape.size()) {
            throw IoError("read_quantized: per-group axis must be the last axis");
        }
        q.geometry = QuantGeometry::per_group(int64_t(size));
    }
    const GroupIndexer indexer(q.source_shape, q.geometry);
    q.scales.resize(size_t(indexer.group_count()));
    is.read(reinterpret_cast<char*>(q.scales.data()),
            std::streamsize(q.scales.size() * sizeof(float)));
    const int64_t n = shape_numel(q.source_shape);
    q.codes.resize(size_t(n));
    is.read(reinterpret_cast<char*>(q.codes.data()), std::streamsize(n));
    if (is.gcount() != std::streamsize(n)) {
        throw ShapeMismatch("read_quantized: payload shorter than declared shape");
    }
    return q;
}

void write_expanded(std::ostream& os, const ExpandedQuantState& state) {
    write_quantized(os, state.quantized);
    write_magic(os, "EXPK");
    for (const ExpansionParams& p : state.params) {
        write_pod<float>(os, p.k);
        write_pod<float>(os, p.c);
    }
    if (!os) throw IoError("write_expanded: stream failure");
}

ExpandedQuantState read_expanded(std::istream& is) {
    ExpandedQuantState state;
    state.quantized = read_quantized(is);
    expect_magic(is, "EXPK");
    state.params.resize(state.quantized.scales.size());
    for (ExpansionParams& p : state.params) {
        p.k = read_pod<float>(is);
        p.c = read_pod<float>(is);
        p.measured_range = 0.0f;
        p.degenerate = p.k == 1.0f;
    }
    return state;
}

}  // namespace coatsim
