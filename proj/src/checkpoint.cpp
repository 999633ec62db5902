#include "treeqn/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace treeqn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {

void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void write_string(std::ostream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
    const std::uint64_t len = read_u64(in);
    std::string s(len, '\0');
    in.read(s.data(), static_cast<std::streamsize>(len));
    return s;
}

}  // namespace

void Checkpoint::add(const std::string& name, const Shape& shape, std::span<const double> data) {
    if (static_cast<int>(data.size()) != shape.numel())
        throw std::invalid_argument("checkpoint array " + name + ": data does not match shape " + shape.str());
    arrays.push_back({name, shape, std::vector<double>(data.begin(), data.end())});
}

const Checkpoint::Array* Checkpoint::find(const std::string& name) const {
    for (const Array& a : arrays)
        if (a.name == name) return &a;
    return nullptr;
}

const Checkpoint::Array& Checkpoint::require(const std::string& name) const {
    const Array* a = find(name);
    if (a == nullptr) throw std::runtime_error("checkpoint is missing array: " + name);
    return *a;
}

void Checkpoint::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    write_u32(out, kMagic);
    write_u32(out, kVersion);
    write_string(out, meta_json);
    write_u64(out, arrays.size());
    for (const Array& a : arrays) {
        write_string(out, a.name);
        write_u32(out, static_cast<std::uint32_t>(a.shape.rank()));
        for (int i = 0; i < a.shape.rank(); ++i) write_u32(out, static_cast<std::uint32_t>(a.shape[i]));
        out.write(reinterpret_cast<const char*>(a.data.data()),
                  static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    if (read_u32(in) != kMagic) throw std::runtime_error("not a checkpoint file: " + path);
    const std::uint32_t version = read_u32(in);
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));

    Checkpoint ckpt;
    ckpt.meta_json = read_string(in);
    const std::uint64_t count = read_u64(in);
    ckpt.arrays.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        Array a;
        a.name = read_string(in);
        const std::uint32_t rank = read_u32(in);
        if (rank > 4) throw std::runtime_error("corrupt checkpoint: array rank " + std::to_string(rank));
        std::initializer_list<int> empty{};
        a.shape = Shape(empty);
        std::array<int, 4> dims{};
        for (std::uint32_t d = 0; d < rank; ++d) dims[d] = static_cast<int>(read_u32(in));
        switch (rank) {
        case 0: a.shape = Shape{}; break;
        case 1: a.shape = Shape{dims[0]}; break;
        case 2: a.shape = Shape{dims[0], dims[1]}; break;
        case 3: a.shape = Shape{dims[0], dims[1], dims[2]}; break;
        case 4: a.shape = Shape{dims[0], dims[1], dims[2], dims[3]}; break;
        }
        a.data.resize(static_cast<std::size_t>(a.shape.numel()));
        in.read(reinterpret_cast<char*>(a.data.data()),
                static_cast<std::streamsize>(a.data.size() * sizeof(double)));
        if (!in) throw std::runtime_error("truncated checkpoint: " + path);
        ckpt.arrays.push_back(std::move(a));
    }
    return ckpt;
}

}  // namespace treeqn
