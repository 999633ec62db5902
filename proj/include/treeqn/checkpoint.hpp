#pragma once

#include <span>
#include <string>
#include <vector>

#include "treeqn/tensor.hpp"

namespace treeqn {

// Versioned binary container: a JSON metadata string plus named f64 arrays
// written little-endian in insertion order. Round trips are bit-exact.
struct Checkpoint {
    struct Array {
        std::string name;
        Shape shape;
        std::vector<double> data;
    };

    static constexpr std::uint32_t kMagic = 0x50435154;  // "TQCP"
    static constexpr std::uint32_t kVersion = 1;

    std::string meta_json;
    std::vector<Array> arrays;

    void add(const std::string& name, const Shape& shape, std::span<const double> data);
    const Array* find(const std::string& name) const;
    const Array& require(const std::string& name) const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

}  // namespace treeqn
