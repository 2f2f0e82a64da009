#pragma once
// Stub text encoder: each lowercase whitespace token hashes (FNV-1a) into a
// seeded Gaussian vector. Stands in for a pretrained text transformer.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "idfuse/matrix.hpp"

namespace idfuse {

std::uint64_t fnv1a64(std::string_view s);

std::vector<std::string> tokenize(std::string_view prompt);

class HashTextEncoder {
public:
    HashTextEncoder(std::size_t dim, std::uint64_t seed);

    std::size_t dim() const { return dim_; }

    /// [tokens x dim], each row unit-norm. An empty prompt yields 0 rows.
    Matrix<float> encode(std::string_view prompt) const;

    /// Mean of encode() rows; throws DegenerateError for an empty prompt.
    std::vector<float> pooled(std::string_view prompt) const;

private:
    std::size_t dim_;
    std::uint64_t seed_;
};

}  // namespace idfuse
