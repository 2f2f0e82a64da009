#include "idfuse/text.hpp"

#include <cctype>
#include <cmath>
#include <random>

#include "idfuse/errors.hpp"

namespace idfuse {

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<std::string> tokenize(std::string_view prompt) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : prompt) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

HashTextEncoder::HashTextEncoder(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim == 0) throw InputError("text encoder dimension must be positive");
}

Matrix<float> HashTextEncoder::encode(std::string_view prompt) const {
    const auto toks = tokenize(prompt);
    Matrix<float> out(toks.size(), dim_);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(dim_);
    for (std::size_t i = 0; i < toks.size(); ++i) {
        std::mt19937_64 rng(seed_ ^ fnv1a64(toks[i]));
        double norm = 0;
        for (auto& x : v) {
            x = n(rng);
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (std::size_t c = 0; c < dim_; ++c) out(i, c) = static_cast<float>(v[c] / norm);
    }
    return out;
}

std::vector<float> HashTextEncoder::pooled(std::string_view prompt) const {
    const Matrix<float> t = encode(prompt);
    if (t.rows() == 0) throw DegenerateError("empty prompt has no text embedding");
    std::vector<double> acc(dim_, 0.0);
    for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < dim_; ++c) acc[c] += t(r, c);
    std::vector<float> out(dim_);
    for (std::size_t c = 0; c < dim_; ++c) out[c] = static_cast<float>(acc[c] / t.rows());
    return out;
}

}  // namespace idfuse
