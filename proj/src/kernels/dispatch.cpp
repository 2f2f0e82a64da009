#include <cstdlib>
#include <string_view>

#include "idfuse/kernels.hpp"

namespace idfuse::kernels {

#if defined(IDFUSE_HAVE_AVX2)
const KernelTable& avx2_table_unchecked();
#endif
#if defined(IDFUSE_HAVE_NEON)
const KernelTable& neon_table_unchecked();
#endif

const KernelTable* avx2_table() {
#if defined(IDFUSE_HAVE_AVX2)
    __builtin_cpu_init();
    if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) return &avx2_table_unchecked();
#endif
    return nullptr;
}

const KernelTable* neon_table() {
#if defined(IDFUSE_HAVE_NEON)
    return &neon_table_unchecked();
#else
    return nullptr;
#endif
}

namespace {

const KernelTable& select() {
    if (const char* forced = std::getenv("IDFUSE_KERNELS"); forced != nullptr && std::string_view(forced) == "scalar")
        return scalar_table();
    if (const KernelTable* t = avx2_table()) return *t;
    if (const KernelTable* t = neon_table()) return *t;
    return scalar_table();
}

}  // namespace

const KernelTable& active() {
    static const KernelTable& table = select();
    return table;
}

std::string_view isa_name(Isa isa) {
    switch (isa) {
        case Isa::scalar: return "scalar";
        case Isa::avx2: return "avx2";
        case Isa::neon: return "neon";
    }
    return "unknown";
}

}  // namespace idfuse::kernels
