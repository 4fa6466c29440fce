#include "psp/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace psp {

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

namespace {
constexpr char kMagic[8] = {'P', 'S', 'P', 'T', 'E', 'N', 'S', '1'};
}

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 8);
    const uint32_t rank = static_cast<uint32_t>(t.dim());
    os.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
    for (int64_t d : t.shape()) {
        const uint64_t v = static_cast<uint64_t>(d);
        os.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!os) throw std::runtime_error("write_tensor: stream write failed");
}

Tensor read_tensor(std::istream& is) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) {
        throw std::runtime_error("read_tensor: bad magic, not a PSPTENS1 container");
    }
    uint32_t rank = 0;
    is.read(reinterpret_cast<char*>(&rank), sizeof(rank));
    if (!is || rank > 16) throw std::runtime_error("read_tensor: malformed rank");
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) {
        uint64_t v = 0;
        is.read(reinterpret_cast<char*>(&v), sizeof(v));
        shape[i] = static_cast<int64_t>(v);
    }
    if (!is) throw std::runtime_error("read_tensor: truncated dims");
    std::vector<double> data(shape_numel(shape));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw std::runtime_error("read_tensor: truncated payload");
    return Tensor::from_data(std::move(shape), std::move(data));
}

void save_tensor_file(const Tensor& t, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_tensor_file: cannot open " + path);
    write_tensor(f, t);
}

Tensor load_tensor_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_tensor_file: cannot open " + path);
    return read_tensor(f);
}

}  // namespace psp
