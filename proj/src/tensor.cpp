#include "uxnet/tensor.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

namespace uxnet {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

namespace {

constexpr char kMagic[4] = {'U', 'X', 'T', '1'};

template <typename V>
void put(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is) {
    V v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) {
        throw std::runtime_error("truncated tensor stream");
    }
    return v;
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
    os.write(kMagic, 4);
    put<uint8_t>(os, static_cast<uint8_t>(dtype_of<T>()));
    put<uint8_t>(os, static_cast<uint8_t>(t.rank()));
    for (int64_t e : t.shape()) put<uint64_t>(os, static_cast<uint64_t>(e));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(T)));
    if (!os) throw std::runtime_error("failed writing tensor");
}

DType peek_tensor_dtype(std::istream& is) {
    auto pos = is.tellg();
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("bad tensor magic");
    }
    auto code = get<uint8_t>(is);
    is.seekg(pos);
    if (code > 1) throw std::runtime_error("unknown tensor dtype code " + std::to_string(code));
    return static_cast<DType>(code);
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("bad tensor magic");
    }
    auto code = get<uint8_t>(is);
    if (code != static_cast<uint8_t>(dtype_of<T>())) {
        throw std::runtime_error("tensor dtype code " + std::to_string(code) +
                                 " does not match requested type");
    }
    auto rank = get<uint8_t>(is);
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<int64_t>(get<uint64_t>(is));
    Tensor<T> t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(T)))) {
        throw std::runtime_error("truncated tensor payload for shape " + shape_str(shape));
    }
    return t;
}

template void write_tensor<float>(std::ostream&, const Tensor<float>&);
template void write_tensor<double>(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor<float>(std::istream&);
template Tensor<double> read_tensor<double>(std::istream&);

}  // namespace uxnet
