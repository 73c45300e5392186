#include "afnet/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace afnet {

namespace {

constexpr char kMagic[4] = {'A', 'F', 'T', 'N'};
constexpr unsigned char kVersion = 1;

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void put_f64(std::ostream& os, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64(os, v);
}

double get_f64(std::istream& is) {
    std::uint64_t v = get_u64(is);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("write_tensor: cannot open " + path);
    os.write(kMagic, 4);
    os.put(static_cast<char>(kVersion));
    put_u64(os, t.rank());
    for (auto d : t.shape()) put_u64(os, static_cast<std::uint64_t>(d));
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.data().size() * 8));
    } else {
        for (double v : t.data()) put_f64(os, v);
    }
    if (!os) throw InputError("write_tensor: write failed for " + path);
}

Tensor read_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("read_tensor: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw InputError("read_tensor: bad magic in " + path);
    const int version = is.get();
    if (version != kVersion)
        throw InputError("read_tensor: unsupported version " + std::to_string(version));
    const std::uint64_t rank = get_u64(is);
    if (rank == 0 || rank > 8) throw InputError("read_tensor: implausible rank in " + path);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::int64_t>(get_u64(is));
    check_shape_positive(shape, "read_tensor");
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    if constexpr (std::endian::native == std::endian::little) {
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 8));
    } else {
        for (auto& v : data) v = get_f64(is);
    }
    if (!is) throw InputError("read_tensor: truncated file " + path);
    return Tensor::from_data(shape, std::move(data));
}

void write_ppm(const std::string& path, const Tensor& image) {
    Shape s = image.shape();
    std::int64_t C = 1, H, W;
    if (s.size() == 3) {
        C = s[0];
        H = s[1];
        W = s[2];
    } else if (s.size() == 2) {
        H = s[0];
        W = s[1];
    } else {
        throw ShapeError("write_ppm: expected [3,H,W], [1,H,W] or [H,W], got " + shape_str(s));
    }
    if (C != 1 && C != 3) throw ShapeError("write_ppm: channel count must be 1 or 3");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("write_ppm: cannot open " + path);
    os << "P6\n" << W << " " << H << "\n255\n";
    const auto& d = image.data();
    auto to_byte = [](double v) {
        v = std::clamp(v, 0.0, 1.0);
        return static_cast<unsigned char>(v * 255.0 + 0.5);
    };
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            unsigned char px[3];
            if (C == 3)
                for (int c = 0; c < 3; ++c) px[c] = to_byte(d[static_cast<std::size_t>((c * H + y) * W + x)]);
            else
                px[0] = px[1] = px[2] = to_byte(d[static_cast<std::size_t>(y * W + x)]);
            os.write(reinterpret_cast<const char*>(px), 3);
        }
}

}  // namespace afnet
