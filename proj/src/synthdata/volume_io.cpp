#include "catnet/volume_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "catnet/errors.hpp"

namespace catnet {

namespace {

constexpr char kMagic[4] = {'C', 'A', 'T', 'V'};
constexpr std::size_t kFixedHeader = 8;
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 34;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 | std::uint32_t{p[3]} << 24;
}

std::size_t element_size(VolumeDtype d) { return d == VolumeDtype::f32 ? 4 : 1; }

std::uint32_t checked_dim(std::size_t d) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw DimensionError("volume dimension exceeds u32 range");
    return static_cast<std::uint32_t>(d);
}

} // namespace

std::vector<std::uint8_t> encode_volume_file(const VolumeFile& file) {
    if (file.dims.empty() || file.dims.size() > 255) throw DimensionError("volume rank must lie in [1, 255]");
    std::uint64_t count = 1;
    for (auto d : file.dims) count *= d;
    if (count * element_size(file.dtype) != file.payload.size()) {
        throw DimensionError("volume payload length does not match its dims");
    }
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_u16(out, kVolumeFormatVersion);
    out.push_back(static_cast<std::uint8_t>(file.dtype));
    out.push_back(static_cast<std::uint8_t>(file.dims.size()));
    for (auto d : file.dims) put_u32(out, d);
    out.insert(out.end(), file.payload.begin(), file.payload.end());
    return out;
}

VolumeFile decode_volume_file(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < kFixedHeader) throw FormatError("truncated volume header", bytes.size());
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad volume magic", 0);
    const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | bytes[5] << 8);
    if (version != kVolumeFormatVersion) {
        throw FormatError("unsupported volume version " + std::to_string(version), 4);
    }
    VolumeFile file;
    if (bytes[6] > 1) throw FormatError("unknown volume dtype " + std::to_string(bytes[6]), 6);
    file.dtype = static_cast<VolumeDtype>(bytes[6]);
    const std::size_t ndim = bytes[7];
    if (ndim == 0) throw FormatError("volume rank is zero", 7);
    const std::size_t header = kFixedHeader + 4 * ndim;
    if (bytes.size() < header) throw FormatError("truncated volume dims", bytes.size());

    std::uint64_t count = 1;
    for (std::size_t i = 0; i < ndim; ++i) {
        const std::size_t at = kFixedHeader + 4 * i;
        const std::uint32_t d = get_u32(bytes.data() + at);
        if (d == 0) throw FormatError("zero volume dimension", at);
        if (count > kMaxElements / d) throw FormatError("volume dims overflow", at);
        count *= d;
        file.dims.push_back(d);
    }
    const std::uint64_t expected = count * element_size(file.dtype);
    const std::uint64_t available = bytes.size() - header;
    if (available < expected) throw FormatError("truncated volume payload", bytes.size());
    if (available > expected) throw FormatError("trailing bytes after volume payload", header + expected);
    file.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
    return file;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw DataError("read failed for " + path.string());
    return bytes;
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + path.string());
}

void save_volume(const std::filesystem::path& path, const Volume& volume) {
    const auto& t = volume.intensities;
    if (t.rank() != 4) throw DimensionError("image volume must be l×h×w×c, got " + shape_str(t.shape()));
    VolumeFile f;
    f.dtype = VolumeDtype::f32;
    for (auto d : t.shape()) f.dims.push_back(checked_dim(d));
    f.payload.reserve(t.size() * 4);
    for (float v : t.values()) put_u32(f.payload, std::bit_cast<std::uint32_t>(v));
    write_file(path, encode_volume_file(f));
}

void save_volume(const std::filesystem::path& path, const LabelVolume& labels) {
    VolumeFile f;
    f.dtype = VolumeDtype::u8;
    f.dims = {checked_dim(labels.slices), checked_dim(labels.height), checked_dim(labels.width)};
    f.payload = labels.labels;
    write_file(path, encode_volume_file(f));
}

Volume load_volume(const std::filesystem::path& path, Spacing spacing) {
    const VolumeFile f = decode_volume_file(read_file(path));
    if (f.dtype != VolumeDtype::f32) throw FormatError(path.string() + ": expected f32 image volume", 6);
    if (f.dims.size() != 4) throw FormatError(path.string() + ": expected rank-4 image volume", 7);
    Shape shape(f.dims.begin(), f.dims.end());
    std::vector<float> data(f.payload.size() / 4);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = std::bit_cast<float>(get_u32(f.payload.data() + 4 * i));
    Volume v{Tensor<float>(std::move(shape), std::move(data)), spacing};
    if (!v.intensities.all_finite()) throw DataError(path.string() + ": non-finite intensities");
    return v;
}

LabelVolume load_labels(const std::filesystem::path& path) {
    VolumeFile f = decode_volume_file(read_file(path));
    if (f.dtype != VolumeDtype::u8) throw FormatError(path.string() + ": expected u8 label volume", 6);
    if (f.dims.size() != 3) throw FormatError(path.string() + ": expected rank-3 label volume", 7);
    LabelVolume v;
    v.slices = f.dims[0];
    v.height = f.dims[1];
    v.width = f.dims[2];
    v.labels = std::move(f.payload);
    for (auto x : v.labels) {
        if (x >= kNumClasses) throw DataError(path.string() + ": label value " + std::to_string(x) + " out of range");
    }
    return v;
}

} // namespace catnet
