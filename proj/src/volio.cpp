#include "qsm/volio.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace qsm {

namespace {

class Writer {
public:
    template <class T> void put(T v) {
        static_assert(std::is_integral_v<T>);
        for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
    }
    void f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
    void bytes(const void *p, std::size_t n) {
        const auto *b = static_cast<const std::uint8_t *>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void name(const std::string &s) {
        if (s.size() > 0xFFFF) fail(ErrorCode::InvalidInput, "tensor name too long");
        put(static_cast<std::uint16_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    Reader(const std::vector<std::uint8_t> &b, const char *what) : b_(b), what_(what) {}

    void need(std::size_t n) const {
        if (pos_ + n > b_.size())
            fail(ErrorCode::Truncated, std::string(what_) + " truncated: expected at least " + std::to_string(pos_ + n) +
                                           " bytes, got " + std::to_string(b_.size()));
    }
    template <class T> T get() {
        need(sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }
    float f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
    double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char *>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::string name() { return str(get<std::uint16_t>()); }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return b_.size() - pos_; }

private:
    const std::vector<std::uint8_t> &b_;
    const char *what_;
    std::size_t pos_ = 0;
};

void write_header(Writer &w, const Dims &d, const VoxelSize &v, VolumeDtype dt) {
    w.bytes("NXQV", 4);
    w.put(kVolumeVersion);
    for (std::size_t a = 0; a < 3; ++a) {
        if (d[a] > 0xFFFFFFFFu) fail(ErrorCode::InvalidInput, "volume dimension exceeds 32 bits");
        w.put(static_cast<std::uint32_t>(d[a]));
    }
    w.f32(static_cast<float>(v.dx));
    w.f32(static_cast<float>(v.dy));
    w.f32(static_cast<float>(v.dz));
    w.put(static_cast<std::uint8_t>(dt));
}

std::size_t dtype_bytes(VolumeDtype dt) {
    switch (dt) {
    case VolumeDtype::F32: return 4;
    case VolumeDtype::F64: return 8;
    case VolumeDtype::U8Mask: return 1;
    }
    fail(ErrorCode::InvalidInput, "unknown volume dtype code " + std::to_string(static_cast<int>(dt)));
}

} // namespace

std::vector<std::uint8_t> encode_volume(const Volume3D &v, VolumeDtype dtype) {
    Writer w;
    write_header(w, v.dims(), v.voxel_size(), dtype);
    for (double x : v.values()) {
        switch (dtype) {
        case VolumeDtype::F32: w.f32(static_cast<float>(x)); break;
        case VolumeDtype::F64: w.f64(x); break;
        case VolumeDtype::U8Mask: w.put(static_cast<std::uint8_t>(x != 0.0 ? 1 : 0)); break;
        }
    }
    return w.take();
}

std::vector<std::uint8_t> encode_mask(const Mask3D &m, VoxelSize voxel) {
    Writer w;
    write_header(w, m.dims(), voxel, VolumeDtype::U8Mask);
    w.bytes(m.data().data(), m.size());
    return w.take();
}

DecodedVolume decode_volume(const std::vector<std::uint8_t> &bytes) {
    Reader r(bytes, "volume file");
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "NXQV", 4) != 0)
        fail(ErrorCode::BadMagic, "not a volume file (bad magic)");
    r.str(4);
    const auto version = r.get<std::uint16_t>();
    if (version != kVolumeVersion)
        fail(ErrorCode::UnsupportedVersion, "volume file version " + std::to_string(version) + " is not supported (expected " +
                                                std::to_string(kVolumeVersion) + ")");
    Dims d;
    d.nx = r.get<std::uint32_t>();
    d.ny = r.get<std::uint32_t>();
    d.nz = r.get<std::uint32_t>();
    VoxelSize v;
    v.dx = r.f32();
    v.dy = r.f32();
    v.dz = r.f32();
    const auto dt = static_cast<VolumeDtype>(r.get<std::uint8_t>());
    const std::size_t expected = r.pos() + d.size() * dtype_bytes(dt);
    if (bytes.size() != expected)
        fail(ErrorCode::Truncated, "volume payload size mismatch: expected " + std::to_string(expected) + " bytes, got " +
                                       std::to_string(bytes.size()));
    std::vector<double> data(d.size());
    for (auto &x : data) {
        switch (dt) {
        case VolumeDtype::F32: x = r.f32(); break;
        case VolumeDtype::F64: x = r.f64(); break;
        case VolumeDtype::U8Mask: x = r.get<std::uint8_t>() ? 1.0 : 0.0; break;
        }
    }
    return DecodedVolume{dt, Volume3D(d, v, std::move(data))};
}

std::vector<std::uint8_t> read_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
    std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) fail(ErrorCode::Io, "read error on " + path.string());
    return b;
}

void write_file(const std::filesystem::path &path, const std::vector<std::uint8_t> &bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::Io, "write error on " + path.string());
}

void write_volume(const std::filesystem::path &path, const Volume3D &v, VolumeDtype dtype) {
    write_file(path, encode_volume(v, dtype));
}

Volume3D read_volume(const std::filesystem::path &path) {
    try {
        return decode_volume(read_file(path)).volume;
    } catch (const Error &e) {
        throw Error(e.code(), path.string() + ": " + e.what());
    }
}

void write_mask(const std::filesystem::path &path, const Mask3D &m, VoxelSize voxel) {
    write_file(path, encode_mask(m, voxel));
}

Mask3D read_mask(const std::filesystem::path &path) { return mask_from_nonzero(read_volume(path)); }

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint &c) {
    Writer w;
    w.bytes("NXQC", 4);
    w.put(kCheckpointVersion);
    w.put(static_cast<std::uint32_t>(c.metadata.size()));
    w.bytes(c.metadata.data(), c.metadata.size());
    const auto &ts = c.params.tensors();
    w.put(static_cast<std::uint32_t>(ts.size()));
    for (const auto &[name, t] : ts) {
        w.name(name);
        w.put(static_cast<std::uint8_t>(t.shape.size()));
        for (auto s : t.shape) w.put(static_cast<std::uint32_t>(s));
        for (double x : t.data) w.f64(x);
    }
    w.put(static_cast<std::uint64_t>(c.adam.step));
    w.f64(c.adam.lr);
    w.f64(c.adam.beta1);
    w.f64(c.adam.beta2);
    w.f64(c.adam.eps);
    w.put(static_cast<std::uint32_t>(c.adam.m.size()));
    for (const auto &[name, m] : c.adam.m) {
        const auto it = c.adam.v.find(name);
        if (it == c.adam.v.end() || it->second.size() != m.size())
            fail(ErrorCode::InvalidInput, "Adam moments for " + name + " are inconsistent");
        w.name(name);
        w.put(static_cast<std::uint64_t>(m.size()));
        for (double x : m) w.f64(x);
        for (double x : it->second) w.f64(x);
    }
    return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t> &bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "NXQC", 4) != 0)
        fail(ErrorCode::BadMagic, "not a checkpoint file (bad magic)");
    Reader r(bytes, "checkpoint");
    r.str(4);
    const auto version = r.get<std::uint16_t>();
    if (version != kCheckpointVersion)
        fail(ErrorCode::UnsupportedVersion, "checkpoint version " + std::to_string(version) +
                                                " cannot be migrated; this build reads version " +
                                                std::to_string(kCheckpointVersion));
    Checkpoint c;
    c.metadata = r.str(r.get<std::uint32_t>());
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.name();
        const auto rank = r.get<std::uint8_t>();
        nn::Shape shape(rank);
        for (auto &s : shape) s = r.get<std::uint32_t>();
        const std::size_t n = nn::numel(shape);
        r.need(8 * n);
        std::vector<double> data(n);
        for (auto &x : data) x = r.f64();
        c.params.add(name, std::move(shape), std::move(data));
    }
    c.adam.step = r.get<std::uint64_t>();
    c.adam.lr = r.f64();
    c.adam.beta1 = r.f64();
    c.adam.beta2 = r.f64();
    c.adam.eps = r.f64();
    const auto moments = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < moments; ++i) {
        std::string name = r.name();
        const auto n = r.get<std::uint64_t>();
        r.need(16 * n);
        std::vector<double> m(n), v(n);
        for (auto &x : m) x = r.f64();
        for (auto &x : v) x = r.f64();
        c.adam.m.emplace(name, std::move(m));
        c.adam.v.emplace(std::move(name), std::move(v));
    }
    if (r.remaining() != 0)
        fail(ErrorCode::Truncated, "checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
    return c;
}

void write_checkpoint(const std::filesystem::path &path, const Checkpoint &c) { write_file(path, encode_checkpoint(c)); }

Checkpoint read_checkpoint(const std::filesystem::path &path) {
    try {
        return decode_checkpoint(read_file(path));
    } catch (const Error &e) {
        throw Error(e.code(), path.string() + ": " + e.what());
    }
}

void load_params_into(const Checkpoint &c, ModelParams &expected) {
    std::string missing, mismatched;
    auto append = [](std::string &list, const std::string &item) { list += (list.empty() ? "" : ", ") + item; };
    for (const auto &[name, t] : expected.tensors()) {
        if (!c.params.contains(name)) {
            append(missing, name);
            continue;
        }
        const auto &stored = c.params.at(name);
        if (stored.shape != t.shape)
            append(mismatched, name + " (stored " + nn::shape_str(stored.shape) + ", expected " + nn::shape_str(t.shape) + ")");
    }
    for (const auto &[name, t] : c.params.tensors())
        if (!expected.contains(name)) append(mismatched, name + " (unexpected)");
    if (!missing.empty()) fail(ErrorCode::MissingEntry, "checkpoint lacks tensors: " + missing);
    if (!mismatched.empty()) fail(ErrorCode::ShapeMismatch, "checkpoint topology mismatch: " + mismatched);
    for (const auto &[name, t] : c.params.tensors()) expected.at(name).data = t.data;
}

// ---------------------------------------------------------------------------

void write_manifest(const std::filesystem::path &path, const Manifest &m) {
    nlohmann::json j;
    j["format_version"] = m.format_version;
    j["seed"] = m.seed;
    j["config"] = nlohmann::json::parse(m.config);
    j["samples"] = nlohmann::json::array();
    for (const auto &e : m.samples)
        j["samples"].push_back({{"index", e.index},
                                {"seed", e.seed},
                                {"chi", e.chi},
                                {"local_field", e.local_field},
                                {"total_field", e.total_field},
                                {"mask", e.mask}});
    const std::string text = j.dump(2) + "\n";
    write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

Manifest read_manifest(const std::filesystem::path &path) {
    const auto bytes = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception &e) {
        fail(ErrorCode::Io, path.string() + ": malformed manifest: " + e.what());
    }
    Manifest m;
    try {
        m.format_version = j.at("format_version").get<int>();
        if (m.format_version != kManifestVersion)
            fail(ErrorCode::UnsupportedVersion, "manifest version " + std::to_string(m.format_version) + " is not supported");
        m.seed = j.at("seed").get<std::uint64_t>();
        m.config = j.at("config").dump();
        const auto dir = path.parent_path();
        for (const auto &s : j.at("samples")) {
            ManifestEntry e;
            e.index = s.at("index").get<std::size_t>();
            e.seed = s.at("seed").get<std::uint64_t>();
            e.chi = s.at("chi").get<std::string>();
            e.local_field = s.at("local_field").get<std::string>();
            e.total_field = s.at("total_field").get<std::string>();
            e.mask = s.at("mask").get<std::string>();
            for (const auto *f : {&e.chi, &e.local_field, &e.total_field, &e.mask})
                if (!std::filesystem::exists(dir / *f))
                    fail(ErrorCode::MissingEntry, "manifest references missing file " + (dir / *f).string());
            m.samples.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception &e) {
        fail(ErrorCode::Io, path.string() + ": malformed manifest: " + e.what());
    }
    return m;
}

} // namespace qsm
