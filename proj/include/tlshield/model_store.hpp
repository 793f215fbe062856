#pragma once

#include <cstring>
#include <fstream>
#include <iterator>

#include "tlshield/defense.hpp"

namespace tlshield {

// Single-file little-endian archive. Layout:
//   magic "TLSA", u32 version, u8 kind (0 network, 1 student, 2 registry)
//   then one length-prefixed payload section followed by its CRC32.
// Weights are raw float32 in layer order; masks are bit-packed, one bit per
// maskable parameter. Registry archives store the teacher once; each
// differentiator stores only masks, its head, and its fine-tuned unfrozen
// layers (shared-weight layout).

namespace store {

constexpr std::uint32_t kVersion = 1;

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n, std::uint32_t crc = 0) {
    crc = ~crc;
    for (std::size_t i = 0; i < n; ++i) {
        crc ^= data[i];
        for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (~(crc & 1u) + 1u));
    }
    return ~crc;
}

struct Writer {
    std::vector<std::uint8_t> buf;

    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void i32(std::int32_t v) { bytes(&v, 4); }
    void f32(float v) { bytes(&v, 4); }
    void floats(const std::vector<float>& v) { bytes(v.data(), v.size() * 4); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void bits(const std::vector<bool>& b) {
        u64(b.size());
        std::uint8_t cur = 0;
        for (std::size_t i = 0; i < b.size(); ++i) {
            if (b[i]) cur |= static_cast<std::uint8_t>(1u << (i % 8));
            if (i % 8 == 7) {
                u8(cur);
                cur = 0;
            }
        }
        if (b.size() % 8) u8(cur);
    }
};

struct Reader {
    const std::uint8_t* p;
    const std::uint8_t* end;

    void need(std::size_t n) const {
        if (static_cast<std::size_t>(end - p) < n) throw std::runtime_error("truncated archive");
    }
    void bytes(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, p, n);
        p += n;
    }
    std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
    std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
    std::int32_t i32() { std::int32_t v; bytes(&v, 4); return v; }
    float f32() { float v; bytes(&v, 4); return v; }
    void floats(std::vector<float>& out) { bytes(out.data(), out.size() * 4); }
    std::string str() {
        std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        return s;
    }
    std::vector<bool> bits() {
        std::uint64_t n = u64();
        std::vector<bool> out(n);
        std::uint8_t cur = 0;
        for (std::uint64_t i = 0; i < n; ++i) {
            if (i % 8 == 0) cur = u8();
            out[i] = (cur >> (i % 8)) & 1u;
        }
        return out;
    }
};

inline void put_shape(Writer& w, const Shape& s) {
    w.u32(static_cast<std::uint32_t>(s.size()));
    for (std::size_t d : s) w.u64(d);
}

inline Shape get_shape(Reader& r) {
    std::uint32_t n = r.u32();
    Shape s;
    for (std::uint32_t i = 0; i < n; ++i) s.push_back(static_cast<std::size_t>(r.u64()));
    return s;
}

inline void put_mask(Writer& w, const std::optional<Tensor>& mask) {
    if (!mask) {
        w.u8(0);
        return;
    }
    w.u8(1);
    std::vector<bool> bits(mask->numel());
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = mask->data[i] != 0.0f;
    w.bits(bits);
}

inline std::optional<Tensor> get_mask(Reader& r, const Shape& shape) {
    if (r.u8() == 0) return std::nullopt;
    std::vector<bool> bits = r.bits();
    if (bits.size() != shape_numel(shape)) throw std::runtime_error("mask bit count mismatch");
    Tensor m(shape);
    for (std::size_t i = 0; i < bits.size(); ++i) m.data[i] = bits[i] ? 1.0f : 0.0f;
    return m;
}

inline void put_network(Writer& w, const Network& net) {
    put_shape(w, net.input_shape);
    w.u32(static_cast<std::uint32_t>(net.layers.size()));
    for (const Layer& l : net.layers) {
        if (const auto* d = std::get_if<DenseLayer>(&l)) {
            w.u8(0);
            w.u64(d->in);
            w.u64(d->out);
            w.floats(d->w.data);
            w.floats(d->b.data);
            put_mask(w, d->mask);
        } else if (const auto* c = std::get_if<Conv2DLayer>(&l)) {
            w.u8(1);
            w.u64(c->in_ch);
            w.u64(c->out_ch);
            w.u64(c->kh);
            w.u64(c->kw);
            w.u64(c->stride);
            w.u64(c->pad);
            w.floats(c->w.data);
            w.floats(c->b.data);
            put_mask(w, c->mask);
        } else if (std::holds_alternative<ReLULayer>(l)) {
            w.u8(2);
        } else {
            w.u8(3);
        }
    }
    for (bool f : net.frozen) w.u8(f ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(net.num_classes));
}

inline Network get_network(Reader& r) {
    Network net;
    net.input_shape = get_shape(r);
    std::uint32_t nl = r.u32();
    for (std::uint32_t i = 0; i < nl; ++i) {
        switch (r.u8()) {
            case 0: {
                DenseLayer d(static_cast<std::size_t>(r.u64()), 0);
                d.out = static_cast<std::size_t>(r.u64());
                d.w = Tensor(Shape{d.out, d.in});
                d.b = Tensor(Shape{d.out});
                r.floats(d.w.data);
                r.floats(d.b.data);
                d.mask = get_mask(r, d.w.shape);
                net.layers.emplace_back(std::move(d));
                break;
            }
            case 1: {
                Conv2DLayer c;
                c.in_ch = static_cast<std::size_t>(r.u64());
                c.out_ch = static_cast<std::size_t>(r.u64());
                c.kh = static_cast<std::size_t>(r.u64());
                c.kw = static_cast<std::size_t>(r.u64());
                c.stride = static_cast<std::size_t>(r.u64());
                c.pad = static_cast<std::size_t>(r.u64());
                c.w = Tensor(Shape{c.out_ch, c.in_ch, c.kh, c.kw});
                c.b = Tensor(Shape{c.out_ch});
                r.floats(c.w.data);
                r.floats(c.b.data);
                c.mask = get_mask(r, c.w.shape);
                net.layers.emplace_back(std::move(c));
                break;
            }
            case 2:
                net.layers.emplace_back(ReLULayer{});
                break;
            case 3:
                net.layers.emplace_back(FlattenLayer{});
                break;
            default:
                throw std::runtime_error("unknown layer kind in archive");
        }
    }
    for (std::uint32_t i = 0; i < nl; ++i) net.frozen.push_back(r.u8() != 0);
    net.num_classes = r.u32();
    return net;
}

inline void put_policy(Writer& w, const FreezePolicy& p) {
    w.u8(static_cast<std::uint8_t>(p.kind));
    w.u64(p.cutoff_layer);
}

inline FreezePolicy get_policy(Reader& r) {
    FreezePolicy p;
    p.kind = static_cast<FreezePolicy::Kind>(r.u8());
    p.cutoff_layer = static_cast<std::size_t>(r.u64());
    return p;
}

inline void put_ints(Writer& w, const std::vector<int>& v) {
    w.u32(static_cast<std::uint32_t>(v.size()));
    for (int x : v) w.i32(x);
}

inline std::vector<int> get_ints(Reader& r) {
    std::uint32_t n = r.u32();
    std::vector<int> v;
    for (std::uint32_t i = 0; i < n; ++i) v.push_back(r.i32());
    return v;
}

// Differentiator relative to a shared teacher: masks, head, and unfrozen
// layer weights only.
inline void put_differentiator(Writer& w, const Differentiator& d, const Network& teacher) {
    put_ints(w, d.classes);
    put_ints(w, d.output_map);
    w.u32(static_cast<std::uint32_t>(d.plan.ratios.size()));
    for (float v : d.plan.ratios) w.f32(v);
    put_policy(w, d.policy);
    const Network& net = d.network;
    if (net.layers.size() != teacher.layers.size())
        throw std::invalid_argument("differentiator does not share the teacher architecture");
    for (bool f : net.frozen) w.u8(f ? 1 : 0);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        bool is_head = l + 1 == net.layers.size();
        if (const auto* dd = std::get_if<DenseLayer>(&net.layers[l])) {
            if (is_head || !net.frozen[l]) {
                w.u8(1);
                w.u64(dd->out);
                w.floats(dd->w.data);
                w.floats(dd->b.data);
            } else {
                w.u8(0);
            }
            put_mask(w, dd->mask);
        } else if (const auto* cc = std::get_if<Conv2DLayer>(&net.layers[l])) {
            if (!net.frozen[l]) {
                w.u8(1);
                w.u64(cc->out_ch);
                w.floats(cc->w.data);
                w.floats(cc->b.data);
            } else {
                w.u8(0);
            }
            put_mask(w, cc->mask);
        }
    }
}

inline Differentiator get_differentiator(Reader& r, const Network& teacher) {
    Differentiator d;
    d.classes = get_ints(r);
    d.output_map = get_ints(r);
    std::uint32_t np = r.u32();
    for (std::uint32_t i = 0; i < np; ++i) d.plan.ratios.push_back(r.f32());
    d.policy = get_policy(r);
    d.network = teacher;
    d.network.num_classes = d.output_map.size();
    for (std::size_t l = 0; l < d.network.layers.size(); ++l) d.network.frozen[l] = r.u8() != 0;
    for (std::size_t l = 0; l < d.network.layers.size(); ++l) {
        if (auto* dd = std::get_if<DenseLayer>(&d.network.layers[l])) {
            if (r.u8() == 1) {
                dd->out = static_cast<std::size_t>(r.u64());
                dd->w = Tensor(Shape{dd->out, dd->in});
                dd->b = Tensor(Shape{dd->out});
                r.floats(dd->w.data);
                r.floats(dd->b.data);
            }
            dd->mask = get_mask(r, dd->w.shape);
        } else if (auto* cc = std::get_if<Conv2DLayer>(&d.network.layers[l])) {
            if (r.u8() == 1) {
                if (static_cast<std::size_t>(r.u64()) != cc->out_ch)
                    throw std::runtime_error("conv width mismatch in archive");
                r.floats(cc->w.data);
                r.floats(cc->b.data);
            }
            cc->mask = get_mask(r, cc->w.shape);
        }
    }
    return d;
}

inline void write_file(const std::string& path, std::uint8_t kind, const Writer& payload) {
    Writer head;
    head.bytes("TLSA", 4);
    head.u32(kVersion);
    head.u8(kind);
    head.u64(payload.buf.size());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(head.buf.data()), static_cast<std::streamsize>(head.buf.size()));
    f.write(reinterpret_cast<const char*>(payload.buf.data()),
            static_cast<std::streamsize>(payload.buf.size()));
    std::uint32_t crc = crc32(payload.buf.data(), payload.buf.size());
    f.write(reinterpret_cast<const char*>(&crc), 4);
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<std::uint8_t> read_file(const std::string& path, std::uint8_t expect_kind) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::vector<std::uint8_t> all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (all.size() < 17) throw std::runtime_error("truncated archive");
    if (std::memcmp(all.data(), "TLSA", 4) != 0) throw std::runtime_error("not a model archive");
    std::uint32_t ver;
    std::memcpy(&ver, all.data() + 4, 4);
    if (ver != kVersion) throw std::runtime_error("archive version mismatch");
    std::uint8_t kind = all[8];
    if (kind != expect_kind) throw std::runtime_error("archive holds a different object kind");
    std::uint64_t len;
    std::memcpy(&len, all.data() + 9, 8);
    if (all.size() != 17 + len + 4) throw std::runtime_error("truncated archive");
    std::uint32_t crc_stored;
    std::memcpy(&crc_stored, all.data() + 17 + len, 4);
    if (crc32(all.data() + 17, static_cast<std::size_t>(len)) != crc_stored)
        throw std::runtime_error("archive checksum failure");
    return {all.begin() + 17, all.begin() + 17 + static_cast<std::ptrdiff_t>(len)};
}

}  // namespace store

inline void save_network(const Network& net, const std::string& path) {
    store::Writer w;
    store::put_network(w, net);
    store::write_file(path, 0, w);
}

inline Network load_network(const std::string& path) {
    auto buf = store::read_file(path, 0);
    store::Reader r{buf.data(), buf.data() + buf.size()};
    Network net = store::get_network(r);
    net.validate();
    return net;
}

inline void save_student(const StudentModel& s, const std::string& path) {
    store::Writer w;
    store::put_network(w, s.network);
    store::put_policy(w, s.policy);
    w.str(s.teacher_id);
    store::put_ints(w, s.label_space);
    store::write_file(path, 1, w);
}

inline StudentModel load_student(const std::string& path) {
    auto buf = store::read_file(path, 1);
    store::Reader r{buf.data(), buf.data() + buf.size()};
    StudentModel s;
    s.network = store::get_network(r);
    s.policy = store::get_policy(r);
    s.teacher_id = r.str();
    s.label_space = store::get_ints(r);
    s.network.validate();
    return s;
}

inline void save_registry(const DifferentiatorRegistry& reg, const Network& teacher,
                          const std::string& path) {
    store::Writer w;
    store::put_network(w, teacher);
    w.u32(static_cast<std::uint32_t>(reg.num_classes));
    w.u32(static_cast<std::uint32_t>(reg.diffs.size()));
    for (const Differentiator& d : reg.diffs) store::put_differentiator(w, d, teacher);
    store::write_file(path, 2, w);
}

struct LoadedRegistry {
    Network teacher;
    DifferentiatorRegistry registry;
};

inline LoadedRegistry load_registry(const std::string& path) {
    auto buf = store::read_file(path, 2);
    store::Reader r{buf.data(), buf.data() + buf.size()};
    LoadedRegistry out;
    out.teacher = store::get_network(r);
    out.registry.num_classes = static_cast<int>(r.u32());
    std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i)
        out.registry.diffs.push_back(store::get_differentiator(r, out.teacher));
    out.registry.classify_coverage();
    return out;
}

struct MemoryReport {
    std::uint64_t reused_parameter_bytes = 0;
    std::uint64_t private_parameter_bytes = 0;
    std::uint64_t tag_bytes = 0;

    std::uint64_t total() const {
        return reused_parameter_bytes + private_parameter_bytes + tag_bytes;
    }
    double overhead_ratio() const {
        return reused_parameter_bytes == 0
                   ? 0.0
                   : static_cast<double>(total() - reused_parameter_bytes) /
                         static_cast<double>(reused_parameter_bytes);
    }
};

// One bit per pruning tag, ceil(count / 8) bytes.
inline std::uint64_t tag_bytes_for(std::uint64_t tag_count) { return (tag_count + 7) / 8; }

inline MemoryReport memory_report(const DifferentiatorRegistry& reg, const Network& teacher) {
    MemoryReport rep;
    rep.reused_parameter_bytes = static_cast<std::uint64_t>(teacher.param_count()) * 4;
    for (const Differentiator& d : reg.diffs) {
        for (std::size_t l = 0; l < d.network.layers.size(); ++l) {
            bool is_head = l + 1 == d.network.layers.size();
            if (const auto* dd = std::get_if<DenseLayer>(&d.network.layers[l])) {
                if (is_head || !d.network.frozen[l])
                    rep.private_parameter_bytes += (dd->w.numel() + dd->b.numel()) * 4;
                if (dd->mask) rep.tag_bytes += tag_bytes_for(dd->w.numel());
            } else if (const auto* cc = std::get_if<Conv2DLayer>(&d.network.layers[l])) {
                if (!d.network.frozen[l])
                    rep.private_parameter_bytes += (cc->w.numel() + cc->b.numel()) * 4;
                if (cc->mask) rep.tag_bytes += tag_bytes_for(cc->w.numel());
            }
        }
    }
    return rep;
}

}  // namespace tlshield
