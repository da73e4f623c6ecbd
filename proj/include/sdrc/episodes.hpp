#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sdrc/errors.hpp"
#include "sdrc/rng.hpp"
#include "sdrc/tensor.hpp"

// Synthetic source/target domains with controllable shift, episodic
// sampling, and the EPDS on-disk format. Rendering uses only splitmix64
// draws and plain IEEE arithmetic (tabulated directions, triangle-wave
// gratings), so identical seed + spec reproduces identical bytes on every
// platform.

namespace sdrc {

struct DomainSpec {
  std::uint64_t seed = 1;
  int image_h = 32;
  int image_w = 32;
  int channels = 1;
  int class_id_base = 0;  // source and target use disjoint id ranges

  // Object grammar distribution knobs.
  int parts_min = 2;
  int parts_max = 4;
  float scale_min = 0.7f;
  float scale_max = 1.25f;

  // Domain-shift knobs.
  float texture_freq_offset = 0.f;
  int palette_rotation = 0;
  float clutter_density = 0.f;
};

struct Sample {
  std::uint32_t class_id = 0;
  Tensor image;                    // [C x h x w], values in [0, 1]
  std::vector<std::uint8_t> mask;  // h*w entries, {0, 1}
};

struct Dataset {
  std::vector<Sample> samples;

  std::vector<std::uint32_t> class_ids() const {
    std::vector<std::uint32_t> ids;
    for (const Sample& s : samples)
      if (std::find(ids.begin(), ids.end(), s.class_id) == ids.end()) ids.push_back(s.class_id);
    std::sort(ids.begin(), ids.end());
    return ids;
  }

  std::vector<int> indices_of(std::uint32_t class_id) const {
    std::vector<int> idx;
    for (int i = 0; i < static_cast<int>(samples.size()); ++i)
      if (samples[static_cast<std::size_t>(i)].class_id == class_id) idx.push_back(i);
    return idx;
  }
};

struct Episode {
  std::vector<std::pair<Tensor, std::vector<std::uint8_t>>> supports;
  std::pair<Tensor, std::vector<std::uint8_t>> query;
  std::uint32_t class_id = 0;
};

namespace detail {

// 16 tabulated unit directions (22.5 degree steps); keeps libm trig out
// of the renderer for cross-platform bit stability.
inline const float kDirX[16] = {1.0000000f, 0.9238795f, 0.7071068f, 0.3826834f,
                                0.0000000f, -0.3826834f, -0.7071068f, -0.9238795f,
                                -1.0000000f, -0.9238795f, -0.7071068f, -0.3826834f,
                                0.0000000f, 0.3826834f, 0.7071068f, 0.9238795f};
inline const float kDirY[16] = {0.0000000f, 0.3826834f, 0.7071068f, 0.9238795f,
                                1.0000000f, 0.9238795f, 0.7071068f, 0.3826834f,
                                0.0000000f, -0.3826834f, -0.7071068f, -0.9238795f,
                                -1.0000000f, -0.9238795f, -0.7071068f, -0.3826834f};

inline const float kPartPalette[6] = {0.95f, 0.75f, 0.55f, 0.42f, 0.85f, 0.65f};
inline const float kBackPalette[6] = {0.10f, 0.14f, 0.18f, 0.08f, 0.12f, 0.16f};

constexpr std::uint64_t kGrammarSalt = 0x6772616D6D6172ULL;
constexpr std::uint64_t kClutterSalt = 0x636C7574746572ULL;

enum class PartShape { kEllipse, kDisc, kBar, kTriangle, kDiamond };

struct PartSpec {
  PartShape shape = PartShape::kDisc;
  int direction = 0;       // index into the direction table
  float dist = 0.f;        // appendage offset in body radii (0 for the body)
  float size = 1.f;        // relative to the body radius
  float aspect = 1.f;
  float tex_freq = 0.2f;   // cycles per pixel
  int tex_direction = 0;
  int palette_index = 0;
};

struct ClassGrammar {
  PartSpec body;
  std::vector<PartSpec> appendages;
};

// The composition of a class is a fixed function of its global id, so
// domains share the part library while their ids (and styles) differ.
inline ClassGrammar grammar_for_class(std::uint32_t class_id, const DomainSpec& spec) {
  Rng g(derive_seed(kGrammarSalt, class_id));
  ClassGrammar gr;
  gr.body.shape = static_cast<PartShape>(g.below(5));
  gr.body.aspect = static_cast<float>(g.uniform(0.6, 1.0));
  gr.body.size = 1.f;
  gr.body.direction = static_cast<int>(g.below(16));
  gr.body.tex_freq = static_cast<float>(g.uniform(0.12, 0.4));
  gr.body.tex_direction = static_cast<int>(g.below(16));
  gr.body.palette_index = static_cast<int>(g.below(6));
  const int appendages = g.range_int(spec.parts_min - 1, spec.parts_max - 1);
  for (int i = 0; i < appendages; ++i) {
    PartSpec part;
    part.shape = static_cast<PartShape>(g.below(5));
    part.direction = static_cast<int>(g.below(16));
    part.dist = static_cast<float>(g.uniform(1.0, 1.45));
    part.size = static_cast<float>(g.uniform(0.4, 0.7));
    part.aspect = static_cast<float>(g.uniform(0.5, 1.0));
    part.tex_freq = static_cast<float>(g.uniform(0.12, 0.4));
    part.tex_direction = static_cast<int>(g.below(16));
    part.palette_index = static_cast<int>(g.below(6));
    gr.appendages.push_back(part);
  }
  return gr;
}

inline float fract(float x) { return x - static_cast<float>(static_cast<long long>(x)) + (x < 0.f ? 1.f : 0.f); }

// Triangle grating in [0, 1]; piecewise linear, no libm.
inline float tri_wave(float t) {
  const float f = fract(t);
  const float v = 2.f * f - 1.f;
  return v < 0.f ? -v : v;
}

inline bool inside_part(const PartSpec& part, float cx, float cy, float radius, float px,
                        float py) {
  const float dx = px - cx, dy = py - cy;
  const float cu = kDirX[part.direction], su = kDirY[part.direction];
  const float u = dx * cu + dy * su;
  const float v = -dx * su + dy * cu;
  switch (part.shape) {
    case PartShape::kDisc:
      return dx * dx + dy * dy <= radius * radius;
    case PartShape::kEllipse: {
      const float rx = radius, ry = radius * part.aspect;
      return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.f;
    }
    case PartShape::kBar: {
      const float len = radius * 1.4f, wid = radius * 0.55f * part.aspect;
      return u >= -len && u <= len && v >= -wid && v <= wid;
    }
    case PartShape::kTriangle: {
      const float len = radius * 1.8f, wid = radius * 0.9f * part.aspect;
      if (u < 0.f || u > len) return false;
      const float allowed = wid * (1.f - u / len);
      return v >= -allowed && v <= allowed;
    }
    case PartShape::kDiamond: {
      const float rx = radius * 1.2f, ry = radius * 1.2f * part.aspect;
      const float au = u < 0.f ? -u : u, av = v < 0.f ? -v : v;
      return au / rx + av / ry <= 1.f;
    }
  }
  return false;
}

struct PaintContext {
  int h = 0, w = 0, channels = 0;
  std::vector<float>* pixels = nullptr;          // [C x h x w]
  std::vector<std::uint8_t>* mask = nullptr;     // nullptr for clutter
  std::vector<std::uint8_t>* coverage = nullptr; // written-by-object audit
};

inline void paint_part(const PaintContext& ctx, const PartSpec& part, float cx, float cy,
                       float radius, float tex_phase, float freq_offset, int palette_rotation) {
  const float freq = part.tex_freq + 0.08f * freq_offset;
  const float gx = freq * kDirX[part.tex_direction];
  const float gy = freq * kDirY[part.tex_direction];
  const float base =
      kPartPalette[(part.palette_index + palette_rotation) % 6];
  const int span = static_cast<int>(radius * 2.2f) + 2;
  const int y0 = std::max(0, static_cast<int>(cy) - span);
  const int y1 = std::min(ctx.h - 1, static_cast<int>(cy) + span);
  const int x0 = std::max(0, static_cast<int>(cx) - span);
  const int x1 = std::min(ctx.w - 1, static_cast<int>(cx) + span);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      if (!inside_part(part, cx, cy, radius, static_cast<float>(x), static_cast<float>(y)))
        continue;
      const float g = tri_wave(gx * static_cast<float>(x) + gy * static_cast<float>(y) + tex_phase);
      float value = base * (0.72f + 0.45f * g);
      if (value > 1.f) value = 1.f;
      if (value < 0.f) value = 0.f;
      for (int c = 0; c < ctx.channels; ++c) {
        float chv = value;
        if (c > 0) {
          chv = value * (0.85f + 0.1f * static_cast<float>(c % 3));
          if (chv > 1.f) chv = 1.f;
        }
        (*ctx.pixels)[(static_cast<std::size_t>(c) * ctx.h + y) * ctx.w + x] = chv;
      }
      if (ctx.mask) (*ctx.mask)[static_cast<std::size_t>(y) * ctx.w + x] = 1;
      if (ctx.coverage) (*ctx.coverage)[static_cast<std::size_t>(y) * ctx.w + x] = 1;
    }
}

// One attempt at rendering; the caller retries on degenerate masks.
inline bool render_attempt(const DomainSpec& spec, const ClassGrammar& grammar, Rng& rng,
                           Sample* out, std::vector<std::uint8_t>* coverage) {
  const int h = spec.image_h, w = spec.image_w, c = spec.channels;
  std::vector<float> pixels(static_cast<std::size_t>(c) * h * w);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(h) * w, 0);
  if (coverage) coverage->assign(mask.size(), 0);

  const float back = detail::kBackPalette[spec.palette_rotation % 6];
  std::fill(pixels.begin(), pixels.end(), back);

  PaintContext bg_ctx{h, w, c, &pixels, nullptr, nullptr};
  const int clutter_count =
      static_cast<int>(spec.clutter_density * static_cast<float>(h * w) / 64.f);
  for (int i = 0; i < clutter_count; ++i) {
    PartSpec blob;
    blob.shape = rng.below(2) == 0 ? PartShape::kDisc : PartShape::kBar;
    blob.direction = static_cast<int>(rng.below(16));
    blob.tex_direction = static_cast<int>(rng.below(16));
    blob.tex_freq = static_cast<float>(rng.uniform(0.15, 0.5));
    blob.palette_index = static_cast<int>(rng.below(6));
    blob.aspect = static_cast<float>(rng.uniform(0.4, 1.0));
    const float bx = static_cast<float>(rng.uniform(0, w));
    const float by = static_cast<float>(rng.uniform(0, h));
    const float br = static_cast<float>(rng.uniform(1.0, 2.4));
    paint_part(bg_ctx, blob, bx, by, br, static_cast<float>(rng.uniform(0, 1)),
               spec.texture_freq_offset, spec.palette_rotation);
  }

  PaintContext fg_ctx{h, w, c, &pixels, &mask, coverage};
  const float min_ext = static_cast<float>(std::min(h, w));
  const float scale = static_cast<float>(rng.uniform(spec.scale_min, spec.scale_max));
  const float body_r = min_ext * 0.21f * scale;
  const float cx = w * 0.5f + static_cast<float>(rng.uniform(-0.22, 0.22)) * w;
  const float cy = h * 0.5f + static_cast<float>(rng.uniform(-0.22, 0.22)) * h;

  PartSpec body = grammar.body;
  const float body_phase = static_cast<float>(rng.uniform(0, 1));
  paint_part(fg_ctx, body, cx, cy, body_r, body_phase, spec.texture_freq_offset,
             spec.palette_rotation);
  for (const PartSpec& part : grammar.appendages) {
    PartSpec jittered = part;
    jittered.direction = (part.direction + rng.range_int(-1, 1) + 16) % 16;
    const float pr = body_r * part.size * static_cast<float>(rng.uniform(0.85, 1.15));
    const float px = cx + kDirX[jittered.direction] * body_r * part.dist;
    const float py = cy + kDirY[jittered.direction] * body_r * part.dist;
    paint_part(fg_ctx, jittered, px, py, pr, static_cast<float>(rng.uniform(0, 1)),
               spec.texture_freq_offset, spec.palette_rotation);
  }

  std::int64_t fg = 0;
  for (std::uint8_t m : mask) fg += m;
  if (fg == 0 || fg == static_cast<std::int64_t>(mask.size())) return false;

  out->image = Tensor({c, h, w}, std::move(pixels));
  out->mask = std::move(mask);
  return true;
}

}  // namespace detail

// Renders one sample; the per-sample stream is
// derive(derive(spec.seed, class_id), sample_index). Degenerate masks
// (all background or all foreground) are rejected and redrawn from the
// same stream.
inline Sample render_sample(const DomainSpec& spec, std::uint32_t class_id, int sample_index,
                            std::vector<std::uint8_t>* coverage = nullptr) {
  detail::ClassGrammar grammar = detail::grammar_for_class(class_id, spec);
  Rng rng(derive_seed(derive_seed(spec.seed, class_id), static_cast<std::uint64_t>(sample_index)));
  Sample s;
  s.class_id = class_id;
  for (int attempt = 0; attempt < 64; ++attempt) {
    if (detail::render_attempt(spec, grammar, rng, &s, coverage)) return s;
  }
  throw ContractError("render_sample: could not produce a non-degenerate mask");
}

// Deterministic dataset: `classes` consecutive ids starting at
// spec.class_id_base, `samples_per_class` samples each.
inline Dataset generate_domain(const DomainSpec& spec, int classes, int samples_per_class) {
  if (classes < 2) throw ContractError("generate_domain: needs at least two classes");
  if (samples_per_class < 2)
    throw ContractError("generate_domain: needs at least two samples per class");
  Dataset ds;
  ds.samples.reserve(static_cast<std::size_t>(classes) * samples_per_class);
  for (int c = 0; c < classes; ++c) {
    const std::uint32_t id = static_cast<std::uint32_t>(spec.class_id_base + c);
    for (int i = 0; i < samples_per_class; ++i) ds.samples.push_back(render_sample(spec, id, i));
  }
  return ds;
}

// Uniform class choice among classes with at least K+1 samples, then K+1
// distinct samples split into supports and query.
inline Episode sample_episode(const Dataset& dataset, int k, std::uint64_t rng_seed) {
  if (k < 1) throw ContractError("sample_episode: K must be >= 1");
  std::vector<std::uint32_t> eligible;
  for (std::uint32_t id : dataset.class_ids())
    if (static_cast<int>(dataset.indices_of(id).size()) >= k + 1) eligible.push_back(id);
  if (eligible.empty())
    throw ContractError("sample_episode: no class has at least K+1 samples");

  Rng rng(rng_seed);
  const std::uint32_t cls = eligible[rng.below(eligible.size())];
  std::vector<int> idx = dataset.indices_of(cls);
  // Partial Fisher-Yates for K+1 distinct picks.
  for (int i = 0; i <= k; ++i) {
    const int j = i + static_cast<int>(rng.below(idx.size() - static_cast<std::size_t>(i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  Episode ep;
  ep.class_id = cls;
  for (int i = 0; i < k; ++i) {
    const Sample& s = dataset.samples[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
    ep.supports.emplace_back(s.image, s.mask);
  }
  const Sample& q = dataset.samples[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])];
  ep.query = {q.image, q.mask};
  return ep;
}

// ---------------------------------------------------------------------------
// EPDS file format (little-endian, no padding):
//   magic "EPDS", u32 version=1, u32 record count, then per record:
//   u32 class_id, u16 h, u16 w, u8 channels,
//   f32 x (C*h*w) image, u8 x (h*w) mask with values {0,1}.

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, const char* what)
      : bytes_(bytes), what_(what) {}

  std::size_t offset() const { return pos_; }
  bool exhausted() const { return pos_ >= bytes_.size(); }

  std::uint8_t u8(const char* field) {
    need(1, field);
    return bytes_[pos_++];
  }
  std::uint16_t u16(const char* field) {
    need(2, field);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* field) {
    std::uint32_t bits = u32(field);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }

 private:
  void need(std::size_t n, const char* field) {
    if (pos_ + n > bytes_.size())
      throw ParseError(pos_, std::string(what_) + ": truncated while reading " + field);
  }

  const std::vector<std::uint8_t>& bytes_;
  const char* what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(std::string(what) + ": cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes,
                             const char* what) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(std::string(what) + ": cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(std::string(what) + ": write failed for " + path);
}

}  // namespace detail

inline constexpr std::uint32_t kEpdsVersion = 1;

inline std::vector<std::uint8_t> serialize_dataset(const Dataset& dataset) {
  std::vector<std::uint8_t> out;
  out.push_back('E');
  out.push_back('P');
  out.push_back('D');
  out.push_back('S');
  detail::put_u32(out, kEpdsVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(dataset.samples.size()));
  for (const Sample& s : dataset.samples) {
    const int c = s.image.dims()[0], h = s.image.dims()[1], w = s.image.dims()[2];
    detail::put_u32(out, s.class_id);
    detail::put_u16(out, static_cast<std::uint16_t>(h));
    detail::put_u16(out, static_cast<std::uint16_t>(w));
    out.push_back(static_cast<std::uint8_t>(c));
    for (std::int64_t i = 0; i < s.image.size(); ++i) detail::put_f32(out, s.image.at(i));
    out.insert(out.end(), s.mask.begin(), s.mask.end());
  }
  return out;
}

inline Dataset parse_dataset(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes, "EPDS");
  const std::size_t magic_at = r.offset();
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.u8("magic"));
  if (magic[0] != 'E' || magic[1] != 'P' || magic[2] != 'D' || magic[3] != 'S')
    throw ParseError(magic_at, "EPDS: bad magic");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kEpdsVersion)
    throw ParseError(version_at, "EPDS: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32("record count");

  Dataset ds;
  ds.samples.reserve(count);
  for (std::uint32_t rec = 0; rec < count; ++rec) {
    Sample s;
    s.class_id = r.u32("class_id");
    const int h = r.u16("height");
    const int w = r.u16("width");
    const int c = r.u8("channels");
    if (h == 0 || w == 0 || c == 0)
      throw ParseError(r.offset(), "EPDS: zero extent in record " + std::to_string(rec));
    std::vector<float> pixels(static_cast<std::size_t>(c) * h * w);
    for (float& p : pixels) {
      const std::size_t at = r.offset();
      p = r.f32("image data");
      if (!std::isfinite(p))
        throw ParseError(at, "EPDS: non-finite pixel in record " + std::to_string(rec));
    }
    s.image = Tensor({c, h, w}, std::move(pixels));
    s.mask.resize(static_cast<std::size_t>(h) * w);
    for (std::uint8_t& m : s.mask) {
      const std::size_t at = r.offset();
      m = r.u8("mask data");
      if (m > 1)
        throw ParseError(at, "EPDS: mask value out of {0,1} in record " + std::to_string(rec));
    }
    ds.samples.push_back(std::move(s));
  }
  if (!r.exhausted())
    throw ParseError(r.offset(), "EPDS: trailing bytes after last record");
  return ds;
}

inline void write_dataset(const Dataset& dataset, const std::string& path) {
  detail::write_file_bytes(path, serialize_dataset(dataset), "EPDS");
}

inline Dataset read_dataset(const std::string& path) {
  return parse_dataset(detail::read_file_bytes(path, "EPDS"));
}

}  // namespace sdrc
