#ifndef DCSAU_DATA_HPP
#define DCSAU_DATA_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "dcsau/kernels.hpp"
#include "dcsau/labels.hpp"
#include "dcsau/random.hpp"
#include "dcsau/tensor.hpp"
#include "json.hpp"

namespace dcsau {

/// One image (1 x 3 x H x W, values in [0, 1]) with its label map.
struct Sample {
  Tensor image;
  LabelMap mask;
  std::string id;

  std::size_t height() const { return image.shape().h; }
  std::size_t width() const { return image.shape().w; }
};

// ---------------------------------------------------------------------------
// Netpbm (binary P6 / P5, maxval 255)

namespace pnm {

struct Raster {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> bytes;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("short write to " + path);
}

/// Parses a binary netpbm buffer; `magic` is "P6" or "P5". `what` prefixes
/// error messages (usually the path).
inline Raster decode(const std::vector<std::uint8_t>& buf, const std::string& magic, const std::string& what) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& msg) -> FormatError {
    return FormatError(what + ": byte " + std::to_string(pos) + ": " + msg);
  };
  if (buf.size() < 2 || buf[0] != magic[0] || buf[1] != magic[1]) throw fail("expected magic " + magic);
  pos = 2;
  auto skip_space = [&] {
    while (pos < buf.size()) {
      if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(buf[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* field) {
    skip_space();
    if (pos >= buf.size() || !std::isdigit(buf[pos])) throw fail(std::string("expected ") + field);
    std::size_t v = 0;
    while (pos < buf.size() && std::isdigit(buf[pos])) {
      v = v * 10 + static_cast<std::size_t>(buf[pos] - '0');
      if (v > (1u << 24)) throw fail(std::string(field) + " too large");
      ++pos;
    }
    return v;
  };
  if (pos < buf.size() && !std::isspace(buf[pos]) && buf[pos] != '#') throw fail("expected whitespace after magic");
  Raster r;
  r.channels = magic == "P6" ? 3 : 1;
  r.width = number("width");
  r.height = number("height");
  const std::size_t maxval = number("maxval");
  if (r.width == 0 || r.height == 0) throw fail("zero extent");
  if (maxval != 255) throw fail("maxval " + std::to_string(maxval) + " unsupported (expected 255)");
  if (pos >= buf.size() || !std::isspace(buf[pos])) throw fail("expected single whitespace before raster");
  ++pos;
  const std::size_t expected = r.width * r.height * r.channels;
  const std::size_t actual = buf.size() - pos;
  if (actual < expected) {
    throw fail("truncated raster: expected " + std::to_string(expected) + " bytes, got " + std::to_string(actual));
  }
  r.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos),
                 buf.begin() + static_cast<std::ptrdiff_t>(pos + expected));
  return r;
}

inline std::vector<std::uint8_t> encode(const Raster& r) {
  const std::string head = std::string(r.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(r.width) + " " +
                           std::to_string(r.height) + "\n255\n";
  std::vector<std::uint8_t> out(head.begin(), head.end());
  out.insert(out.end(), r.bytes.begin(), r.bytes.end());
  return out;
}

}  // namespace pnm

inline std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline Tensor image_from_bytes(const pnm::Raster& r) {
  Tensor t(Shape{1, 3, r.height, r.width});
  const std::size_t plane = r.width * r.height;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) t.plane(0, c)[i] = static_cast<float>(r.bytes[i * 3 + c]) / 255.0f;
  return t;
}

inline Tensor decode_ppm(const std::vector<std::uint8_t>& buf, const std::string& what = "ppm") {
  return image_from_bytes(pnm::decode(buf, "P6", what));
}

inline std::vector<std::uint8_t> encode_ppm(const Tensor& image) {
  const Shape s = image.shape();
  if (s.n != 1 || s.c != 3) throw ShapeError("save_ppm: expected [1,3,H,W], got " + s.str());
  pnm::Raster r{s.w, s.h, 3, std::vector<std::uint8_t>(s.plane() * 3)};
  for (std::size_t i = 0; i < s.plane(); ++i)
    for (std::size_t c = 0; c < 3; ++c) r.bytes[i * 3 + c] = to_byte(image.plane(0, c)[i]);
  return pnm::encode(r);
}

inline Tensor load_ppm(const std::string& path) { return decode_ppm(pnm::read_file(path), path); }
inline void save_ppm(const std::string& path, const Tensor& image) { pnm::write_file(path, encode_ppm(image)); }

/// Raw P5 bytes as a label map; see mask_from_bytes for class semantics.
inline LabelMap decode_pgm(const std::vector<std::uint8_t>& buf, const std::string& what = "pgm") {
  pnm::Raster r = pnm::decode(buf, "P5", what);
  LabelMap m(r.height, r.width);
  m.labels = std::move(r.bytes);
  return m;
}

inline std::vector<std::uint8_t> encode_pgm(const LabelMap& m) {
  return pnm::encode(pnm::Raster{m.w, m.h, 1, m.labels});
}

inline LabelMap load_pgm(const std::string& path) { return decode_pgm(pnm::read_file(path), path); }
inline void save_pgm(const std::string& path, const LabelMap& m) { pnm::write_file(path, encode_pgm(m)); }

/// Stored mask bytes to labels. Binary tasks store {0, 255} and read any
/// byte above 127 as foreground; multiclass masks store class indices.
inline LabelMap mask_from_bytes(LabelMap raw, std::size_t num_classes) {
  if (num_classes == 1) {
    for (auto& v : raw.labels) v = v > 127 ? 1 : 0;
    return raw;
  }
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw.labels[i] >= num_classes) {
      throw DataError("mask value " + std::to_string(raw.labels[i]) + " at pixel " + std::to_string(i) +
                      " is not a class index below " + std::to_string(num_classes));
    }
  }
  return raw;
}

inline LabelMap mask_to_bytes(LabelMap m, std::size_t num_classes) {
  if (num_classes == 1)
    for (auto& v : m.labels) v = v ? 255 : 0;
  return m;
}

// ---------------------------------------------------------------------------
// Geometry

/// Bilinear (half-pixel centres) resize of a [N, C, H, W] image.
inline Tensor resize_image(const Tensor& x, std::size_t oh, std::size_t ow) {
  const Shape s = x.shape();
  const auto ty = kernels::linear_taps(s.h, oh);
  const auto tx = kernels::linear_taps(s.w, ow);
  Tensor y(Shape{s.n, s.c, oh, ow});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const float* src = x.plane(n, c);
      float* dst = y.plane(n, c);
      for (std::size_t oy = 0; oy < oh; ++oy) {
        const auto& a = ty[oy];
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const auto& b = tx[ox];
          const double top = b.w0 * src[a.i0 * s.w + b.i0] + b.w1 * src[a.i0 * s.w + b.i1];
          const double bot = b.w0 * src[a.i1 * s.w + b.i0] + b.w1 * src[a.i1 * s.w + b.i1];
          dst[oy * ow + ox] = static_cast<float>(a.w0 * top + a.w1 * bot);
        }
      }
    }
  }
  return y;
}

/// Nearest-neighbour resize; labels are never blended.
inline LabelMap resize_mask(const LabelMap& m, std::size_t oh, std::size_t ow) {
  LabelMap out(oh, ow);
  for (std::size_t y = 0; y < oh; ++y) {
    const std::size_t sy = std::min(m.h - 1, y * m.h / oh);
    for (std::size_t x = 0; x < ow; ++x) out.at(y, x) = m.at(sy, std::min(m.w - 1, x * m.w / ow));
  }
  return out;
}

inline Sample resize(const Sample& s, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) throw ShapeError("resize: target extents must be positive");
  if (s.height() == h && s.width() == w) return s;
  return {resize_image(s.image, h, w), resize_mask(s.mask, h, w), s.id};
}

inline void flip_horizontal(Sample& s) {
  const std::size_t h = s.height(), w = s.width();
  for (std::size_t c = 0; c < 3; ++c) {
    float* p = s.image.plane(0, c);
    for (std::size_t y = 0; y < h; ++y) std::reverse(p + y * w, p + (y + 1) * w);
  }
  for (std::size_t y = 0; y < h; ++y)
    std::reverse(s.mask.labels.begin() + static_cast<std::ptrdiff_t>(y * w),
                 s.mask.labels.begin() + static_cast<std::ptrdiff_t>((y + 1) * w));
}

/// Clockwise rotation by quarter_turns * 90 degrees. Odd turns require a
/// square sample so extents are preserved.
inline void rotate(Sample& s, int quarter_turns) {
  const std::size_t h = s.height(), w = s.width();
  quarter_turns = ((quarter_turns % 4) + 4) % 4;
  if (quarter_turns == 0) return;
  if (quarter_turns % 2 == 1 && h != w) throw ShapeError("rotate: 90 degree turns need a square sample");
  // Source coordinate for destination (y, x).
  auto src = [&](std::size_t y, std::size_t x) -> std::size_t {
    switch (quarter_turns) {
      case 1:
        return (h - 1 - x) * w + y;
      case 2:
        return (h - 1 - y) * w + (w - 1 - x);
      default:
        return x * w + (w - 1 - y);
    }
  };
  Tensor img(s.image.shape());
  LabelMap m(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = src(y, x);
      for (std::size_t c = 0; c < 3; ++c) img.plane(0, c)[y * w + x] = s.image.plane(0, c)[i];
      m.labels[y * w + x] = s.mask.labels[i];
    }
  }
  s.image = std::move(img);
  s.mask = std::move(m);
}

inline std::size_t cutout_side(std::size_t h, std::size_t w) { return std::min(h, w) / 4; }

/// Zeroes a square of the image (all channels); the mask is untouched.
inline void cutout(Sample& s, std::size_t y0, std::size_t x0, std::size_t side) {
  const std::size_t w = s.width();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = y0; y < std::min(y0 + side, s.height()); ++y)
      for (std::size_t x = x0; x < std::min(x0 + side, w); ++x) s.image.plane(0, c)[y * w + x] = 0.0f;
}

struct AugmentOptions {
  double p_flip = 0.25;
  double p_rotate = 0.25;
  double p_cutout = 0.25;
};

/// Horizontal flip, rotation by a multiple of 90 degrees, and cutout, each
/// applied independently. Non-square samples only rotate by 180 degrees.
inline Sample augment(Sample s, Rng& rng, const AugmentOptions& opt = {}) {
  const bool flip = rng.bernoulli(opt.p_flip);
  const bool rot = rng.bernoulli(opt.p_rotate);
  const int turns = 1 + static_cast<int>(rng.below(3));
  const bool cut = rng.bernoulli(opt.p_cutout);
  const std::size_t side = cutout_side(s.height(), s.width());
  const std::size_t y0 = static_cast<std::size_t>(rng.below(s.height() - side + 1));
  const std::size_t x0 = static_cast<std::size_t>(rng.below(s.width() - side + 1));
  if (flip) flip_horizontal(s);
  if (rot) rotate(s, s.height() == s.width() ? turns : 2);
  if (cut && side > 0) cutout(s, y0, x0, side);
  return s;
}

inline Sample augment(Sample s, std::uint64_t seed, const AugmentOptions& opt = {}) {
  Rng rng(seed);
  return augment(std::move(s), rng, opt);
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitSpec {
  double train = 0.7206;
  double valid = 0.1797;
  double test = 1.0 - 0.7206 - 0.1797;
  std::uint64_t seed = 42;

  void validate() const {
    if (train < 0 || valid < 0 || test < 0) throw ConfigError("split: fractions must be non-negative");
    if (std::abs(train + valid + test - 1.0) > 1e-9) throw ConfigError("split: fractions must sum to 1");
  }
};

struct Split {
  std::vector<std::string> train, valid, test;
};

/// Seeded shuffle, then contiguous train / valid / test partition with
/// sizes round(train * n), round(valid * n) and the remainder.
inline Split split(std::vector<std::string> ids, const SplitSpec& spec = {}) {
  spec.validate();
  const std::size_t n = ids.size();
  const auto n_train = static_cast<std::size_t>(std::llround(spec.train * static_cast<double>(n)));
  const auto n_valid = static_cast<std::size_t>(std::llround(spec.valid * static_cast<double>(n)));
  if (n_train == 0 || n_valid == 0 || n_train + n_valid >= n) {
    throw DataError("split: " + std::to_string(n) + " ids leave an empty partition");
  }
  Rng rng(spec.seed);
  rng.shuffle(ids);
  Split s;
  s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.valid.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                 ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), ids.end());
  return s;
}

inline void write_split(const std::filesystem::path& dir, const Split& s) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, list] : {std::pair{"train.txt", &s.train}, {"valid.txt", &s.valid}, {"test.txt", &s.test}}) {
    std::ofstream os(dir / name);
    if (!os) throw DataError("cannot write " + (dir / name).string());
    for (const auto& id : *list) os << id << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace detail {

struct Shape2D {
  bool ellipse;
  double cy, cx, ry, rx;
  std::uint8_t label;

  bool contains(double y, double x) const {
    const double dy = (y - cy) / ry, dx = (x - cx) / rx;
    return ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
  }
};

inline Sample synth_one(std::size_t h, std::size_t w, std::size_t num_classes, Rng& rng, std::string id) {
  const std::size_t fg_labels = num_classes == 1 ? 1 : num_classes - 1;
  LabelMap mask(h, w);
  std::vector<Shape2D> shapes;
  // Redraw until the foreground fraction lands strictly inside (0.05, 0.6).
  for (;;) {
    shapes.clear();
    const std::size_t count = 1 + rng.below(3);
    for (std::size_t k = 0; k < count; ++k) {
      Shape2D s;
      s.ellipse = rng.bernoulli(0.5);
      s.ry = rng.uniform(0.12, 0.3) * static_cast<double>(h);
      s.rx = rng.uniform(0.12, 0.3) * static_cast<double>(w);
      s.cy = rng.uniform(s.ry * 0.5, static_cast<double>(h) - s.ry * 0.5);
      s.cx = rng.uniform(s.rx * 0.5, static_cast<double>(w) - s.rx * 0.5);
      s.label = static_cast<std::uint8_t>(1 + rng.below(fg_labels));
      shapes.push_back(s);
    }
    std::size_t fg = 0;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        std::uint8_t l = 0;
        for (const auto& s : shapes)
          if (s.contains(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5)) l = s.label;
        mask.at(y, x) = l;
        fg += l != 0;
      }
    }
    const double frac = static_cast<double>(fg) / static_cast<double>(h * w);
    if (frac > 0.05 && frac < 0.6) break;
  }
  Tensor img(Shape{1, 3, h, w});
  const double base[3] = {rng.uniform(0.15, 0.35), rng.uniform(0.15, 0.35), rng.uniform(0.15, 0.35)};
  for (std::size_t i = 0; i < h * w; ++i) {
    const std::uint8_t l = mask.labels[i];
    for (std::size_t c = 0; c < 3; ++c) {
      // Foreground class k is brighter in channel (k - 1) % 3 and overall.
      double v = base[c] + 0.06 * rng.normal();
      if (l != 0) v += 0.35 + (c == static_cast<std::size_t>(l - 1) % 3 ? 0.25 : 0.0);
      img.plane(0, c)[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return {std::move(img), std::move(mask), std::move(id)};
}

}  // namespace detail

/// Noisy backgrounds with random ellipses and rectangles; masks are exact
/// rasterisations of the drawn shapes.
inline std::vector<Sample> synth_dataset(std::size_t n, std::size_t h, std::size_t w, std::size_t num_classes,
                                         std::uint64_t seed) {
  if (h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0) {
    throw ShapeError("synth_dataset: extents " + std::to_string(h) + "x" + std::to_string(w) +
                     " must be positive multiples of 16");
  }
  Rng rng(seed);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04zu", i);
    Rng child = rng.fork();
    out.push_back(detail::synth_one(h, w, num_classes, child, id));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

struct ManifestEntry {
  std::string image;
  std::string mask;
  std::string id;
};

/// Reads a JSON array of {"image", "mask", "id"} objects (or an object
/// holding such an array under "samples"). Relative paths resolve against
/// the manifest's directory.
inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path + ": " + e.what());
  }
  if (j.is_object() && j.contains("samples")) j = j.at("samples");
  if (!j.is_array()) throw DataError("manifest " + path + ": expected an array of samples");
  const auto dir = std::filesystem::path(path).parent_path();
  std::vector<ManifestEntry> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    if (!e.is_object() || !e.contains("image") || !e.contains("mask")) {
      throw DataError("manifest " + path + ": entry " + std::to_string(i) + " needs \"image\" and \"mask\"");
    }
    auto resolve = [&](const std::string& p) {
      const std::filesystem::path fp(p);
      return fp.is_absolute() ? fp.string() : (dir / fp).string();
    };
    ManifestEntry m;
    m.image = resolve(e.at("image").get<std::string>());
    m.mask = resolve(e.at("mask").get<std::string>());
    m.id = e.contains("id") ? e.at("id").get<std::string>() : std::filesystem::path(m.image).stem().string();
    out.push_back(std::move(m));
  }
  if (out.empty()) throw DataError("manifest " + path + " lists no samples");
  return out;
}

inline Sample load_sample(const ManifestEntry& e, std::size_t num_classes) {
  Sample s{load_ppm(e.image), mask_from_bytes(load_pgm(e.mask), num_classes), e.id};
  if (s.mask.h != s.height() || s.mask.w != s.width()) {
    throw DataError("sample " + e.id + ": image " + std::to_string(s.height()) + "x" + std::to_string(s.width()) +
                    " but mask " + std::to_string(s.mask.h) + "x" + std::to_string(s.mask.w));
  }
  return s;
}

/// Writes images, masks and manifest.json under `dir`.
inline std::string write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples,
                                 std::size_t num_classes) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : samples) {
    const std::string img = s.id + ".ppm", mask = s.id + "_mask.pgm";
    save_ppm((dir / img).string(), s.image);
    save_pgm((dir / mask).string(), mask_to_bytes(s.mask, num_classes));
    j.push_back({{"image", img}, {"mask", mask}, {"id", s.id}});
  }
  const auto path = (dir / "manifest.json").string();
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  os << j.dump(2) << '\n';
  return path;
}

/// Stacks same-sized samples into an [N, 3, H, W] batch.
inline Tensor stack_images(const std::vector<const Sample*>& batch) {
  const std::size_t h = batch.at(0)->height(), w = batch.at(0)->width();
  Tensor t(Shape{batch.size(), 3, h, w});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    if (batch[n]->height() != h || batch[n]->width() != w) throw ShapeError("stack_images: extents differ in batch");
    std::copy(batch[n]->image.vec().begin(), batch[n]->image.vec().end(),
              t.vec().begin() + static_cast<std::ptrdiff_t>(n * 3 * h * w));
  }
  return t;
}

}  // namespace dcsau

#endif  // DCSAU_DATA_HPP
