// GeoTIFF reader/writer covering the subset this toolkit produces and the
// common layouts of cloud-optimized products: classic (non-Big) TIFF, tiles
// or strips, chunky or planar samples, no/deflate compression, horizontal
// predictor for integer data, and GeoKey/GDAL metadata tags.

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>

#include "croplandws/errors.hpp"
#include "croplandws/raster_io.hpp"

namespace croplandws {

namespace {

enum TiffType : uint16_t { kByte = 1, kAscii = 2, kShort = 3, kLong = 4, kDouble = 12 };

enum Tag : uint16_t {
  kImageWidth = 256,
  kImageLength = 257,
  kBitsPerSample = 258,
  kCompression = 259,
  kPhotometric = 262,
  kStripOffsets = 273,
  kSamplesPerPixel = 277,
  kRowsPerStrip = 278,
  kStripByteCounts = 279,
  kPlanarConfig = 284,
  kPredictor = 317,
  kTileWidth = 322,
  kTileLength = 323,
  kTileOffsets = 324,
  kTileByteCounts = 325,
  kExtraSamples = 338,
  kSampleFormat = 339,
  kModelPixelScale = 33550,
  kModelTiepoint = 33922,
  kGeoKeyDirectory = 34735,
  kGeoAsciiParams = 34737,
  kGdalMetadata = 42112,
  kGdalNodata = 42113,
};

constexpr uint16_t kGTModelType = 1024;
constexpr uint16_t kGTRasterType = 1025;
constexpr uint16_t kGTCitation = 1026;
constexpr uint16_t kGeographicType = 2048;
constexpr uint16_t kProjectedCSType = 3072;

int bytes_per_sample(SampleType t) {
  switch (t) {
    case SampleType::UInt8: return 1;
    case SampleType::UInt16:
    case SampleType::Int16: return 2;
    case SampleType::UInt32:
    case SampleType::Int32:
    case SampleType::Float32: return 4;
    case SampleType::Float64: return 8;
  }
  return 0;
}

uint16_t sample_format_code(SampleType t) {
  switch (t) {
    case SampleType::Int16:
    case SampleType::Int32: return 2;
    case SampleType::Float32:
    case SampleType::Float64: return 3;
    default: return 1;
  }
}

SampleType sample_type_from_tiff(int bits, int format, const std::string& path) {
  if (format == 1 && bits == 8) return SampleType::UInt8;
  if (format == 1 && bits == 16) return SampleType::UInt16;
  if (format == 2 && bits == 16) return SampleType::Int16;
  if (format == 1 && bits == 32) return SampleType::UInt32;
  if (format == 2 && bits == 32) return SampleType::Int32;
  if (format == 3 && bits == 32) return SampleType::Float32;
  if (format == 3 && bits == 64) return SampleType::Float64;
  throw DataError(path + ": unsupported sample layout (" + std::to_string(bits) + " bits, format " +
                  std::to_string(format) + ")");
}

void encode_sample(double v, SampleType t, uint8_t* out) {
  switch (t) {
    case SampleType::UInt8: {
      uint8_t x = static_cast<uint8_t>(v);
      std::memcpy(out, &x, 1);
      break;
    }
    case SampleType::UInt16: {
      uint16_t x = static_cast<uint16_t>(v);
      std::memcpy(out, &x, 2);
      break;
    }
    case SampleType::Int16: {
      int16_t x = static_cast<int16_t>(v);
      std::memcpy(out, &x, 2);
      break;
    }
    case SampleType::UInt32: {
      uint32_t x = static_cast<uint32_t>(v);
      std::memcpy(out, &x, 4);
      break;
    }
    case SampleType::Int32: {
      int32_t x = static_cast<int32_t>(v);
      std::memcpy(out, &x, 4);
      break;
    }
    case SampleType::Float32: {
      float x = static_cast<float>(v);
      std::memcpy(out, &x, 4);
      break;
    }
    case SampleType::Float64: std::memcpy(out, &v, 8); break;
  }
}

// Decodes one sample stored in host (little-endian after swapping) order.
double decode_sample(const uint8_t* in, SampleType t) {
  switch (t) {
    case SampleType::UInt8: return in[0];
    case SampleType::UInt16: {
      uint16_t x;
      std::memcpy(&x, in, 2);
      return x;
    }
    case SampleType::Int16: {
      int16_t x;
      std::memcpy(&x, in, 2);
      return x;
    }
    case SampleType::UInt32: {
      uint32_t x;
      std::memcpy(&x, in, 4);
      return x;
    }
    case SampleType::Int32: {
      int32_t x;
      std::memcpy(&x, in, 4);
      return x;
    }
    case SampleType::Float32: {
      float x;
      std::memcpy(&x, in, 4);
      return x;
    }
    case SampleType::Float64: {
      double x;
      std::memcpy(&x, in, 8);
      return x;
    }
  }
  return 0.0;
}

std::string format_nodata(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string xml_unescape(std::string s) {
  const std::pair<const char*, const char*> table[] = {{"&lt;", "<"}, {"&gt;", ">"}, {"&quot;", "\""}, {"&amp;", "&"}};
  for (auto [from, to] : table) {
    size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
      s.replace(pos, std::strlen(from), to);
      pos += std::strlen(to);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// writer

class ByteWriter {
 public:
  size_t size() const { return buf_.size(); }
  void align2() {
    if (buf_.size() % 2) buf_.push_back(0);
  }
  void put(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u16(uint16_t v) { put(&v, 2); }
  void u32(uint32_t v) { put(&v, 4); }
  void patch_u32(size_t at, uint32_t v) { std::memcpy(buf_.data() + at, &v, 4); }
  const std::vector<uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

struct Entry {
  uint16_t tag;
  uint16_t type;
  uint32_t count;
  std::vector<uint8_t> payload;
};

template <class T>
Entry make_entry(uint16_t tag, uint16_t type, const std::vector<T>& values) {
  Entry e{tag, type, static_cast<uint32_t>(values.size()), {}};
  e.payload.resize(values.size() * sizeof(T));
  std::memcpy(e.payload.data(), values.data(), e.payload.size());
  return e;
}

Entry ascii_entry(uint16_t tag, const std::string& s) {
  Entry e{tag, kAscii, static_cast<uint32_t>(s.size() + 1), {}};
  e.payload.assign(s.begin(), s.end());
  e.payload.push_back(0);
  return e;
}

std::vector<uint8_t> deflate_bytes(const std::vector<uint8_t>& raw) {
  uLongf cap = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> out(cap);
  if (compress2(out.data(), &cap, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("deflate failed");
  out.resize(cap);
  return out;
}

// ---------------------------------------------------------------------------
// reader

class TiffFile {
 public:
  TiffFile(std::vector<uint8_t> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {
    if (bytes_.size() < 8) fail("file too small");
    if (bytes_[0] == 'I' && bytes_[1] == 'I')
      swap_ = std::endian::native != std::endian::little;
    else if (bytes_[0] == 'M' && bytes_[1] == 'M')
      swap_ = std::endian::native != std::endian::big;
    else
      fail("not a TIFF file");
    const uint16_t magic = u16(2);
    if (magic == 43) fail("BigTIFF is not supported");
    if (magic != 42) fail("bad TIFF magic");
    const uint32_t ifd = u32(4);
    check(ifd, 2);
    const uint16_t n = u16(ifd);
    check(ifd + 2, 12ull * n);
    for (uint16_t i = 0; i < n; ++i) {
      const size_t at = ifd + 2 + 12ull * i;
      RawEntry e{u16(at + 2), u32(at + 4), at + 8};
      entries_[u16(at)] = e;
    }
  }

  [[noreturn]] void fail(const std::string& msg) const { throw DataError(path_ + ": " + msg); }

  bool has(uint16_t tag) const { return entries_.count(tag) > 0; }

  std::vector<double> numbers(uint16_t tag) const {
    auto it = entries_.find(tag);
    if (it == entries_.end()) fail("missing TIFF tag " + std::to_string(tag));
    const RawEntry& e = it->second;
    const size_t width = type_size(e.type);
    const size_t total = width * e.count;
    const size_t base = total <= 4 ? e.value_at : u32(e.value_at);
    check(base, total);
    std::vector<double> out(e.count);
    for (uint32_t i = 0; i < e.count; ++i) {
      const size_t at = base + i * width;
      switch (e.type) {
        case kByte: out[i] = bytes_[at]; break;
        case kShort: out[i] = u16(at); break;
        case kLong: out[i] = u32(at); break;
        case kDouble: out[i] = f64(at); break;
        default: fail("unsupported numeric TIFF type " + std::to_string(e.type) + " for tag " + std::to_string(tag));
      }
    }
    return out;
  }

  double number(uint16_t tag, double fallback) const { return has(tag) ? numbers(tag).at(0) : fallback; }

  std::string ascii(uint16_t tag) const {
    auto it = entries_.find(tag);
    if (it == entries_.end()) return {};
    const RawEntry& e = it->second;
    const size_t base = e.count <= 4 ? e.value_at : u32(e.value_at);
    check(base, e.count);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + base), e.count);
    while (!s.empty() && s.back() == '\0') s.pop_back();
    return s;
  }

  std::vector<uint8_t> block(size_t offset, size_t length) const {
    check(offset, length);
    return {bytes_.begin() + static_cast<std::ptrdiff_t>(offset),
            bytes_.begin() + static_cast<std::ptrdiff_t>(offset + length)};
  }

  bool swapped() const { return swap_; }

 private:
  struct RawEntry {
    uint16_t type;
    uint32_t count;
    size_t value_at;
  };

  static size_t type_size(uint16_t type) {
    switch (type) {
      case kByte:
      case kAscii: return 1;
      case kShort: return 2;
      case kLong: return 4;
      case kDouble: return 8;
      default: return 1;
    }
  }

  void check(size_t at, size_t n) const {
    if (at + n > bytes_.size()) fail("truncated file");
  }
  uint16_t u16(size_t at) const {
    check(at, 2);
    uint16_t v;
    std::memcpy(&v, bytes_.data() + at, 2);
    return swap_ ? __builtin_bswap16(v) : v;
  }
  uint32_t u32(size_t at) const {
    check(at, 4);
    uint32_t v;
    std::memcpy(&v, bytes_.data() + at, 4);
    return swap_ ? __builtin_bswap32(v) : v;
  }
  double f64(size_t at) const {
    check(at, 8);
    uint64_t v;
    std::memcpy(&v, bytes_.data() + at, 8);
    if (swap_) v = __builtin_bswap64(v);
    return std::bit_cast<double>(v);
  }

  std::vector<uint8_t> bytes_;
  std::string path_;
  bool swap_ = false;
  std::map<uint16_t, RawEntry> entries_;
};

void swap_samples(std::vector<uint8_t>& buf, int width) {
  if (width == 1) return;
  for (size_t i = 0; i + width <= buf.size(); i += static_cast<size_t>(width))
    std::reverse(buf.begin() + static_cast<std::ptrdiff_t>(i), buf.begin() + static_cast<std::ptrdiff_t>(i + width));
}

template <class T>
void undo_predictor(uint8_t* data, int64_t rows, int64_t cols, int64_t spp) {
  for (int64_t r = 0; r < rows; ++r) {
    T* row = reinterpret_cast<T*>(data) + r * cols * spp;
    for (int64_t c = 1; c < cols; ++c)
      for (int64_t s = 0; s < spp; ++s) row[c * spp + s] = static_cast<T>(row[c * spp + s] + row[(c - 1) * spp + s]);
  }
}

}  // namespace

void write_raster(const std::filesystem::path& path, const Raster& raster, const WriteOptions& options) {
  raster.grid.validate();
  const int64_t W = raster.grid.width, H = raster.grid.height, B = raster.bands();
  if (B <= 0) throw DataError("write_raster: raster has no bands");
  if (static_cast<int64_t>(raster.data.size()) != W * H * B) throw DataError("write_raster: data size mismatch");
  const int bps = bytes_per_sample(raster.sample_type);

  int64_t tile = std::max<int64_t>(16, (options.tile_size / 16) * 16);
  const int64_t needed = ((std::max(W, H) + 15) / 16) * 16;
  tile = std::min(tile, needed);
  const int64_t tiles_x = (W + tile - 1) / tile, tiles_y = (H + tile - 1) / tile;

  ByteWriter out;
  out.put("II", 2);
  out.u16(42);
  out.u32(0);  // IFD offset, patched below

  std::vector<uint32_t> offsets, counts;
  std::vector<uint8_t> raw(static_cast<size_t>(tile * tile * B * bps));
  for (int64_t ty = 0; ty < tiles_y; ++ty) {
    for (int64_t tx = 0; tx < tiles_x; ++tx) {
      std::fill(raw.begin(), raw.end(), 0);
      for (int64_t r = 0; r < tile; ++r) {
        const int64_t row = ty * tile + r;
        if (row >= H) break;
        for (int64_t c = 0; c < tile; ++c) {
          const int64_t col = tx * tile + c;
          if (col >= W) break;
          for (int64_t b = 0; b < B; ++b)
            encode_sample(raster.at(row, col, b), raster.sample_type, raw.data() + ((r * tile + c) * B + b) * bps);
        }
      }
      std::vector<uint8_t> payload = options.compress ? deflate_bytes(raw) : raw;
      out.align2();
      offsets.push_back(static_cast<uint32_t>(out.size()));
      counts.push_back(static_cast<uint32_t>(payload.size()));
      out.put(payload.data(), payload.size());
    }
  }

  std::vector<Entry> entries;
  entries.push_back(make_entry<uint32_t>(kImageWidth, kLong, {static_cast<uint32_t>(W)}));
  entries.push_back(make_entry<uint32_t>(kImageLength, kLong, {static_cast<uint32_t>(H)}));
  entries.push_back(make_entry<uint16_t>(kBitsPerSample, kShort,
                                         std::vector<uint16_t>(static_cast<size_t>(B), static_cast<uint16_t>(bps * 8))));
  entries.push_back(make_entry<uint16_t>(kCompression, kShort, {static_cast<uint16_t>(options.compress ? 8 : 1)}));
  entries.push_back(make_entry<uint16_t>(kPhotometric, kShort, {1}));
  entries.push_back(make_entry<uint16_t>(kSamplesPerPixel, kShort, {static_cast<uint16_t>(B)}));
  entries.push_back(make_entry<uint16_t>(kPlanarConfig, kShort, {1}));
  entries.push_back(make_entry<uint32_t>(kTileWidth, kLong, {static_cast<uint32_t>(tile)}));
  entries.push_back(make_entry<uint32_t>(kTileLength, kLong, {static_cast<uint32_t>(tile)}));
  entries.push_back(make_entry<uint32_t>(kTileOffsets, kLong, offsets));
  entries.push_back(make_entry<uint32_t>(kTileByteCounts, kLong, counts));
  if (B > 1)
    entries.push_back(make_entry<uint16_t>(kExtraSamples, kShort, std::vector<uint16_t>(static_cast<size_t>(B - 1), 0)));
  entries.push_back(make_entry<uint16_t>(kSampleFormat, kShort,
                                         std::vector<uint16_t>(static_cast<size_t>(B), sample_format_code(raster.sample_type))));
  const double ps = raster.grid.pixel_size;
  entries.push_back(make_entry<double>(kModelPixelScale, kDouble, {ps, ps, 0.0}));
  entries.push_back(
      make_entry<double>(kModelTiepoint, kDouble, {0.0, 0.0, 0.0, raster.grid.origin_x, raster.grid.origin_y, 0.0}));

  // GeoKeys: EPSG:<code> maps to a geographic (4xxx) or projected CRS key;
  // anything else is carried as a citation string.
  std::vector<uint16_t> keys;
  std::string geo_ascii;
  const std::string& crs = raster.grid.crs_id;
  std::smatch m;
  static const std::regex epsg_re(R"(^EPSG:(\d+)$)");
  uint16_t model_type = 1;
  std::vector<std::array<uint16_t, 4>> key_list;
  if (std::regex_match(crs, m, epsg_re) && std::stoul(m[1].str()) <= 65535) {
    const auto code = static_cast<uint16_t>(std::stoul(m[1].str()));
    const bool geographic = code >= 4000 && code < 5000;
    model_type = geographic ? 2 : 1;
    key_list.push_back({kGTModelType, 0, 1, model_type});
    key_list.push_back({kGTRasterType, 0, 1, 1});
    key_list.push_back({geographic ? kGeographicType : kProjectedCSType, 0, 1, code});
  } else {
    geo_ascii = crs + "|";
    key_list.push_back({kGTModelType, 0, 1, model_type});
    key_list.push_back({kGTRasterType, 0, 1, 1});
    key_list.push_back({kGTCitation, kGeoAsciiParams, static_cast<uint16_t>(geo_ascii.size()), 0});
  }
  keys = {1, 1, 0, static_cast<uint16_t>(key_list.size())};
  for (const auto& k : key_list) keys.insert(keys.end(), k.begin(), k.end());
  entries.push_back(make_entry<uint16_t>(kGeoKeyDirectory, kShort, keys));
  if (!geo_ascii.empty()) entries.push_back(ascii_entry(kGeoAsciiParams, geo_ascii));

  std::ostringstream meta;
  meta << "<GDALMetadata>";
  for (int64_t b = 0; b < B; ++b)
    meta << "<Item name=\"DESCRIPTION\" sample=\"" << b << "\" role=\"description\">"
         << xml_escape(raster.band_names[static_cast<size_t>(b)]) << "</Item>";
  meta << "</GDALMetadata>";
  entries.push_back(ascii_entry(kGdalMetadata, meta.str()));
  if (raster.nodata) entries.push_back(ascii_entry(kGdalNodata, format_nodata(*raster.nodata)));

  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.tag < b.tag; });

  // Out-of-line payloads first, then the IFD.
  std::vector<uint32_t> payload_at(entries.size(), 0);
  for (size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].payload.size() <= 4) continue;
    out.align2();
    payload_at[i] = static_cast<uint32_t>(out.size());
    out.put(entries[i].payload.data(), entries[i].payload.size());
  }
  out.align2();
  const auto ifd_at = static_cast<uint32_t>(out.size());
  out.u16(static_cast<uint16_t>(entries.size()));
  for (size_t i = 0; i < entries.size(); ++i) {
    const Entry& e = entries[i];
    out.u16(e.tag);
    out.u16(e.type);
    out.u32(e.count);
    if (e.payload.size() <= 4) {
      uint8_t inline_value[4] = {0, 0, 0, 0};
      std::memcpy(inline_value, e.payload.data(), e.payload.size());
      out.put(inline_value, 4);
    } else {
      out.u32(payload_at[i]);
    }
  }
  out.u32(0);
  out.patch_u32(4, ifd_at);

  if (out.size() > 0xFFFFFFFFull) throw DataError("write_raster: raster too large for classic TIFF");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(out.bytes().data()), static_cast<std::streamsize>(out.bytes().size()));
  if (!f) throw DataError("failed writing " + path.string());
}

Raster read_raster(const std::filesystem::path& path, const std::vector<std::string>& band_subset) {
  if (!std::filesystem::exists(path)) throw DataError("raster not found: " + path.string());
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open raster: " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const TiffFile tiff(std::move(bytes), path.string());

  const auto W = static_cast<int64_t>(tiff.number(kImageWidth, 0));
  const auto H = static_cast<int64_t>(tiff.number(kImageLength, 0));
  const auto spp = static_cast<int64_t>(tiff.number(kSamplesPerPixel, 1));
  if (W <= 0 || H <= 0 || spp <= 0) tiff.fail("invalid image dimensions");
  const auto bits = tiff.has(kBitsPerSample) ? tiff.numbers(kBitsPerSample) : std::vector<double>{1.0};
  const auto formats = tiff.has(kSampleFormat) ? tiff.numbers(kSampleFormat) : std::vector<double>{1.0};
  for (double b : bits)
    if (b != bits[0]) tiff.fail("mixed bits per sample");
  const SampleType stype = sample_type_from_tiff(static_cast<int>(bits[0]), static_cast<int>(formats[0]), path.string());
  const int bps = bytes_per_sample(stype);
  const int compression = static_cast<int>(tiff.number(kCompression, 1));
  if (compression != 1 && compression != 8 && compression != 32946)
    tiff.fail("unsupported compression " + std::to_string(compression));
  const int predictor = static_cast<int>(tiff.number(kPredictor, 1));
  if (predictor != 1 && !(predictor == 2 && sample_format_code(stype) != 3))
    tiff.fail("unsupported predictor " + std::to_string(predictor));
  const int planar = static_cast<int>(tiff.number(kPlanarConfig, 1));

  const bool tiled = tiff.has(kTileOffsets);
  int64_t bw, bh;
  std::vector<double> offsets, counts;
  if (tiled) {
    bw = static_cast<int64_t>(tiff.number(kTileWidth, 0));
    bh = static_cast<int64_t>(tiff.number(kTileLength, 0));
    offsets = tiff.numbers(kTileOffsets);
    counts = tiff.numbers(kTileByteCounts);
  } else {
    bw = W;
    bh = std::min<int64_t>(H, static_cast<int64_t>(tiff.number(kRowsPerStrip, static_cast<double>(H))));
    offsets = tiff.numbers(kStripOffsets);
    counts = tiff.numbers(kStripByteCounts);
  }
  if (bw <= 0 || bh <= 0) tiff.fail("invalid block size");
  const int64_t blocks_x = (W + bw - 1) / bw, blocks_y = (H + bh - 1) / bh;
  const int64_t planes = planar == 2 ? spp : 1;
  const int64_t block_spp = planar == 2 ? 1 : spp;
  if (static_cast<int64_t>(offsets.size()) != blocks_x * blocks_y * planes || counts.size() != offsets.size())
    tiff.fail("block table size mismatch");

  // Band selection.
  std::vector<std::string> names(static_cast<size_t>(spp));
  for (int64_t b = 0; b < spp; ++b) names[static_cast<size_t>(b)] = "band_" + std::to_string(b + 1);
  const std::string meta = tiff.ascii(kGdalMetadata);
  static const std::regex item_re(R"re(<Item name="DESCRIPTION" sample="(\d+)" role="description">([^<]*)</Item>)re");
  for (auto it = std::sregex_iterator(meta.begin(), meta.end(), item_re); it != std::sregex_iterator(); ++it) {
    const auto s = std::stoll((*it)[1].str());
    if (s >= 0 && s < spp) names[static_cast<size_t>(s)] = xml_unescape((*it)[2].str());
  }
  std::vector<int64_t> pick;
  if (band_subset.empty()) {
    for (int64_t b = 0; b < spp; ++b) pick.push_back(b);
  } else {
    for (const auto& want : band_subset) {
      auto pos = std::find(names.begin(), names.end(), want);
      if (pos == names.end()) throw DataError(path.string() + ": band '" + want + "' not present");
      pick.push_back(pos - names.begin());
    }
  }

  // Georeferencing.
  if (!tiff.has(kModelPixelScale) || !tiff.has(kModelTiepoint)) tiff.fail("raster is not georeferenced");
  const auto scale = tiff.numbers(kModelPixelScale);
  const auto tie = tiff.numbers(kModelTiepoint);
  if (scale.size() < 2 || tie.size() < 6) tiff.fail("malformed georeferencing tags");
  if (std::abs(scale[0] - scale[1]) > 1e-9 * std::abs(scale[0])) tiff.fail("non-square pixels are not supported");
  RasterGrid grid;
  grid.width = W;
  grid.height = H;
  grid.pixel_size = scale[0];
  grid.origin_x = tie[3] - tie[0] * scale[0];
  grid.origin_y = tie[4] + tie[1] * scale[1];
  grid.crs_id = "unknown";
  if (tiff.has(kGeoKeyDirectory)) {
    const auto keys = tiff.numbers(kGeoKeyDirectory);
    const std::string ascii = tiff.ascii(kGeoAsciiParams);
    for (size_t k = 4; k + 3 < keys.size(); k += 4) {
      const auto id = static_cast<uint16_t>(keys[k]);
      const auto loc = static_cast<uint16_t>(keys[k + 1]);
      const auto count = static_cast<size_t>(keys[k + 2]);
      const auto val = static_cast<size_t>(keys[k + 3]);
      if ((id == kProjectedCSType || id == kGeographicType) && loc == 0 && val != 32767)
        grid.crs_id = "EPSG:" + std::to_string(val);
      if (id == kGTCitation && loc == kGeoAsciiParams && grid.crs_id == "unknown" && val + count <= ascii.size() + 1) {
        std::string cit = ascii.substr(val, count);
        while (!cit.empty() && (cit.back() == '|' || cit.back() == '\0')) cit.pop_back();
        grid.crs_id = cit;
      }
    }
  }

  std::optional<double> nodata;
  const std::string nd = tiff.ascii(kGdalNodata);
  if (!nd.empty()) {
    try {
      nodata = (nd == "nan" || nd == "NaN" || nd == "-nan") ? std::nan("") : std::stod(nd);
    } catch (const std::exception&) {
      tiff.fail("malformed nodata value '" + nd + "'");
    }
  }

  std::vector<std::string> out_names;
  for (auto b : pick) out_names.push_back(names[static_cast<size_t>(b)]);
  Raster out(grid, out_names, stype, nodata);
  const int64_t B = out.bands();

  const size_t block_bytes = static_cast<size_t>(bw * bh * block_spp * bps);
  for (int64_t plane = 0; plane < planes; ++plane) {
    for (int64_t by = 0; by < blocks_y; ++by) {
      for (int64_t bx = 0; bx < blocks_x; ++bx) {
        const size_t idx = static_cast<size_t>((plane * blocks_y + by) * blocks_x + bx);
        std::vector<uint8_t> raw = tiff.block(static_cast<size_t>(offsets[idx]), static_cast<size_t>(counts[idx]));
        if (compression != 1) {
          std::vector<uint8_t> inflated(block_bytes);
          uLongf len = static_cast<uLongf>(block_bytes);
          const int rc = uncompress(inflated.data(), &len, raw.data(), static_cast<uLong>(raw.size()));
          // Strips at the image bottom may legitimately be shorter.
          if (rc != Z_OK && rc != Z_BUF_ERROR) tiff.fail("corrupt deflate block");
          inflated.resize(block_bytes);
          raw = std::move(inflated);
        }
        if (raw.size() < block_bytes) raw.resize(block_bytes, 0);
        if (tiff.swapped()) swap_samples(raw, bps);
        const int64_t rows_here = tiled ? bh : std::min(bh, H - by * bh);
        if (predictor == 2) {
          switch (bps) {
            case 1: undo_predictor<uint8_t>(raw.data(), rows_here, bw, block_spp); break;
            case 2: undo_predictor<uint16_t>(raw.data(), rows_here, bw, block_spp); break;
            case 4: undo_predictor<uint32_t>(raw.data(), rows_here, bw, block_spp); break;
            default: tiff.fail("predictor not supported for this sample width");
          }
        }
        for (int64_t r = 0; r < rows_here; ++r) {
          const int64_t row = by * bh + r;
          if (row >= H) break;
          for (int64_t c = 0; c < bw; ++c) {
            const int64_t col = bx * bw + c;
            if (col >= W) break;
            for (int64_t ob = 0; ob < B; ++ob) {
              const int64_t src_band = pick[static_cast<size_t>(ob)];
              int64_t s;
              if (planar == 2) {
                if (src_band != plane) continue;
                s = 0;
              } else {
                s = src_band;
              }
              out.at(row, col, ob) = decode_sample(raw.data() + ((r * bw + c) * block_spp + s) * bps, stype);
            }
          }
        }
      }
    }
  }
  out.refresh_validity();
  return out;
}

}  // namespace croplandws
