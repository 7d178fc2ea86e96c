#include "dscloak/io.hpp"

#include <png.h>
#include <zlib.h>

#include <charconv>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dscloak::io {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Tensor read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("read_png: cannot open " + path);

  png_byte header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
    throw std::runtime_error("read_png: " + path + " is not a PNG file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop pinfo = png ? png_create_info_struct(png) : nullptr;
  if (!png || !pinfo) {
    png_destroy_read_struct(&png, &pinfo, nullptr);
    throw std::runtime_error("read_png: libpng init failed");
  }
  std::vector<png_byte> data;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &pinfo, nullptr);
    throw std::runtime_error("read_png: failed to decode " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, pinfo);

  const png_uint_32 w = png_get_image_width(png, pinfo);
  const png_uint_32 h = png_get_image_height(png, pinfo);
  const png_byte color = png_get_color_type(png, pinfo);
  const png_byte depth = png_get_bit_depth(png, pinfo);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, pinfo, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, pinfo, PNG_INFO_tRNS))
    png_set_strip_alpha(png);
  png_read_update_info(png, pinfo);

  data.resize(static_cast<std::size_t>(h) * w * 3);
  rows.resize(h);
  for (png_uint_32 i = 0; i < h; ++i)
    rows[i] = data.data() + static_cast<std::size_t>(i) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &pinfo, nullptr);

  std::vector<double> v(static_cast<std::size_t>(3) * h * w);
  for (png_uint_32 i = 0; i < h; ++i)
    for (png_uint_32 j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c)
        v[(static_cast<std::size_t>(c) * h + i) * w + j] =
            data[(static_cast<std::size_t>(i) * w + j) * 3 + c] / 255.0;
  return Tensor::from({3, static_cast<int>(h), static_cast<int>(w)}, std::move(v));
}

void write_png(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("write_png: expected (3, H, W), got " +
                                shape_str(image.shape()));
  const int h = image.dim(1), w = image.dim(2);
  const auto& v = image.data();
  std::vector<png_byte> data(static_cast<std::size_t>(h) * w * 3);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c) {
        const double x = v[(static_cast<std::size_t>(c) * h + i) * w + j];
        const long q = std::lround(x * 255.0);
        data[(static_cast<std::size_t>(i) * w + j) * 3 + c] =
            static_cast<png_byte>(std::min(255L, std::max(0L, q)));
      }

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("write_png: cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop pinfo = png ? png_create_info_struct(png) : nullptr;
  if (!png || !pinfo) {
    png_destroy_write_struct(&png, &pinfo);
    throw std::runtime_error("write_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &pinfo);
    throw std::runtime_error("write_png: failed to encode " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, pinfo, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, pinfo);
  for (int i = 0; i < h; ++i)
    png_write_row(png, data.data() + static_cast<std::size_t>(i) * w * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &pinfo);
}

// ---------------------------------------------------------------------------
// Raw tensors
// ---------------------------------------------------------------------------

namespace {

constexpr char kTensorMagic[4] = {'D', 'S', 'T', 'N'};
constexpr std::uint32_t kTensorVersion = 1;
constexpr std::uint32_t kDtypeF64 = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("write_tensor: cannot open " + path);
  os.write(kTensorMagic, sizeof kTensorMagic);
  put_u32(os, kTensorVersion);
  put_u32(os, kDtypeF64);
  put_u32(os, static_cast<std::uint32_t>(t.shape().size()));
  for (int d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.data().size() * sizeof(double)));
  if (!os) throw std::runtime_error("write_tensor: write to " + path + " failed");
}

Tensor read_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_tensor: cannot open " + path);
  char magic[4];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kTensorMagic, sizeof kTensorMagic) != 0)
    throw std::runtime_error("read_tensor: " + path + " has a corrupt magic header");
  const std::uint32_t ver = get_u32(is);
  if (ver != kTensorVersion)
    throw std::runtime_error("read_tensor: " + path + " has unsupported version " +
                             std::to_string(ver));
  const std::uint32_t dtype = get_u32(is);
  if (dtype != kDtypeF64)
    throw std::runtime_error("read_tensor: " + path + " has unsupported dtype " +
                             std::to_string(dtype));
  const std::uint32_t nd = get_u32(is);
  if (nd > 8) throw std::runtime_error("read_tensor: " + path + " rank too large");
  Shape shape(nd);
  for (auto& d : shape) d = static_cast<int>(get_u32(is));
  std::vector<double> data(shape_numel(shape));
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!is) throw std::runtime_error("read_tensor: " + path + " is truncated");
  return Tensor::from(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

bool needs_quotes(const std::string& s) {
  return s.find_first_of(",\"\n\r") != std::string::npos;
}

std::string quoted(const std::string& s) {
  if (!needs_quotes(s)) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

}  // namespace

std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_csv(const std::string& path, const Table& table) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("write_csv: cannot open " + path);
  auto put_row = [&os](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) os << ',';
      os << quoted(row[i]);
    }
    os << '\n';
  };
  put_row(table.header);
  for (const auto& row : table.rows) put_row(row);
  if (!os) throw std::runtime_error("write_csv: write to " + path + " failed");
}

Table read_csv(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_csv: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());

  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      if (!field.empty() && field.back() == '\r') field.pop_back();
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
    } else {
      field += c;
    }
  }
  if (!field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("read_csv: " + path + " is empty");

  Table t;
  t.header = rows.front();
  t.rows.assign(rows.begin() + 1, rows.end());
  return t;
}

// ---------------------------------------------------------------------------
// Clips
// ---------------------------------------------------------------------------

void write_clip(const std::string& dir, const Tensor& frames, bool overwrite) {
  if (frames.rank() != 4 || frames.dim(1) != 3)
    throw std::invalid_argument("write_clip: expected (F, 3, H, W), got " +
                                shape_str(frames.shape()));
  ensure_dir(dir);
  const int F = frames.dim(0), h = frames.dim(2), w = frames.dim(3);
  Table index;
  index.header = {"frame", "file"};
  for (int f = 0; f < F; ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03d.png", f);
    const std::string path = dir + "/" + name;
    require_writable(path, overwrite);
    write_png(path, reshape(narrow(frames, 0, f, 1), {3, h, w}));
    index.rows.push_back({std::to_string(f), name});
  }
  const std::string ipath = dir + "/index.csv";
  require_writable(ipath, overwrite);
  write_csv(ipath, index);
}

Tensor read_clip(const std::string& dir) {
  const Table index = read_csv(dir + "/index.csv");
  std::vector<Tensor> frames;
  for (const auto& row : index.rows) {
    if (row.size() != 2)
      throw std::runtime_error("read_clip: malformed index row in " + dir);
    const Tensor img = read_png(dir + "/" + row[1]);
    frames.push_back(reshape(img, {1, 3, img.dim(1), img.dim(2)}));
  }
  if (frames.empty()) throw std::runtime_error("read_clip: no frames in " + dir);
  return frames.size() == 1 ? frames[0] : concat(frames, 0);
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

const std::map<std::string, std::string>& RunConfig::defaults() {
  static const std::map<std::string, std::string> kDefaults = {
      // attack
      {"space", "lab+freq"},
      {"iters", "200"},
      {"lr", "0.01"},
      {"budget-rgb", "16/255"},
      {"budget-lab", "16/255"},
      {"mask-fraction", "0.25"},
      {"pgd-step", "1/255"},
      {"samples-per-iter", "1"},
      {"literal-mask", "false"},
      {"targeted", ""},
      {"w-irc", "1"},
      {"w-ira", "1"},
      {"w-aux", "1"},
      {"w-dm", "1"},
      {"irc-early", "3"},
      {"irc-deep", "last3"},
      {"seed", "0"},
      {"class-label", "0"},
      // model architecture
      {"model", ""},
      {"image-size", "32"},
      {"frames", "4"},
      {"encoder-layers", "4"},
      {"latent-channels", "4"},
      {"hidden-channels", "16"},
      {"blocks", "8"},
      {"classes", "3"},
      {"timesteps", "1000"},
      {"time-embed-dim", "32"},
      // training
      {"train-steps", "1500"},
      {"train-lr", "0.002"},
      {"train-clips", "96"},
      {"data-seed", "77"},
      {"resume", "false"},
      // evaluation
      {"eval-seeds", "50"},
      {"dm-draws", "64"},
      {"transforms", "jpeg:40,blur:7:1.5,noise:0.05"},
      {"image", ""},
      {"target-image", ""},
      // ablation
      {"ablate-iters", "0"},
      {"ablate-gen-seeds", "8"},
      {"lab-budget-sweep", "8/255,16/255,32/255"},
      // io
      {"out", "out"},
      {"overwrite", "false"},
      {"jobs", "1"},
  };
  return kDefaults;
}

RunConfig RunConfig::from_defaults() {
  RunConfig c;
  c.kv_ = defaults();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("config: cannot open " + path);
  RunConfig c = from_defaults();
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    const std::string t = strip(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: " + path + ":" +
                                  std::to_string(lineno) +
                                  ": expected `key = value`");
    c.set(strip(t.substr(0, eq)), strip(t.substr(eq + 1)));
  }
  return c;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (defaults().find(key) == defaults().end())
    throw std::invalid_argument("config: unknown key '" + key + "'");
  kv_[key] = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = kv_.find(key);
  if (it == kv_.end())
    throw std::invalid_argument("config: unknown key '" + key + "'");
  return it->second;
}

double parse_real(const std::string& text) {
  const auto slash = text.find('/');
  try {
    if (slash != std::string::npos) {
      const double num = std::stod(text.substr(0, slash));
      const double den = std::stod(text.substr(slash + 1));
      if (den == 0.0) throw std::invalid_argument("division by zero");
      return num / den;
    }
    return std::stod(text);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: cannot parse number '" + text + "'");
  }
}

double RunConfig::get_real(const std::string& key) const {
  return parse_real(get(key));
}

int RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t pos = 0;
    const int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return r;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key +
                                "' expects an integer, got '" + v + "'");
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: key '" + key +
                              "' expects a boolean, got '" + v + "'");
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key +
                                "' expects an unsigned integer, got '" + v + "'");
  }
}

// ---------------------------------------------------------------------------
// Filesystem
// ---------------------------------------------------------------------------

bool file_exists(const std::string& path) { return fs::exists(path); }

void ensure_dir(const std::string& path) {
  std::error_code ec;
  fs::create_directories(path, ec);
  if (ec && !fs::is_directory(path))
    throw std::runtime_error("cannot create directory " + path + ": " + ec.message());
}

void require_writable(const std::string& path, bool overwrite) {
  if (!overwrite && fs::exists(path))
    throw std::runtime_error("refusing to overwrite existing " + path +
                             " (use --overwrite)");
}

std::string crc32_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("crc32_file: cannot open " + path);
  uLong crc = crc32(0L, Z_NULL, 0);
  char buf[65536];
  while (is) {
    is.read(buf, sizeof buf);
    const std::streamsize n = is.gcount();
    if (n > 0)
      crc = crc32(crc, reinterpret_cast<const Bytef*>(buf), static_cast<uInt>(n));
  }
  char out[16];
  std::snprintf(out, sizeof out, "%08lx", static_cast<unsigned long>(crc));
  return std::string("crc32:") + out;
}

}  // namespace dscloak::io
