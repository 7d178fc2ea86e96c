#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dscloak/tensor.hpp"

namespace dscloak::io {

// ---------------------------------------------------------------------------
// Images. PNGs are treated as raw sRGB bytes: no gamma or ICC handling, the
// attack math defines its own linearization.
// ---------------------------------------------------------------------------

/// Reads any PNG as 8-bit RGB, returning (3, H, W) in [0, 1].
Tensor read_png(const std::string& path);

/// Writes (3, H, W) in [0, 1] as 8-bit RGB, round-to-nearest quantization.
void write_png(const std::string& path, const Tensor& image);

// ---------------------------------------------------------------------------
// Raw tensors: magic + version + dtype + shape + little-endian f64 payload.
// ---------------------------------------------------------------------------

void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

// ---------------------------------------------------------------------------
// CSV tables, RFC-style quoting.
// ---------------------------------------------------------------------------

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

void write_csv(const std::string& path, const Table& table);
Table read_csv(const std::string& path);

/// Shortest round-trippable decimal form, locale-independent.
std::string fmt_double(double v);

// ---------------------------------------------------------------------------
// Clips: per-frame PNG directory plus an index file.
// ---------------------------------------------------------------------------

void write_clip(const std::string& dir, const Tensor& frames, bool overwrite);
Tensor read_clip(const std::string& dir);

// ---------------------------------------------------------------------------
// Run configuration: plain-text `key = value` file with documented keys.
// Unknown keys are rejected; every default matches the published constant
// where one exists. Values are kept as canonical strings so config echoes
// reproduce byte-for-byte.
// ---------------------------------------------------------------------------

class RunConfig {
 public:
  static const std::map<std::string, std::string>& defaults();
  static RunConfig from_defaults();
  static RunConfig load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  double get_real(const std::string& key) const;  // accepts "16/255" fractions
  int get_int(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

/// Parses "16/255" or plain decimals.
double parse_real(const std::string& text);

// ---------------------------------------------------------------------------
// Filesystem helpers and checksums.
// ---------------------------------------------------------------------------

bool file_exists(const std::string& path);
void ensure_dir(const std::string& path);
/// Throws when the path exists and overwriting was not requested.
void require_writable(const std::string& path, bool overwrite);
std::string crc32_file(const std::string& path);

}  // namespace dscloak::io
