#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace cbna {

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);

// Little-endian byte stream writer.
struct ByteWriter {
  std::vector<uint8_t> bytes;

  void put_u8(uint8_t v) { bytes.push_back(v); }
  void put_u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void put_u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void put_f32(float v);
  void put_magic(const char m[4]) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<uint8_t>(m[i]));
  }
  void put_f32_array(const std::vector<float>& a) {
    for (float v : a) put_f32(v);
  }
};

// Bounds-checked little-endian reader; throws FormatError on truncation.
struct ByteReader {
  const std::vector<uint8_t>& bytes;
  size_t pos = 0;
  std::string what;  // context for error messages

  explicit ByteReader(const std::vector<uint8_t>& b, std::string context = "stream")
      : bytes(b), what(std::move(context)) {}

  uint8_t get_u8();
  uint32_t get_u32();
  uint64_t get_u64();
  float get_f32();
  void expect_magic(const char m[4]);
  std::vector<float> get_f32_array(size_t n);
  void expect_end() const;

 private:
  void need(size_t n) const;
};

// Numbers formatted with %.6g, the convention for every CSV this tool emits.
std::string fmt_g6(double v);

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

const char* version_string();

// Written next to every command's outputs; re-running with the same flags and
// seeds reproduces the outputs byte for byte.
void write_run_manifest(const std::filesystem::path& dir, const std::string& command,
                        const std::vector<std::pair<std::string, std::string>>& flags,
                        const std::map<std::string, uint64_t>& seeds, double duration_seconds);

}  // namespace cbna
