#include "cbna/io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "cbna/errors.hpp"

namespace cbna {

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open file: " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  if (in.bad()) throw FormatError("read failed: " + path.string());
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open file for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

void ByteWriter::put_f32(float v) {
  uint32_t u;
  std::memcpy(&u, &v, sizeof(u));
  put_u32(u);
}

void ByteReader::need(size_t n) const {
  if (pos + n > bytes.size())
    throw FormatError("truncated " + what + ": need " + std::to_string(n) + " bytes at offset " +
                      std::to_string(pos) + ", have " + std::to_string(bytes.size()));
}

uint8_t ByteReader::get_u8() {
  need(1);
  return bytes[pos++];
}

uint32_t ByteReader::get_u32() {
  need(4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes[pos + i]) << (8 * i);
  pos += 4;
  return v;
}

uint64_t ByteReader::get_u64() {
  need(8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes[pos + i]) << (8 * i);
  pos += 8;
  return v;
}

float ByteReader::get_f32() {
  const uint32_t u = get_u32();
  float v;
  std::memcpy(&v, &u, sizeof(v));
  return v;
}

void ByteReader::expect_magic(const char m[4]) {
  need(4);
  if (std::memcmp(bytes.data() + pos, m, 4) != 0)
    throw FormatError("bad magic in " + what);
  pos += 4;
}

std::vector<float> ByteReader::get_f32_array(size_t n) {
  std::vector<float> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = get_f32();
  return out;
}

void ByteReader::expect_end() const {
  if (pos != bytes.size()) throw FormatError("trailing data in " + what);
}

std::string fmt_g6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);  // binary: LF endings
  if (!out) throw Error("cannot open file for writing: " + path.string());
  for (size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << "\n";
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << "\n";
  }
  if (!out) throw Error("write failed: " + path.string());
}

const char* version_string() { return "v1.0.0"; }

void write_run_manifest(const std::filesystem::path& dir, const std::string& command,
                        const std::vector<std::pair<std::string, std::string>>& flags,
                        const std::map<std::string, uint64_t>& seeds, double duration_seconds) {
  nlohmann::json j;
  j["command"] = command;
  nlohmann::json f = nlohmann::json::object();
  for (const auto& [k, v] : flags) f[k] = v;
  j["flags"] = f;
  nlohmann::json s = nlohmann::json::object();
  for (const auto& [k, v] : seeds) s[k] = v;
  j["seeds"] = s;
  j["version"] = version_string();
  j["duration_seconds"] = duration_seconds;
  std::ofstream out(dir / "run_manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write run manifest in " + dir.string());
  out << j.dump(2) << "\n";
}

}  // namespace cbna
