#include "fscd/manifest.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <vector>

#include "fscd/errors.hpp"

namespace fscd {

namespace fs = std::filesystem;

namespace {

std::string to_hex(const unsigned char* md, unsigned int len) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(digits[md[i] >> 4]);
    out.push_back(digits[md[i] & 0xf]);
  }
  return out;
}

std::string utc_now_iso8601() {
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string sha256_hex(const void* data, std::size_t len) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int md_len = 0;
  EVP_Digest(data, len, md, &md_len, EVP_sha256(), nullptr);
  return to_hex(md, md_len);
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(text.data(), text.size());
}

std::string hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot hash missing file: " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const std::streamsize got = in.gcount();
    if (got > 0) {
      EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(got));
    }
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int md_len = 0;
  EVP_DigestFinal_ex(ctx, md, &md_len);
  EVP_MD_CTX_free(ctx);
  return to_hex(md, md_len);
}

std::string hash_tree(const std::string& root) {
  const fs::path rootp(root);
  if (!fs::exists(rootp)) {
    throw MissingFileError("cannot hash missing directory: " + root);
  }
  if (fs::is_regular_file(rootp)) return hash_file(root);

  std::vector<std::string> lines;
  for (const auto& entry : fs::recursive_directory_iterator(rootp)) {
    if (!entry.is_regular_file()) continue;
    const std::string rel =
        fs::relative(entry.path(), rootp).generic_string();
    lines.push_back(rel + ":" + hash_file(entry.path().string()));
  }
  std::sort(lines.begin(), lines.end());
  std::string joined;
  for (const auto& line : lines) {
    joined += line;
    joined += '\n';
  }
  return sha256_hex(joined);
}

void write_manifest(const std::string& dir, RunManifest manifest) {
  fs::create_directories(dir);
  manifest.created_at = utc_now_iso8601();
  nlohmann::json j;
  j["command"] = manifest.command;
  j["config"] = manifest.config;
  j["seed"] = manifest.seed;
  j["inputs"] = manifest.inputs;
  j["created_at"] = manifest.created_at;
  const fs::path path = fs::path(dir) / "manifest.json";
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) {
    throw ValueError("could not write manifest to " + path.string());
  }
}

nlohmann::json read_manifest(const std::string& dir) {
  const fs::path path = fs::path(dir) / "manifest.json";
  std::ifstream in(path);
  if (!in) throw MissingFileError("no manifest at " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaViolationError("manifest " + path.string() + ": " + e.what());
  }
  return j;
}

void prepare_out_dir(const std::string& dir, bool overwrite) {
  const fs::path p(dir);
  if (fs::exists(p)) {
    if (!fs::is_directory(p)) {
      throw ValueError("output path exists and is not a directory: " + dir);
    }
    const bool empty = fs::directory_iterator(p) == fs::directory_iterator();
    if (!empty) {
      if (!overwrite) {
        throw ValueError("output directory " + dir +
                         " already holds results; pass --overwrite to "
                         "replace them");
      }
      for (const auto& entry : fs::directory_iterator(p)) {
        fs::remove_all(entry.path());
      }
    }
  } else {
    fs::create_directories(p);
  }
}

}  // namespace fscd
