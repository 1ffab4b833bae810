#pragma once

#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>

namespace fscd {

/// SHA-256, lowercase hex.
std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(const std::string& text);

/// Streaming SHA-256 of a file's bytes. MissingFileError when absent.
std::string hash_file(const std::string& path);

/// Content hash of a directory tree: the hash of "relpath:filehash" lines
/// sorted by path, so identical trees match regardless of write order or
/// timestamps. MissingFileError when the root does not exist.
std::string hash_tree(const std::string& root);

/// Provenance record for one command invocation. Every artifact directory
/// holds exactly one, written before any other output lands there.
struct RunManifest {
  std::string command;
  nlohmann::json config;                      // full configuration snapshot
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;  // label -> content hash
  std::string created_at;                     // filled in by write_manifest
};

/// Writes `dir`/manifest.json (creating `dir` first) with a UTC timestamp.
void write_manifest(const std::string& dir, RunManifest manifest);

/// Parses `dir`/manifest.json. MissingFileError when absent.
nlohmann::json read_manifest(const std::string& dir);

/// Claims an output directory for a command. An existing directory that
/// already holds files is refused unless `overwrite`, in which case its
/// contents are removed first.
void prepare_out_dir(const std::string& dir, bool overwrite);

}  // namespace fscd
