#pragma once

// Run manifest: one JSON file per output directory recording the command,
// the resolved config, dataset digests, seed and wall-clock timings.

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace facecap {

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256_hex: digest failure");
  }
  EVP_MD_CTX_free(ctx);
  char buf[3];
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", digest[i]);
    out += buf;
  }
  return out;
}

inline std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("sha256_file: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config;
  std::string dataset_path;
  std::string dataset_sha256;
  unsigned long long seed = 0;
  bool deterministic = false;
  std::vector<std::string> artifacts;
  double wall_seconds = 0.0;
  std::string schema_version = "1";

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema_version"] = schema_version;
    j["command"] = command;
    j["argv"] = argv;
    j["config"] = config;
    j["dataset_path"] = dataset_path;
    j["dataset_sha256"] = dataset_sha256;
    j["seed"] = seed;
    j["deterministic"] = deterministic;
    j["artifacts"] = artifacts;
    j["wall_seconds"] = wall_seconds;
    return j;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("manifest: cannot write " + path);
    out << to_json().dump(2) << "\n";
  }
};

class WallTimer {
 public:
  WallTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace facecap
