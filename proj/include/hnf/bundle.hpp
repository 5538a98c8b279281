#pragma once

// On-disk tensor bundle: a directory holding manifest.json plus tensors.bin
// (little-endian IEEE-754 f64, row-major, concatenated in manifest order).
// Used for embedding corpora, parameter checkpoints, and similarity matrices.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hnf/autodiff.hpp"

namespace hnf {

struct BundleRecord {
  std::string id;
  std::string role;  // caption | video | param | similarity
  Shape shape;
  int64_t byte_offset = 0;
  nlohmann::json extra;  // role-specific fields (M, N, K, ...)
};

class BundleWriter {
 public:
  // Returns the byte offset the tensor was placed at.
  int64_t add(const std::string& id, const std::string& role, const Shape& shape,
              const std::vector<double>& values, nlohmann::json extra = nlohmann::json::object());
  void set_meta(const std::string& key, nlohmann::json value);
  void write(const std::filesystem::path& dir) const;

 private:
  std::vector<BundleRecord> records_;
  std::vector<double> payload_;
  nlohmann::json meta_ = nlohmann::json::object();
};

class BundleReader {
 public:
  explicit BundleReader(const std::filesystem::path& dir);

  const std::vector<BundleRecord>& records() const { return records_; }
  bool has(const std::string& id) const;
  const BundleRecord& record(const std::string& id) const;
  // Validates byte range and finiteness; throws naming the offending tensor.
  Tensor read(const std::string& id) const;
  const nlohmann::json& meta() const { return meta_; }

 private:
  std::filesystem::path dir_;
  std::vector<BundleRecord> records_;
  std::map<std::string, size_t> index_;
  nlohmann::json meta_;
  int64_t payload_bytes_ = 0;
};

}  // namespace hnf
