#include "hnf/bundle.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace hnf {

namespace {

constexpr int kBundleVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "tensors.bin is little-endian; big-endian hosts would need byte swaps");

}  // namespace

int64_t BundleWriter::add(const std::string& id, const std::string& role, const Shape& shape,
                          const std::vector<double>& values, nlohmann::json extra) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("bundle: tensor '" + id + "' has " + std::to_string(values.size()) +
                                " values but shape " + shape_str(shape));
  }
  BundleRecord rec;
  rec.id = id;
  rec.role = role;
  rec.shape = shape;
  rec.byte_offset = static_cast<int64_t>(payload_.size() * sizeof(double));
  rec.extra = std::move(extra);
  records_.push_back(rec);
  payload_.insert(payload_.end(), values.begin(), values.end());
  return rec.byte_offset;
}

void BundleWriter::set_meta(const std::string& key, nlohmann::json value) { meta_[key] = std::move(value); }

void BundleWriter::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["version"] = kBundleVersion;
  for (auto it = meta_.begin(); it != meta_.end(); ++it) manifest[it.key()] = it.value();
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records_) {
    nlohmann::json j;
    j["id"] = r.id;
    j["role"] = r.role;
    j["shape"] = r.shape;
    j["byte_offset"] = r.byte_offset;
    for (auto it = r.extra.begin(); it != r.extra.end(); ++it) j[it.key()] = it.value();
    recs.push_back(std::move(j));
  }
  manifest["records"] = std::move(recs);

  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("bundle: cannot write " + (dir / "manifest.json").string());
  mf << manifest.dump(2) << "\n";

  std::ofstream bf(dir / "tensors.bin", std::ios::binary);
  if (!bf) throw std::runtime_error("bundle: cannot write " + (dir / "tensors.bin").string());
  bf.write(reinterpret_cast<const char*>(payload_.data()),
           static_cast<std::streamsize>(payload_.size() * sizeof(double)));
}

BundleReader::BundleReader(const std::filesystem::path& dir) : dir_(dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("bundle: missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("bundle: malformed manifest.json in " + dir.string() + ": " + e.what());
  }
  if (!manifest.contains("records") || !manifest["records"].is_array()) {
    throw std::runtime_error("bundle: manifest.json has no records array");
  }
  meta_ = manifest;
  meta_.erase("records");
  for (const auto& j : manifest["records"]) {
    BundleRecord rec;
    rec.id = j.at("id").get<std::string>();
    rec.role = j.at("role").get<std::string>();
    rec.shape = j.at("shape").get<Shape>();
    rec.byte_offset = j.at("byte_offset").get<int64_t>();
    rec.extra = j;
    index_[rec.id] = records_.size();
    records_.push_back(std::move(rec));
  }
  std::error_code ec;
  payload_bytes_ = static_cast<int64_t>(std::filesystem::file_size(dir / "tensors.bin", ec));
  if (ec) throw std::runtime_error("bundle: missing tensors.bin in " + dir.string());
}

bool BundleReader::has(const std::string& id) const { return index_.count(id) > 0; }

const BundleRecord& BundleReader::record(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw std::runtime_error("bundle: no record with id '" + id + "'");
  return records_[it->second];
}

Tensor BundleReader::read(const std::string& id) const {
  const BundleRecord& rec = record(id);
  const int64_t count = shape_numel(rec.shape);
  const int64_t bytes = count * static_cast<int64_t>(sizeof(double));
  if (rec.byte_offset < 0 || rec.byte_offset + bytes > payload_bytes_) {
    throw std::runtime_error("bundle: tensor '" + id + "' (shape " + shape_str(rec.shape) +
                             ") extends past the end of tensors.bin (" + std::to_string(payload_bytes_) +
                             " bytes); payload is truncated or manifest is stale");
  }
  std::ifstream bf(dir_ / "tensors.bin", std::ios::binary);
  if (!bf) throw std::runtime_error("bundle: cannot open tensors.bin in " + dir_.string());
  bf.seekg(rec.byte_offset);
  std::vector<double> values(static_cast<size_t>(count));
  bf.read(reinterpret_cast<char*>(values.data()), bytes);
  if (!bf) throw std::runtime_error("bundle: short read for tensor '" + id + "'");
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw std::runtime_error("bundle: tensor '" + id + "' contains a non-finite value");
    }
  }
  return Tensor(rec.shape, std::move(values));
}

}  // namespace hnf
