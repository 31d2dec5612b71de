#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "capi/tensor.hpp"

namespace capi {

// Self-describing container of named numeric arrays.
//
// Layout (little-endian):
//   "CAPIARC1"  u64 entry_count
//   per entry:  u32 name_len, name, u8 kind, u64 rows, u64 cols, payload
// kind 0 = f64 matrix (row-major), 1 = i64 vector (rows = length, cols = 1),
// 2 = UTF-8 text (rows = byte length, cols = 1).
// Entries keep insertion order, so save -> load -> save is byte-identical.
class Archive {
 public:
  using Value = std::variant<Matrix, std::vector<std::int64_t>, std::string>;

  void put(const std::string& name, Matrix value);
  void put(const std::string& name, std::vector<std::int64_t> value);
  void put(const std::string& name, std::string value);

  bool contains(const std::string& name) const { return index_.contains(name); }
  const Matrix& matrix(const std::string& name) const;
  const std::vector<std::int64_t>& ints(const std::string& name) const;
  const std::string& text(const std::string& name) const;
  std::int64_t scalar_int(const std::string& name) const;

  const std::vector<std::string>& names() const { return names_; }

  std::string to_bytes() const;
  static Archive from_bytes(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  const Value& get(const std::string& name) const;
  void put_value(const std::string& name, Value value);

  std::vector<std::string> names_;
  std::vector<Value> values_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace capi
