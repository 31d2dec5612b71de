#include "capi/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "capi/error.hpp"

namespace capi {

static_assert(std::endian::native == std::endian::little, "archive format assumes little-endian hosts");

namespace {

constexpr char kMagic[8] = {'C', 'A', 'P', 'I', 'A', 'R', 'C', '1'};

template <typename T>
void write_pod(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T pod() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("archive truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Archive::put_value(const std::string& name, Value value) {
  if (auto it = index_.find(name); it != index_.end()) {
    values_[it->second] = std::move(value);
    return;
  }
  index_[name] = names_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
}

void Archive::put(const std::string& name, Matrix value) { put_value(name, std::move(value)); }
void Archive::put(const std::string& name, std::vector<std::int64_t> value) { put_value(name, std::move(value)); }
void Archive::put(const std::string& name, std::string value) { put_value(name, std::move(value)); }

const Archive::Value& Archive::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw IoError("archive has no entry '" + name + "'");
  return values_[it->second];
}

const Matrix& Archive::matrix(const std::string& name) const {
  const auto* v = std::get_if<Matrix>(&get(name));
  if (v == nullptr) throw IoError("archive entry '" + name + "' is not a matrix");
  return *v;
}

const std::vector<std::int64_t>& Archive::ints(const std::string& name) const {
  const auto* v = std::get_if<std::vector<std::int64_t>>(&get(name));
  if (v == nullptr) throw IoError("archive entry '" + name + "' is not an integer array");
  return *v;
}

const std::string& Archive::text(const std::string& name) const {
  const auto* v = std::get_if<std::string>(&get(name));
  if (v == nullptr) throw IoError("archive entry '" + name + "' is not text");
  return *v;
}

std::int64_t Archive::scalar_int(const std::string& name) const {
  const auto& v = ints(name);
  if (v.size() != 1) throw IoError("archive entry '" + name + "' is not a scalar");
  return v.front();
}

std::string Archive::to_bytes() const {
  std::string out(kMagic, sizeof(kMagic));
  write_pod<std::uint64_t>(out, names_.size());
  for (std::size_t i = 0; i < names_.size(); ++i) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(names_[i].size()));
    out += names_[i];
    std::visit(
        [&](const auto& v) {
          using T = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<T, Matrix>) {
            write_pod<std::uint8_t>(out, 0);
            write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(v.rows()));
            write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(v.cols()));
            out.append(reinterpret_cast<const char*>(v.data()), static_cast<std::size_t>(v.size()) * sizeof(double));
          } else if constexpr (std::is_same_v<T, std::vector<std::int64_t>>) {
            write_pod<std::uint8_t>(out, 1);
            write_pod<std::uint64_t>(out, v.size());
            write_pod<std::uint64_t>(out, 1);
            out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(std::int64_t));
          } else {
            write_pod<std::uint8_t>(out, 2);
            write_pod<std::uint64_t>(out, v.size());
            write_pod<std::uint64_t>(out, 1);
            out += v;
          }
        },
        values_[i]);
  }
  return out;
}

Archive Archive::from_bytes(const std::string& bytes) {
  Reader r(bytes);
  char magic[8];
  r.raw(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError("not a CAPI archive (bad magic)");
  const auto count = r.pod<std::uint64_t>();
  Archive a;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.pod<std::uint32_t>();
    std::string name(len, '\0');
    r.raw(name.data(), len);
    const auto kind = r.pod<std::uint8_t>();
    const auto rows = r.pod<std::uint64_t>();
    const auto cols = r.pod<std::uint64_t>();
    if (kind == 0) {
      Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      r.raw(m.data(), rows * cols * sizeof(double));
      a.put(name, std::move(m));
    } else if (kind == 1) {
      std::vector<std::int64_t> v(rows);
      r.raw(v.data(), rows * sizeof(std::int64_t));
      a.put(name, std::move(v));
    } else if (kind == 2) {
      std::string s(rows, '\0');
      r.raw(s.data(), rows);
      a.put(name, std::move(s));
    } else {
      throw IoError("archive entry '" + name + "' has unknown kind");
    }
  }
  if (!r.done()) throw IoError("archive has trailing bytes");
  return a;
}

void Archive::save(const std::filesystem::path& path) const {
  const std::string bytes = to_bytes();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + tmp + "' for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return from_bytes(ss.str());
}

}  // namespace capi
