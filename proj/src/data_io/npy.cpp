#include <bit>
#include <cstring>
#include <fstream>
#include <regex>
#include <sstream>

#include "fcbgan/data_io/data_io.hpp"

namespace fcbgan {

static_assert(std::endian::native == std::endian::little, "payloads are written in host byte order");

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream os;
  os << in.rdbuf();
  if (in.bad()) throw IoError("error reading '" + path + "'");
  return os.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("error writing '" + path + "'");
}

void write_npy(const Tensor& t, const std::string& path) {
  std::string shape;
  for (std::size_t i = 0; i < t.rank(); ++i) shape += (i ? ", " : "") + std::to_string(t.dim(i));
  if (t.rank() == 1) shape += ',';
  std::string header = std::string("{'descr': '") + (t.dtype() == DType::f32 ? "<f4" : "<f8") +
                       "', 'fortran_order': False, 'shape': (" + shape + "), }";
  // magic (6) + version (2) + length (2) + header, padded to a multiple of 64 with a trailing newline
  const std::size_t total = (10 + header.size() + 1 + 63) / 64 * 64;
  header.append(total - 10 - header.size() - 1, ' ');
  header += '\n';

  std::string bytes = "\x93NUMPY";
  bytes += '\x01';
  bytes += '\x00';
  const auto len = static_cast<std::uint16_t>(header.size());
  bytes += static_cast<char>(len & 0xff);
  bytes += static_cast<char>(len >> 8);
  bytes += header;
  dispatch(t.dtype(), [&]<class T>() {
    auto d = t.data<T>();
    bytes.append(reinterpret_cast<const char*>(d.data()), d.size_bytes());
  });
  write_file(path, bytes);
}

Tensor read_npy(const std::string& path) {
  const std::string bytes = read_file(path);
  auto fail = [&](const std::string& why) { return IoError("'" + path + "' is not a supported .npy file: " + why); };
  if (bytes.size() < 10 || bytes.compare(0, 6, "\x93NUMPY") != 0) throw fail("bad magic");
  const auto major = static_cast<std::uint8_t>(bytes[6]);
  std::size_t header_len = 0, offset = 0;
  if (major == 1) {
    header_len = static_cast<std::uint8_t>(bytes[8]) | (static_cast<std::size_t>(static_cast<std::uint8_t>(bytes[9])) << 8);
    offset = 10;
  } else if (major == 2 || major == 3) {
    if (bytes.size() < 12) throw fail("truncated header");
    for (int i = 0; i < 4; ++i) header_len |= static_cast<std::size_t>(static_cast<std::uint8_t>(bytes[8 + i])) << (8 * i);
    offset = 12;
  } else {
    throw fail("format version " + std::to_string(major));
  }
  if (bytes.size() < offset + header_len) throw fail("truncated header");
  const std::string header = bytes.substr(offset, header_len);

  std::smatch m;
  if (!std::regex_search(header, m, std::regex(R"('descr'\s*:\s*'([^']*)')"))) throw fail("no descr");
  const std::string descr = m[1];
  DType dtype;
  if (descr == "<f4") {
    dtype = DType::f32;
  } else if (descr == "<f8") {
    dtype = DType::f64;
  } else {
    throw fail("dtype " + descr + " (need <f4 or <f8)");
  }
  if (!std::regex_search(header, m, std::regex(R"('fortran_order'\s*:\s*(True|False))"))) throw fail("no fortran_order");
  if (m[1] == "True") throw fail("Fortran order");
  if (!std::regex_search(header, m, std::regex(R"('shape'\s*:\s*\(([^)]*)\))"))) throw fail("no shape");
  Shape shape;
  const std::string dims = m[1];
  const std::regex digits(R"(\d+)");
  for (std::sregex_iterator it(dims.begin(), dims.end(), digits), end; it != end; ++it) {
    shape.push_back(std::stoll(it->str()));
  }
  if (shape.empty() || shape.size() > 4) throw fail("rank " + std::to_string(shape.size()) + " (need 1..4)");

  Tensor t = Tensor::uninitialized(shape, dtype);
  dispatch(dtype, [&]<class T>() {
    auto d = t.data<T>();
    if (bytes.size() != offset + header_len + d.size_bytes()) throw fail("payload size does not match shape");
    std::memcpy(d.data(), bytes.data() + offset + header_len, d.size_bytes());
  });
  return t;
}

}  // namespace fcbgan
