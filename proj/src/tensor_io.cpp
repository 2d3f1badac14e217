#include "aquafuse/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "aquafuse/errors.hpp"

namespace aquafuse {

namespace {

std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r = (r << 8) | ((v >> (8 * i)) & 0xff);
  return r;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out << "TNS " << t.rank();
  for (std::size_t e : t.shape()) out << ' ' << e;
  out << '\n';
  for (double v : t.data()) {
    const std::uint64_t bits = to_little_endian(std::bit_cast<std::uint64_t>(v));
    char buf[8];
    std::memcpy(buf, &bits, 8);
    out.write(buf, 8);
  }
}

Tensor read_tensor(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("tensor dump: missing header");
  std::istringstream hdr(line);
  std::string magic;
  std::size_t rank = 0;
  if (!(hdr >> magic >> rank) || magic != "TNS") throw FormatError("tensor dump: bad header '" + line + "'");
  Shape shape(rank);
  for (auto& e : shape)
    if (!(hdr >> e)) throw FormatError("tensor dump: header lists fewer extents than rank");
  std::vector<double> data(shape_size(shape));
  for (double& v : data) {
    char buf[8];
    if (!in.read(buf, 8)) throw FormatError("tensor dump: truncated payload");
    std::uint64_t bits;
    std::memcpy(&bits, buf, 8);
    v = std::bit_cast<double>(to_little_endian(bits));
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
  if (!out) throw IoError("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tensor(in);
}

}  // namespace aquafuse
