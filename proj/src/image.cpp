#include "armsight/image.hpp"

#include <openssl/evp.h>

#include <cctype>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace armsight {

std::size_t Mask::count() const {
  std::size_t n = 0;
  for (auto v : data) n += v != 0;
  return n;
}

double Mask::fraction() const {
  return data.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(data.size());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

namespace {

void write_netpbm(const std::filesystem::path& path, const char* magic, int w, int h,
                  const std::uint8_t* bytes, std::size_t size) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes), static_cast<std::streamsize>(size));
  if (!out) throw IoError("write failed for " + path.string());
}

struct NetpbmHeader {
  std::string magic;
  int width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

NetpbmHeader parse_netpbm(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  NetpbmHeader hdr;
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
    if (tok.empty()) throw IoError("truncated header in " + path.string());
    return tok;
  };
  try {
    hdr.magic = next_token();
    hdr.width = std::stoi(next_token());
    hdr.height = std::stoi(next_token());
    hdr.maxval = std::stoi(next_token());
  } catch (const std::logic_error&) {
    throw IoError("malformed header in " + path.string());
  }
  if (pos >= bytes.size()) throw IoError("missing pixel data in " + path.string());
  hdr.data_offset = pos + 1;  // single whitespace after maxval
  if (hdr.width <= 0 || hdr.height <= 0 || hdr.maxval != 255) {
    throw IoError("unsupported image geometry in " + path.string());
  }
  return hdr;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  write_netpbm(path, "P6", image.width, image.height, image.data.data(), image.data.size());
}

RgbImage read_ppm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto hdr = parse_netpbm(bytes, path);
  if (hdr.magic != "P6") throw IoError(path.string() + " is not a binary PPM (P6)");
  RgbImage img(hdr.width, hdr.height);
  if (bytes.size() - hdr.data_offset < img.data.size()) throw IoError("truncated pixel data in " + path.string());
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(hdr.data_offset), img.data.size(), img.data.begin());
  return img;
}

void write_pgm(const std::filesystem::path& path, const Mask& mask) {
  std::vector<std::uint8_t> bytes(mask.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.data[i] ? 255 : 0;
  write_netpbm(path, "P5", mask.width, mask.height, bytes.data(), bytes.size());
}

Mask read_pgm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto hdr = parse_netpbm(bytes, path);
  if (hdr.magic != "P5") throw IoError(path.string() + " is not a binary PGM (P5)");
  Mask m(hdr.width, hdr.height);
  if (bytes.size() - hdr.data_offset < m.data.size()) throw IoError("truncated pixel data in " + path.string());
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = bytes[hdr.data_offset + i] >= 128 ? 1 : 0;
  return m;
}

std::string sha256_hex(const std::uint8_t* data, std::size_t size) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), data, size) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw std::runtime_error("sha256 computation failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

std::string sha256_file(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace armsight
