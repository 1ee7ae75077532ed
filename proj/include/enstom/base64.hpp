#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "enstom/common.hpp"

namespace enstom {

inline std::string base64_encode(const void* data, std::size_t len) {
  static constexpr char tbl[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  const auto* p = static_cast<const unsigned char*>(data);
  std::string out;
  out.reserve((len + 2) / 3 * 4);
  for (std::size_t i = 0; i < len; i += 3) {
    unsigned v = unsigned(p[i]) << 16;
    if (i + 1 < len) v |= unsigned(p[i + 1]) << 8;
    if (i + 2 < len) v |= unsigned(p[i + 2]);
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += i + 1 < len ? tbl[(v >> 6) & 63] : '=';
    out += i + 2 < len ? tbl[v & 63] : '=';
  }
  return out;
}

inline std::vector<unsigned char> base64_decode(std::string_view s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    if (c == '=') return -1;
    throw DataError("invalid base64 character");
  };
  if (s.size() % 4 != 0) throw DataError("invalid base64 length");
  std::vector<unsigned char> out;
  out.reserve(s.size() / 4 * 3);
  for (std::size_t i = 0; i < s.size(); i += 4) {
    int a = val(s[i]), b = val(s[i + 1]), c = val(s[i + 2]), d = val(s[i + 3]);
    if (a < 0 || b < 0) throw DataError("invalid base64 padding");
    unsigned v = unsigned(a) << 18 | unsigned(b) << 12;
    out.push_back((v >> 16) & 0xff);
    if (c >= 0) {
      v |= unsigned(c) << 6;
      out.push_back((v >> 8) & 0xff);
      if (d >= 0) {
        v |= unsigned(d);
        out.push_back(v & 0xff);
      }
    }
  }
  return out;
}

}  // namespace enstom
