// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/digest.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdio>

#include "evimelody/errors.hpp"

namespace evimelody {

std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 computation failed");
  }
  std::string hex;
  hex.reserve(2 * len);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

}  // namespace evimelody
