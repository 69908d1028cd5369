#include "qkdnet/kernels.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <cstddef>
#include <typeinfo>

namespace qkdnet::kernels {

namespace {

void check_pairs(ByteView rnd1, ByteView rnd2, ByteView pad, std::span<std::uint8_t> out) {
  if (rnd1.size() != rnd2.size() || rnd1.size() != out.size())
    throw crypto::CryptoError("xor_pairs: buffer length mismatch");
  if (pad.empty() || rnd1.size() % pad.size() != 0)
    throw crypto::CryptoError("xor_pairs: buffers are not a whole number of keys");
}

Bytes fitted_pad(const crypto::Psk& psk, std::size_t key_len) {
  Bytes pad(key_len, 0);
  for (std::size_t i = 0; i < key_len && i < psk.bytes().size(); ++i) pad[i] = psk.bytes()[i];
  return pad;
}

bool is_xor(const crypto::Kdf& kdf) { return typeid(kdf) == typeid(crypto::XorKdf); }

struct Flat {
  Bytes a, b;
  std::size_t key_len = 0;
};

Flat flatten(std::span<const KeyMaterial> rnd1, std::span<const KeyMaterial> rnd2) {
  if (rnd1.size() != rnd2.size()) throw crypto::CryptoError("combine_block: block size mismatch");
  Flat f;
  if (rnd1.empty()) return f;
  f.key_len = rnd1.front().size();
  f.a.reserve(rnd1.size() * f.key_len);
  f.b.reserve(rnd1.size() * f.key_len);
  for (std::size_t i = 0; i < rnd1.size(); ++i) {
    if (rnd1[i].size() != f.key_len || rnd2[i].size() != f.key_len)
      throw crypto::CryptoError("combine_block: key length mismatch");
    f.a.insert(f.a.end(), rnd1[i].bytes().begin(), rnd1[i].bytes().end());
    f.b.insert(f.b.end(), rnd2[i].bytes().begin(), rnd2[i].bytes().end());
  }
  return f;
}

std::vector<KeyMaterial> unflatten(const Bytes& flat, std::size_t key_len) {
  std::vector<KeyMaterial> out;
  if (key_len == 0) return out;
  out.reserve(flat.size() / key_len);
  for (std::size_t off = 0; off < flat.size(); off += key_len)
    out.emplace_back(Bytes(flat.begin() + static_cast<std::ptrdiff_t>(off),
                           flat.begin() + static_cast<std::ptrdiff_t>(off + key_len)));
  return out;
}

}  // namespace

void xor_pairs_serial(ByteView rnd1, ByteView rnd2, ByteView pad, std::span<std::uint8_t> out) {
  check_pairs(rnd1, rnd2, pad, out);
  const std::size_t w = pad.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = rnd1[i] ^ rnd2[i] ^ pad[i % w];
}

void xor_pairs_parallel(ByteView rnd1, ByteView rnd2, ByteView pad, std::span<std::uint8_t> out) {
  check_pairs(rnd1, rnd2, pad, out);
  const std::size_t w = pad.size();
  const auto n = static_cast<std::ptrdiff_t>(out.size() / w);
  const std::uint8_t* a = rnd1.data();
  const std::uint8_t* b = rnd2.data();
  const std::uint8_t* p = pad.data();
  std::uint8_t* o = out.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t k = 0; k < n; ++k) {
    const std::size_t base = static_cast<std::size_t>(k) * w;
#pragma omp simd
    for (std::size_t j = 0; j < w; ++j) o[base + j] = a[base + j] ^ b[base + j] ^ p[j];
  }
}

std::vector<KeyMaterial> combine_block_serial(const crypto::Kdf& kdf,
                                              std::span<const KeyMaterial> rnd1,
                                              std::span<const KeyMaterial> rnd2,
                                              const crypto::Psk& psk) {
  if (rnd1.size() != rnd2.size()) throw crypto::CryptoError("combine_block: block size mismatch");
  std::vector<KeyMaterial> out;
  out.reserve(rnd1.size());
  for (std::size_t i = 0; i < rnd1.size(); ++i) out.push_back(kdf.combine(rnd1[i], rnd2[i], psk));
  return out;
}

std::vector<KeyMaterial> combine_block_parallel(const crypto::Kdf& kdf,
                                                std::span<const KeyMaterial> rnd1,
                                                std::span<const KeyMaterial> rnd2,
                                                const crypto::Psk& psk) {
  if (is_xor(kdf)) {
    auto flat = flatten(rnd1, rnd2);
    if (flat.key_len == 0) return {};
    Bytes out(flat.a.size());
    xor_pairs_parallel(flat.a, flat.b, fitted_pad(psk, flat.key_len), out);
    return unflatten(out, flat.key_len);
  }
  if (rnd1.size() != rnd2.size()) throw crypto::CryptoError("combine_block: block size mismatch");
  std::vector<KeyMaterial> out(rnd1.size());
  const auto n = static_cast<std::ptrdiff_t>(rnd1.size());
  // Kdf implementations are stateless; exceptions must not cross the region.
  std::vector<int> failed(rnd1.size(), 0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      out[static_cast<std::size_t>(i)] =
          kdf.combine(rnd1[static_cast<std::size_t>(i)], rnd2[static_cast<std::size_t>(i)], psk);
    } catch (...) {
      failed[static_cast<std::size_t>(i)] = 1;
    }
  }
  for (int f : failed)
    if (f) throw crypto::CryptoError("combine_block: kdf failed");
  return out;
}

Histogram byte_histogram_serial(ByteView data) {
  Histogram h{};
  for (auto b : data) ++h[b];
  return h;
}

Histogram byte_histogram_parallel(ByteView data) {
  Histogram h{};
  const auto n = static_cast<std::ptrdiff_t>(data.size());
  const std::uint8_t* d = data.data();
#pragma omp parallel
  {
    Histogram local{};
#pragma omp for schedule(static) nowait
    for (std::ptrdiff_t i = 0; i < n; ++i) ++local[d[i]];
#pragma omp critical
    for (std::size_t k = 0; k < 256; ++k) h[k] += local[k];
  }
  return h;
}

double chi_square_uniform(const Histogram& h) {
  std::uint64_t total = 0;
  for (auto c : h) total += c;
  if (total == 0) return 0.0;
  const double expected = static_cast<double>(total) / 256.0;
  double stat = 0.0;
  for (auto c : h) {
    const double d = static_cast<double>(c) - expected;
    stat += d * d / expected;
  }
  return stat;
}

double chi_square_p_value(double statistic) {
  boost::math::chi_squared dist(255.0);
  return boost::math::cdf(boost::math::complement(dist, statistic));
}

}  // namespace qkdnet::kernels
