#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "qkdnet/bytes.hpp"
#include "qkdnet/crypto.hpp"

// Data-parallel inner loops. Every kernel has a serial reference that the
// tests compare the OpenMP version against, byte for byte.
namespace qkdnet::kernels {

using Histogram = std::array<std::uint64_t, 256>;

/// out[k] = rnd1[k] ^ rnd2[k] ^ pad[k % pad.size()] over flat buffers holding
/// n keys of pad.size() octets each. pad is the PSK already fitted to the key
/// length.
void xor_pairs_serial(ByteView rnd1, ByteView rnd2, ByteView pad, std::span<std::uint8_t> out);
void xor_pairs_parallel(ByteView rnd1, ByteView rnd2, ByteView pad, std::span<std::uint8_t> out);

/// Multi-path recombination of a whole block: KEY_i = kdf(rnd1_i, rnd2_i, psk).
/// The XOR KDF takes the flat xor_pairs path; other KDFs run per key.
std::vector<KeyMaterial> combine_block_serial(const crypto::Kdf& kdf,
                                              std::span<const KeyMaterial> rnd1,
                                              std::span<const KeyMaterial> rnd2,
                                              const crypto::Psk& psk);
std::vector<KeyMaterial> combine_block_parallel(const crypto::Kdf& kdf,
                                                std::span<const KeyMaterial> rnd1,
                                                std::span<const KeyMaterial> rnd2,
                                                const crypto::Psk& psk);

Histogram byte_histogram_serial(ByteView data);
Histogram byte_histogram_parallel(ByteView data);

/// Pearson statistic against the uniform distribution over 256 bins.
double chi_square_uniform(const Histogram& h);
/// Upper-tail p-value of a chi-square statistic with 255 degrees of freedom.
double chi_square_p_value(double statistic);

}  // namespace qkdnet::kernels
