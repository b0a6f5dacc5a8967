// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multimodal parity task. Each modality carries one latent bit,
// encoded redundantly and noisily in all of its tokens; the label is the
// XOR of the bits. Any single modality is independent of the label, so a
// readout that only adds per-modality features cannot beat chance.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "locomt/io.hpp"
#include "locomt/model.hpp"
#include "locomt/numerics.hpp"

namespace locomt {

struct DatasetSpec {
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> feature_dims;
  std::size_t samples = 0;
  double signal = 1.0;
  double noise = 1.0;

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct Dataset {
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> feature_dims;
  std::uint64_t seed = 0;
  std::vector<Sample> samples;
};

/// Fixed +-1 code vector per modality; token t of a sample with bit b is
/// signal * (2b - 1) * code + noise * N(0, 1).
inline Dataset generate_parity_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.lengths.empty() || spec.lengths.size() != spec.feature_dims.size())
    throw ConfigError("dataset needs matching lengths and feature_dims");
  const std::size_t m = spec.lengths.size();
  Rng code_rng = Rng::derive(seed, 10);
  std::vector<std::vector<double>> codes(m);
  for (std::size_t k = 0; k < m; ++k)
    for (std::size_t f = 0; f < spec.feature_dims[k]; ++f)
      codes[k].push_back((code_rng.next_u64() & 1) ? 1.0 : -1.0);

  Dataset ds{spec.lengths, spec.feature_dims, seed, {}};
  ds.samples.reserve(spec.samples);
  Rng rng = Rng::derive(seed, 11);
  for (std::size_t n = 0; n < spec.samples; ++n) {
    Sample s;
    std::size_t parity = 0;
    std::vector<int> bits(m);
    for (std::size_t k = 0; k < m; ++k) {
      bits[k] = static_cast<int>(rng.next_u64() & 1);
      parity ^= static_cast<std::size_t>(bits[k]);
    }
    for (std::size_t k = 0; k < m; ++k) {
      Tensor x({spec.lengths[k], spec.feature_dims[k]});
      const double sign = bits[k] ? 1.0 : -1.0;
      for (std::size_t t = 0; t < spec.lengths[k]; ++t)
        for (std::size_t f = 0; f < spec.feature_dims[k]; ++f)
          x(t, f) = spec.signal * sign * codes[k][f] + spec.noise * rng.normal();
      s.inputs.push_back(std::move(x));
    }
    s.label = parity;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// File layout (little-endian):
//   "LCMTDATA" u8 version(=1) u32 m  u32 lengths[m]  u32 feature_dims[m]
//   u64 sample_count  u64 seed
//   per sample: u32 label, then f64 features of modality 0..m-1, row-major.

inline constexpr std::string_view kDatasetMagic = "LCMTDATA";
inline constexpr std::uint8_t kDatasetVersion = 1;

inline std::string encode_dataset(const Dataset& ds) {
  std::string out(kDatasetMagic);
  io::put_u8(out, kDatasetVersion);
  io::put_u32(out, static_cast<std::uint32_t>(ds.lengths.size()));
  for (auto l : ds.lengths) io::put_u32(out, static_cast<std::uint32_t>(l));
  for (auto f : ds.feature_dims) io::put_u32(out, static_cast<std::uint32_t>(f));
  io::put_u64(out, ds.samples.size());
  io::put_u64(out, ds.seed);
  for (const auto& s : ds.samples) {
    io::put_u32(out, static_cast<std::uint32_t>(s.label));
    for (const auto& x : s.inputs)
      for (double v : x.data()) io::put_f64(out, v);
  }
  return out;
}

inline Dataset decode_dataset(std::string_view bytes) {
  io::Reader in(bytes);
  if (in.take(kDatasetMagic.size()) != kDatasetMagic)
    throw io::FormatError("not a dataset file (bad magic)");
  if (const auto v = in.u8(); v != kDatasetVersion)
    throw io::FormatError("unsupported dataset version " + std::to_string(v));
  Dataset ds;
  const std::uint32_t m = in.u32();
  if (m == 0) throw io::FormatError("dataset declares zero modalities");
  for (std::uint32_t k = 0; k < m; ++k) ds.lengths.push_back(in.u32());
  for (std::uint32_t k = 0; k < m; ++k) ds.feature_dims.push_back(in.u32());
  const std::uint64_t count = in.u64();
  ds.seed = in.u64();
  for (std::uint64_t n = 0; n < count; ++n) {
    Sample s;
    s.label = in.u32();
    for (std::uint32_t k = 0; k < m; ++k) {
      Tensor x({ds.lengths[k], ds.feature_dims[k]});
      for (double& v : x.data()) v = in.f64();
      s.inputs.push_back(std::move(x));
    }
    ds.samples.push_back(std::move(s));
  }
  if (!in.done()) throw io::FormatError("trailing bytes after dataset records");
  return ds;
}

inline void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  io::write_file_atomic(path, encode_dataset(ds));
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  return decode_dataset(io::read_file(path));
}

}  // namespace locomt
