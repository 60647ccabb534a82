#pragma once

// Dataset ingestion and the training-time augmentation: CIFAR-10 binary
// batches, padded random-crop plus horizontal flip, and a synthetic
// Gaussian-template task for fast end-to-end runs.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "resrep/tensor.hpp"

namespace resrep {

template <typename Scalar>
struct Dataset {
  Tensor4<Scalar> images;
  std::vector<int> labels;
  std::string split;
  VectorX<Scalar> channel_mean;  // applied at load time, kept for checkpoints
  VectorX<Scalar> channel_std;
  Index num_classes = 10;

  Index size() const { return images.n(); }
};

inline constexpr std::array<double, 3> kCifar10Mean{0.4914, 0.4822, 0.4465};
inline constexpr std::array<double, 3> kCifar10Std{0.2470, 0.2435, 0.2616};

namespace detail {

inline constexpr std::size_t kCifarRecordBytes = 3073;  // label + 3*32*32

inline std::vector<unsigned char> read_cifar_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  require(bool(in), "cannot open " + file.string());
  std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>()};
  const std::size_t tail = bytes.size() % kCifarRecordBytes;
  require(!bytes.empty() && tail == 0,
          file.string() + ": incomplete record at byte " +
              std::to_string(bytes.size() - tail) + " (file holds " +
              std::to_string(bytes.size()) + " bytes, records are " +
              std::to_string(kCifarRecordBytes) + ")");
  return bytes;
}

}  // namespace detail

/// Load the standard binary batches from `dir`: data_batch_1..5.bin for
/// "train", test_batch.bin for "test". Pixels are scaled to [0,1] and then
/// standardized per channel.
template <typename Scalar = float>
Dataset<Scalar> load_cifar10(const std::filesystem::path& dir, const std::string& split) {
  require(split == "train" || split == "test", "split must be train or test, got " + split);
  std::vector<std::filesystem::path> files;
  if (split == "train") {
    for (int i = 1; i <= 5; ++i)
      files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }

  std::vector<unsigned char> bytes;
  for (const auto& f : files) {
    auto part = detail::read_cifar_file(f);
    bytes.insert(bytes.end(), part.begin(), part.end());
  }
  const Index n = Index(bytes.size() / detail::kCifarRecordBytes);

  Dataset<Scalar> out;
  out.split = split;
  out.num_classes = 10;
  out.channel_mean = VectorX<Scalar>(3);
  out.channel_std = VectorX<Scalar>(3);
  for (Index c = 0; c < 3; ++c) {
    out.channel_mean[c] = Scalar(kCifar10Mean[std::size_t(c)]);
    out.channel_std[c] = Scalar(kCifar10Std[std::size_t(c)]);
  }

  out.images = Tensor4<Scalar>(n, 3, 32, 32);
  out.labels.resize(std::size_t(n));
  const unsigned char* rec = bytes.data();
  for (Index i = 0; i < n; ++i, rec += detail::kCifarRecordBytes) {
    const int label = int(rec[0]);
    require(label < 10, "record " + std::to_string(i) + ": label byte " +
                            std::to_string(label) + " out of range");
    out.labels[std::size_t(i)] = label;
    const unsigned char* px = rec + 1;
    for (Index c = 0; c < 3; ++c) {
      const Scalar mean = out.channel_mean[c];
      const Scalar inv_std = Scalar(1) / out.channel_std[c];
      for (Index y = 0; y < 32; ++y) {
        for (Index x = 0; x < 32; ++x) {
          const Scalar v = Scalar(*px++) / Scalar(255);
          out.images.at(i, c, y, x) = (v - mean) * inv_std;
        }
      }
    }
  }
  return out;
}

/// Copy one 32x32 sample through the zero-pad-to-40 / crop-at-(dy,dx) /
/// optional-mirror pipeline. Offsets (4,4) with no flip reproduce the input.
template <typename Scalar>
void shift_flip(const Tensor4<Scalar>& in, Index sample, Index dy, Index dx, bool flip,
                Tensor4<Scalar>& out, Index out_sample) {
  require(in.h() == 32 && in.w() == 32, "augmentation expects 32x32 inputs, got " +
                                            in.dims().str());
  require(out.c() == in.c() && out.h() == 32 && out.w() == 32,
          "augmentation output shape mismatch: " + out.dims().str());
  require(dy >= 0 && dy <= 8 && dx >= 0 && dx <= 8, "crop offsets must lie in [0,8]");
  for (Index c = 0; c < in.c(); ++c) {
    for (Index y = 0; y < 32; ++y) {
      const Index sy = y + dy - 4;
      for (Index x = 0; x < 32; ++x) {
        const Index sx = (flip ? 31 - x : x) + dx - 4;
        const bool inside = sy >= 0 && sy < 32 && sx >= 0 && sx < 32;
        out.at(out_sample, c, y, x) = inside ? in.at(sample, c, sy, sx) : Scalar(0);
      }
    }
  }
}

/// Training-time augmentation over a whole batch; draws (dy, dx, flip) per
/// sample in order. Evaluation never calls this.
template <typename Scalar>
Tensor4<Scalar> augment(const Tensor4<Scalar>& batch, std::mt19937& rng) {
  Tensor4<Scalar> out(batch.n(), batch.c(), batch.h(), batch.w());
  std::uniform_int_distribution<int> offset(0, 8);
  std::uniform_int_distribution<int> coin(0, 1);
  for (Index i = 0; i < batch.n(); ++i) {
    const Index dy = offset(rng);
    const Index dx = offset(rng);
    const bool flip = coin(rng) == 1;
    shift_flip(batch, i, dy, dx, flip, out, i);
  }
  return out;
}

struct SyntheticOptions {
  Index channels = 3, h = 16, w = 16;
  double noise = 0.3;
};

/// Gaussian class-template images plus per-sample noise; linearly separable
/// at moderate noise. Labels cycle through the classes so priors are uniform
/// to within one example.
template <typename Scalar = float>
Dataset<Scalar> make_synthetic(Index num_classes, Index n, std::uint32_t seed,
                               const SyntheticOptions& opt = {}) {
  require(num_classes >= 1, "need at least one class");
  require(n >= num_classes, "need at least one example per class");
  std::mt19937 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);

  Tensor4<Scalar> templates(num_classes, opt.channels, opt.h, opt.w);
  for (Index i = 0; i < templates.raw().size(); ++i) templates.raw()[i] = Scalar(unit(rng));

  Dataset<Scalar> out;
  out.split = "synthetic";
  out.num_classes = num_classes;
  out.channel_mean = VectorX<Scalar>::Zero(opt.channels);
  out.channel_std = VectorX<Scalar>::Ones(opt.channels);
  out.images = Tensor4<Scalar>(n, opt.channels, opt.h, opt.w);
  out.labels.resize(std::size_t(n));
  for (Index i = 0; i < n; ++i) {
    const int label = int(i % num_classes);
    out.labels[std::size_t(i)] = label;
    auto dst = out.images.sample_view(i);
    dst = templates.sample_view(label);
    for (Index r = 0; r < dst.rows(); ++r)
      for (Index col = 0; col < dst.cols(); ++col)
        dst(r, col) += Scalar(opt.noise * unit(rng));
  }
  return out;
}

/// Stateless seed mixer for per-(epoch, batch) rng streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t epoch, std::uint64_t batch) {
  auto mix = [](std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  };
  return mix(mix(mix(base) ^ epoch) ^ batch);
}

/// Deterministic Fisher-Yates permutation of [0, n).
inline std::vector<Index> shuffled_indices(Index n, std::uint64_t seed) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[std::size_t(i)] = i;
  std::mt19937_64 rng(seed);
  for (Index i = 0; i + 1 < n; ++i) {
    const Index j = i + Index(rng() % std::uint64_t(n - i));
    std::swap(order[std::size_t(i)], order[std::size_t(j)]);
  }
  return order;
}

/// Materialize samples order[begin, begin+count) as a contiguous batch.
template <typename Scalar>
std::pair<Tensor4<Scalar>, std::vector<int>> take_batch(const Dataset<Scalar>& data,
                                                        const std::vector<Index>& order,
                                                        Index begin, Index count) {
  require(begin >= 0 && count >= 1 && std::size_t(begin + count) <= order.size(),
          "batch range out of bounds");
  Tensor4<Scalar> images(count, data.images.c(), data.images.h(), data.images.w());
  std::vector<int> labels(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    const Index src = order[std::size_t(begin + i)];
    images.sample_view(i) = data.images.sample_view(src);
    labels[std::size_t(i)] = data.labels[std::size_t(src)];
  }
  return {std::move(images), std::move(labels)};
}

}  // namespace resrep
