#pragma once

#include <string>
#include <vector>

#include "mpmnet/tensor.hpp"

namespace mpmnet::data {

// Images in [0,1], labels 0-9.
struct ImageDataset {
    Tensor images;  // [n,c,h,w]
    std::vector<int> labels;
    std::string split;  // "train" or "test"

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
    Tensor image(std::int64_t i) const;               // [1,c,h,w]
    Tensor gather(const std::vector<std::int64_t>& idx) const;  // [m,c,h,w]
};

// MNIST IDX files: big-endian magic 0x803 (images) / 0x801 (labels).
ImageDataset load_mnist_idx(const std::string& images_path, const std::string& labels_path,
                            const std::string& split = "train");
void write_mnist_idx(const ImageDataset& ds, const std::string& images_path, const std::string& labels_path);

// CIFAR-10 binary batches: 3073-byte records, label byte + RGB planes.
ImageDataset load_cifar10_bin(const std::vector<std::string>& batch_paths, const std::string& split = "train");
void write_cifar10_bin(const ImageDataset& ds, const std::string& path);

// First n samples, order preserved.
ImageDataset subset(const ImageDataset& ds, std::int64_t n);

// One-vs-others relabeling; labels[i] is +1 (positive digit) or -1.
struct BinaryTask {
    const ImageDataset* ds = nullptr;
    int positive_digit = 0;
    std::vector<int> labels;

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
};

BinaryTask make_binary_task(const ImageDataset& ds, int positive_digit);

enum class StratifyMode { Balanced, Natural };

// Index batches; every batch carries >= 2 samples of each class. Balanced mode
// resamples the minority class to half of each batch and covers every
// majority-class sample exactly once per epoch.
std::vector<std::vector<std::int64_t>> stratified_batches(const BinaryTask& task, std::int64_t batch_size,
                                                          std::uint64_t seed,
                                                          StratifyMode mode = StratifyMode::Balanced);

}  // namespace mpmnet::data
