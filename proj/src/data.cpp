#include "mpmnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace mpmnet::data {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

void put_be32(std::ofstream& f, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

}  // namespace

Tensor ImageDataset::image(std::int64_t i) const { return gather({i}); }

Tensor ImageDataset::gather(const std::vector<std::int64_t>& idx) const {
    const std::int64_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
    const std::int64_t stride = c * h * w;
    Tensor out({static_cast<std::int64_t>(idx.size()), c, h, w});
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] < 0 || idx[k] >= size()) throw DimensionError("dataset index out of range");
        std::memcpy(out.data() + static_cast<std::int64_t>(k) * stride, images.data() + idx[k] * stride,
                    static_cast<std::size_t>(stride) * sizeof(double));
    }
    return out;
}

ImageDataset load_mnist_idx(const std::string& images_path, const std::string& labels_path, const std::string& split) {
    auto ib = read_file(images_path);
    auto lb = read_file(labels_path);
    if (ib.size() < 16) throw FormatError("IDX image file too short: " + images_path);
    if (lb.size() < 8) throw FormatError("IDX label file too short: " + labels_path);
    if (be32(ib.data()) != kIdxImages)
        throw FormatError("bad IDX image magic in " + images_path);
    if (be32(lb.data()) != kIdxLabels)
        throw FormatError("bad IDX label magic in " + labels_path);
    const std::int64_t n = be32(ib.data() + 4), h = be32(ib.data() + 8), w = be32(ib.data() + 12);
    const std::int64_t nl = be32(lb.data() + 4);
    if (n != nl) throw FormatError("IDX image/label count mismatch");
    if (static_cast<std::int64_t>(ib.size()) != 16 + n * h * w)
        throw FormatError("truncated IDX image payload in " + images_path);
    if (static_cast<std::int64_t>(lb.size()) != 8 + n) throw FormatError("truncated IDX label payload in " + labels_path);

    ImageDataset ds;
    ds.split = split;
    ds.images = Tensor({n, 1, h, w});
    for (std::int64_t i = 0; i < n * h * w; ++i) ds.images[i] = ib[static_cast<std::size_t>(16 + i)] / 255.0;
    ds.labels.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) ds.labels[static_cast<std::size_t>(i)] = lb[static_cast<std::size_t>(8 + i)];
    return ds;
}

void write_mnist_idx(const ImageDataset& ds, const std::string& images_path, const std::string& labels_path) {
    const std::int64_t n = ds.size(), h = ds.images.dim(2), w = ds.images.dim(3);
    std::ofstream fi(images_path, std::ios::binary);
    if (!fi) throw FormatError("cannot write '" + images_path + "'");
    put_be32(fi, kIdxImages);
    put_be32(fi, static_cast<std::uint32_t>(n));
    put_be32(fi, static_cast<std::uint32_t>(h));
    put_be32(fi, static_cast<std::uint32_t>(w));
    for (std::int64_t i = 0; i < n * h * w; ++i)
        fi.put(static_cast<char>(static_cast<unsigned char>(std::lround(ds.images[i] * 255.0))));
    std::ofstream fl(labels_path, std::ios::binary);
    if (!fl) throw FormatError("cannot write '" + labels_path + "'");
    put_be32(fl, kIdxLabels);
    put_be32(fl, static_cast<std::uint32_t>(n));
    for (int l : ds.labels) fl.put(static_cast<char>(static_cast<unsigned char>(l)));
}

ImageDataset load_cifar10_bin(const std::vector<std::string>& batch_paths, const std::string& split) {
    constexpr std::int64_t kRecord = 3073, kPixels = 3072;
    std::vector<unsigned char> all;
    for (const auto& p : batch_paths) {
        auto b = read_file(p);
        if (b.size() % kRecord != 0)
            throw FormatError("CIFAR-10 file length " + std::to_string(b.size()) + " is not a multiple of 3073: " + p);
        all.insert(all.end(), b.begin(), b.end());
    }
    const std::int64_t n = static_cast<std::int64_t>(all.size()) / kRecord;
    ImageDataset ds;
    ds.split = split;
    ds.images = Tensor({n, 3, 32, 32});
    ds.labels.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const unsigned char* rec = all.data() + i * kRecord;
        ds.labels[static_cast<std::size_t>(i)] = rec[0];
        for (std::int64_t j = 0; j < kPixels; ++j) ds.images[i * kPixels + j] = rec[1 + j] / 255.0;
    }
    return ds;
}

void write_cifar10_bin(const ImageDataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot write '" + path + "'");
    const std::int64_t n = ds.size(), pixels = 3 * 32 * 32;
    for (std::int64_t i = 0; i < n; ++i) {
        f.put(static_cast<char>(static_cast<unsigned char>(ds.labels[static_cast<std::size_t>(i)])));
        for (std::int64_t j = 0; j < pixels; ++j)
            f.put(static_cast<char>(static_cast<unsigned char>(std::lround(ds.images[i * pixels + j] * 255.0))));
    }
}

ImageDataset subset(const ImageDataset& ds, std::int64_t n) {
    if (n >= ds.size() || n <= 0) return ds;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    ImageDataset out;
    out.split = ds.split;
    out.images = ds.gather(idx);
    out.labels.assign(ds.labels.begin(), ds.labels.begin() + n);
    return out;
}

BinaryTask make_binary_task(const ImageDataset& ds, int positive_digit) {
    if (positive_digit < 0 || positive_digit > 9) throw ConfigError("positive digit must be 0-9");
    BinaryTask t;
    t.ds = &ds;
    t.positive_digit = positive_digit;
    t.labels.reserve(ds.labels.size());
    std::int64_t pos = 0;
    for (int l : ds.labels) {
        t.labels.push_back(l == positive_digit ? +1 : -1);
        pos += (l == positive_digit);
    }
    if (pos == 0) throw TaskError("digit " + std::to_string(positive_digit) + " absent from the " + ds.split + " split");
    if (pos == ds.size()) throw TaskError("only digit " + std::to_string(positive_digit) + " present in the split");
    return t;
}

std::vector<std::vector<std::int64_t>> stratified_batches(const BinaryTask& task, std::int64_t batch_size,
                                                          std::uint64_t seed, StratifyMode mode) {
    if (batch_size < 4) throw ConfigError("batch size must be >= 4");
    std::vector<std::int64_t> pos, neg;
    for (std::int64_t i = 0; i < task.size(); ++i)
        (task.labels[static_cast<std::size_t>(i)] > 0 ? pos : neg).push_back(i);
    if (pos.size() < 2 || neg.size() < 2) throw TaskError("each class needs at least 2 samples");

    std::mt19937_64 rng(seed);
    std::vector<std::int64_t>& maj = pos.size() >= neg.size() ? pos : neg;
    std::vector<std::int64_t>& min_ = pos.size() >= neg.size() ? neg : pos;
    std::shuffle(maj.begin(), maj.end(), rng);
    std::shuffle(min_.begin(), min_.end(), rng);

    std::vector<std::vector<std::int64_t>> batches;
    if (mode == StratifyMode::Balanced) {
        const std::int64_t half = batch_size / 2;
        std::size_t mcursor = 0;
        for (std::size_t start = 0; start < maj.size(); start += static_cast<std::size_t>(half)) {
            std::size_t end = std::min(maj.size(), start + static_cast<std::size_t>(half));
            std::vector<std::int64_t> b(maj.begin() + static_cast<std::ptrdiff_t>(start),
                                        maj.begin() + static_cast<std::ptrdiff_t>(end));
            const std::size_t nmin = std::max<std::size_t>(2, b.size());
            for (std::size_t k = 0; k < nmin; ++k) {
                if (mcursor == min_.size()) {
                    std::shuffle(min_.begin(), min_.end(), rng);
                    mcursor = 0;
                }
                b.push_back(min_[mcursor++]);
            }
            batches.push_back(std::move(b));
        }
        // a tail of one majority sample cannot form per-class statistics; merge it
        if (batches.size() >= 2) {
            auto count_maj = [&](const std::vector<std::int64_t>& b) {
                std::int64_t c = 0;
                for (auto i : b) c += (task.labels[static_cast<std::size_t>(i)] > 0) == (pos.size() >= neg.size());
                return c;
            };
            if (count_maj(batches.back()) < 2) {
                auto tail = std::move(batches.back());
                batches.pop_back();
                batches.back().insert(batches.back().end(), tail.begin(), tail.end());
            }
        }
    } else {
        // natural ratio: deal each class round-robin across batches
        const std::int64_t nb = std::max<std::int64_t>(1, (task.size() + batch_size - 1) / batch_size);
        batches.assign(static_cast<std::size_t>(nb), {});
        std::size_t bi = 0;
        for (auto i : maj) batches[bi++ % static_cast<std::size_t>(nb)].push_back(i);
        for (auto i : min_) batches[bi++ % static_cast<std::size_t>(nb)].push_back(i);
        for (auto& b : batches) {
            std::int64_t p = 0, n = 0;
            for (auto i : b) (task.labels[static_cast<std::size_t>(i)] > 0 ? p : n)++;
            if (p < 2 || n < 2)
                throw TaskError("natural stratification cannot give every batch 2 samples per class");
            std::shuffle(b.begin(), b.end(), rng);
        }
    }
    return batches;
}

}  // namespace mpmnet::data
