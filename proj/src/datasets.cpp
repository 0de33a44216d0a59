#include "ba2/datasets.hpp"

#include <cmath>
#include <fstream>

#include "ba2/common.hpp"

namespace ba2 {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f),
                                   std::istreambuf_iterator<char>());
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  if (at + 4 > b.size()) throw DataError("IDX header truncated");
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) |
         (std::uint32_t(b[at + 2]) << 8) | std::uint32_t(b[at + 3]);
}

void check_labels(const std::vector<int>& labels, int classes) {
  if (classes < 2) throw DataError("dataset needs at least 2 classes");
  for (int l : labels)
    if (l < 0 || l >= classes)
      throw DataError("label " + std::to_string(l) + " outside [0, " +
                      std::to_string(classes) + ")");
}

float norm_px(std::uint8_t v, float mean, float sd) {
  return (static_cast<float>(v) / 255.0f - mean) / sd;
}

}  // namespace

Dataset parse_idx(const std::vector<std::uint8_t>& images,
                  const std::vector<std::uint8_t>& labels, int classes, float mean, float sd) {
  if (be32(images, 0) != 0x00000803u)
    throw DataError("IDX image magic mismatch (want 0x00000803)");
  if (be32(labels, 0) != 0x00000801u)
    throw DataError("IDX label magic mismatch (want 0x00000801)");
  const std::uint32_t n = be32(images, 4), h = be32(images, 8), w = be32(images, 12);
  const std::uint32_t nl = be32(labels, 4);
  if (n != nl)
    throw DataError("IDX image count " + std::to_string(n) + " != label count " +
                    std::to_string(nl));
  const std::size_t want = 16 + static_cast<std::size_t>(n) * h * w;
  if (images.size() != want) throw DataError("IDX image payload truncated");
  if (labels.size() != 8 + static_cast<std::size_t>(n)) throw DataError("IDX labels truncated");

  Dataset ds;
  ds.classes = classes;
  ds.images = Tensor4<float>(static_cast<int>(n), static_cast<int>(h), static_cast<int>(w), 1);
  for (std::size_t i = 0; i < static_cast<std::size_t>(n) * h * w; ++i)
    ds.images.v[i] = norm_px(images[16 + i], mean, sd);
  ds.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) ds.labels[i] = labels[8 + i];
  check_labels(ds.labels, classes);
  return ds;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path, int classes,
                 float mean, float sd) {
  Dataset ds = parse_idx(read_file(images_path), read_file(labels_path), classes, mean, sd);
  ds.name = images_path;
  return ds;
}

Dataset parse_cifar(const std::vector<std::uint8_t>& bytes, int classes, float mean, float sd) {
  constexpr std::size_t kRecord = 3073;  // label + 3 channel planes of 32x32
  if (bytes.empty() || bytes.size() % kRecord != 0)
    throw DataError("CIFAR binary size " + std::to_string(bytes.size()) +
                    " is not a multiple of 3073");
  const int n = static_cast<int>(bytes.size() / kRecord);
  Dataset ds;
  ds.classes = classes;
  ds.images = Tensor4<float>(n, 32, 32, 3);
  ds.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * kRecord;
    ds.labels[static_cast<std::size_t>(i)] = bytes[base];
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
          ds.images.at(i, y, x, ch) =
              norm_px(bytes[base + 1 + static_cast<std::size_t>(ch) * 1024 + y * 32 + x],
                      mean, sd);
  }
  check_labels(ds.labels, classes);
  return ds;
}

Dataset load_cifar(const std::vector<std::string>& paths, int classes, float mean, float sd) {
  std::vector<std::uint8_t> all;
  for (const std::string& p : paths) {
    std::vector<std::uint8_t> b = read_file(p);
    all.insert(all.end(), b.begin(), b.end());
  }
  Dataset ds = parse_cifar(all, classes, mean, sd);
  ds.name = paths.empty() ? "cifar" : paths[0];
  return ds;
}

Dataset synth_dataset(const std::string& family, std::uint64_t seed, int count, int h, int w) {
  if (count < 1 || h < 4 || w < 4) throw DataError("synth_dataset: degenerate size");
  int kind;
  if (family == "gratings")
    kind = 0;
  else if (family == "checkers")
    kind = 1;
  else if (family == "rings")
    kind = 2;
  else
    throw DataError("synth_dataset: unknown family '" + family + "'");

  const int classes = 4;
  Rng rng(derive_seed(seed, "synth:" + family));
  Dataset ds;
  ds.name = family;
  ds.classes = classes;
  ds.images = Tensor4<float>(count, h, w, 1);
  ds.labels.resize(static_cast<std::size_t>(count));

  for (int i = 0; i < count; ++i) {
    const int label = i % classes;  // balanced
    ds.labels[static_cast<std::size_t>(i)] = label;
    const double phase = rng.uniform(0.0, 2.0 * kPi);
    const double amp = rng.uniform(0.7, 1.0);
    const double jy = rng.uniform(-1.0, 1.0), jx = rng.uniform(-1.0, 1.0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = 0.0;
        if (kind == 0) {  // gratings: orientation = label>>1, frequency = label&1
          const double cycles = (label & 1) ? 4.0 : 2.0;
          const double t = (label >> 1) ? static_cast<double>(x) / w
                                        : static_cast<double>(y) / h;
          v = std::sin(2.0 * kPi * cycles * t + phase);
        } else if (kind == 1) {  // checkers: cell size per class
          static const int cells[] = {2, 3, 4, 6};
          const int cell = cells[label];
          const int oy = static_cast<int>(std::floor(phase)) % cell;
          const int ox = static_cast<int>(std::floor(phase * 3)) % cell;
          v = (((y + oy) / cell + (x + ox) / cell) % 2 == 0) ? 1.0 : -1.0;
        } else {  // rings: radial frequency per class
          static const double freqs[] = {1.0, 1.75, 2.5, 3.25};
          const double cy = (h - 1) / 2.0 + jy, cx = (w - 1) / 2.0 + jx;
          const double r = std::hypot(y - cy, x - cx) / (0.5 * std::hypot(h, w));
          v = std::cos(2.0 * kPi * freqs[label] * r + phase);
        }
        ds.images.at(i, y, x, 0) =
            static_cast<float>(amp * v + rng.normal(0.0, 0.15));
      }
  }

  // Shuffle so labels are not periodic in sample order.
  std::vector<int> order(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  Dataset out = ds;
  for (int i = 0; i < count; ++i) {
    const int src = order[static_cast<std::size_t>(i)];
    out.labels[static_cast<std::size_t>(i)] = ds.labels[static_cast<std::size_t>(src)];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.images.at(i, y, x, 0) = ds.images.at(src, y, x, 0);
  }
  return out;
}

namespace {

Dataset take(const Dataset& ds, int start, int count, const char* part) {
  if (count < 1) throw DataError(std::string("split: ") + part + " split must be nonempty");
  if (start + count > ds.count()) throw DataError("split exceeds dataset size");
  Dataset out;
  out.name = ds.name + "/" + part;
  out.classes = ds.classes;
  out.images = Tensor4<float>(count, ds.images.h, ds.images.w, ds.images.c);
  out.labels.resize(static_cast<std::size_t>(count));
  const std::size_t plane = static_cast<std::size_t>(ds.images.h) * ds.images.w * ds.images.c;
  for (int i = 0; i < count; ++i) {
    std::copy(ds.images.v.begin() + static_cast<std::ptrdiff_t>((start + i) * plane),
              ds.images.v.begin() + static_cast<std::ptrdiff_t>((start + i + 1) * plane),
              out.images.v.begin() + static_cast<std::ptrdiff_t>(i * plane));
    out.labels[static_cast<std::size_t>(i)] = ds.labels[static_cast<std::size_t>(start + i)];
  }
  return out;
}

}  // namespace

DomainData split_domain(const Dataset& ds, int train, int val, int test) {
  if (train + val + test > ds.count())
    throw DataError("split_domain: " + std::to_string(train + val + test) +
                    " samples requested, dataset has " + std::to_string(ds.count()));
  DomainData d;
  d.name = ds.name;
  d.classes = ds.classes;
  d.train = take(ds, 0, train, "train");
  d.val = take(ds, train, val, "val");
  d.test = take(ds, train + val, test, "test");
  return d;
}

Tensor4<float> mirror_h(const Tensor4<float>& images) {
  Tensor4<float> out = Tensor4<float>::zeros_like(images);
  for (int n = 0; n < images.n; ++n)
    for (int y = 0; y < images.h; ++y)
      for (int x = 0; x < images.w; ++x)
        for (int c = 0; c < images.c; ++c)
          out.at(n, y, x, c) = images.at(n, y, images.w - 1 - x, c);
  return out;
}

}  // namespace ba2
