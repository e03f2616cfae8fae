#include "fdrop/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace fdrop {

namespace {

constexpr int kCifarSide = 32;
constexpr std::int64_t kCifarPixels = 3 * kCifarSide * kCifarSide;

struct RawRecords {
  std::vector<float> pixels;  // appended (3,32,32) planes scaled to [0,1]
  std::vector<int> labels;
};

/// One CIFAR binary file: `expected` records of (label bytes + 3072 pixels).
/// CIFAR-10 records carry one label byte, CIFAR-100 two (coarse then fine;
/// the fine label is kept).
void load_cifar_file(const std::string& path, int variant, std::int64_t expected,
                     RawRecords& out) {
  const std::int64_t label_bytes = variant == 10 ? 1 : 2;
  const std::int64_t record = label_bytes + kCifarPixels;
  const int num_classes = variant;

  std::error_code ec;
  const auto size = static_cast<std::int64_t>(std::filesystem::file_size(path, ec));
  if (ec) throw std::runtime_error("cifar: cannot stat " + path + ": " + ec.message());
  if (size != expected * record) {
    const std::int64_t offset = (size / record) * record;
    throw std::runtime_error("cifar: " + path + " holds " + std::to_string(size) +
                             " bytes, expected " + std::to_string(expected * record) +
                             " (" + std::to_string(expected) + " records of " +
                             std::to_string(record) + " bytes); mismatch at byte offset " +
                             std::to_string(offset));
  }

  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cifar: cannot open " + path);
  std::vector<unsigned char> buf(static_cast<std::size_t>(record));
  for (std::int64_t r = 0; r < expected; ++r) {
    is.read(reinterpret_cast<char*>(buf.data()), record);
    if (!is) {
      throw std::runtime_error("cifar: " + path + ": read failed at byte offset " +
                               std::to_string(r * record));
    }
    const int label = variant == 10 ? buf[0] : buf[1];
    if (label < 0 || label >= num_classes) {
      throw std::runtime_error("cifar: " + path + ": label " + std::to_string(label) +
                               " out of range at record " + std::to_string(r) +
                               " (byte offset " + std::to_string(r * record) + ")");
    }
    out.labels.push_back(label);
    for (std::int64_t i = 0; i < kCifarPixels; ++i) {
      out.pixels.push_back(static_cast<float>(buf[static_cast<std::size_t>(label_bytes + i)]) / 255.f);
    }
  }
}

Dataset dataset_from_records(RawRecords&& rec, int side, int num_classes,
                             std::string split, std::string source) {
  Dataset ds;
  const int n = static_cast<int>(rec.labels.size());
  ds.images = Tensor::from_data(Shape{n, 3, side, side}, std::move(rec.pixels));
  ds.labels = std::move(rec.labels);
  ds.num_classes = num_classes;
  ds.split = std::move(split);
  ds.source = std::move(source);
  return ds;
}

}  // namespace

Dataset load_cifar_file_records(const std::string& path, int variant,
                                int expected_records) {
  if (variant != 10 && variant != 100) {
    throw std::invalid_argument("cifar: variant must be 10 or 100");
  }
  RawRecords rec;
  load_cifar_file(path, variant, expected_records, rec);
  return dataset_from_records(std::move(rec), kCifarSide, variant, "train",
                              "cifar" + std::to_string(variant));
}

DataBundle load_cifar(const std::string& dir, int variant) {
  if (variant != 10 && variant != 100) {
    throw std::invalid_argument("cifar: variant must be 10 or 100, got " +
                                std::to_string(variant));
  }
  RawRecords train_rec, test_rec;
  const std::string base = dir.empty() ? "." : dir;
  if (variant == 10) {
    for (int i = 1; i <= 5; ++i) {
      load_cifar_file(base + "/data_batch_" + std::to_string(i) + ".bin", 10, 10000,
                      train_rec);
    }
    load_cifar_file(base + "/test_batch.bin", 10, 10000, test_rec);
  } else {
    load_cifar_file(base + "/train.bin", 100, 50000, train_rec);
    load_cifar_file(base + "/test.bin", 100, 10000, test_rec);
  }
  DataBundle bundle;
  const std::string source = "cifar" + std::to_string(variant);
  bundle.train = dataset_from_records(std::move(train_rec), kCifarSide, variant, "train", source);
  bundle.test = dataset_from_records(std::move(test_rec), kCifarSide, variant, "test", source);
  bundle.source = source;
  return bundle;
}

namespace {

// Shape painters for the synthetic classes. Coordinates are (row, col); the
// painter writes per-channel foreground values through `put`.
template <class Put>
void paint_hbar(int size, Rng& r, Put&& put) {
  const int t = 2 + static_cast<int>(r.uniform_int(2));
  const int row = 1 + static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(size - t - 1)));
  const int len = size / 2 + static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(size / 2)));
  const int col = static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(size - len + 1)));
  for (int y = row; y < row + t; ++y)
    for (int x = col; x < col + len; ++x) put(y, x);
}

template <class Put>
void paint_vbar(int size, Rng& r, Put&& put) {
  const int t = 2 + static_cast<int>(r.uniform_int(2));
  const int col = 1 + static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(size - t - 1)));
  const int len = size / 2 + static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(size / 2)));
  const int row = static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(size - len + 1)));
  for (int y = row; y < row + len; ++y)
    for (int x = col; x < col + t; ++x) put(y, x);
}

template <class Put>
void paint_disc(int size, Rng& r, Put&& put) {
  const int rad = std::max(2, static_cast<int>(std::lround(size * r.uniform(0.15, 0.28))));
  const int cy = rad + static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(size - 2 * rad)));
  const int cx = rad + static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(size - 2 * rad)));
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= rad * rad) put(y, x);
}

template <class Put>
void paint_diag(int size, Rng& r, Put&& put) {
  const int t = 2;
  const int len = size / 2 + static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(size / 3)));
  const int row = static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(size - len + 1)));
  const int col = static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(size - len + 1)));
  for (int i = 0; i < len; ++i)
    for (int dy = 0; dy < t; ++dy)
      for (int dx = 0; dx < t; ++dx) {
        const int y = row + i + dy, x = col + i + dx;
        if (y < size && x < size) put(y, x);
      }
}

template <class Put>
void paint_ring(int size, Rng& r, Put&& put) {
  const int rad = std::max(3, static_cast<int>(std::lround(size * r.uniform(0.2, 0.3))));
  const int hole = std::max(1, rad - 2);
  const int cy = rad + static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(size - 2 * rad)));
  const int cx = rad + static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(size - 2 * rad)));
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const int d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
      if (d2 <= rad * rad && d2 > hole * hole) put(y, x);
    }
}

}  // namespace

Dataset make_synthetic(int classes, int n_per_class, int size, std::uint64_t seed) {
  if (size < 8) {
    throw std::invalid_argument("synthetic: size must be >= 8, got " + std::to_string(size));
  }
  if (classes < 2 || classes > 5) {
    throw std::invalid_argument("synthetic: supports 2..5 classes (bar/bar/disc/diag/ring), got " +
                                std::to_string(classes));
  }
  if (n_per_class < 1) {
    throw std::invalid_argument("synthetic: n_per_class must be >= 1");
  }

  const int n = classes * n_per_class;
  Dataset ds;
  ds.images = Tensor(Shape{n, 3, size, size});
  ds.labels.resize(static_cast<std::size_t>(n));
  ds.num_classes = classes;
  ds.source = "synthetic";

  Rng root(seed);
  auto px = ds.images.data();
  const std::int64_t plane = static_cast<std::int64_t>(size) * size;
  int idx = 0;
  for (int cls = 0; cls < classes; ++cls) {
    for (int i = 0; i < n_per_class; ++i, ++idx) {
      Rng r = root.fork(static_cast<std::uint64_t>(cls), static_cast<std::uint64_t>(i));
      float* img = &px[static_cast<std::size_t>(idx) * 3 * plane];

      for (std::int64_t j = 0; j < 3 * plane; ++j) {
        img[static_cast<std::size_t>(j)] = static_cast<float>(r.uniform(0.0, 0.35));
      }

      // Random tint so color never identifies the class; the shape does.
      float tint[3];
      for (auto& t : tint) t = static_cast<float>(r.uniform(0.7, 1.0));

      auto put = [&](int y, int x) {
        const float level = static_cast<float>(r.uniform(0.85, 1.0));
        for (int c = 0; c < 3; ++c) {
          img[static_cast<std::size_t>(c * plane + y * size + x)] =
              std::min(1.f, tint[c] * level);
        }
      };
      switch (cls) {
        case 0: paint_hbar(size, r, put); break;
        case 1: paint_vbar(size, r, put); break;
        case 2: paint_disc(size, r, put); break;
        case 3: paint_diag(size, r, put); break;
        default: paint_ring(size, r, put); break;
      }
      ds.labels[static_cast<std::size_t>(idx)] = cls;
    }
  }
  return ds;
}

DataBundle make_synthetic_bundle(int classes, int n_train_per_class,
                                 int n_test_per_class, int size, std::uint64_t seed) {
  Rng root(seed);
  DataBundle bundle;
  bundle.train = make_synthetic(classes, n_train_per_class, size, root.fork(1).seed());
  bundle.test = make_synthetic(classes, n_test_per_class, size, root.fork(2).seed());
  bundle.train.split = "train";
  bundle.test.split = "test";
  bundle.source = "synthetic";
  bundle.seed = seed;
  return bundle;
}

Normalization compute_normalization(const Dataset& train) {
  if (train.count() == 0) throw std::invalid_argument("normalization: empty dataset");
  const auto px = train.images.data();
  const int n = train.count();
  const std::int64_t plane = static_cast<std::int64_t>(train.images.dim(2)) * train.images.dim(3);
  Normalization norm;
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0, sq = 0.0;
    std::int64_t count = 0;
    for (int i = 0; i < n; ++i) {
      const float* p = &px[static_cast<std::size_t>((static_cast<std::int64_t>(i) * 3 + c) * plane)];
      for (std::int64_t j = 0; j < plane; ++j) {
        const double v = static_cast<double>(p[static_cast<std::size_t>(j)]);
        if (v < 0.0 || v > 1.0) {
          throw std::runtime_error("normalization: pixel " + std::to_string(v) +
                                   " outside [0,1] at image " + std::to_string(i));
        }
        sum += v;
        sq += v * v;
        ++count;
      }
    }
    const double mean = sum / static_cast<double>(count);
    const double var = sq / static_cast<double>(count) - mean * mean;
    norm.mean[static_cast<std::size_t>(c)] = static_cast<float>(mean);
    norm.stddev[static_cast<std::size_t>(c)] =
        static_cast<float>(std::sqrt(std::max(var, 1e-8)));
  }
  return norm;
}

Tensor augment(const Tensor& batch, const AugmentPolicy& policy, const Rng& rng) {
  if (batch.ndim() != 4) {
    throw std::invalid_argument("augment: expected 4-d batch, got " +
                                shape_str(batch.shape()));
  }
  if (policy.flip_prob < 0.0 || policy.flip_prob > 1.0) {
    throw std::invalid_argument("augment: flip probability must be in [0,1]");
  }
  if (policy.crop_pad < 0) throw std::invalid_argument("augment: negative crop pad");

  const int n = batch.dim(0), ch = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const int pad = policy.crop_pad;
  Tensor out(batch.shape());
  const auto src = batch.data();
  auto dst = out.data();
  for (int i = 0; i < n; ++i) {
    Rng r = rng.fork(static_cast<std::uint64_t>(i));
    const bool flip = r.uniform() < policy.flip_prob;
    int oy = 0, ox = 0;
    if (pad > 0) {
      oy = static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(2 * pad + 1)));
      ox = static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(2 * pad + 1)));
    }
    for (int c = 0; c < ch; ++c) {
      const float* sp = &src[static_cast<std::size_t>(
          (static_cast<std::int64_t>(i) * ch + c) * h * w)];
      float* dp = &dst[static_cast<std::size_t>(
          (static_cast<std::int64_t>(i) * ch + c) * h * w)];
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          // Crop window (oy, ox) in the zero-padded canvas.
          const int sy = y + oy - pad;
          int sx = x + ox - pad;
          float v = 0.f;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
            if (flip) sx = w - 1 - sx;
            v = sp[static_cast<std::size_t>(sy) * w + sx];
          }
          dp[static_cast<std::size_t>(y) * w + x] = v;
        }
      }
    }
  }
  return out;
}

Tensor gather_batch(const Dataset& ds, std::span<const int> indices) {
  const int ch = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
  const std::int64_t per = static_cast<std::int64_t>(ch) * h * w;
  Tensor out(Shape{static_cast<int>(indices.size()), ch, h, w});
  const auto src = ds.images.data();
  auto dst = out.data();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const int i = indices[b];
    if (i < 0 || i >= ds.count()) {
      throw std::out_of_range("gather: index " + std::to_string(i) + " out of range");
    }
    const float* sp = &src[static_cast<std::size_t>(i * per)];
    float* dp = &dst[b * static_cast<std::size_t>(per)];
    for (std::int64_t j = 0; j < per; ++j) dp[static_cast<std::size_t>(j)] = sp[static_cast<std::size_t>(j)];
  }
  return out;
}

Tensor normalize_batch(const Tensor& raw, const Normalization& norm) {
  const int n = raw.dim(0), ch = raw.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(raw.dim(2)) * raw.dim(3);
  Tensor out(raw.shape());
  const auto src = raw.data();
  auto dst = out.data();
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < ch; ++c) {
      const float m = norm.mean[static_cast<std::size_t>(c)];
      const float s = norm.stddev[static_cast<std::size_t>(c)];
      const std::size_t off = static_cast<std::size_t>(
          (static_cast<std::int64_t>(i) * ch + c) * plane);
      for (std::int64_t j = 0; j < plane; ++j) {
        dst[off + static_cast<std::size_t>(j)] = (src[off + static_cast<std::size_t>(j)] - m) / s;
      }
    }
  }
  return out;
}

std::vector<int> shuffled_indices(int n, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

void write_dataset_manifest(const std::string& path, const DataBundle& bundle,
                            const Normalization& norm) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("dataset manifest: cannot open " + path);
  char buf[128];
  os << "source = " << bundle.source << "\n";
  os << "train_count = " << bundle.train.count() << "\n";
  os << "test_count = " << bundle.test.count() << "\n";
  os << "num_classes = " << bundle.train.num_classes << "\n";
  os << "seed = " << bundle.seed << "\n";
  std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g", norm.mean[0], norm.mean[1], norm.mean[2]);
  os << "norm_mean = " << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g", norm.stddev[0], norm.stddev[1],
                norm.stddev[2]);
  os << "norm_std = " << buf << "\n";
}

DataBundle load_dataset_spec(const std::string& spec) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : spec.substr(colon + 1);
  if (kind == "cifar10") return load_cifar(rest, 10);
  if (kind == "cifar100") return load_cifar(rest, 100);
  if (kind == "synthetic") {
    int classes = 3, n = 300, n_test = 100, size = 16;
    std::uint64_t seed = 1;
    std::size_t pos = 0;
    while (pos < rest.size()) {
      auto comma = rest.find(',', pos);
      if (comma == std::string::npos) comma = rest.size();
      const std::string kv = rest.substr(pos, comma - pos);
      const auto eq = kv.find('=');
      if (eq == std::string::npos) {
        throw std::invalid_argument("dataset spec: expected key=value, got '" + kv + "'");
      }
      const std::string key = kv.substr(0, eq);
      const std::string value = kv.substr(eq + 1);
      if (key == "classes") classes = std::stoi(value);
      else if (key == "n") n = std::stoi(value);
      else if (key == "n_test") n_test = std::stoi(value);
      else if (key == "size") size = std::stoi(value);
      else if (key == "seed") seed = std::stoull(value);
      else throw std::invalid_argument("dataset spec: unknown key '" + key + "'");
      pos = comma + 1;
    }
    return make_synthetic_bundle(classes, n, n_test, size, seed);
  }
  throw std::invalid_argument("dataset spec: unknown kind '" + kind +
                              "' (known: cifar10, cifar100, synthetic)");
}

}  // namespace fdrop
