#include "fdrop/analysis.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace fdrop {

std::vector<double> bilinear_upsample(const std::vector<double>& src, int sh, int sw,
                                      int dh, int dw) {
  std::vector<double> dst(static_cast<std::size_t>(dh) * dw);
  for (int y = 0; y < dh; ++y) {
    const double fy = (sh > 1 && dh > 1)
                          ? static_cast<double>(y) * (sh - 1) / (dh - 1)
                          : 0.0;
    const int y0 = std::min(sh - 1, static_cast<int>(fy));
    const int y1 = std::min(sh - 1, y0 + 1);
    const double wy = fy - y0;
    for (int x = 0; x < dw; ++x) {
      const double fx = (sw > 1 && dw > 1)
                            ? static_cast<double>(x) * (sw - 1) / (dw - 1)
                            : 0.0;
      const int x0 = std::min(sw - 1, static_cast<int>(fx));
      const int x1 = std::min(sw - 1, x0 + 1);
      const double wx = fx - x0;
      const double top = src[static_cast<std::size_t>(y0) * sw + x0] * (1.0 - wx) +
                         src[static_cast<std::size_t>(y0) * sw + x1] * wx;
      const double bot = src[static_cast<std::size_t>(y1) * sw + x0] * (1.0 - wx) +
                         src[static_cast<std::size_t>(y1) * sw + x1] * wx;
      dst[static_cast<std::size_t>(y) * dw + x] = top * (1.0 - wy) + bot * wy;
    }
  }
  return dst;
}

CamMap cam(Model& model, const Tensor& image, int class_index) {
  Tensor batch = image;
  if (image.ndim() == 3) {
    batch = Tensor::from_data(Shape{1, image.dim(0), image.dim(1), image.dim(2)},
                              std::vector<float>(image.data().begin(), image.data().end()));
  }
  if (batch.ndim() != 4 || batch.dim(0) != 1) {
    throw std::invalid_argument("cam: expected a single (3,H,W) image, got " +
                                shape_str(image.shape()));
  }
  const Linear& head = model.classifier();
  const int channels = head.weight.dim(0);
  const int classes = head.weight.dim(1);
  if (class_index < 0 || class_index >= classes) {
    throw std::invalid_argument("cam: class " + std::to_string(class_index) +
                                " out of range for " + std::to_string(classes));
  }

  const std::string stage = model.features_stage();
  Tensor captured;
  ForwardCtx ctx;
  ctx.capture_stage = &stage;
  ctx.captured = &captured;
  model.forward(nullptr, batch, ctx);
  if (captured.ndim() != 4 || captured.dim(1) != channels) {
    throw std::runtime_error("cam: captured features " + shape_str(captured.shape()) +
                             " do not match classifier input of " +
                             std::to_string(channels) + " channels");
  }

  CamMap map;
  map.feat_height = captured.dim(2);
  map.feat_width = captured.dim(3);
  map.height = batch.dim(2);
  map.width = batch.dim(3);

  // Classifier-weighted sum over the feature maps; biases do not enter.
  const std::int64_t plane = static_cast<std::int64_t>(map.feat_height) * map.feat_width;
  map.raw.assign(static_cast<std::size_t>(plane), 0.0);
  const auto feat = captured.data();
  const auto w = head.weight.data();
  for (int c = 0; c < channels; ++c) {
    const double wc = static_cast<double>(w[static_cast<std::size_t>(c) * classes + class_index]);
    const float* f = &feat[static_cast<std::size_t>(c) * plane];
    for (std::int64_t i = 0; i < plane; ++i) {
      map.raw[static_cast<std::size_t>(i)] += wc * static_cast<double>(f[static_cast<std::size_t>(i)]);
    }
  }

  map.raw_min = *std::min_element(map.raw.begin(), map.raw.end());
  map.raw_max = *std::max_element(map.raw.begin(), map.raw.end());

  std::vector<double> upsampled =
      bilinear_upsample(map.raw, map.feat_height, map.feat_width, map.height, map.width);
  map.values.resize(upsampled.size());
  const double range = map.raw_max - map.raw_min;
  if (range == 0.0) {
    std::fill(map.values.begin(), map.values.end(), 0.0);
  } else {
    for (std::size_t i = 0; i < upsampled.size(); ++i) {
      map.values[i] = (upsampled[i] - map.raw_min) / range;
    }
  }
  return map;
}

void export_heatmap(const CamMap& map, const std::string& prefix) {
  {
    std::ofstream pgm(prefix + ".pgm", std::ios::binary);
    if (!pgm) throw std::runtime_error("heatmap: cannot open " + prefix + ".pgm");
    pgm << "P5\n" << map.width << " " << map.height << "\n255\n";
    for (double v : map.values) {
      // round-half-even via the default FP rounding mode
      const int q = static_cast<int>(std::nearbyint(v * 255.0));
      const unsigned char byte = static_cast<unsigned char>(std::clamp(q, 0, 255));
      pgm.write(reinterpret_cast<const char*>(&byte), 1);
    }
    if (!pgm) throw std::runtime_error("heatmap: write failed for " + prefix + ".pgm");
  }
  {
    std::ofstream csv(prefix + ".csv");
    if (!csv) throw std::runtime_error("heatmap: cannot open " + prefix + ".csv");
    char buf[64];
    for (int y = 0; y < map.height; ++y) {
      for (int x = 0; x < map.width; ++x) {
        std::snprintf(buf, sizeof(buf), "%.17g",
                      map.values[static_cast<std::size_t>(y) * map.width + x]);
        csv << (x ? "," : "") << buf;
      }
      csv << "\n";
    }
  }
}

RefChannelHistogram reference_channel_histogram(Model& model, const Dataset& ds,
                                                const Normalization& norm,
                                                int batch_size) {
  RefChannelHistogram hist;
  hist.num_classes = ds.num_classes;
  const std::string stage = model.features_stage();

  const int n = ds.count();
  for (int start = 0; start < n; start += batch_size) {
    const int end = std::min(n, start + batch_size);
    std::vector<int> idx;
    for (int i = start; i < end; ++i) idx.push_back(i);
    const Tensor x = normalize_batch(gather_batch(ds, idx), norm);

    Tensor captured;
    ForwardCtx ctx;
    ctx.capture_stage = &stage;
    ctx.captured = &captured;
    const Tensor logits = model.forward(nullptr, x, ctx);

    if (hist.num_channels == 0) {
      hist.num_channels = captured.dim(1);
      hist.counts.assign(static_cast<std::size_t>(hist.num_classes),
                         std::vector<std::int64_t>(static_cast<std::size_t>(hist.num_channels), 0));
      hist.correct_per_class.assign(static_cast<std::size_t>(hist.num_classes), 0);
    }

    const int classes = logits.dim(1);
    for (int b = 0; b < end - start; ++b) {
      int pred = 0;
      for (int k = 1; k < classes; ++k) {
        if (logits.at(b, k) > logits.at(b, pred)) pred = k;
      }
      const int label = ds.labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])];
      if (pred != label) continue;

      const auto stack = FeatureStackT<float>::from_batch(captured, b);
      const auto means = channel_mean_activations(stack);
      const int ref = select_reference_channel<float>(means);
      ++hist.counts[static_cast<std::size_t>(label)][static_cast<std::size_t>(ref)];
      ++hist.correct_per_class[static_cast<std::size_t>(label)];
      ++hist.total_correct;
    }
  }
  return hist;
}

void write_histogram_csv(const RefChannelHistogram& hist, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("histogram: cannot open " + path);
  os << "class,channel,count\n";
  for (int c = 0; c < hist.num_classes; ++c) {
    for (int k = 0; k < hist.num_channels; ++k) {
      const auto count = hist.counts[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)];
      if (count > 0) os << c << "," << k << "," << count << "\n";
    }
  }
}

KeepStats measure_keeping(Model& model, const Dataset& ds, const Normalization& norm,
                          const GammaRange& range, const Rng& rng,
                          const std::string& stage, int batch_size) {
  const std::string target = stage.empty() ? model.penultimate_stage() : stage;
  KeepStats stats;
  const int n = ds.count();
  int batch_index = 0;
  for (int start = 0; start < n; start += batch_size, ++batch_index) {
    const int end = std::min(n, start + batch_size);
    std::vector<int> idx;
    for (int i = start; i < end; ++i) idx.push_back(i);
    const Tensor x = normalize_batch(gather_batch(ds, idx), norm);

    Tensor captured;
    ForwardCtx ctx;
    ctx.capture_stage = &target;
    ctx.captured = &captured;
    model.forward(nullptr, x, ctx);

    Rng batch_rng = rng.fork(static_cast<std::uint64_t>(batch_index));
    for (const auto& mask : focus_masks_for_batch(captured, range, batch_rng)) {
      stats.add(mask);
    }
  }
  return stats;
}

}  // namespace fdrop
