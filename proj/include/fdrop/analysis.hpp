#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fdrop/analysis_types.hpp"
#include "fdrop/dataset.hpp"
#include "fdrop/models.hpp"

namespace fdrop {

/// Class activation map: classifier-weighted sum of the final conv feature
/// maps, bilinearly upsampled to the input resolution and min-max normalized
/// to [0,1]. Biases never enter the map. A constant raw map (max == min)
/// exports as all zeros.
struct CamMap {
  int height = 0, width = 0;      // upsampled (input) resolution
  std::vector<double> values;     // normalized [0,1], row-major
  int feat_height = 0, feat_width = 0;
  std::vector<double> raw;        // pre-upsample map at feature resolution
  double raw_min = 0.0, raw_max = 0.0;
};

/// `image` is one normalized sample, (3,H,W) or (1,3,H,W).
CamMap cam(Model& model, const Tensor& image, int class_index);

/// Bilinear upsampling with corner alignment (exposed for the oracle tests).
std::vector<double> bilinear_upsample(const std::vector<double>& src, int sh, int sw,
                                      int dh, int dw);

/// Writes <prefix>.pgm (8-bit grayscale, round-half-even quantization) and
/// <prefix>.csv (raw values at full precision).
void export_heatmap(const CamMap& map, const std::string& prefix);

/// Per-class counts of which channel of the final conv layer had the highest
/// mean activation, over correctly classified images only.
struct RefChannelHistogram {
  int num_classes = 0;
  int num_channels = 0;
  std::vector<std::vector<std::int64_t>> counts;  // [class][channel]
  std::vector<std::int64_t> correct_per_class;
  std::int64_t total_correct = 0;
};

RefChannelHistogram reference_channel_histogram(Model& model, const Dataset& ds,
                                                const Normalization& norm,
                                                int batch_size = 128);

void write_histogram_csv(const RefChannelHistogram& hist, const std::string& path);

/// Mask statistics of a trained model over a dataset: builds focused-dropout
/// masks at the given stage (default: the penultimate stage the regularizer
/// targets) for every image and aggregates their dropped fractions. Feeds the
/// gamma sweep diagnostics.
KeepStats measure_keeping(Model& model, const Dataset& ds, const Normalization& norm,
                          const GammaRange& range, const Rng& rng,
                          const std::string& stage = "", int batch_size = 128);

}  // namespace fdrop
