#pragma once

#include <string>
#include <thread>
#include <vector>

#include "baaf/datagen.hpp"
#include "baaf/metrics.hpp"
#include "baaf/network.hpp"

namespace baaf {

/// Stacks 1 x H x W images (or masks) of the selected samples into N x 1 x H x W.
inline Tensor<float> stack_batch(const std::vector<SegSample>& data, const std::vector<std::size_t>& idx, bool masks) {
  if (idx.empty()) throw std::invalid_argument("empty batch");
  const Shape& s = (masks ? data[idx[0]].mask : data[idx[0]].image).shape();
  Tensor<float> out(Shape{idx.size(), s[0], s[1], s[2]});
  const std::size_t per = shape_numel(s);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& t = masks ? data[idx[b]].mask : data[idx[b]].image;
    if (t.shape() != s)
      throw ShapeError("batch items differ in shape: " + shape_str(s) + " vs " + shape_str(t.shape()));
    std::copy_n(t.data(), per, out.data() + b * per);
  }
  return out;
}

/// Eval-mode probability maps (1 x H x W each), computed one sample at a
/// time. With threads > 1 samples are split across workers; results are
/// identical to the sequential path.
inline std::vector<Tensor<float>> predict_all(Model<float>& model, const std::vector<SegSample>& samples,
                                              std::size_t threads = 1) {
  std::vector<Tensor<float>> out(samples.size());
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < samples.size(); i += step) {
      const auto& img = samples[i].image;
      if (img.rank() != 3 || img.dim(1) != model.spec.height || img.dim(2) != model.spec.width)
        throw ShapeError("sample " + samples[i].id + " has size " + shape_str(img.shape()) + " but the network expects 1x" +
                         std::to_string(model.spec.height) + "x" + std::to_string(model.spec.width));
      Tensor<float> p = predict(model, img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}));
      out[i] = p.reshaped(img.shape());
    }
  };
  if (threads <= 1 || samples.size() < 2) {
    work(0, 1);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        work(t, threads);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

inline MetricReport evaluate(Model<float>& model, const std::vector<SegSample>& samples, double threshold = 0.5,
                             std::size_t threads = 1, std::vector<Tensor<float>>* probs_out = nullptr) {
  auto probs = predict_all(model, samples, threads);
  std::vector<Tensor<float>> gts;
  std::vector<std::string> ids;
  for (const auto& s : samples) {
    gts.push_back(s.mask);
    ids.push_back(s.id);
  }
  MetricReport r = evaluate_predictions(probs, gts, ids, threshold);
  if (probs_out) *probs_out = std::move(probs);
  return r;
}

}  // namespace baaf
