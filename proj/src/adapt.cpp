#include "cbna/adapt.hpp"

#include <sstream>

#include "cbna/io.hpp"

namespace cbna {

const char* mode_name(AdaptMode mode) {
  switch (mode) {
    case AdaptMode::NoAdapt:
      return "none";
    case AdaptMode::CLi:
      return "cli";
    case AdaptMode::CKlingner:
      return "cklingner";
    case AdaptMode::Cbna:
      return "cbna";
  }
  return "?";
}

AdaptMode parse_mode(const std::string& name) {
  if (name == "none") return AdaptMode::NoAdapt;
  if (name == "cli" || name == "czhang") return AdaptMode::CLi;
  if (name == "cklingner") return AdaptMode::CKlingner;
  if (name == "cbna") return AdaptMode::Cbna;
  throw ArgumentError("unknown adaptation mode: " + name);
}

void AdaptPolicy::validate() const {
  if (eta_s < 0.0 || eta_s > 1.0) throw ArgumentError("eta must lie in [0, 1]");
  if (window < 1) throw ArgumentError("window must be >= 1");
}

const char* const kFlopCsvHeader =
    "mode,eta,window,passes,stats_flops,mixing_flops,forward_flops,total_flops";

std::string flop_csv_row(const AdaptPolicy& policy, const FlopReport& report) {
  std::ostringstream os;
  os << mode_name(policy.mode) << ',' << fmt_g6(policy.eta_s) << ',' << policy.window << ','
     << report.passes << ',' << report.stats_flops << ',' << report.mixing_flops << ','
     << report.forward_flops << ',' << report.total();
  return os.str();
}

BatchStats pooled_target_stats(const Tensor& layer_input, int window) {
  if (layer_input.b != window)
    throw ArgumentError("pooled_target_stats: batch dim " + std::to_string(layer_input.b) +
                        " does not match window " + std::to_string(window));
  return compute_batch_stats(layer_input);
}

namespace {

// (1 - eta) * source + eta * target, elementwise, in the variance domain for
// the second moment. Float arithmetic so the eta = 0 and eta = 1 ends
// reproduce the source and target statistics bit for bit.
BatchStats mix_stats(const BnLayer& layer, const BatchStats& target, double eta) {
  const float a = static_cast<float>(1.0 - eta);
  const float b = static_cast<float>(eta);
  const int c = layer.channels();
  BatchStats out;
  out.mean.resize(static_cast<size_t>(c));
  out.var.resize(static_cast<size_t>(c));
  for (int ci = 0; ci < c; ++ci) {
    out.mean[ci] = a * layer.running_mean[ci] + b * target.mean[ci];
    out.var[ci] = a * layer.running_var[ci] + b * target.var[ci];
  }
  return out;
}

SegOutput slice_last_frame(const SegOutput& batch) {
  if (batch.posteriors.b == 1) return batch;
  const Tensor& p = batch.posteriors;
  SegOutput out;
  out.posteriors = Tensor(1, p.h, p.w, p.c);
  const size_t frame = static_cast<size_t>(p.h) * p.w * p.c;
  std::copy(p.data.end() - static_cast<ptrdiff_t>(frame), p.data.end(),
            out.posteriors.data.begin());
  out.classes = ClassMap(1, batch.classes.h, batch.classes.w);
  const size_t px = static_cast<size_t>(batch.classes.h) * batch.classes.w;
  std::copy(batch.classes.data.end() - static_cast<ptrdiff_t>(px), batch.classes.data.end(),
            out.classes.data.begin());
  return out;
}

}  // namespace

std::pair<SegOutput, FlopReport> adapt_forward(const SegModel& model, const Tensor& frames,
                                               const AdaptPolicy& policy,
                                               std::vector<BatchStats>* applied_stats) {
  policy.validate();
  if (frames.b != policy.window)
    throw ArgumentError("adapt_forward: got " + std::to_string(frames.b) +
                        " frames for window " + std::to_string(policy.window));
  if (policy.mode != AdaptMode::NoAdapt && model.bn_count() == 0)
    throw ArgumentError("adaptation requires a model with BN layers");
  if (applied_stats) applied_stats->clear();

  const auto record = [applied_stats](const BatchStats& s) {
    if (applied_stats) applied_stats->push_back(s);
  };

  SegOutput out;
  switch (policy.mode) {
    case AdaptMode::NoAdapt:
      out = forward(model, frames, [&](int, const BnLayer& layer, const Tensor&) {
        BatchStats s{layer.running_mean, layer.running_var};
        record(s);
        return s;
      });
      break;
    case AdaptMode::CLi:
      out = forward(model, frames, [&](int, const BnLayer&, const Tensor& input) {
        BatchStats s = pooled_target_stats(input, policy.window);
        record(s);
        return s;
      });
      break;
    case AdaptMode::CKlingner: {
      // Pass one records the per-image statistics exactly as CLi produces
      // them; pass two re-runs the input, normalizing with the blend.
      std::vector<BatchStats> first_pass;
      forward(model, frames, [&](int, const BnLayer&, const Tensor& input) {
        first_pass.push_back(pooled_target_stats(input, policy.window));
        return first_pass.back();
      });
      out = forward(model, frames, [&](int bn_index, const BnLayer& layer, const Tensor&) {
        BatchStats s = mix_stats(layer, first_pass[static_cast<size_t>(bn_index)], policy.eta_s);
        record(s);
        return s;
      });
      break;
    }
    case AdaptMode::Cbna:
      out = forward(model, frames, [&](int, const BnLayer& layer, const Tensor& input) {
        BatchStats s = mix_stats(layer, pooled_target_stats(input, policy.window), policy.eta_s);
        record(s);
        return s;
      });
      break;
  }

  return {slice_last_frame(out), count_flops(model, policy, frames.h, frames.w)};
}

FlopReport count_flops(const SegModel& model, const AdaptPolicy& policy, int height, int width) {
  policy.validate();
  model.validate();

  FlopReport rep;
  rep.passes = policy.mode == AdaptMode::CKlingner ? 2 : 1;
  const bool wants_stats = policy.mode != AdaptMode::NoAdapt;
  const bool wants_mixing =
      policy.mode == AdaptMode::CKlingner || policy.mode == AdaptMode::Cbna;

  int h = height, w = width;
  int c = 0;
  // Input channel count comes from the first convolution.
  for (const Layer& l : model.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&l)) {
      c = conv->kernel.c_in;
      break;
    }
    if (const auto* head = std::get_if<HeadLayer>(&l)) {
      c = head->kernel.c_in;
      break;
    }
  }

  std::vector<int> skip_channels;
  for (const Layer& l : model.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&l)) {
      const ConvKernel& k = conv->kernel;
      const ConvDims d = conv_output_dims(h, w, k.kh, k.kw, k.stride, k.padding);
      rep.forward_flops += 2ull * k.kh * k.kw * k.c_in *
                           (static_cast<uint64_t>(d.oh) * d.ow * k.c_out);
      h = d.oh;
      w = d.ow;
      c = k.c_out;
    } else if (const auto* bn = std::get_if<BnLayer>(&l)) {
      const uint64_t ch = static_cast<uint64_t>(bn->channels());
      if (wants_stats) rep.stats_flops += 4ull * h * w * ch + 2ull * ch;
      if (wants_mixing) rep.mixing_flops += 6ull * ch;
    } else if (std::holds_alternative<ReluLayer>(l)) {
      rep.forward_flops += static_cast<uint64_t>(h) * w * c;
    } else if (const auto* down = std::get_if<DownsampleLayer>(&l)) {
      if (h % down->factor != 0 || w % down->factor != 0)
        throw ShapeError("count_flops: resolution not divisible by downsample factor");
      skip_channels.push_back(c);
      h /= down->factor;
      w /= down->factor;
      rep.forward_flops += 4ull * h * w * c;
    } else if (const auto* up = std::get_if<UpsampleLayer>(&l)) {
      h *= up->factor;
      w *= up->factor;
    } else if (std::holds_alternative<ConcatSkipLayer>(l)) {
      c += skip_channels.back();
      skip_channels.pop_back();
    } else if (const auto* head = std::get_if<HeadLayer>(&l)) {
      const ConvKernel& k = head->kernel;
      const ConvDims d = conv_output_dims(h, w, k.kh, k.kw, k.stride, k.padding);
      rep.forward_flops += 2ull * k.kh * k.kw * k.c_in *
                           (static_cast<uint64_t>(d.oh) * d.ow * k.c_out);
      h = d.oh;
      w = d.ow;
      c = k.c_out;
    } else {
      rep.forward_flops += 5ull * h * w * c;
    }
  }
  return rep;
}

}  // namespace cbna
