#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cbna/segnet.hpp"

namespace cbna {

// NoAdapt: stored source statistics.
// CLi:     per-image statistics replace the source ones (C-Zhang is the same
//          computation on a single image and is accepted as an alias).
// CKlingner: two passes; pass one records per-image statistics, pass two
//          normalizes with the source/target blend.
// Cbna:    single pass; each BN layer blends source statistics with the
//          statistics of its own input features, so later layers see
//          features shaped by the earlier blended normalizations.
enum class AdaptMode { NoAdapt, CLi, CKlingner, Cbna };

const char* mode_name(AdaptMode mode);
// Accepts none|cli|czhang|cklingner|cbna.
AdaptMode parse_mode(const std::string& name);

struct AdaptPolicy {
  AdaptMode mode = AdaptMode::NoAdapt;
  double eta_s = 0.2;  // target weight in the blend; ignored by NoAdapt and CLi
  int window = 1;      // frames whose statistics are pooled; 1 = single image

  void validate() const;
};

// Per-image cost attribution under the documented counting rule.
struct FlopReport {
  uint64_t stats_flops = 0;    // per-channel moment computation at BN layers
  uint64_t mixing_flops = 0;   // source/target blending at BN layers
  uint64_t forward_flops = 0;  // one full network forward pass
  int passes = 1;

  uint64_t total() const {
    return static_cast<uint64_t>(passes) * forward_flops + stats_flops + mixing_flops;
  }
};

extern const char* const kFlopCsvHeader;
std::string flop_csv_row(const AdaptPolicy& policy, const FlopReport& report);

// Runs one adapted inference over a window of frames (batch dim == window)
// and returns the output for the last frame. The model is never mutated; all
// adaptation state is transient per call.
// `applied_stats`, when given, receives the statistics each BN layer actually
// normalized with, in network order (for the two-pass strategy: pass two).
std::pair<SegOutput, FlopReport> adapt_forward(const SegModel& model, const Tensor& frames,
                                               const AdaptPolicy& policy,
                                               std::vector<BatchStats>* applied_stats = nullptr);

// Moments over the pooled window: batch and spatial dims reduced jointly.
// The batch dimension of `layer_input` must equal the window length.
BatchStats pooled_target_stats(const Tensor& layer_input, int window);

// Cost model, per image at the given input resolution:
//   conv: 2*kh*kw*c_in per output element        relu: 1 per element
//   mean-pool: 4 per output element              upsample/concat: 0
//   softmax: 5 per element
//   BN stats: 4*H*W*C + 2*C per layer            BN mixing: 6*C per layer
// Stats accrue for CLi, CKlingner and Cbna; mixing for CKlingner and Cbna;
// CKlingner runs two passes. NoAdapt adds nothing.
FlopReport count_flops(const SegModel& model, const AdaptPolicy& policy, int height, int width);

}  // namespace cbna
