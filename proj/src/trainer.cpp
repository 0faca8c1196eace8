#include "cbna/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cbna/io.hpp"
#include "cbna/rng.hpp"

namespace cbna {

void TrainConfig::validate() const {
  if (epochs < 1) throw ArgumentError("epochs must be >= 1");
  if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  if (!(lr > 0.0) || !(lr_final > 0.0)) throw ArgumentError("learning rates must be > 0");
  if (momentum_bn < 0.0 || momentum_bn > 1.0)
    throw ArgumentError("momentum_bn must lie in [0, 1]");
}

ClassWeights unit_weights(int num_classes) {
  if (num_classes < 1) throw ArgumentError("need at least one class");
  return ClassWeights{std::vector<double>(static_cast<size_t>(num_classes), 1.0)};
}

ClassWeights class_weights_from_frequencies(const std::vector<uint64_t>& pixel_counts,
                                            double offset) {
  if (pixel_counts.empty()) throw ArgumentError("empty class count vector");
  const double total = static_cast<double>(
      std::accumulate(pixel_counts.begin(), pixel_counts.end(), uint64_t{0}));
  if (total == 0.0) throw ArgumentError("all class counts are zero");
  if (!(offset > 1.0)) throw ArgumentError("weight offset must be > 1");
  ClassWeights cw;
  cw.w.resize(pixel_counts.size());
  for (size_t s = 0; s < pixel_counts.size(); ++s) {
    const double p = static_cast<double>(pixel_counts[s]) / total;
    cw.w[s] = 1.0 / std::log(offset + p);
  }
  return cw;
}

namespace {

constexpr double kLogClamp = 1e-12;

template <typename T>
double ce_loss_impl(const TensorT<T>& post, const ClassMap& labels, const ClassWeights& weights) {
  if (post.b != labels.b || post.h != labels.h || post.w != labels.w)
    throw ShapeError("loss: posterior and label shapes disagree");
  if (weights.w.size() != static_cast<size_t>(post.c))
    throw ShapeError("loss: weight count does not match class count");
  double sum = 0.0;
  for (int bi = 0; bi < post.b; ++bi)
    for (int y = 0; y < post.h; ++y)
      for (int x = 0; x < post.w; ++x) {
        const uint8_t cls = labels.at(bi, y, x);
        if (cls >= post.c)
          throw DataError("label index " + std::to_string(cls) + " out of range");
        const double p =
            std::max(static_cast<double>(post.at(bi, y, x, cls)), kLogClamp);
        sum -= weights.w[cls] * std::log(p);
      }
  return sum / (static_cast<double>(post.b) * post.h * post.w);
}

}  // namespace

double weighted_ce_loss(const Tensor& posteriors, const ClassMap& labels,
                        const ClassWeights& weights) {
  return ce_loss_impl(posteriors, labels, weights);
}

// ---------------------------------------------------------------------------
// TrainNet
// ---------------------------------------------------------------------------

namespace {

struct DConv {
  DConvKernel k;
  std::vector<double> gw, gb;
  bool is_head = false;
};

struct DBn {
  std::vector<double> gamma, beta, rmean, rvar;
  double eps = 1e-5;
  // per-forward caches
  std::vector<double> mean, var, inv_std;
  DTensor xhat;
  std::vector<double> ggamma, gbeta;
};

struct DDown {
  int factor = 2;
};
struct DUp {
  int factor = 2;
};

enum class NodeKind { Conv, Bn, Relu, Down, Up, Concat, Softmax };

struct Node {
  NodeKind kind;
  size_t payload = 0;  // index into convs_/bns_/downs_/ups_
};

DConvKernel widen_kernel(const ConvKernel& k) {
  DConvKernel d;
  d.kh = k.kh;
  d.kw = k.kw;
  d.c_in = k.c_in;
  d.c_out = k.c_out;
  d.stride = k.stride;
  d.padding = k.padding;
  d.weights.assign(k.weights.begin(), k.weights.end());
  d.bias.assign(k.bias.begin(), k.bias.end());
  return d;
}

void narrow_kernel(const DConvKernel& d, ConvKernel& k) {
  for (size_t i = 0; i < k.weights.size(); ++i) k.weights[i] = static_cast<float>(d.weights[i]);
  for (size_t i = 0; i < k.bias.size(); ++i) k.bias[i] = static_cast<float>(d.bias[i]);
}

}  // namespace

struct TrainNet::Impl {
  std::vector<Node> nodes;
  std::vector<DConv> convs;
  std::vector<DBn> bns;
  std::vector<DDown> downs;
  std::vector<DUp> ups;

  // caches (per forward)
  std::vector<DTensor> inputs;   // input of every node
  DTensor posteriors;
  DTensor dlogits;
  std::vector<int> concat_chain_channels;  // channels of the chain part per concat node
  uint64_t relu_sig = 0;

  // flat parameter spans: (values, grads)
  std::vector<std::pair<std::vector<double>*, std::vector<double>*>> spans;

  void build_spans() {
    spans.clear();
    for (Node& n : nodes) {
      if (n.kind == NodeKind::Conv) {
        DConv& c = convs[n.payload];
        spans.emplace_back(&c.k.weights, &c.gw);
        spans.emplace_back(&c.k.bias, &c.gb);
      } else if (n.kind == NodeKind::Bn) {
        DBn& b = bns[n.payload];
        spans.emplace_back(&b.gamma, &b.ggamma);
        spans.emplace_back(&b.beta, &b.gbeta);
      }
    }
  }

  DTensor conv_forward(const DConv& c, const DTensor& x) { return conv2d(x, c.k); }

  void conv_backward(DConv& c, const DTensor& x, const DTensor& grad, DTensor& dx) {
    const ConvDims d = conv_output_dims(x.h, x.w, c.k.kh, c.k.kw, c.k.stride, c.k.padding);
    c.gw.assign(c.k.weights.size(), 0.0);
    c.gb.assign(c.k.bias.size(), 0.0);
    dx = DTensor(x.b, x.h, x.w, x.c);
    for (int bi = 0; bi < x.b; ++bi)
      for (int oy = 0; oy < d.oh; ++oy)
        for (int ox = 0; ox < d.ow; ++ox) {
          const double* g = &grad.data[grad.index(bi, oy, ox, 0)];
          const int iy0 = oy * c.k.stride - d.pad_top;
          const int ix0 = ox * c.k.stride - d.pad_left;
          for (int ky = 0; ky < c.k.kh; ++ky) {
            const int iy = iy0 + ky;
            if (iy < 0 || iy >= x.h) continue;
            for (int kx = 0; kx < c.k.kw; ++kx) {
              const int ix = ix0 + kx;
              if (ix < 0 || ix >= x.w) continue;
              const double* px = &x.data[x.index(bi, iy, ix, 0)];
              double* dpx = &dx.data[dx.index(bi, iy, ix, 0)];
              const size_t base = c.k.weight_index(ky, kx, 0, 0);
              for (int ci = 0; ci < c.k.c_in; ++ci) {
                const double v = px[ci];
                const double* wrow = &c.k.weights[base + static_cast<size_t>(ci) * c.k.c_out];
                double* gwrow = &c.gw[base + static_cast<size_t>(ci) * c.k.c_out];
                double acc = 0.0;
                for (int co = 0; co < c.k.c_out; ++co) {
                  gwrow[co] += v * g[co];
                  acc += wrow[co] * g[co];
                }
                dpx[ci] += acc;
              }
            }
          }
          for (int co = 0; co < c.k.c_out; ++co) c.gb[co] += g[co];
        }
  }

  DTensor bn_forward(DBn& b, const DTensor& x) {
    channel_mean_var(x, b.mean, b.var);
    const int c = x.c;
    b.inv_std.resize(static_cast<size_t>(c));
    for (int ci = 0; ci < c; ++ci) b.inv_std[ci] = 1.0 / std::sqrt(b.var[ci] + b.eps);
    b.xhat = DTensor(x.b, x.h, x.w, x.c);
    DTensor out(x.b, x.h, x.w, x.c);
    const size_t total = x.size();
    for (size_t i = 0; i < total; i += static_cast<size_t>(c))
      for (int ci = 0; ci < c; ++ci) {
        const double xh = (x.data[i + ci] - b.mean[ci]) * b.inv_std[ci];
        b.xhat.data[i + ci] = xh;
        out.data[i + ci] = b.gamma[ci] * xh + b.beta[ci];
      }
    return out;
  }

  // Gradients flow through the batch statistics as well as gamma/beta.
  DTensor bn_backward(DBn& b, const DTensor& grad) {
    const int c = grad.c;
    const double n = static_cast<double>(grad.b) * grad.h * grad.w;
    b.ggamma.assign(static_cast<size_t>(c), 0.0);
    b.gbeta.assign(static_cast<size_t>(c), 0.0);
    std::vector<double> sum_g(static_cast<size_t>(c), 0.0);
    std::vector<double> sum_gx(static_cast<size_t>(c), 0.0);
    const size_t total = grad.size();
    for (size_t i = 0; i < total; i += static_cast<size_t>(c))
      for (int ci = 0; ci < c; ++ci) {
        sum_g[ci] += grad.data[i + ci];
        sum_gx[ci] += grad.data[i + ci] * b.xhat.data[i + ci];
      }
    for (int ci = 0; ci < c; ++ci) {
      b.ggamma[ci] = sum_gx[ci];
      b.gbeta[ci] = sum_g[ci];
    }
    DTensor dx(grad.b, grad.h, grad.w, grad.c);
    for (size_t i = 0; i < total; i += static_cast<size_t>(c))
      for (int ci = 0; ci < c; ++ci) {
        const double g = grad.data[i + ci];
        dx.data[i + ci] = b.gamma[ci] * b.inv_std[ci] *
                          (g - sum_g[ci] / n - b.xhat.data[i + ci] * sum_gx[ci] / n);
      }
    return dx;
  }
};

TrainNet::TrainNet(const SegModel& model) : impl_(std::make_unique<Impl>()) {
  model.validate();
  for (const Layer& l : model.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&l)) {
      impl_->nodes.push_back({NodeKind::Conv, impl_->convs.size()});
      impl_->convs.push_back({widen_kernel(conv->kernel), {}, {}, false});
    } else if (const auto* head = std::get_if<HeadLayer>(&l)) {
      impl_->nodes.push_back({NodeKind::Conv, impl_->convs.size()});
      impl_->convs.push_back({widen_kernel(head->kernel), {}, {}, true});
    } else if (const auto* bn = std::get_if<BnLayer>(&l)) {
      impl_->nodes.push_back({NodeKind::Bn, impl_->bns.size()});
      DBn b;
      b.gamma.assign(bn->gamma.begin(), bn->gamma.end());
      b.beta.assign(bn->beta.begin(), bn->beta.end());
      b.rmean.assign(bn->running_mean.begin(), bn->running_mean.end());
      b.rvar.assign(bn->running_var.begin(), bn->running_var.end());
      b.eps = static_cast<double>(bn->eps);
      impl_->bns.push_back(std::move(b));
    } else if (std::holds_alternative<ReluLayer>(l)) {
      impl_->nodes.push_back({NodeKind::Relu, 0});
    } else if (const auto* down = std::get_if<DownsampleLayer>(&l)) {
      impl_->nodes.push_back({NodeKind::Down, impl_->downs.size()});
      impl_->downs.push_back({down->factor});
    } else if (const auto* up = std::get_if<UpsampleLayer>(&l)) {
      impl_->nodes.push_back({NodeKind::Up, impl_->ups.size()});
      impl_->ups.push_back({up->factor});
    } else if (std::holds_alternative<ConcatSkipLayer>(l)) {
      impl_->nodes.push_back({NodeKind::Concat, 0});
    } else {
      impl_->nodes.push_back({NodeKind::Softmax, 0});
    }
  }
  impl_->build_spans();
}

TrainNet::~TrainNet() = default;
TrainNet::TrainNet(TrainNet&&) noexcept = default;
TrainNet& TrainNet::operator=(TrainNet&&) noexcept = default;

const DTensor& TrainNet::forward(const DTensor& x) {
  Impl& im = *impl_;
  im.inputs.assign(im.nodes.size(), DTensor{});
  im.concat_chain_channels.clear();
  im.relu_sig = 1469598103934665603ULL;  // FNV offset basis
  DTensor cur = x;
  std::vector<DTensor> skips;
  for (size_t i = 0; i < im.nodes.size(); ++i) {
    Node& n = im.nodes[i];
    im.inputs[i] = cur;
    switch (n.kind) {
      case NodeKind::Conv:
        cur = im.conv_forward(im.convs[n.payload], cur);
        break;
      case NodeKind::Bn:
        cur = im.bn_forward(im.bns[n.payload], cur);
        break;
      case NodeKind::Relu:
        for (const double v : cur.data)
          im.relu_sig = (im.relu_sig ^ (v > 0.0 ? 0x9Eu : 0x3Bu)) * 1099511628211ULL;
        cur = relu(cur);
        break;
      case NodeKind::Down:
        skips.push_back(cur);
        cur = downsample_mean(cur, im.downs[n.payload].factor);
        break;
      case NodeKind::Up:
        cur = upsample_nearest(cur, im.ups[n.payload].factor);
        break;
      case NodeKind::Concat:
        im.concat_chain_channels.push_back(cur.c);
        cur = concat_channels(cur, skips.back());
        skips.pop_back();
        break;
      case NodeKind::Softmax:
        cur = softmax_channels(cur);
        break;
    }
  }
  im.posteriors = std::move(cur);
  return im.posteriors;
}

double TrainNet::loss_and_grad_logits(const ClassMap& labels, const ClassWeights& weights) {
  Impl& im = *impl_;
  const DTensor& post = im.posteriors;
  if (post.size() == 0) throw Error("loss_and_grad_logits called before forward");
  if (post.b != labels.b || post.h != labels.h || post.w != labels.w)
    throw ShapeError("loss: posterior and label shapes disagree");
  if (weights.w.size() != static_cast<size_t>(post.c))
    throw ShapeError("loss: weight count does not match class count");

  const double inv_n = 1.0 / (static_cast<double>(post.b) * post.h * post.w);
  im.dlogits = DTensor(post.b, post.h, post.w, post.c);
  double sum = 0.0;
  for (int bi = 0; bi < post.b; ++bi)
    for (int y = 0; y < post.h; ++y)
      for (int x = 0; x < post.w; ++x) {
        const uint8_t cls = labels.at(bi, y, x);
        if (cls >= post.c)
          throw DataError("label index " + std::to_string(cls) + " out of range");
        const double wt = weights.w[cls];
        const double* pp = &post.data[post.index(bi, y, x, 0)];
        double* gp = &im.dlogits.data[im.dlogits.index(bi, y, x, 0)];
        sum -= wt * std::log(std::max(pp[cls], kLogClamp));
        // Softmax and the weighted cross-entropy fused: d/dlogit_s is
        // w_cls * (p_s - [s == cls]), averaged over pixels and batch.
        for (int s = 0; s < post.c; ++s)
          gp[s] = wt * inv_n * (pp[s] - (s == cls ? 1.0 : 0.0));
      }
  return sum * inv_n;
}

void TrainNet::backward() {
  Impl& im = *impl_;
  if (im.dlogits.size() == 0) throw Error("backward called before loss_and_grad_logits");
  DTensor grad = im.dlogits;
  std::vector<DTensor> skip_grads;
  int concat_seen = 0;
  for (size_t ri = im.nodes.size(); ri-- > 0;) {
    Node& n = im.nodes[ri];
    const DTensor& in = im.inputs[ri];
    switch (n.kind) {
      case NodeKind::Softmax:
        // Fused into the loss gradient; `grad` is already d/dlogits.
        break;
      case NodeKind::Conv: {
        DTensor dx;
        im.conv_backward(im.convs[n.payload], in, grad, dx);
        grad = std::move(dx);
        break;
      }
      case NodeKind::Bn:
        grad = im.bn_backward(im.bns[n.payload], grad);
        break;
      case NodeKind::Relu: {
        for (size_t i = 0; i < grad.size(); ++i)
          if (in.data[i] <= 0.0) grad.data[i] = 0.0;
        break;
      }
      case NodeKind::Down: {
        const int f = im.downs[n.payload].factor;
        DTensor dx(in.b, in.h, in.w, in.c);
        const double inv = 1.0 / (f * f);
        for (int bi = 0; bi < grad.b; ++bi)
          for (int oy = 0; oy < grad.h; ++oy)
            for (int ox = 0; ox < grad.w; ++ox) {
              const double* g = &grad.data[grad.index(bi, oy, ox, 0)];
              for (int dy = 0; dy < f; ++dy)
                for (int dxx = 0; dxx < f; ++dxx) {
                  double* p = &dx.data[dx.index(bi, oy * f + dy, ox * f + dxx, 0)];
                  for (int ci = 0; ci < dx.c; ++ci) p[ci] += g[ci] * inv;
                }
            }
        // The pooled features were also consumed by a skip concat downstream.
        if (!skip_grads.empty()) {
          const DTensor sg = std::move(skip_grads.back());
          skip_grads.pop_back();
          for (size_t i = 0; i < dx.size(); ++i) dx.data[i] += sg.data[i];
        }
        grad = std::move(dx);
        break;
      }
      case NodeKind::Up: {
        const int f = im.ups[n.payload].factor;
        DTensor dx(in.b, in.h, in.w, in.c);
        for (int bi = 0; bi < grad.b; ++bi)
          for (int oy = 0; oy < grad.h; ++oy)
            for (int ox = 0; ox < grad.w; ++ox) {
              const double* g = &grad.data[grad.index(bi, oy, ox, 0)];
              double* p = &dx.data[dx.index(bi, oy / f, ox / f, 0)];
              for (int ci = 0; ci < dx.c; ++ci) p[ci] += g[ci];
            }
        grad = std::move(dx);
        break;
      }
      case NodeKind::Concat: {
        ++concat_seen;
        const int chain_c =
            im.concat_chain_channels[im.concat_chain_channels.size() -
                                     static_cast<size_t>(concat_seen)];
        const int skip_c = grad.c - chain_c;
        DTensor dchain(grad.b, grad.h, grad.w, chain_c);
        DTensor dskip(grad.b, grad.h, grad.w, skip_c);
        for (int bi = 0; bi < grad.b; ++bi)
          for (int y = 0; y < grad.h; ++y)
            for (int x = 0; x < grad.w; ++x) {
              const double* g = &grad.data[grad.index(bi, y, x, 0)];
              double* pc = &dchain.data[dchain.index(bi, y, x, 0)];
              double* ps = &dskip.data[dskip.index(bi, y, x, 0)];
              for (int ci = 0; ci < chain_c; ++ci) pc[ci] = g[ci];
              for (int ci = 0; ci < skip_c; ++ci) ps[ci] = g[chain_c + ci];
            }
        skip_grads.push_back(std::move(dskip));
        grad = std::move(dchain);
        break;
      }
    }
  }
}

void TrainNet::sgd_step(double lr) {
  for (auto& [vals, grads] : impl_->spans) {
    if (grads->size() != vals->size()) continue;  // backward not run yet
    for (size_t i = 0; i < vals->size(); ++i) (*vals)[i] -= lr * (*grads)[i];
  }
}

void TrainNet::track_running_stats(double momentum) {
  for (DBn& b : impl_->bns) {
    if (b.mean.empty()) throw Error("track_running_stats called before forward");
    for (size_t i = 0; i < b.rmean.size(); ++i) {
      b.rmean[i] = (1.0 - momentum) * b.rmean[i] + momentum * b.mean[i];
      b.rvar[i] = (1.0 - momentum) * b.rvar[i] + momentum * b.var[i];
    }
  }
}

double TrainNet::forward_loss(const DTensor& x, const ClassMap& labels,
                              const ClassWeights& weights) {
  const DTensor& post = forward(x);
  double sum = 0.0;
  for (int bi = 0; bi < post.b; ++bi)
    for (int y = 0; y < post.h; ++y)
      for (int xx = 0; xx < post.w; ++xx) {
        const uint8_t cls = labels.at(bi, y, xx);
        if (cls >= post.c) throw DataError("label index out of range");
        sum -= weights.w[cls] * std::log(std::max(post.at(bi, y, xx, cls), kLogClamp));
      }
  return sum / (static_cast<double>(post.b) * post.h * post.w);
}

size_t TrainNet::num_params() const {
  size_t n = 0;
  for (const auto& [vals, grads] : impl_->spans) n += vals->size();
  return n;
}

double TrainNet::param(size_t i) const {
  for (const auto& [vals, grads] : impl_->spans) {
    if (i < vals->size()) return (*vals)[i];
    i -= vals->size();
  }
  throw ArgumentError("parameter index out of range");
}

void TrainNet::set_param(size_t i, double v) {
  for (auto& [vals, grads] : impl_->spans) {
    if (i < vals->size()) {
      (*vals)[i] = v;
      return;
    }
    i -= vals->size();
  }
  throw ArgumentError("parameter index out of range");
}

double TrainNet::grad(size_t i) const {
  for (const auto& [vals, grads] : impl_->spans) {
    if (i < grads->size()) return (*grads)[i];
    i -= grads->size();
  }
  throw ArgumentError("gradient index out of range");
}

std::pair<std::vector<double>, std::vector<double>> TrainNet::running_stats(int bn_index) const {
  const DBn& b = impl_->bns.at(static_cast<size_t>(bn_index));
  return {b.rmean, b.rvar};
}

uint64_t TrainNet::relu_signature() const { return impl_->relu_sig; }

void TrainNet::export_to(SegModel& model, double momentum) const {
  size_t conv_i = 0, bn_i = 0;
  for (Layer& l : model.layers) {
    if (auto* conv = std::get_if<ConvLayer>(&l)) {
      narrow_kernel(impl_->convs[conv_i++].k, conv->kernel);
    } else if (auto* head = std::get_if<HeadLayer>(&l)) {
      narrow_kernel(impl_->convs[conv_i++].k, head->kernel);
    } else if (auto* bn = std::get_if<BnLayer>(&l)) {
      const DBn& b = impl_->bns[bn_i++];
      for (size_t i = 0; i < bn->gamma.size(); ++i) {
        bn->gamma[i] = static_cast<float>(b.gamma[i]);
        bn->beta[i] = static_cast<float>(b.beta[i]);
        bn->running_mean[i] = static_cast<float>(b.rmean[i]);
        bn->running_var[i] = static_cast<float>(std::max(b.rvar[i], 0.0));
      }
      bn->momentum = static_cast<float>(momentum);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

void shuffle_indices(std::vector<size_t>& idx, SplitMix64& rng) {
  for (size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
}

void place_sample(DTensor& batch, ClassMap& labels, int slot, const Tensor& img,
                  const ClassMap& lbl, bool flip) {
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const int sx = flip ? img.w - 1 - x : x;
      for (int c = 0; c < img.c; ++c)
        batch.at(slot, y, x, c) = static_cast<double>(img.at(0, y, sx, c));
      labels.at(slot, y, x) = lbl.at(0, y, sx);
    }
}

}  // namespace

void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path) {
  std::vector<std::vector<std::string>> rows;
  rows.reserve(log.size());
  for (const TrainStep& s : log)
    rows.push_back({std::to_string(s.epoch), std::to_string(s.step), fmt_g6(s.loss),
                    fmt_g6(s.lr)});
  write_csv(path, {"epoch", "step", "loss", "lr"}, rows);
}

SegModel train(const SegModel& init, const Dataset& data, const TrainConfig& cfg,
               const Dataset* dg_mix, TrainLog* log) {
  cfg.validate();
  init.validate();
  if (data.size() == 0) throw ArgumentError("training dataset is empty");
  if (dg_mix && dg_mix->size() == 0) throw ArgumentError("mix dataset is empty");

  std::vector<uint64_t> counts = pixel_class_counts(data);
  if (dg_mix) {
    const std::vector<uint64_t> extra = pixel_class_counts(*dg_mix);
    if (extra.size() != counts.size())
      throw ArgumentError("mix dataset class count differs from the primary dataset");
    for (size_t i = 0; i < counts.size(); ++i) counts[i] += extra[i];
  }
  const ClassWeights weights = class_weights_from_frequencies(counts);

  TrainNet net(init);
  SplitMix64 rng(cfg.seed);

  const int h = data.labels[0].h, w = data.labels[0].w;
  const int n_primary = static_cast<int>(data.size());
  const int secondary_per_batch = dg_mix ? cfg.batch_size / 2 : 0;
  const int primary_per_batch =
      std::min(cfg.batch_size - secondary_per_batch, n_primary);
  const int steps_per_epoch = std::max(1, n_primary / primary_per_batch);
  const int reduced_from = cfg.epochs - cfg.epochs / 4;  // last quarter of epochs

  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::vector<size_t> mix_order;
  size_t mix_pos = 0;
  if (dg_mix) {
    mix_order.resize(dg_mix->size());
    std::iota(mix_order.begin(), mix_order.end(), size_t{0});
  }

  int global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = epoch >= reduced_from ? cfg.lr_final : cfg.lr;
    shuffle_indices(order, rng);
    for (int step = 0; step < steps_per_epoch; ++step) {
      const int bsz = primary_per_batch + secondary_per_batch;
      DTensor batch(bsz, h, w, 3);
      ClassMap labels(bsz, h, w);
      int slot = 0;
      for (int i = 0; i < primary_per_batch; ++i, ++slot) {
        const size_t idx = order[static_cast<size_t>(step * primary_per_batch + i)];
        const bool flip = cfg.augment_flip && rng.bernoulli(0.5);
        place_sample(batch, labels, slot, data.images[idx], data.labels[idx], flip);
      }
      for (int i = 0; i < secondary_per_batch; ++i, ++slot) {
        if (mix_pos == mix_order.size()) {
          shuffle_indices(mix_order, rng);
          mix_pos = 0;
        }
        const size_t idx = mix_order[mix_pos++];
        const bool flip = cfg.augment_flip && rng.bernoulli(0.5);
        place_sample(batch, labels, slot, dg_mix->images[idx], dg_mix->labels[idx], flip);
      }

      net.forward(batch);
      const double loss = net.loss_and_grad_logits(labels, weights);
      if (!std::isfinite(loss))
        throw TrainError("training diverged (non-finite loss) at step " +
                             std::to_string(global_step),
                         static_cast<size_t>(global_step));
      net.backward();
      net.sgd_step(lr);
      net.track_running_stats(cfg.momentum_bn);

      if (log)
        log->push_back({epoch, global_step, loss, lr, primary_per_batch, secondary_per_batch});
      ++global_step;
    }
  }

  SegModel out = init;
  net.export_to(out, cfg.momentum_bn);
  return out;
}

double check_gradients(const SegModel& fragment, const Tensor& x, const ClassMap& labels,
                       const ClassWeights* weights) {
  TrainNet net(fragment);
  if (net.num_params() > 1000)
    throw ArgumentError("gradient check fragments must stay at or under 1000 parameters");
  const ClassWeights w = weights ? *weights : unit_weights(fragment.num_classes);

  const DTensor dx = widen(x);
  net.forward(dx);
  net.loss_and_grad_logits(labels, w);
  net.backward();

  const size_t n = net.num_params();
  std::vector<double> analytic(n);
  for (size_t i = 0; i < n; ++i) analytic[i] = net.grad(i);

  constexpr double kStep = 1e-3;
  double max_rel = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double v = net.param(i);
    net.set_param(i, v + kStep);
    const double up = net.forward_loss(dx, labels, w);
    const uint64_t sig_up = net.relu_signature();
    net.set_param(i, v - kStep);
    const double down = net.forward_loss(dx, labels, w);
    const uint64_t sig_down = net.relu_signature();
    net.set_param(i, v);
    // The two probes straddled a relu kink; the central difference is not an
    // estimate of the derivative there.
    if (sig_up != sig_down) continue;
    const double fd = (up - down) / (2.0 * kStep);
    const double scale = std::max(std::abs(analytic[i]), std::abs(fd));
    if (scale < 1e-8) continue;  // both effectively zero
    max_rel = std::max(max_rel, std::abs(analytic[i] - fd) / scale);
  }
  return max_rel;
}

}  // namespace cbna
