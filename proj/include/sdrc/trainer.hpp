#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sdrc/cpc.hpp"
#include "sdrc/episodes.hpp"
#include "sdrc/errors.hpp"
#include "sdrc/fusion.hpp"
#include "sdrc/osd.hpp"
#include "sdrc/rng.hpp"
#include "sdrc/tensor.hpp"
#include "sdrc/vit.hpp"

// Source-domain episodic training, target-domain finetuning and
// evaluation. During source training the encoder and the OSD learn
// jointly and the fusion weights do not exist; during target finetuning
// the encoder, w_in and w_out are frozen and only w_orth plus the fusion
// weights move.

namespace sdrc {

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  int episodes = 300;
  float lr = 1e-3f;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  float lambda = 0.1f;
  int k_shot = 1;
  Metric metric = Metric::kCosine;
  bool cpc = true;
  bool osd = true;
  bool afw = true;
  std::uint64_t seed = 42;
  int osd_rank = 8;
  float temperature = 10.f;
  int finetune_steps = 50;
  float finetune_lr = 1e-2f;
  bool leave_one_out = false;

  void validate() const {
    if (lambda < 0.f) throw ContractError("TrainConfig: lambda must be >= 0");
    if (lr < 0.f) throw ContractError("TrainConfig: lr must be >= 0");
    if (k_shot < 1) throw ContractError("TrainConfig: K must be >= 1");
    if (episodes < 0) throw ContractError("TrainConfig: episodes must be >= 0");
    if (temperature <= 0.f) throw ContractError("TrainConfig: temperature must be > 0");
    if (osd_rank < 1) throw ContractError("TrainConfig: rank must be >= 1");
    if (finetune_steps < 0) throw ContractError("TrainConfig: finetune steps must be >= 0");
    if (finetune_lr < 0.f) throw ContractError("TrainConfig: finetune lr must be >= 0");
  }
};

template <typename T>
struct ModelT {
  VitConfig vit_cfg;
  VitParamsT<T> vit;
  std::optional<OsdParamsT<T>> osd;
  std::optional<FusionWeightsT<T>> afw;
};

using Model = ModelT<float>;

inline int effective_components(const VitConfig& cfg, bool use_cpc) {
  return use_cpc ? cfg.layers : 1;
}

template <typename T, typename Fn>
void for_each_param(ModelT<T>& m, Fn&& fn) {
  fn(std::string("vit.patch_proj"), m.vit.patch_proj);
  fn(std::string("vit.pos"), m.vit.pos);
  for (std::size_t l = 0; l < m.vit.blocks.size(); ++l) {
    const std::string prefix = "vit.l" + std::to_string(l) + ".";
    VitBlockParamsT<T>& b = m.vit.blocks[l];
    fn(prefix + "wq", b.wq);
    fn(prefix + "wk", b.wk);
    fn(prefix + "wv", b.wv);
    fn(prefix + "wo", b.wo);
    fn(prefix + "w_mlp1", b.w_mlp1);
    fn(prefix + "w_mlp2", b.w_mlp2);
    if (m.vit_cfg.norm == NormMode::kPreNorm) {
      fn(prefix + "ln1_g", b.ln1_gamma);
      fn(prefix + "ln1_b", b.ln1_beta);
      fn(prefix + "ln2_g", b.ln2_gamma);
      fn(prefix + "ln2_b", b.ln2_beta);
    }
  }
  if (m.osd) {
    fn(std::string("osd.w_in"), m.osd->w_in);
    fn(std::string("osd.w_orth"), m.osd->w_orth);
    fn(std::string("osd.w_out"), m.osd->w_out);
  }
  if (m.afw) fn(std::string("afw.w"), m.afw->w);
}

template <typename T>
ModelT<T> clone_model(const ModelT<T>& m) {
  ModelT<T> out = m;
  for_each_param(out, [](const std::string&, TensorT<T>& t) { t = t.clone(); });
  return out;
}

// Watched copy: every parameter becomes a tape leaf sharing storage.
template <typename T>
ModelT<T> watch_model(TapeT<T>& tape, const ModelT<T>& m) {
  ModelT<T> out = m;
  for_each_param(out, [&tape](const std::string&, TensorT<T>& t) { t = tape.watch(t); });
  return out;
}

// Fresh model for source training; fusion weights are created only when
// target finetuning begins.
template <typename T>
ModelT<T> make_model(const VitConfig& vit_cfg, const TrainConfig& tc, int channels, int image_h,
                     int image_w) {
  vit_cfg.validate();
  tc.validate();
  ModelT<T> m;
  m.vit_cfg = vit_cfg;
  Rng rng(derive_seed(tc.seed, 0x696E6974ULL));
  m.vit = init_vit_params<T>(vit_cfg, channels, image_h, image_w, rng);
  if (tc.osd)
    m.osd = init_osd_params<T>(effective_components(vit_cfg, tc.cpc), vit_cfg.dim, tc.osd_rank,
                               rng);
  return m;
}

// ---------------------------------------------------------------------------
// Shared pipeline stages

// Encoder features entering the comparison: the per-block residual
// increments under CPC, or the final output alone without it.
template <typename T>
std::vector<TensorT<T>> encoder_components(const ModelT<T>& model, const TensorT<T>& image,
                                           bool use_cpc) {
  TensorT<T> z0 = patch_embed(image, model.vit, model.vit_cfg);
  ResidualStreamT<T> stream = forward_recorded(z0, model.vit, model.vit_cfg);
  if (!use_cpc) return {stream.final};
  std::vector<TensorT<T>> comps = decompose(stream);
  return std::vector<TensorT<T>>(comps.begin() + 1, comps.end());
}

template <typename T>
struct DecoupledFeatures {
  std::vector<TensorT<T>> components;
  TensorT<T> f_orth;  // empty when OSD is disabled
  bool has_orth = false;
};

template <typename T>
DecoupledFeatures<T> apply_osd(const std::vector<TensorT<T>>& components,
                               const std::optional<OsdParamsT<T>>& osd) {
  if (!osd) return {components, {}, false};
  const int dim = components[0].rows();
  OsdActivationsT<T> act = osd_forward(concat_components(components), *osd);
  return {split_components(act.f_up, dim), act.f_orth, true};
}

template <typename T>
struct EpisodeLossParts {
  TensorT<T> total, bce, orth;
  ScoreStackT<T> stack;
  TensorT<T> fused;
  PredictionT<T> pred;
};

// Full differentiable path for one episode with an explicit query. The
// orthogonality term sums the bottleneck penalty over the supports and
// the query.
template <typename T>
EpisodeLossParts<T> episode_loss(const ModelT<T>& model,
                                 const std::vector<std::pair<TensorT<T>, std::vector<std::uint8_t>>>& supports,
                                 const TensorT<T>& query_image,
                                 const std::vector<std::uint8_t>& query_mask,
                                 const TrainConfig& tc, bool use_afw_fusion) {
  const int h = query_image.dims()[1], w = query_image.dims()[2];
  const int n = model.vit_cfg.patch_n;

  std::vector<PrototypeSetT<T>> shot_protos;
  std::vector<TensorT<T>> orth_terms;
  for (const auto& [img, mask] : supports) {
    DecoupledFeatures<T> feats =
        apply_osd(encoder_components(model, img, tc.cpc), model.osd);
    if (feats.has_orth) orth_terms.push_back(orth_loss(feats.f_orth));
    shot_protos.push_back(
        map_prototypes(feats.components, downsample_mask<T>(mask, h, w, n)));
  }
  PrototypeSetT<T> protos = average_prototypes(shot_protos);

  DecoupledFeatures<T> qfeats =
      apply_osd(encoder_components(model, query_image, tc.cpc), model.osd);
  if (qfeats.has_orth) orth_terms.push_back(orth_loss(qfeats.f_orth));

  EpisodeLossParts<T> out;
  out.stack = cross_compare(qfeats.components, protos, tc.metric);
  if (use_afw_fusion) {
    if (!model.afw) throw ContractError("episode_loss: AFW fusion requested without weights");
    out.fused = fuse_afw(out.stack, *model.afw);
  } else {
    out.fused = fuse_source(out.stack);
  }
  out.pred = predict(out.fused, h, w, static_cast<T>(tc.temperature));
  out.bce = bce_loss(out.pred.probs, query_mask);
  if (orth_terms.empty()) {
    out.orth = TensorT<T>::zeros({1});
  } else {
    out.orth = orth_terms[0];
    for (std::size_t i = 1; i < orth_terms.size(); ++i) out.orth = add(out.orth, orth_terms[i]);
  }
  out.total = total_loss(out.bce, out.orth, static_cast<T>(tc.lambda));
  return out;
}

// ---------------------------------------------------------------------------
// Optimizers

class Optimizer {
 public:
  struct Update {
    std::string name;
    Tensor* value = nullptr;
    Tensor grad;
  };

  Optimizer(OptimizerKind kind, float lr) : kind_(kind), lr_(lr) {}

  void step(std::vector<Update>& updates) {
    ++t_;
    for (Update& u : updates) {
      switch (kind_) {
        case OptimizerKind::kSgd: {
          for (std::int64_t i = 0; i < u.value->size(); ++i)
            u.value->at(i) -= lr_ * u.grad.at(i);
          break;
        }
        case OptimizerKind::kAdam: {
          State& s = state_[u.name];
          if (s.m.empty()) {
            s.m.assign(static_cast<std::size_t>(u.value->size()), 0.f);
            s.v.assign(static_cast<std::size_t>(u.value->size()), 0.f);
          }
          const double bc1 = 1.0 - std::pow(kBeta1, t_);
          const double bc2 = 1.0 - std::pow(kBeta2, t_);
          for (std::int64_t i = 0; i < u.value->size(); ++i) {
            const double g = u.grad.at(i);
            double& m = s.m[static_cast<std::size_t>(i)];
            double& v = s.v[static_cast<std::size_t>(i)];
            m = kBeta1 * m + (1.0 - kBeta1) * g;
            v = kBeta2 * v + (1.0 - kBeta2) * g * g;
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            u.value->at(i) -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + kEps));
          }
          break;
        }
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  struct State {
    std::vector<double> m, v;
  };

  OptimizerKind kind_;
  float lr_;
  int t_ = 0;
  std::unordered_map<std::string, State> state_;
};

namespace detail {

// Gathers raw-parameter pointers and tape gradients for the names the
// filter admits; traversal order is fixed by for_each_param.
inline std::vector<Optimizer::Update> collect_updates(
    Model& model, Model& watched, Tape& tape,
    const std::function<bool(const std::string&)>& trainable) {
  std::vector<Optimizer::Update> updates;
  std::vector<std::pair<std::string, Tensor*>> raw;
  for_each_param(model, [&raw](const std::string& name, Tensor& t) {
    raw.emplace_back(name, &t);
  });
  std::size_t i = 0;
  for_each_param(watched, [&](const std::string& name, Tensor& wt) {
    if (trainable(name)) updates.push_back({name, raw[i].second, tape.grad(wt)});
    ++i;
  });
  return updates;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Checkpoints (SDRC container)

struct Checkpoint {
  Model model;
  TrainConfig train;
  std::int64_t step = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_tensor(std::vector<std::uint8_t>& out, const std::string& name,
                       const Tensor& t) {
  put_u16(out, static_cast<std::uint16_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (int d : t.dims()) put_u32(out, static_cast<std::uint32_t>(d));
  for (std::int64_t i = 0; i < t.size(); ++i) put_f32(out, t.at(i));
}

inline std::vector<float> meta_vit(const VitConfig& c, const VitParams& p) {
  return {static_cast<float>(c.layers),
          static_cast<float>(c.dim),
          static_cast<float>(c.heads),
          static_cast<float>(c.patch_n),
          static_cast<float>(c.mlp_ratio),
          c.granularity == Granularity::kPerSublayer ? 1.f : 0.f,
          c.norm == NormMode::kPreNorm ? 1.f : 0.f,
          static_cast<float>(p.in_channels),
          static_cast<float>(p.patch_h),
          static_cast<float>(p.patch_w)};
}

inline std::vector<float> meta_train(const TrainConfig& t) {
  return {static_cast<float>(t.episodes),
          t.lr,
          t.optimizer == OptimizerKind::kAdam ? 1.f : 0.f,
          t.lambda,
          static_cast<float>(t.k_shot),
          static_cast<float>(static_cast<int>(t.metric)),
          t.cpc ? 1.f : 0.f,
          t.osd ? 1.f : 0.f,
          t.afw ? 1.f : 0.f,
          static_cast<float>(t.osd_rank),
          t.temperature,
          static_cast<float>(t.finetune_steps),
          t.finetune_lr,
          t.leave_one_out ? 1.f : 0.f};
}

inline std::vector<float> meta_seed(std::uint64_t seed) {
  std::vector<float> out(4);
  for (int i = 0; i < 4; ++i)
    out[static_cast<std::size_t>(i)] = static_cast<float>((seed >> (16 * i)) & 0xFFFF);
  return out;
}

inline std::uint64_t seed_from_meta(const std::vector<float>& v) {
  std::uint64_t seed = 0;
  for (int i = 0; i < 4; ++i)
    seed |= static_cast<std::uint64_t>(static_cast<std::uint32_t>(v[static_cast<std::size_t>(i)]))
            << (16 * i);
  return seed;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  Model& model = const_cast<Model&>(ckpt.model);
  for_each_param(model, [&tensors](const std::string& name, Tensor& t) {
    tensors.emplace_back(name, t);
  });
  tensors.emplace_back("meta.vit",
                       Tensor({10}, detail::meta_vit(ckpt.model.vit_cfg, ckpt.model.vit)));
  tensors.emplace_back("meta.train", Tensor({14}, detail::meta_train(ckpt.train)));
  tensors.emplace_back("meta.seed", Tensor({4}, detail::meta_seed(ckpt.train.seed)));
  tensors.emplace_back("meta.step", Tensor({1}, {static_cast<float>(ckpt.step)}));

  std::vector<std::uint8_t> out;
  out.push_back('S');
  out.push_back('D');
  out.push_back('R');
  out.push_back('C');
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) detail::put_tensor(out, name, t);
  return out;
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes, "SDRC");
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.u8("magic"));
  if (magic[0] != 'S' || magic[1] != 'D' || magic[2] != 'R' || magic[3] != 'C')
    throw ParseError(0, "SDRC: bad magic");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw ParseError(version_at, "SDRC: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32("tensor count");

  std::unordered_map<std::string, Tensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16("name length");
    std::string name;
    for (int c = 0; c < name_len; ++c) name.push_back(static_cast<char>(r.u8("name")));
    const int rank = r.u8("rank");
    std::vector<int> dims;
    std::int64_t total = 1;
    for (int d = 0; d < rank; ++d) {
      const std::size_t at = r.offset();
      const std::uint32_t extent = r.u32("dims");
      if (extent == 0) throw ParseError(at, "SDRC: zero extent in tensor " + name);
      dims.push_back(static_cast<int>(extent));
      total *= extent;
    }
    std::vector<float> data(static_cast<std::size_t>(total));
    for (float& f : data) {
      const std::size_t at = r.offset();
      f = r.f32("tensor data");
      if (!std::isfinite(f)) throw ParseError(at, "SDRC: non-finite value in tensor " + name);
    }
    tensors.emplace(name, Tensor(std::move(dims), std::move(data)));
  }
  if (!r.exhausted()) throw ParseError(r.offset(), "SDRC: trailing bytes");

  auto take = [&tensors](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw ParseError(0, "SDRC: missing tensor " + name);
    Tensor t = it->second;
    tensors.erase(it);
    return t;
  };

  const Tensor vit_meta = take("meta.vit");
  if (vit_meta.size() != 10) throw ParseError(0, "SDRC: malformed meta.vit");
  const Tensor train_meta = take("meta.train");
  if (train_meta.size() != 14) throw ParseError(0, "SDRC: malformed meta.train");
  const Tensor seed_meta = take("meta.seed");
  if (seed_meta.size() != 4) throw ParseError(0, "SDRC: malformed meta.seed");
  const Tensor step_meta = take("meta.step");

  Checkpoint ckpt;
  VitConfig& cfg = ckpt.model.vit_cfg;
  cfg.layers = static_cast<int>(vit_meta.at(0));
  cfg.dim = static_cast<int>(vit_meta.at(1));
  cfg.heads = static_cast<int>(vit_meta.at(2));
  cfg.patch_n = static_cast<int>(vit_meta.at(3));
  cfg.mlp_ratio = static_cast<int>(vit_meta.at(4));
  cfg.granularity =
      vit_meta.at(5) != 0.f ? Granularity::kPerSublayer : Granularity::kPerBlock;
  cfg.norm = vit_meta.at(6) != 0.f ? NormMode::kPreNorm : NormMode::kNormFree;
  const int channels = static_cast<int>(vit_meta.at(7));
  const int patch_h = static_cast<int>(vit_meta.at(8));
  const int patch_w = static_cast<int>(vit_meta.at(9));

  TrainConfig& tc = ckpt.train;
  tc.episodes = static_cast<int>(train_meta.at(0));
  tc.lr = train_meta.at(1);
  tc.optimizer = train_meta.at(2) != 0.f ? OptimizerKind::kAdam : OptimizerKind::kSgd;
  tc.lambda = train_meta.at(3);
  tc.k_shot = static_cast<int>(train_meta.at(4));
  tc.metric = static_cast<Metric>(static_cast<int>(train_meta.at(5)));
  tc.cpc = train_meta.at(6) != 0.f;
  tc.osd = train_meta.at(7) != 0.f;
  tc.afw = train_meta.at(8) != 0.f;
  tc.osd_rank = static_cast<int>(train_meta.at(9));
  tc.temperature = train_meta.at(10);
  tc.finetune_steps = static_cast<int>(train_meta.at(11));
  tc.finetune_lr = train_meta.at(12);
  tc.leave_one_out = train_meta.at(13) != 0.f;
  tc.seed = detail::seed_from_meta(seed_meta.values());
  ckpt.step = static_cast<std::int64_t>(step_meta.at(0));

  // Rebuild the parameter structure, then fill from the tensor map.
  Rng rng(0);
  ckpt.model.vit =
      init_vit_params<float>(cfg, channels, patch_h * cfg.patch_n, patch_w * cfg.patch_n, rng);
  if (tc.osd)
    ckpt.model.osd =
        init_osd_params<float>(effective_components(cfg, tc.cpc), cfg.dim, tc.osd_rank, rng);
  if (tensors.count("afw.w"))
    ckpt.model.afw = make_fusion_weights<float>(effective_components(cfg, tc.cpc));

  for_each_param(ckpt.model, [&](const std::string& name, Tensor& t) {
    Tensor stored = take(name);
    if (stored.dims() != t.dims())
      throw ParseError(0, "SDRC: tensor " + name + " has unexpected extents");
    t = stored;
  });
  if (!tensors.empty())
    throw ParseError(0, "SDRC: unknown tensor " + tensors.begin()->first);
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  detail::write_file_bytes(path, serialize_checkpoint(ckpt), "SDRC");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return parse_checkpoint(detail::read_file_bytes(path, "SDRC"));
}

// ---------------------------------------------------------------------------
// Training loops

struct TrainResult {
  Checkpoint ckpt;
  std::vector<double> bce_history;  // one entry per non-skipped episode
  int skipped_episodes = 0;
};

inline TrainResult train_source(const VitConfig& vit_cfg, const TrainConfig& tc,
                                const Dataset& dataset) {
  vit_cfg.validate();
  tc.validate();
  if (dataset.samples.empty()) throw ContractError("train_source: empty dataset");
  const Sample& probe = dataset.samples[0];
  const int channels = probe.image.dims()[0];
  const int image_h = probe.image.dims()[1];
  const int image_w = probe.image.dims()[2];

  TrainResult result;
  result.ckpt.train = tc;
  result.ckpt.model = make_model<float>(vit_cfg, tc, channels, image_h, image_w);
  Model& model = result.ckpt.model;

  Optimizer opt(tc.optimizer, tc.lr);
  auto trainable = [](const std::string& name) {
    return name.rfind("vit.", 0) == 0 || name.rfind("osd.", 0) == 0;
  };

  for (int ep = 0; ep < tc.episodes; ++ep) {
    const std::uint64_t ep_seed = derive_seed(tc.seed, 0x65700000ULL + static_cast<std::uint64_t>(ep));
    Episode episode = sample_episode(dataset, tc.k_shot, ep_seed);
    Tape tape;
    Model watched = watch_model(tape, model);
    EpisodeLossParts<float> parts;
    try {
      parts = episode_loss(watched, episode.supports, episode.query.first,
                           episode.query.second, tc, /*use_afw_fusion=*/false);
    } catch (const DegenerateMaskError&) {
      ++result.skipped_episodes;
      continue;
    }
    const float loss = parts.total.at(0);
    if (!std::isfinite(loss))
      throw ContractError("train_source: non-finite loss at episode seed " +
                          std::to_string(ep_seed));
    result.bce_history.push_back(parts.bce.at(0));
    tape.backward(parts.total);
    auto updates = detail::collect_updates(model, watched, tape, trainable);
    opt.step(updates);
    ++result.ckpt.step;
  }
  return result;
}

// One finetuning step's loss over the supports used as pseudo-queries.
// Encoder features are precomputed once outside the loop since the
// encoder is frozen here.
namespace detail {

struct FinetuneContext {
  std::vector<std::vector<Tensor>> support_components;  // pre-OSD, constant
  std::vector<Tensor> support_grid_masks;
  std::vector<std::vector<std::uint8_t>> support_masks;
  int image_h = 0, image_w = 0;
};

inline FinetuneContext prepare_finetune(
    const Model& model, const std::vector<std::pair<Tensor, std::vector<std::uint8_t>>>& supports,
    const TrainConfig& tc) {
  if (supports.empty()) throw ContractError("finetune_target: needs at least one support");
  FinetuneContext ctx;
  ctx.image_h = supports[0].first.dims()[1];
  ctx.image_w = supports[0].first.dims()[2];
  for (const auto& [img, mask] : supports) {
    ctx.support_components.push_back(encoder_components(model, img, tc.cpc));
    ctx.support_grid_masks.push_back(
        downsample_mask<float>(mask, ctx.image_h, ctx.image_w, model.vit_cfg.patch_n));
    ctx.support_masks.push_back(mask);
  }
  return ctx;
}

inline Tensor finetune_step_loss(const Model& watched, const FinetuneContext& ctx,
                                 const TrainConfig& tc) {
  const int shots = static_cast<int>(ctx.support_components.size());
  std::vector<DecoupledFeatures<float>> feats;
  std::vector<Tensor> orth_terms;
  for (int i = 0; i < shots; ++i) {
    feats.push_back(apply_osd(ctx.support_components[static_cast<std::size_t>(i)], watched.osd));
    if (feats.back().has_orth) orth_terms.push_back(orth_loss(feats.back().f_orth));
  }

  std::vector<PrototypeSetT<float>> shot_protos;
  for (int i = 0; i < shots; ++i)
    shot_protos.push_back(map_prototypes(feats[static_cast<std::size_t>(i)].components,
                                         ctx.support_grid_masks[static_cast<std::size_t>(i)]));

  Tensor bce_sum;
  for (int q = 0; q < shots; ++q) {
    PrototypeSetT<float> protos;
    if (tc.leave_one_out && shots > 1) {
      std::vector<PrototypeSetT<float>> held_out;
      for (int i = 0; i < shots; ++i)
        if (i != q) held_out.push_back(shot_protos[static_cast<std::size_t>(i)]);
      protos = average_prototypes(held_out);
    } else {
      protos = average_prototypes(shot_protos);
    }
    ScoreStackT<float> stack =
        cross_compare(feats[static_cast<std::size_t>(q)].components, protos, tc.metric);
    Tensor fused = watched.afw ? fuse_afw(stack, *watched.afw) : fuse_source(stack);
    PredictionT<float> pred = predict(fused, ctx.image_h, ctx.image_w, tc.temperature);
    Tensor bce = bce_loss(pred.probs, ctx.support_masks[static_cast<std::size_t>(q)]);
    bce_sum = q == 0 ? bce : add(bce_sum, bce);
  }
  Tensor bce = scale(bce_sum, 1.f / static_cast<float>(shots));

  Tensor orth;
  if (orth_terms.empty()) {
    orth = Tensor::zeros({1});
  } else {
    orth = orth_terms[0];
    for (std::size_t i = 1; i < orth_terms.size(); ++i) orth = add(orth, orth_terms[i]);
  }
  return total_loss(bce, orth, tc.lambda);
}

}  // namespace detail

// Adapts a checkpoint to K supports: the fusion weights (created at ones
// when enabled) and w_orth train, everything else stays frozen.
inline Checkpoint finetune_target(const Checkpoint& ckpt,
                                  const std::vector<std::pair<Tensor, std::vector<std::uint8_t>>>& supports,
                                  int steps, float lr) {
  if (steps < 0) throw ContractError("finetune_target: steps must be >= 0");
  if (lr < 0.f) throw ContractError("finetune_target: lr must be >= 0");
  Checkpoint adapted;
  adapted.train = ckpt.train;
  adapted.step = ckpt.step;
  adapted.model = clone_model(ckpt.model);
  const TrainConfig& tc = adapted.train;
  if (tc.afw && !adapted.model.afw)
    adapted.model.afw = make_fusion_weights<float>(
        effective_components(adapted.model.vit_cfg, tc.cpc));

  const bool any_trainable = tc.afw || (tc.osd && adapted.model.osd.has_value());
  if (steps == 0 || !any_trainable) return adapted;

  detail::FinetuneContext ctx = detail::prepare_finetune(adapted.model, supports, tc);
  Optimizer opt(tc.optimizer, lr);
  auto trainable = [&tc](const std::string& name) {
    return (tc.osd && name == "osd.w_orth") || (tc.afw && name == "afw.w");
  };
  for (int s = 0; s < steps; ++s) {
    Tape tape;
    Model watched = watch_model(tape, adapted.model);
    Tensor loss = detail::finetune_step_loss(watched, ctx, tc);
    if (!std::isfinite(loss.at(0)))
      throw ContractError("finetune_target: non-finite loss at step " + std::to_string(s));
    tape.backward(loss);
    auto updates = detail::collect_updates(adapted.model, watched, tape, trainable);
    opt.step(updates);
  }
  return adapted;
}

// Untracked prediction of a query against K supports.
struct EpisodePrediction {
  Prediction pred;
  ScoreStack stack;
};

inline EpisodePrediction predict_episode(
    const Model& model, const std::vector<std::pair<Tensor, std::vector<std::uint8_t>>>& supports,
    const Tensor& query_image, const TrainConfig& tc) {
  const int h = query_image.dims()[1], w = query_image.dims()[2];
  const int n = model.vit_cfg.patch_n;
  std::vector<PrototypeSetT<float>> shot_protos;
  for (const auto& [img, mask] : supports) {
    DecoupledFeatures<float> feats = apply_osd(encoder_components(model, img, tc.cpc), model.osd);
    shot_protos.push_back(map_prototypes(feats.components, downsample_mask<float>(mask, h, w, n)));
  }
  PrototypeSetT<float> protos = average_prototypes(shot_protos);
  DecoupledFeatures<float> qfeats =
      apply_osd(encoder_components(model, query_image, tc.cpc), model.osd);
  EpisodePrediction out;
  out.stack = cross_compare(qfeats.components, protos, tc.metric);
  Tensor fused = model.afw ? fuse_afw(out.stack, *model.afw) : fuse_source(out.stack);
  out.pred = predict(fused, h, w, tc.temperature);
  return out;
}

struct EvalEpisodeRecord {
  int index = 0;
  double mean_iou = 0.0;
  double iou_fg = 0.0;
  double iou_bg = 0.0;
  bool skipped = false;
  std::string reason;
};

struct EvalResult {
  double mean_iou = 0.0;
  int evaluated = 0;
  int skipped = 0;
  std::vector<EvalEpisodeRecord> per_episode;
};

// Seed stream for evaluation episodes; shared by the CLI and tests so a
// master seed pins the episode set.
inline std::uint64_t eval_episode_seed(std::uint64_t master, int index) {
  return derive_seed(master, 0x6576616CULL + static_cast<std::uint64_t>(index));
}

// Per episode: optional finetuning on the supports, then a query
// prediction scored by mean IoU. Episode failures become skip records.
inline EvalResult evaluate(const Checkpoint& ckpt, const std::vector<Episode>& episodes) {
  if (episodes.empty()) throw ContractError("evaluate: no episodes");
  EvalResult result;
  double iou_sum = 0.0;
  for (int i = 0; i < static_cast<int>(episodes.size()); ++i) {
    const Episode& ep = episodes[static_cast<std::size_t>(i)];
    EvalEpisodeRecord rec;
    rec.index = i;
    try {
      Checkpoint adapted = finetune_target(ckpt, ep.supports, ckpt.train.finetune_steps,
                                           ckpt.train.finetune_lr);
      EpisodePrediction p = predict_episode(adapted.model, ep.supports, ep.query.first,
                                            adapted.train);
      IouResult iou = miou(p.pred.labels, ep.query.second);
      rec.mean_iou = iou.mean;
      rec.iou_fg = iou.iou_fg;
      rec.iou_bg = iou.iou_bg;
      iou_sum += iou.mean;
      ++result.evaluated;
    } catch (const Error& e) {
      rec.skipped = true;
      rec.reason = e.what();
      ++result.skipped;
    }
    result.per_episode.push_back(std::move(rec));
  }
  if (result.evaluated == 0) throw ContractError("evaluate: every episode was skipped");
  result.mean_iou = iou_sum / result.evaluated;
  return result;
}

}  // namespace sdrc
