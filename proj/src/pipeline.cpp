#include "diat/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "diat/checkpoint.hpp"
#include "diat/ops.hpp"

namespace diat::pipeline {

namespace fs = std::filesystem;

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::diat: return "DIAT";
    case Variant::diat_a: return "DIAT-A";
    case Variant::diat_a0: return "DIAT-A0";
    case Variant::diat1: return "DIAT1";
    case Variant::diat2: return "DIAT2";
    case Variant::diat3: return "DIAT3";
  }
  return "?";
}

Variant parse_variant(std::string_view text) {
  for (auto v : {Variant::diat, Variant::diat_a, Variant::diat_a0, Variant::diat1, Variant::diat2, Variant::diat3})
    if (variant_name(v) == text) return v;
  throw std::invalid_argument("unknown variant '" + std::string(text) +
                              "' (expected DIAT, DIAT-A, DIAT-A0, DIAT1, DIAT2 or DIAT3)");
}

std::string_view enhance_name(EnhanceMode m) {
  switch (m) {
    case EnhanceMode::none: return "none";
    case EnhanceMode::local: return "local";
    case EnhanceMode::global: return "global";
    case EnhanceMode::automatic: return "auto";
  }
  return "?";
}

EnhanceMode parse_enhance(std::string_view text) {
  for (auto m : {EnhanceMode::none, EnhanceMode::local, EnhanceMode::global, EnhanceMode::automatic})
    if (enhance_name(m) == text) return m;
  throw std::invalid_argument("unknown enhancement mode '" + std::string(text) + "'");
}

TrainConfig TrainConfig::for_variant(Variant v) {
  TrainConfig c;
  c.variant = v;
  c.loss.lambda = 0.1;
  c.loss.gamma = 0.001;
  c.lr_t = c.lr_d = 1e-4;
  c.enhance = EnhanceMode::automatic;
  switch (v) {
    case Variant::diat: break;
    case Variant::diat_a:
    case Variant::diat_a0:
      c.loss.gamma = 0.0;
      c.lr_t = c.lr_d = 1e-5;
      if (v == Variant::diat_a0) c.enhance = EnhanceMode::none;
      break;
    case Variant::diat1:
      c.loss.lambda = c.loss.gamma = 0.0;
      c.enhance = EnhanceMode::none;
      break;
    case Variant::diat2:
      c.loss.gamma = 0.0;
      c.enhance = EnhanceMode::none;
      break;
    case Variant::diat3: c.enhance = EnhanceMode::none; break;
  }
  return c;
}

EnhanceMode TrainConfig::effective_enhance() const {
  if (enhance != EnhanceMode::automatic) return enhance;
  return data::local_index(attribute.name()) >= 0 ? EnhanceMode::local : EnhanceMode::global;
}

loss::LossConfig TrainConfig::effective_loss() const {
  auto l = loss;
  if (scale_gamma_with_resolution) {
    const double r = 128.0 / image_size();
    l.gamma *= r * r;
  }
  return l;
}

void TrainConfig::validate() const {
  loss.validate();
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
  };
  require(lr_t > 0 && lr_d > 0 && lr_pretrain > 0 && lr_enhance > 0, "learning rates must be > 0");
  require(dstep >= 1 && tstep >= 1, "dstep and tstep must be >= 1");
  require(batch >= 1, "batch must be >= 1");
  require(max_iters >= 1, "max_iters must be >= 1");
  require(plateau_window >= 1 && plateau_min_delta >= 0, "plateau settings out of range");
  require(success_threshold >= 0 && success_threshold <= 1, "success_threshold must lie in [0,1]");
  require(eval_every >= 1 && eval_size >= 1 && checkpoint_every >= 1, "eval/checkpoint intervals must be >= 1");
  require(input_limit >= 0, "input_limit must be >= 0");
  for (auto s : {pretrain_t_steps, pretrain_d_steps, embedder_steps, classifier_steps, regularizer_g_steps,
                 regularizer_f_steps, enhancer_steps})
    require(s >= 0, "step counts must be >= 0");
  (void)scale.resolution();  // throws ShapeError on an unusable scale

  const bool lam = loss.lambda > 0, gam = loss.gamma > 0;
  const bool no_enh = enhance == EnhanceMode::none;
  const std::string v(variant_name(variant));
  switch (variant) {
    case Variant::diat1: require(!lam && !gam, v + " uses the attribute loss only (lambda = gamma = 0)"); break;
    case Variant::diat2: require(lam && !gam && no_enh, v + " needs lambda > 0, gamma = 0 and enhance = none"); break;
    case Variant::diat3: require(lam && gam && no_enh, v + " needs lambda > 0, gamma > 0 and enhance = none"); break;
    case Variant::diat: require(lam && gam, v + " needs lambda > 0 and gamma > 0"); break;
    case Variant::diat_a: require(lam && !gam, v + " needs lambda > 0 and gamma = 0"); break;
    case Variant::diat_a0: require(lam && !gam && no_enh, v + " needs lambda > 0, gamma = 0 and enhance = none"); break;
  }
}

TermSet active_terms(const TrainConfig& cfg) {
  TermSet t;
  const bool lam = cfg.loss.lambda > 0;
  t.identity = lam && !cfg.adaptive();
  t.adaptive_identity = lam && cfg.adaptive();
  t.smooth = cfg.loss.gamma > 0 && !cfg.adaptive();
  return t;
}

// --- helpers ---

namespace {

std::int64_t rows_of(const Tensor& t) { return t.shape()[0]; }

std::vector<std::int64_t> draw(std::int64_t n, int count, std::mt19937_64& rng) {
  if (n <= 0) throw std::invalid_argument("cannot sample from an empty set");
  std::uniform_int_distribution<std::int64_t> u(0, n - 1);
  std::vector<std::int64_t> out(static_cast<std::size_t>(count));
  for (auto& i : out) i = u(rng);
  return out;
}

std::vector<std::int64_t> draw_from(const std::vector<std::int64_t>& pool, int count, std::mt19937_64& rng) {
  auto idx = draw(static_cast<std::int64_t>(pool.size()), count, rng);
  for (auto& i : idx) i = pool[static_cast<std::size_t>(i)];
  return idx;
}

// Concatenates [n_i, ...] tensors along the batch dimension.
Tensor concat_rows(const std::vector<Tensor>& parts) {
  auto dims = parts.front().shape().dims();
  std::int64_t n = 0;
  std::vector<double> v;
  for (const auto& p : parts) {
    n += p.shape()[0];
    const auto pv = p.to_vector();
    v.insert(v.end(), pv.begin(), pv.end());
  }
  dims[0] = n;
  return Tensor::from(Shape(dims), v, parts.front().dtype());
}

// Applies fn to chunks of at most `chunk` rows without recording.
Tensor map_rows(const Tensor& x, const std::function<Tensor(const Tensor&)>& fn, std::int64_t chunk = 64) {
  NoGradGuard guard;
  const auto n = rows_of(x);
  if (n <= chunk) return fn(x);
  std::vector<Tensor> parts;
  for (std::int64_t s = 0; s < n; s += chunk) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = s; i < std::min(n, s + chunk); ++i) idx.push_back(i);
    parts.push_back(fn(data::gather(x, idx)));
  }
  return concat_rows(parts);
}

void check_finite(const Tensor& loss, const char* what, std::int64_t iteration) {
  if (!std::isfinite(loss.item()))
    throw Diverged(std::string("non-finite ") + what + " at iteration " + std::to_string(iteration), iteration);
}

// One optimizer step on `net` minimizing loss_fn(); returns the loss value.
double fit_step(nn::Network& net, optim::Adam& opt, const std::function<Tensor()>& loss_fn, std::int64_t step) {
  net.zero_grads();
  GradTape tape;
  auto l = loss_fn();
  check_finite(l, "loss", step);
  tape.backward(l);
  try {
    opt.step();
  } catch (const optim::NonFiniteGradient& e) {
    throw Diverged(e.what(), step);
  }
  return l.item();
}

PhaseReport run_phase(nn::Network& net, const PhaseOptions& opt, const std::function<Tensor(std::mt19937_64&)>& loss_fn) {
  net.set_trainable(true);
  optim::Adam adam(net, optim::AdamConfig{.lr = opt.lr, .on_non_finite = optim::NonFinitePolicy::abort});
  std::mt19937_64 rng(opt.seed);
  PhaseReport r;
  for (std::int64_t s = 0; s < opt.steps; ++s)
    r.losses.push_back(fit_step(net, adam, [&] { return loss_fn(rng); }, s));
  if (!r.losses.empty()) {
    r.initial_loss = r.losses.front();
    r.final_loss = r.losses.back();
  }
  net.set_trainable(false);
  return r;
}

double mean_sq(const Tensor& a, const Tensor& b) {
  const auto av = a.to_vector(), bv = b.to_vector();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  return s / static_cast<double>(av.size());
}

Tensor labels_tensor(const std::vector<double>& y, DType dt) {
  return Tensor::from(Shape{static_cast<std::int64_t>(y.size()), 1}, y, dt);
}

std::vector<double> scores(const nn::Network& net, const Tensor& x) {
  return map_rows(x, [&](const Tensor& c) { return net(c); }).to_vector();
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

Tensor sample_rows(const Tensor& batch, int n, std::mt19937_64& rng) {
  return data::gather(batch, draw(rows_of(batch), n, rng));
}

double psnr(const Tensor& a, const Tensor& b) {
  const double mse = mean_sq(a, b);
  return mse <= 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
}

// --- auxiliary phases ---

PhaseReport pretrain_transform(nn::Network& t, const Tensor& train, const Tensor& held_out, const PhaseOptions& opt) {
  auto r = run_phase(t, opt, [&](std::mt19937_64& rng) {
    return loss::pretrain_recon_loss(t, sample_rows(train, opt.batch, rng));
  });
  r.held_out_metric = mean_sq(map_rows(held_out, [&](const Tensor& x) { return t(x); }), held_out);
  return r;
}

PhaseReport pretrain_discriminator(nn::Network& d, const data::Dataset& ds, const std::vector<std::int64_t>& train,
                                   const std::vector<std::int64_t>& held_out, const data::AttributeTarget& target,
                                   const PhaseOptions& opt) {
  std::vector<std::int64_t> pos, neg;
  for (auto i : train) (ds.has(i, target.name()) == target.value ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty())
    throw std::invalid_argument("discriminator pretraining needs both positive and negative samples for " +
                                target.str());
  const int half = std::max(1, opt.batch / 2);
  std::vector<double> y(static_cast<std::size_t>(2 * half), 0.0);
  std::fill(y.begin(), y.begin() + half, 1.0);
  auto r = run_phase(d, opt, [&](std::mt19937_64& rng) {
    auto idx = draw_from(pos, half, rng);
    const auto n = draw_from(neg, half, rng);
    idx.insert(idx.end(), n.begin(), n.end());
    return loss::pretrain_disc_loss(d, data::gather(ds.images, idx), y);
  });
  const auto p = scores(d, data::gather(ds.images, held_out));
  std::int64_t correct = 0;
  for (std::size_t k = 0; k < held_out.size(); ++k)
    correct += (p[k] >= 0.5) == (ds.has(held_out[k], target.name()) == target.value);
  r.held_out_metric = static_cast<double>(correct) / static_cast<double>(held_out.size());
  return r;
}

PhaseReport train_embedder(nn::Network& phi, const data::Dataset& ds, const std::vector<std::int64_t>& train,
                           const std::vector<std::int64_t>& held_out, const PhaseOptions& opt) {
  auto ids = [&](const std::vector<std::int64_t>& rows) {
    std::vector<int> y;
    for (auto i : rows) y.push_back(ds.manifest.rows[static_cast<std::size_t>(i)].identity);
    return y;
  };
  auto r = run_phase(phi, opt, [&](std::mt19937_64& rng) {
    const auto idx = draw_from(train, opt.batch, rng);
    return softmax_cross_entropy(phi(data::gather(ds.images, idx)), ids(idx));
  });
  const auto logits = map_rows(data::gather(ds.images, held_out), [&](const Tensor& x) { return phi(x); });
  const auto k = logits.shape()[1];
  const auto v = logits.to_vector();
  const auto y = ids(held_out);
  std::int64_t correct = 0;
  for (std::size_t n = 0; n < y.size(); ++n) {
    const auto* row = v.data() + n * static_cast<std::size_t>(k);
    correct += std::max_element(row, row + k) - row == y[n];
  }
  r.held_out_metric = static_cast<double>(correct) / static_cast<double>(y.size());
  return r;
}

PhaseReport train_attribute_classifier(nn::Network& c, const data::Dataset& ds, int attribute,
                                       const std::vector<std::int64_t>& train,
                                       const std::vector<std::int64_t>& held_out, const PhaseOptions& opt) {
  const auto name = data::kAttributes.at(static_cast<std::size_t>(attribute));
  std::vector<std::int64_t> pos, neg;
  for (auto i : train) (ds.has(i, name) ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty())
    throw std::invalid_argument("attribute classifier needs both classes of " + std::string(name));
  const int half = std::max(1, opt.batch / 2);
  std::vector<double> yv(static_cast<std::size_t>(2 * half), 0.0);
  std::fill(yv.begin(), yv.begin() + half, 1.0);
  const auto y = labels_tensor(yv, c.dtype());
  const auto one_minus_y = labels_tensor(std::vector<double>(yv.rbegin(), yv.rend()), c.dtype());
  auto r = run_phase(c, opt, [&](std::mt19937_64& rng) {
    auto idx = draw_from(pos, half, rng);
    const auto n = draw_from(neg, half, rng);
    idx.insert(idx.end(), n.begin(), n.end());
    const auto p = c(data::gather(ds.images, idx));
    const auto ll = add(mul(y, log_clamped(p, 1e-7)),
                        mul(one_minus_y, log_clamped(add_scalar(mul_scalar(p, -1.0), 1.0), 1e-7)));
    return mul_scalar(mean(ll), -1.0);
  });
  const auto p = scores(c, data::gather(ds.images, held_out));
  std::int64_t correct = 0;
  for (std::size_t k = 0; k < held_out.size(); ++k) correct += (p[k] >= 0.5) == ds.has(held_out[k], name);
  r.held_out_metric = static_cast<double>(correct) / static_cast<double>(held_out.size());
  return r;
}

RegularizerReport train_regularizer(nn::Network& g, nn::Network& f, const nn::Network& phi, const Tensor& train,
                                    const Tensor& held_out, const loss::LossConfig& cfg, const PhaseOptions& g_opt,
                                    const PhaseOptions& f_opt) {
  if (phi.trainable()) throw std::logic_error("train_regularizer: the embedder must be frozen");
  RegularizerReport r;
  r.g = run_phase(g, g_opt, [&](std::mt19937_64& rng) {
    return loss::reconstruction_objective(g, phi, sample_rows(train, g_opt.batch, rng), cfg);
  });
  // run_phase leaves g frozen, which denoiser_objective requires.
  r.f = run_phase(f, f_opt, [&](std::mt19937_64& rng) {
    return loss::denoiser_objective(f, g, sample_rows(train, f_opt.batch, rng));
  });
  r.clean_residual_per_pixel = mean_sq(map_rows(held_out, [&](const Tensor& x) { return f(x); }), held_out);
  r.f.held_out_metric = r.clean_residual_per_pixel;
  return r;
}

namespace {

double outside_mask_change(const Tensor& out, const Tensor& x, const Tensor& masks) {
  const auto o = out.to_vector(), xv = x.to_vector(), m = masks.to_vector();
  const auto n = rows_of(x), c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  double s = 0.0, w = 0.0;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < c; ++k)
      for (std::int64_t p = 0; p < hw; ++p) {
        const double keep = 1.0 - m[static_cast<std::size_t>(i * hw + p)];
        const auto at = static_cast<std::size_t>((i * c + k) * hw + p);
        s += keep * std::abs(o[at] - xv[at]);
        w += keep;
      }
  return w > 0 ? s / w : 0.0;
}

}  // namespace

PhaseReport train_local_enhancer(nn::Network& e, const nn::Network& t, const nn::Network& phi, const Tensor& train_x,
                                 const Tensor& train_masks, const Tensor& held_x, const Tensor& held_masks,
                                 const loss::LossConfig& cfg, const PhaseOptions& opt) {
  if (t.trainable() || phi.trainable()) throw std::logic_error("train_local_enhancer: T and phi must be frozen");
  auto r = run_phase(e, opt, [&](std::mt19937_64& rng) {
    const auto idx = draw(rows_of(train_x), opt.batch, rng);
    const auto x = data::gather(train_x, idx), m = data::gather(train_masks, idx);
    Tensor tx;
    {
      NoGradGuard guard;
      tx = t(x);
    }
    return loss::local_enhance_loss(e, tx, x, m, phi, cfg);
  });
  const auto out = run_transfer(t, &e, EnhanceMode::local, held_x);
  r.held_out_metric = outside_mask_change(out, held_x, held_masks);
  return r;
}

PhaseReport train_global_enhancer(nn::Network& e, const Tensor& train, const Tensor& held_out, double sigma,
                                  const PhaseOptions& opt) {
  if (!(sigma > 0.0)) throw std::invalid_argument("train_global_enhancer: sigma must be > 0");
  auto r = run_phase(e, opt, [&](std::mt19937_64& rng) {
    return loss::global_enhance_loss(e, sample_rows(train, opt.batch, rng), sigma);
  });
  const auto blurred = map_rows(held_out, [&](const Tensor& x) { return gaussian_blur(x, sigma); });
  const auto restored = map_rows(blurred, [&](const Tensor& b) { return clamp(e(b), 0.0, 1.0); });
  r.held_out_metric = psnr(restored, held_out) - psnr(blurred, held_out);
  return r;
}

// --- Algorithm 1 ---

std::string TrainReport::to_tsv() const {
  std::ostringstream o;
  o << "iteration\tloss_d\tadversarial\tidentity\tsmooth\tloss_t\tattribute_score\tidentity_distance\n";
  for (const auto& r : rows)
    o << r.iteration << "\t" << fmt(r.loss_d) << "\t" << fmt(r.adversarial) << "\t" << fmt(r.identity) << "\t"
      << fmt(r.smooth) << "\t" << fmt(r.loss_t) << "\t" << fmt(r.attribute_score) << "\t"
      << fmt(r.identity_distance) << "\n";
  o << "# iterations_to_threshold\t" << iterations_to_threshold << "\n";
  o << "# stop_reason\t" << stop_reason << "\n";
  return o.str();
}

TrainReport TrainReport::from_tsv(std::string_view text) {
  TrainReport r;
  std::istringstream in{std::string(text)};
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto tab = line.find('\t');
      const auto key = line.substr(2, tab - 2), val = tab == std::string::npos ? "" : line.substr(tab + 1);
      if (key == "iterations_to_threshold") r.iterations_to_threshold = std::stoll(val);
      else if (key == "stop_reason") r.stop_reason = val;
      continue;
    }
    if (!header) {
      header = true;
      continue;
    }
    std::istringstream f(line);
    ReportRow row;
    std::string cell;
    std::vector<double> v;
    while (std::getline(f, cell, '\t')) v.push_back(std::strtod(cell.c_str(), nullptr));
    if (v.size() != 8) throw std::invalid_argument("train report: malformed row '" + line + "'");
    row.iteration = static_cast<std::int64_t>(v[0]);
    row.loss_d = v[1];
    row.adversarial = v[2];
    row.identity = v[3];
    row.smooth = v[4];
    row.loss_t = v[5];
    row.attribute_score = v[6];
    row.identity_distance = v[7];
    r.rows.push_back(row);
  }
  return r;
}

void TrainState::save(const fs::path& dir) const {
  fs::create_directories(dir);
  std::ostringstream rng_text;
  rng_text << rng;
  auto ct = make_checkpoint(t, static_cast<std::uint64_t>(iteration));
  opt_t.export_state(ct);
  ct.rng_state = rng_text.str();
  ct.meta["report"] = report.to_tsv();
  ct.meta["finished"] = finished ? "1" : "0";
  auto cd = make_checkpoint(d, static_cast<std::uint64_t>(iteration));
  opt_d.export_state(cd);
  cd.rng_state = ct.rng_state;
  ct.save(dir / "t.ckpt");
  cd.save(dir / "d.ckpt");
}

void TrainState::load(const fs::path& dir) {
  for (const auto* name : {"t.ckpt", "d.ckpt"})
    if (!fs::exists(dir / name)) throw MissingPrerequisite("no training checkpoint " + (dir / name).string());
  const auto ct = Checkpoint::load(dir / "t.ckpt");
  const auto cd = Checkpoint::load(dir / "d.ckpt");
  if (ct.step != cd.step) throw CheckpointError("transform and discriminator checkpoints are from different steps");
  restore_params(ct, t);
  restore_params(cd, d);
  opt_t.import_state(ct);
  opt_d.import_state(cd);
  std::istringstream rng_text(ct.rng_state);
  rng_text >> rng;
  if (!rng_text) throw CheckpointError("malformed RNG state in training checkpoint");
  iteration = static_cast<std::int64_t>(ct.step);
  report = TrainReport::from_tsv(ct.meta.at("report"));
  finished = ct.meta.count("finished") && ct.meta.at("finished") == "1";
}

TrainState start_training(const TrainConfig& cfg, const nn::Network& t, const nn::Network& d) {
  cfg.validate();
  TrainState s;
  s.t = t.clone();
  s.d = d.clone();
  s.t.set_trainable(true);
  s.d.set_trainable(true);
  s.opt_t = optim::Adam(s.t, optim::AdamConfig{.lr = cfg.lr_t, .on_non_finite = optim::NonFinitePolicy::abort});
  s.opt_d = optim::Adam(s.d, optim::AdamConfig{.lr = cfg.lr_d, .on_non_finite = optim::NonFinitePolicy::abort});
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0x7a11u};
  s.rng.seed(seq);
  return s;
}

double attribute_success(const nn::Network& c_attr, const data::AttributeTarget& target, const Tensor& images) {
  const auto p = scores(c_attr, images);
  std::int64_t hit = 0;
  for (double v : p) hit += (v >= 0.5) == target.value;
  return static_cast<double>(hit) / static_cast<double>(p.size());
}

void train_transform(const TrainConfig& cfg, TrainState& state, const TrainData& data, const Auxiliary& aux,
                     std::int64_t stop_after, const std::function<void(const TrainState&)>& on_checkpoint) {
  cfg.validate();
  const auto terms = active_terms(cfg);
  const auto lc = cfg.effective_loss();
  if (terms.identity && !aux.phi) throw MissingPrerequisite("identity loss needs a trained embedder");
  if (terms.smooth && !aux.f) throw MissingPrerequisite("smooth regularizer needs a trained denoising network");
  if (!aux.c_attr) throw MissingPrerequisite("training needs the evaluation attribute classifier");
  if (rows_of(data.inputs) < 1 || rows_of(data.guided) < 1) throw std::invalid_argument("empty input or guided set");
  auto& t = state.t;
  auto& d = state.d;
  auto& rng = state.rng;
  auto& report = state.report;
  // With lambda = 0 the embedder is never evaluated; any network fills the slot.
  const nn::Network& phi_ref = aux.phi ? *aux.phi : *aux.c_attr;

  auto evaluate_now = [&](ReportRow& row) {
    const auto out = map_rows(data.eval, [&](const Tensor& x) { return t(x); });
    row.attribute_score = attribute_success(*aux.c_attr, cfg.attribute, out);
    row.identity_distance =
        aux.phi_eval ? mean_pair_distance(embed(*aux.phi_eval, data.eval), embed(*aux.phi_eval, out)) : 0.0;
  };

  while (!state.finished) {
    if (stop_after >= 0 && state.iteration >= stop_after) return;
    const std::int64_t k = state.iteration + 1;
    ReportRow row;
    row.iteration = k;

    t.set_trainable(false);
    d.set_trainable(true);
    for (int i = 0; i < cfg.dstep; ++i) {
      const auto x = sample_rows(data.inputs, cfg.batch, rng);
      const auto a = sample_rows(data.guided, cfg.batch, rng);
      Tensor fake;
      {
        NoGradGuard guard;  // fakes come from the current T
        fake = t(x);
      }
      row.loss_d = fit_step(d, state.opt_d,
                            [&] { return loss::diat_discriminator_loss(d, a, fake, x, lc, cfg.adaptive()); }, k);
    }

    d.set_trainable(false);
    t.set_trainable(true);
    for (int i = 0; i < cfg.tstep; ++i) {
      const auto x = sample_rows(data.inputs, cfg.batch, rng);
      loss::ObjectiveTerms last;
      fit_step(t, state.opt_t,
               [&] {
                 const auto tx = t(x);
                 last = cfg.adaptive() ? loss::diat_a_generator_terms(d, tx, x, lc)
                                       : loss::diat_generator_terms(d, aux.f, phi_ref, tx, x, lc);
                 return last.loss_t;
               },
               k);
      row.adversarial = last.adversarial.item();
      row.identity = last.identity.item();
      row.smooth = last.smooth.item();
      row.loss_t = last.loss_t.item();
    }
    t.set_trainable(false);

    const bool eval_now = k == 1 || k % cfg.eval_every == 0;
    if (eval_now) {
      evaluate_now(row);
    } else {
      row.attribute_score = report.rows.back().attribute_score;
      row.identity_distance = report.rows.back().identity_distance;
    }
    report.rows.push_back(row);
    state.iteration = k;
    if (eval_now && report.iterations_to_threshold < 0 && row.attribute_score >= cfg.success_threshold)
      report.iterations_to_threshold = k;

    if (k >= cfg.max_iters) {
      state.finished = true;
      report.stop_reason = "max_iters";
    } else if (eval_now && k > cfg.plateau_window) {
      // Plateau: the best score of the last window beats the best before it
      // by less than min_delta.
      double before = -1.0, recent = -1.0;
      for (const auto& r : report.rows) {
        double& slot = r.iteration <= k - cfg.plateau_window ? before : recent;
        slot = std::max(slot, r.attribute_score);
      }
      if (recent - before < cfg.plateau_min_delta) {
        state.finished = true;
        report.stop_reason = "plateau";
      }
    }
    if (on_checkpoint && (state.finished || k % cfg.checkpoint_every == 0)) on_checkpoint(state);
  }
}

// --- inference and evaluation ---

Tensor run_transfer(const nn::Network& t, const nn::Network* e, EnhanceMode mode, const Tensor& x, double sigma) {
  if (mode == EnhanceMode::automatic) throw std::invalid_argument("run_transfer: resolve the enhancement mode first");
  if (mode != EnhanceMode::none && e == nullptr)
    throw MissingPrerequisite("enhancement mode " + std::string(enhance_name(mode)) + " needs an enhancer");
  const bool single = x.rank() == 3;
  const auto xb = single ? x.view(Shape{1, x.shape()[0], x.shape()[1], x.shape()[2]}) : x;
  auto out = map_rows(xb, [&](const Tensor& c) {
    const auto tx = t(c);
    switch (mode) {
      case EnhanceMode::local: return clamp((*e)(concat_channels({c, tx})), 0.0, 1.0);
      case EnhanceMode::global: return clamp((*e)(gaussian_blur(tx, sigma)), 0.0, 1.0);
      default: return clamp(tx, 0.0, 1.0);
    }
  });
  return single ? out.view(x.shape()) : out;
}

Tensor embed(const nn::Network& phi, const Tensor& x) {
  auto out = map_rows(x, [&](const Tensor& c) { return phi(c); });
  const auto n = rows_of(out);
  return out.view(Shape{n, out.numel() / n});
}

double mean_pair_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mean_pair_distance: shape mismatch");
  const auto n = rows_of(a), k = a.numel() / n;
  const auto av = a.to_vector(), bv = b.to_vector();
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
      const double d = av[static_cast<std::size_t>(i * k + j)] - bv[static_cast<std::size_t>(i * k + j)];
      s += d * d;
    }
    total += std::sqrt(s);
  }
  return total / static_cast<double>(n);
}

Metrics evaluate(const nn::Network& t, const nn::Network* e, EnhanceMode mode, const nn::Network& phi_eval,
                 const nn::Network& c_attr, const data::AttributeTarget& target, const Tensor& inputs,
                 const std::vector<int>& identities, const Tensor* masks, double sigma) {
  const auto n = rows_of(inputs);
  if (static_cast<std::int64_t>(identities.size()) != n) throw std::invalid_argument("evaluate: one identity per input");
  Metrics m;
  m.count = n;
  const auto out = run_transfer(t, e, mode, inputs, sigma);
  m.attribute_success = attribute_success(c_attr, target, out);
  const auto ex = embed(phi_eval, inputs), eo = embed(phi_eval, out);
  m.identity_distance = mean_pair_distance(ex, eo);
  // Baseline: each input against the next output with a different identity.
  std::vector<std::int64_t> other(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t j = (i + 1) % n;
    while (j != i && identities[static_cast<std::size_t>(j)] == identities[static_cast<std::size_t>(i)]) j = (j + 1) % n;
    other[static_cast<std::size_t>(i)] = j;
  }
  m.baseline_distance = mean_pair_distance(ex, data::gather(eo, other));
  if (masks) m.outside_mask_change = outside_mask_change(out, inputs, *masks);
  data::AttributeTarget raw = target;
  raw.value = !target.value;  // inputs lack the target
  m.classifier_accuracy_raw = attribute_success(c_attr, raw, inputs);
  return m;
}

void write_mosaic(const fs::path& path, const std::vector<Tensor>& columns) {
  if (columns.empty()) throw std::invalid_argument("write_mosaic: no columns");
  const auto n = rows_of(columns[0]), S = columns[0].shape()[2];
  const auto cols = static_cast<std::int64_t>(columns.size());
  const auto H = n * S, W = cols * S;
  std::vector<double> img(static_cast<std::size_t>(3 * H * W), 0.0);
  for (std::int64_t c = 0; c < cols; ++c) {
    if (columns[static_cast<std::size_t>(c)].shape() != columns[0].shape())
      throw ShapeError("write_mosaic: columns differ in shape");
    const auto v = columns[static_cast<std::size_t>(c)].to_vector();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t k = 0; k < 3; ++k)
        for (std::int64_t y = 0; y < S; ++y)
          for (std::int64_t x = 0; x < S; ++x)
            img[static_cast<std::size_t>((k * H + i * S + y) * W + c * S + x)] =
                v[static_cast<std::size_t>(((i * 3 + k) * S + y) * S + x)];
  }
  data::encode_image(Tensor::from(Shape{3, H, W}, img, DType::f32), path);
}

}  // namespace diat::pipeline
