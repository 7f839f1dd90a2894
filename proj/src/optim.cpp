#include "diat/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace diat::optim {

Adam::Adam(std::vector<Tensor> params, std::vector<std::string> names, AdamConfig cfg)
    : params_(std::move(params)), names_(std::move(names)), cfg_(cfg) {
  if (names_.size() != params_.size()) throw std::invalid_argument("Adam: one name per parameter required");
  if (!(cfg_.lr >= 0.0) || !(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0) || !(cfg_.beta2 >= 0.0 && cfg_.beta2 < 1.0) ||
      !(cfg_.eps > 0.0))
    throw std::invalid_argument("Adam: invalid hyperparameters");
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p.shape(), p.dtype()));
    v_.push_back(Tensor::zeros(p.shape(), p.dtype()));
  }
}

namespace {
std::vector<std::string> param_names(const nn::Network& net) {
  std::vector<std::string> out;
  for (const auto& p : net.params()) out.push_back(p.name);
  return out;
}
}  // namespace

Adam::Adam(const nn::Network& net, AdamConfig cfg) : Adam(net.parameters(), param_names(net), cfg) {}

bool Adam::step() {
  if (!grads_finite(params_)) {
    if (cfg_.on_non_finite == NonFinitePolicy::abort)
      throw NonFiniteGradient("non-finite gradient at optimizer step " + std::to_string(t_ + 1));
    ++skipped_;
    return false;
  }
  if (cfg_.clip_norm > 0.0) clip_grad_norm(params_, cfg_.clip_norm);
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    dispatch(p.dtype(), [&]<class T>() {
      // A parameter without a grad buffer is updated as if its gradient were zero.
      const T* g = p.has_grad() ? p.grad_data<T>().data() : nullptr;
      auto m = m_[i].mutable_data<T>();
      auto v = v_[i].mutable_data<T>();
      auto w = p.mutable_data<T>();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g ? static_cast<double>(g[j]) : 0.0;
        m[j] = static_cast<T>(b1 * m[j] + (1.0 - b1) * gj);
        v[j] = static_cast<T>(b2 * v[j] + (1.0 - b2) * gj * gj);
        const double mh = m[j] / c1, vh = v[j] / c2;
        w[j] = static_cast<T>(w[j] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    });
  }
  return true;
}

void Adam::export_state(Checkpoint& ckpt) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ckpt.optimizer.push_back(NamedTensor{"adam.m." + names_[i], m_[i].clone()});
    ckpt.optimizer.push_back(NamedTensor{"adam.v." + names_[i], v_[i].clone()});
  }
  ckpt.meta["adam.t"] = std::to_string(t_);
  ckpt.meta["adam.skipped"] = std::to_string(skipped_);
}

void Adam::import_state(const Checkpoint& ckpt) {
  auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& nt : ckpt.optimizer)
      if (nt.name == name) return nt.value;
    throw CheckpointError("optimizer state missing blob " + name);
  };
  auto copy_into = [](const Tensor& src, Tensor& dst, const std::string& name) {
    if (src.shape() != dst.shape() || src.dtype() != dst.dtype())
      throw CheckpointError("optimizer blob " + name + " does not match its parameter");
    dispatch(dst.dtype(), [&]<class T>() {
      auto in = src.data<T>();
      auto out = dst.mutable_data<T>();
      std::copy(in.begin(), in.end(), out.begin());
    });
  };
  for (std::size_t i = 0; i < params_.size(); ++i) {
    copy_into(find("adam.m." + names_[i]), m_[i], names_[i]);
    copy_into(find("adam.v." + names_[i]), v_[i], names_[i]);
  }
  try {
    t_ = std::stoll(ckpt.meta.at("adam.t"));
    skipped_ = ckpt.meta.count("adam.skipped") ? std::stoll(ckpt.meta.at("adam.skipped")) : 0;
  } catch (const std::exception&) {
    throw CheckpointError("optimizer step counter missing or malformed");
  }
}

void zero_grads(const std::vector<Tensor>& params) {
  for (auto p : params) p.zero_grad();
}

double grad_norm(const std::vector<Tensor>& params) {
  double acc = 0.0;
  for (auto p : params) {
    if (!p.has_grad()) continue;
    dispatch(p.dtype(), [&]<class T>() {
      for (T g : p.grad_data<T>()) acc += static_cast<double>(g) * g;
    });
  }
  return std::sqrt(acc);
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_grad_norm: max_norm must be > 0");
  const double norm = grad_norm(params);
  if (!(norm > max_norm)) return 1.0;
  const double scale = max_norm / norm;
  for (auto p : params) {
    if (!p.has_grad()) continue;
    dispatch(p.dtype(), [&]<class T>() {
      for (auto& g : p.grad_data<T>()) g = static_cast<T>(g * scale);
    });
  }
  return scale;
}

bool grads_finite(const std::vector<Tensor>& params) {
  for (auto p : params) {
    if (!p.has_grad()) continue;
    bool ok = true;
    dispatch(p.dtype(), [&]<class T>() {
      for (T g : p.grad_data<T>())
        if (!std::isfinite(g)) ok = false;
    });
    if (!ok) return false;
  }
  return true;
}

}  // namespace diat::optim
