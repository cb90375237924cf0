#include "vqflow/model.hpp"

#include <cmath>
#include <numbers>

namespace vqflow {

namespace {

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

int add_entry(ParamLayout& layout, std::string name, int rows, int cols) {
  ParamSpec spec{std::move(name), rows, cols, layout.total};
  layout.total += spec.size();
  layout.entries.push_back(std::move(spec));
  return static_cast<int>(layout.entries.size()) - 1;
}

}  // namespace

const char* head_name(Head h) {
  switch (h) {
    case Head::categorical: return "categorical";
    case Head::velocity: return "velocity";
    case Head::discrete_token: return "discrete-token";
  }
  return "?";
}

Head head_from_name(const std::string& name) {
  if (name == "categorical") return Head::categorical;
  if (name == "velocity") return Head::velocity;
  if (name == "discrete-token") return Head::discrete_token;
  throw ConfigError("unknown model head '" + name + "'");
}

void ModelConfig::validate() const {
  if (G < 1 || E < 1 || K < 2) throw ConfigError("model: need G >= 1, E >= 1, K >= 2");
  if (hidden_width < 1 || hidden_layers < 0) throw ConfigError("model: hidden_width must be >= 1, hidden_layers >= 0");
  if (time_features < 2 || time_features % 2 != 0) throw ConfigError("model: time_features must be a positive even count");
  if (class_embed_dim < 1) throw ConfigError("model: class_embed_dim must be >= 1");
  if (!(class_drop_prob >= 0.0 && class_drop_prob <= 1.0)) throw ConfigError("model: class_drop_prob must lie in [0, 1]");
  if (num_classes && *num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
}

int ModelConfig::input_dim() const { return G * E + time_features + (num_classes ? class_embed_dim : 0); }

int ModelConfig::output_dim() const { return head == Head::velocity ? G * E : G * K; }

json ModelConfig::to_json() const {
  json doc{{"G", G},
           {"K", K},
           {"E", E},
           {"hidden_width", hidden_width},
           {"hidden_layers", hidden_layers},
           {"head", head_name(head)},
           {"time_features", time_features},
           {"class_embed_dim", class_embed_dim},
           {"class_drop_prob", class_drop_prob}};
  doc["num_classes"] = num_classes ? json(*num_classes) : json(nullptr);
  return doc;
}

ModelConfig ModelConfig::from_json(const json& doc) {
  ModelConfig cfg;
  cfg.G = doc.at("G").get<int>();
  cfg.K = doc.at("K").get<int>();
  cfg.E = doc.at("E").get<int>();
  cfg.hidden_width = doc.value("hidden_width", cfg.hidden_width);
  cfg.hidden_layers = doc.value("hidden_layers", cfg.hidden_layers);
  cfg.head = head_from_name(doc.value("head", std::string("categorical")));
  cfg.time_features = doc.value("time_features", cfg.time_features);
  cfg.class_embed_dim = doc.value("class_embed_dim", cfg.class_embed_dim);
  cfg.class_drop_prob = doc.value("class_drop_prob", cfg.class_drop_prob);
  if (doc.contains("num_classes") && !doc.at("num_classes").is_null()) cfg.num_classes = doc.at("num_classes").get<int>();
  cfg.validate();
  return cfg;
}

ParamLayout ParamLayout::for_config(const ModelConfig& cfg) {
  cfg.validate();
  ParamLayout layout;
  int fan_in = cfg.input_dim();
  for (int l = 0; l < cfg.hidden_layers; ++l) {
    layout.hidden_weight.push_back(add_entry(layout, "hidden." + std::to_string(l) + ".weight", fan_in, cfg.hidden_width));
    layout.hidden_bias.push_back(add_entry(layout, "hidden." + std::to_string(l) + ".bias", 1, cfg.hidden_width));
    fan_in = cfg.hidden_width;
  }
  layout.out_weight = add_entry(layout, "out.weight", fan_in, cfg.output_dim());
  layout.out_bias = add_entry(layout, "out.bias", 1, cfg.output_dim());
  if (cfg.num_classes) {
    layout.class_embed = add_entry(layout, "class_embed", *cfg.num_classes, cfg.class_embed_dim);
    layout.null_embed = add_entry(layout, "null_embed", 1, cfg.class_embed_dim);
  }
  if (cfg.head == Head::discrete_token) layout.mask_embed = add_entry(layout, "mask_embed", 1, cfg.E);
  return layout;
}

template <typename T>
Params<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Params<T> p = Params<T>::zeros_like(ParamLayout::for_config(cfg));
  Rng rng = make_rng(seed, "init");
  std::normal_distribution<double> normal;
  for (std::size_t l = 0; l < p.layout.hidden_weight.size(); ++l) {
    auto w = p.tensor(p.layout.hidden_weight[l]);
    const double std_dev = std::sqrt(2.0 / static_cast<double>(w.rows()));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(std_dev * normal(rng));
  }
  for (int idx : {p.layout.class_embed, p.layout.null_embed, p.layout.mask_embed}) {
    if (idx < 0) continue;
    auto w = p.tensor(idx);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(normal(rng));
  }
  return p;
}

template <typename T>
void time_features(double t, int count, T* out) {
  const int half = count / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = half > 1 ? std::pow(1000.0, static_cast<double>(i) / (half - 1)) : 1.0;
    out[i] = static_cast<T>(std::sin(freq * t));
    out[half + i] = static_cast<T>(std::cos(freq * t));
  }
}

namespace {

template <typename T>
Mat<T> build_input(const Params<T>& params, const ModelConfig& cfg, const Codebook& cb, const ModelInput<T>& input) {
  const auto n = static_cast<Eigen::Index>(input.size());
  const int latent = cfg.G * cfg.E;
  Mat<T> x(n, cfg.input_dim());

  if (cfg.head == Head::discrete_token) {
    if (input.tokens.size() != input.size()) throw std::invalid_argument("forward: token batch size mismatch");
    if (cb.size() != cfg.K || cb.dim() != cfg.E) throw std::invalid_argument("forward: codebook does not match model");
    const auto mask = params.tensor(params.layout.mask_embed);
    for (Eigen::Index i = 0; i < n; ++i) {
      const MaskedGrid& m = input.tokens[static_cast<std::size_t>(i)];
      if (m.size() != cfg.G) throw std::invalid_argument("forward: token grid has wrong length");
      for (int g = 0; g < cfg.G; ++g) {
        auto slot = x.row(i).segment(g * cfg.E, cfg.E);
        if (m.masked[static_cast<std::size_t>(g)]) {
          slot = mask.row(0);
        } else {
          const int code = m.codes[static_cast<std::size_t>(g)];
          if (code < 0 || code >= cfg.K) throw std::out_of_range("forward: token code out of range");
          slot = cb.row(code).template cast<T>();
        }
      }
    }
  } else {
    if (input.latent.rows() != n || input.latent.cols() != latent) throw std::invalid_argument("forward: latent batch must be N x G*E");
    x.leftCols(latent) = input.latent;
  }

  for (Eigen::Index i = 0; i < n; ++i) time_features<T>(input.t[static_cast<std::size_t>(i)], cfg.time_features, x.row(i).data() + latent);

  if (cfg.num_classes) {
    const auto table = params.tensor(params.layout.class_embed);
    const auto null = params.tensor(params.layout.null_embed);
    const int off = latent + cfg.time_features;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int label = input.labels.empty() ? -1 : input.labels[static_cast<std::size_t>(i)];
      if (label >= *cfg.num_classes) throw std::out_of_range("forward: class label out of range");
      x.row(i).segment(off, cfg.class_embed_dim) = label < 0 ? null.row(0) : table.row(label);
    }
  } else if (!input.labels.empty()) {
    for (int label : input.labels) {
      if (label >= 0) throw std::invalid_argument("forward: class label given to an unconditional model");
    }
  }
  return x;
}

}  // namespace

template <typename T>
Mat<T> forward(const Params<T>& params, const ModelConfig& cfg, const Codebook& cb, const ModelInput<T>& input,
               ForwardCache<T>* cache) {
  if (!input.labels.empty() && input.labels.size() != input.size()) throw std::invalid_argument("forward: label count mismatch");
  Mat<T> h = build_input(params, cfg, cb, input);
  if (cache) {
    cache->pre.clear();
    cache->act.clear();
    cache->input = h;
  }
  for (std::size_t l = 0; l < params.layout.hidden_weight.size(); ++l) {
    Mat<T> pre = h * params.tensor(params.layout.hidden_weight[l]);
    pre.rowwise() += params.tensor(params.layout.hidden_bias[l]).row(0);
    h = pre.unaryExpr([](T v) { return gelu(v); });
    if (cache) {
      cache->pre.push_back(std::move(pre));
      cache->act.push_back(h);
    }
  }
  Mat<T> out = h * params.tensor(params.layout.out_weight);
  out.rowwise() += params.tensor(params.layout.out_bias).row(0);
  return out;
}

template <typename T>
Params<T> backward(const Params<T>& params, const ModelConfig& cfg, const ModelInput<T>& input, const ForwardCache<T>& cache,
                   const Mat<T>& grad_out) {
  const ParamLayout& layout = params.layout;
  Params<T> grads = Params<T>::zeros_like(layout);
  const std::size_t layers = layout.hidden_weight.size();
  const Mat<T>& last = layers == 0 ? cache.input : cache.act.back();

  grads.tensor(layout.out_weight).noalias() = last.transpose() * grad_out;
  grads.tensor(layout.out_bias) = grad_out.colwise().sum();

  const bool need_input_grad = cfg.num_classes.has_value() || cfg.head == Head::discrete_token;
  Mat<T> dh;
  if (layers > 0 || need_input_grad) dh = grad_out * params.tensor(layout.out_weight).transpose();

  for (std::size_t l = layers; l-- > 0;) {
    Mat<T> dpre = dh.array() * cache.pre[l].unaryExpr([](T v) { return gelu_grad(v); }).array();
    const Mat<T>& below = l == 0 ? cache.input : cache.act[l - 1];
    grads.tensor(layout.hidden_weight[l]).noalias() = below.transpose() * dpre;
    grads.tensor(layout.hidden_bias[l]) = dpre.colwise().sum();
    if (l > 0 || need_input_grad) dh = dpre * params.tensor(layout.hidden_weight[l]).transpose();
  }

  if (!need_input_grad) return grads;
  const Mat<T>& dx = dh;
  const int latent = cfg.G * cfg.E;
  const auto n = static_cast<Eigen::Index>(input.size());
  if (cfg.head == Head::discrete_token) {
    auto dmask = grads.tensor(layout.mask_embed);
    for (Eigen::Index i = 0; i < n; ++i) {
      const MaskedGrid& m = input.tokens[static_cast<std::size_t>(i)];
      for (int g = 0; g < cfg.G; ++g) {
        if (m.masked[static_cast<std::size_t>(g)]) dmask.row(0) += dx.row(i).segment(g * cfg.E, cfg.E);
      }
    }
  }
  if (cfg.num_classes) {
    auto dtable = grads.tensor(layout.class_embed);
    auto dnull = grads.tensor(layout.null_embed);
    const int off = latent + cfg.time_features;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int label = input.labels.empty() ? -1 : input.labels[static_cast<std::size_t>(i)];
      auto seg = dx.row(i).segment(off, cfg.class_embed_dim);
      if (label < 0) {
        dnull.row(0) += seg;
      } else {
        dtable.row(label) += seg;
      }
    }
  }
  return grads;
}

MatrixXd softmax_temp(const MatrixXd& logits, double tau) {
  if (!(tau >= kTauMin)) throw std::invalid_argument("softmax_temp: tau below the 1e-3 floor");
  MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index g = 0; g < logits.rows(); ++g) {
    const double m = logits.row(g).maxCoeff();
    out.row(g) = ((logits.row(g).array() - m) / tau).exp();
    out.row(g) /= out.row(g).sum();
  }
  return out;
}

MatrixXd posterior_mean(const MatrixXd& probs, const Codebook& cb) {
  if (probs.cols() != cb.size()) throw std::invalid_argument("posterior_mean: probs must have K columns");
  for (Eigen::Index g = 0; g < probs.rows(); ++g) {
    if (std::abs(probs.row(g).sum() - 1.0) > 1e-6 || (probs.row(g).array() < 0.0).any()) {
      throw std::invalid_argument("posterior_mean: row is not a probability distribution");
    }
  }
  return probs * cb.embeddings();
}

template Params<float> init_params<float>(const ModelConfig&, std::uint64_t);
template Params<double> init_params<double>(const ModelConfig&, std::uint64_t);
template void time_features<float>(double, int, float*);
template void time_features<double>(double, int, double*);
template Mat<float> forward<float>(const Params<float>&, const ModelConfig&, const Codebook&, const ModelInput<float>&,
                                   ForwardCache<float>*);
template Mat<double> forward<double>(const Params<double>&, const ModelConfig&, const Codebook&, const ModelInput<double>&,
                                     ForwardCache<double>*);
template Params<float> backward<float>(const Params<float>&, const ModelConfig&, const ModelInput<float>&,
                                       const ForwardCache<float>&, const Mat<float>&);
template Params<double> backward<double>(const Params<double>&, const ModelConfig&, const ModelInput<double>&,
                                         const ForwardCache<double>&, const Mat<double>&);

}  // namespace vqflow
