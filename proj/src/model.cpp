#include "kw/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "kw/ops.hpp"

namespace kw {

std::string warehouse_param_name(const std::string& group) { return "warehouse/" + group + "/cells"; }

std::string attention_param_name(const std::string& layer, const char* field) {
  return "layer/" + layer + "/attention/" + field;
}

KWNet::KWNet(ArchSpec arch, NetOptions options) : arch_(std::move(arch)), options_(options) {
  plan_ = plan_warehouses(arch_, options_.b, options_.policy_override);
  beta_ = assign_beta(plan_, options_.beta);
  for (const auto& g : plan_.groups) warehouses_.push_back(std::make_shared<Warehouse>(Warehouse::from_plan(g)));

  std::size_t channels = arch_.layers.front().input_channels();
  for (const auto& spec : arch_.layers) {
    if (spec.input_channels() != channels)
      throw ArchSpecError("layer '" + spec.id + "' consumes " + std::to_string(spec.input_channels()) +
                          " channels but the previous layer produces " + std::to_string(channels));
    std::size_t gi = 0;
    while (plan_.groups[gi].name != spec.warehouse_group) ++gi;
    layers_.push_back(make_kw_layer(spec, plan_.groups[gi], warehouses_[gi], beta_[gi], options_.function,
                                    arch_.attention_min_hidden));
    if (options_.fine_tune) layers_.back().use_temperature = false;
    channels = spec.kernel.f;
  }
  if (options_.num_classes == 0) throw std::invalid_argument("classifier needs at least one class");
  classifier_weight_ = Tensor({options_.num_classes, channels});
  classifier_bias_ = Tensor({options_.num_classes});
}

void KWNet::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform_fill = [&](Tensor& t, std::size_t fan_in) {
    const Real bound = 1 / std::sqrt(Real(fan_in));
    std::uniform_real_distribution<Real> dist(-bound, bound);
    for (auto& v : t.data()) v = dist(rng);
  };
  for (auto& w : warehouses_) {
    std::size_t fan_in = w->cell.c * w->cell.kh * w->cell.kw;
    if (options_.cell_fan_in == NetOptions::CellFanIn::kernel)
      for (const auto& layer : layers_)
        if (layer.warehouse == w) fan_in = std::max(fan_in, layer.spec.kernel.c * layer.spec.kernel.kh * layer.spec.kernel.kw);
    const Real stddev = std::sqrt(2 / Real(fan_in));
    std::normal_distribution<Real> dist(0, stddev);
    for (auto& v : w->cells.data()) v = dist(rng);
  }
  for (auto& layer : layers_) {
    auto& a = layer.attention;
    uniform_fill(a.fc1_weight, a.fc1_weight.dim(1));
    a.fc1_bias.fill(0);
    uniform_fill(a.fc2_weight, a.fc2_weight.dim(1));
    a.fc2_bias.fill(0);
  }
  uniform_fill(classifier_weight_, classifier_weight_.dim(1));
  classifier_bias_.fill(0);
}

std::vector<std::pair<std::string, const Tensor*>> KWNet::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (const auto& w : warehouses_) out.emplace_back(warehouse_param_name(w->group), &w->cells);
  for (const auto& layer : layers_) {
    const auto& a = layer.attention;
    out.emplace_back(attention_param_name(layer.spec.id, "fc1.weight"), &a.fc1_weight);
    out.emplace_back(attention_param_name(layer.spec.id, "fc1.bias"), &a.fc1_bias);
    out.emplace_back(attention_param_name(layer.spec.id, "fc2.weight"), &a.fc2_weight);
    out.emplace_back(attention_param_name(layer.spec.id, "fc2.bias"), &a.fc2_bias);
  }
  out.emplace_back("classifier/weight", &classifier_weight_);
  out.emplace_back("classifier/bias", &classifier_bias_);
  return out;
}

std::vector<NamedTensor> KWNet::parameters() {
  std::vector<NamedTensor> out;
  for (auto& [name, ptr] : named_tensors()) out.push_back({name, const_cast<Tensor*>(ptr)});
  return out;
}

std::map<std::string, Tensor> KWNet::parameter_values() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, ptr] : named_tensors()) out.emplace(name, *ptr);
  return out;
}

void KWNet::set_parameter_values(const std::map<std::string, Tensor>& values) {
  for (auto& p : parameters()) {
    auto it = values.find(p.name);
    if (it == values.end()) throw std::invalid_argument("missing parameter " + p.name);
    if (it->second.shape() != p.value->shape())
      throw ShapeError("parameter " + p.name + " has shape " + shape_str(it->second.shape()) + ", model expects " +
                       shape_str(p.value->shape()));
    *p.value = it->second;
  }
}

KWNet::Trace KWNet::run(const Tensor& x, Real tau) const {
  Trace trace;
  Tensor h = x;
  for (const auto& layer : layers_) {
    trace.alphas.push_back(kw_attention(h, layer, tau));
    const Tensor kernels = assemble_kernels(trace.alphas.back(), layer.warehouse->cells, layer.partition);
    h = ops::relu(ops::conv2d_per_sample(h, kernels, layer.conv_params()));
    trace.activations.push_back(h);
  }
  trace.logits = ops::dense_affine(ops::global_avg_pool(h), classifier_weight_, classifier_bias_);
  return trace;
}

KWNet::TapeTrace KWNet::forward(ad::Tape& tape, const Tensor& x, Real tau) const {
  std::map<std::string, ad::Var> vars;
  for (const auto& [name, ptr] : named_tensors()) vars[name] = tape.parameter(name, *ptr);

  TapeTrace trace;
  ad::Var h = tape.constant(x);
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const auto& layer = layers_[li];
    const std::string& id = layer.spec.id;
    LayerVars lv{vars.at(attention_param_name(id, "fc1.weight")), vars.at(attention_param_name(id, "fc1.bias")),
                 vars.at(attention_param_name(id, "fc2.weight")), vars.at(attention_param_name(id, "fc2.bias")),
                 vars.at(warehouse_param_name(layer.warehouse->group))};
    KWTrace out = kw_forward(tape, h, layer, lv, tau);
    trace.alphas.push_back(out.alpha);
    h = ad::relu(tape, out.output);
    trace.activations.push_back(h);
  }
  trace.logits = ad::dense_affine(tape, ad::global_avg_pool(tape, h), vars.at("classifier/weight"),
                                  vars.at("classifier/bias"));
  return trace;
}

}  // namespace kw
