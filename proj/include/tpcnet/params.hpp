#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tpcnet/attention.hpp"
#include "tpcnet/autodiff.hpp"
#include "tpcnet/tensor.hpp"

namespace tpc {

// Ordered map of named learnable arrays. Order is declaration order, which
// fixes initialization, checkpoint layout, and optimizer traversal.
template <typename T>
class ParamTree {
 public:
  void add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("ParamTree: duplicate name '" + name + "'");
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(value));
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamTree: no parameter '" + name + "'");
    return items_[it->second].second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamTree: no parameter '" + name + "'");
    return items_[it->second].second;
  }

  size_t size() const { return items_.size(); }
  const std::pair<std::string, Tensor<T>>& item(size_t i) const { return items_[i]; }
  std::pair<std::string, Tensor<T>>& item(size_t i) { return items_[i]; }

  long long total_elements() const {
    long long n = 0;
    for (const auto& [name, v] : items_) n += static_cast<long long>(v.size());
    return n;
  }

  template <typename U>
  ParamTree<U> cast() const {
    ParamTree<U> out;
    for (const auto& [name, v] : items_) out.add(name, tensor_cast<T, U>(v));
    return out;
  }

  // zero-filled tree with identical names/shapes (gradient accumulators)
  ParamTree<T> zeros_like() const {
    ParamTree<T> out;
    for (const auto& [name, v] : items_) out.add(name, Tensor<T>(v.c, v.h, v.w));
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Binds tree entries to tape leaves on first use. After backward, grads are
// gathered back by name. touched() lets tests audit that a forward pass uses
// exactly the declared parameter set.
template <typename T>
class ParamVars {
 public:
  ParamVars(ad::Tape<T>& tape, const ParamTree<T>& tree, bool requires_grad = true)
      : tape_(&tape), tree_(&tree), requires_grad_(requires_grad) {}

  ad::Var<T> operator()(const std::string& name) {
    auto it = ids_.find(name);
    if (it != ids_.end()) return tape_->var(it->second);
    ad::Var<T> v = requires_grad_ ? ad::param(*tape_, tree_->at(name))
                                  : ad::constant(*tape_, tree_->at(name));
    ids_[name] = v.id;
    return v;
  }

  const std::unordered_map<std::string, int>& touched() const { return ids_; }

  // adds this tape's parameter gradients into a matching accumulator tree
  void accumulate_grads(ParamTree<T>& grads) const {
    for (const auto& [name, id] : ids_) {
      const Tensor<T>& g = tape_->grad(id);
      if (g.size() == 0) continue;  // never reached backward
      Tensor<T>& acc = grads.at(name);
      for (size_t i = 0; i < g.size(); ++i) acc.v[i] += g.v[i];
    }
  }

 private:
  ad::Tape<T>* tape_;
  const ParamTree<T>* tree_;
  std::unordered_map<std::string, int> ids_;
  bool requires_grad_;
};

// Single walker for parameter declaration and analytic cost accounting.
// When tree/rng are set, declarations create initialized parameters. When
// ref_h/ref_w are set, conv and attention sites accumulate FLOPs at that
// reference input size (spatial dims divided by scale_div per site).
template <typename T>
struct ArchBuilder {
  ParamTree<T>* tree = nullptr;
  Rng* rng = nullptr;
  int ref_h = 0, ref_w = 0;
  long long conv_flops = 0;
  long long attn_flops = 0;

  void conv(const std::string& prefix, int cin, int cout, int k, int groups = 1, int scale_div = 1) {
    if (cin % groups || cout % groups) throw std::invalid_argument("ArchBuilder::conv: bad groups");
    int cpg = cin / groups;
    if (tree) {
      double bound = 1.0 / std::sqrt(static_cast<double>(cpg) * k * k);
      Tensor<T> w(cout, cpg, k * k);
      for (auto& x : w.v) x = static_cast<T>(rng->uniform(-bound, bound));
      tree->add(prefix + ".w", std::move(w));
      tree->add(prefix + ".b", Tensor<T>(cout, 1, 1));
    }
    if (ref_h) {
      long long hw = static_cast<long long>(ref_h / scale_div) * (ref_w / scale_div);
      conv_flops += 2ll * k * k * cpg * cout * hw;
    }
  }

  void scalar(const std::string& name, double init) {
    if (tree) tree->add(name, Tensor<T>::full(1, 1, 1, static_cast<T>(init)));
  }

  void vec(const std::string& name, int c, double init) {
    if (tree) tree->add(name, Tensor<T>::full(c, 1, 1, static_cast<T>(init)));
  }

  void layer_norm(const std::string& prefix, int c) {
    vec(prefix + ".gamma", c, 1.0);
    vec(prefix + ".beta", c, 0.0);
  }

  void attention_site(int channels, int heads, int scale_div, bool pair_downsampled) {
    if (ref_h)
      attn_flops += count_attention_flops(ref_h / scale_div, ref_w / scale_div, channels, heads,
                                          pair_downsampled ? MsaVariant::kCrossGuided
                                                           : MsaVariant::kConventional);
  }

  long long total_flops() const { return conv_flops + attn_flops; }
};

}  // namespace tpc
