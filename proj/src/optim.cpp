// Copyright 2026 The edlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "edlab/optim.hpp"

#include <cmath>

namespace edlab {

void Adam::add_group(std::string name, std::vector<Tensor> params, double lr) {
  std::vector<Array> m, v;
  for (const auto& p : params) {
    m.emplace_back(p.shape());
    v.emplace_back(p.shape());
  }
  m_.push_back(std::move(m));
  v_.push_back(std::move(v));
  groups_.push_back({std::move(name), std::move(params), lr});
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    auto& group = groups_[g];
    for (std::size_t i = 0; i < group.params.size(); ++i) {
      Tensor& p = group.params[i];
      if (!p.has_grad()) continue;
      const Array grad = p.grad();
      Array value = p.value();
      Array& m = m_[g][i];
      Array& v = v_[g][i];
      for (std::size_t k = 0; k < value.size(); ++k) {
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * grad[k];
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * grad[k] * grad[k];
        value[k] -= group.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
      }
      p.assign(std::move(value));
      p.zero_grad();
    }
  }
}

void Adam::zero_grad() {
  for (auto& group : groups_)
    for (auto& p : group.params) p.zero_grad();
}

std::vector<io::NamedArray> Adam::export_state() const {
  std::vector<io::NamedArray> out;
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    for (std::size_t i = 0; i < groups_[g].params.size(); ++i) {
      const std::string base = "adam." + groups_[g].name + "." + std::to_string(i);
      out.push_back({base + ".m", m_[g][i]});
      out.push_back({base + ".v", v_[g][i]});
    }
  }
  return out;
}

void Adam::import_state(const io::Container& c, long long steps) {
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    for (std::size_t i = 0; i < groups_[g].params.size(); ++i) {
      const std::string base = "adam." + groups_[g].name + "." + std::to_string(i);
      m_[g][i] = c.at(base + ".m");
      v_[g][i] = c.at(base + ".v");
    }
  }
  t_ = steps;
}

}  // namespace edlab
