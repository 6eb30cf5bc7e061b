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

#pragma once

#include <string>
#include <vector>

#include "edlab/checkpoint.hpp"
#include "edlab/numerics.hpp"

namespace edlab {

// Adam with per-group learning rates. Moments are kept per tensor in the
// order the tensors were registered.
class Adam {
 public:
  struct Group {
    std::string name;
    std::vector<Tensor> params;
    double lr = 1e-3;
  };

  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void add_group(std::string name, std::vector<Tensor> params, double lr);
  const std::vector<Group>& groups() const { return groups_; }

  // Applies one update from the accumulated gradients, then clears them.
  void step();
  void zero_grad();
  long long steps() const { return t_; }

  // Moments as named arrays ("<group>.<i>.m" / ".v") for checkpoints.
  std::vector<io::NamedArray> export_state() const;
  void import_state(const io::Container& c, long long steps);

 private:
  double beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<Group> groups_;
  std::vector<std::vector<Array>> m_, v_;
};

}  // namespace edlab
