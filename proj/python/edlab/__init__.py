# Copyright 2026 The edlab Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Cross-lingual model editing on a tiny multilingual transformer."""

from ._core import (
    ConfigError,
    InputError,
    NumericalError,
    editor_info,
    expected_l0,
    gate,
    gate_deterministic,
    generate_corpus,
    mask_similarity,
    run_cli,
    success_rate,
)

__all__ = [
    "ConfigError",
    "InputError",
    "NumericalError",
    "editor_info",
    "expected_l0",
    "gate",
    "gate_deterministic",
    "generate_corpus",
    "mask_similarity",
    "run_cli",
    "success_rate",
]
