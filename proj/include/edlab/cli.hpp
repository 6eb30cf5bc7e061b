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

namespace edlab::cli {

// Entry point of the edlab command line. Returns the process exit code:
// 0 on success, 2 for usage and configuration errors, 1 for anything else.
int run_cli(int argc, const char* const* argv);
// Same, with the arguments after the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace edlab::cli
