// Copyright 2026 The gradflow Authors.
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

#include <stdexcept>
#include <string>

namespace gradflow {

/// Base class for all gradflow errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A gradient vanished where a nonzero one is required.
class CriticalPointError : public Error {
 public:
  using Error::Error;
};

/// Every feature-gradient row is zero; nothing to project onto.
class DegenerateFeatureError : public Error {
 public:
  using Error::Error;
};

/// Total image mass below the positivity threshold; moments undefined.
class DegenerateMassError : public Error {
 public:
  using Error::Error;
};

/// Covariance eigenvalues tied within tolerance; log aspect ratio has no
/// derivative there.
class NondifferentiablePointError : public Error {
 public:
  using Error::Error;
};

/// Smallest covariance eigenvalue under the floor; log would blow up.
class EigenvalueFloorError : public Error {
 public:
  using Error::Error;
};

/// Labels contain a single class where both are required.
class SingleClassError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable data file.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or command usage. Maps to exit code 2 in the CLI.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace gradflow
