// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace eced {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration values or inconsistent hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Timestep pairs that violate t > t_prev.
class OrderingError : public Error {
 public:
  using Error::Error;
};

// Singularities, NaN losses, inconsistent schedules, bad matrix square roots.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class KindMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// Empty latent mask support: nothing left to attack.
class DegenerateMaskError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace eced
