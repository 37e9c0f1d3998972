// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace packtrain {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a tensor fed to a port disagrees with the port's static shape.
class ShapeError : public Error {
 public:
  ShapeError(std::string port, const std::string& what)
      : Error("shape mismatch at '" + port + "': " + what), port_(std::move(port)) {}
  const std::string& port() const noexcept { return port_; }

 private:
  std::string port_;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

// Non-finite gradient or parameter; names the parameter.
class NumericError : public Error {
 public:
  NumericError(std::string parameter, const std::string& what)
      : Error(what + " (parameter '" + parameter + "')"), parameter_(std::move(parameter)) {}
  const std::string& parameter() const noexcept { return parameter_; }

 private:
  std::string parameter_;
};

class OomError : public Error {
 public:
  OomError(std::uint64_t requested, std::uint64_t capacity, const std::string& what)
      : Error(what), requested_(requested), capacity_(capacity) {}
  std::uint64_t requested() const noexcept { return requested_; }
  std::uint64_t capacity() const noexcept { return capacity_; }
  std::uint64_t deficit() const noexcept { return requested_ > capacity_ ? requested_ - capacity_ : 0; }

 private:
  std::uint64_t requested_;
  std::uint64_t capacity_;
};

// The driver member ran out of epoch data; the caller must replan or advance the epoch.
class ReplanNeeded : public Error {
 public:
  using Error::Error;
};

// Malformed dataset, checkpoint or profile bytes. Carries the offending position.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t position, const char* unit = "byte")
      : Error(what + " (" + unit + " " + std::to_string(position) + ")"), detail_(what), position_(position) {}
  std::uint64_t position() const noexcept { return position_; }
  // Message without the position suffix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  std::uint64_t position_;
};

// Invalid experiment/config field; names the field.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace packtrain
