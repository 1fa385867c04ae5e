#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dbagent {

class Error : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

/// Bad invocation: missing flags, violated preconditions on arguments.
class UsageError : public Error
{
public:
  using Error::Error;
};

/// Malformed or inconsistent input data. Carries the file and 1-based line
/// when the problem can be pinned to one.
class DataError : public Error
{
public:
  explicit DataError(const std::string& message, std::string file = {}, std::size_t line = 0)
    : Error(format(message, file, line)), file_(std::move(file)), line_(line)
  {
  }

  const std::string& file() const { return file_; }
  std::size_t line() const { return line_; }

private:
  static std::string format(const std::string& message, const std::string& file, std::size_t line)
  {
    if (file.empty()) return message;
    if (line == 0) return file + ": " + message;
    return file + ":" + std::to_string(line) + ": " + message;
  }

  std::string file_;
  std::size_t line_;
};

/// Failure talking to a model or embedding backend.
class BackendError : public Error
{
public:
  BackendError(const std::string& message, bool retriable, int attempts = 1)
    : Error(message), retriable_(retriable), attempts_(attempts)
  {
  }

  bool retriable() const { return retriable_; }
  int attempts() const { return attempts_; }

private:
  bool retriable_;
  int attempts_;
};

/// The backend produced nothing usable for this turn.
class EmptyGeneration : public BackendError
{
public:
  explicit EmptyGeneration(const std::string& message) : BackendError(message, false) {}
};

/// A judge reply carried neither a [correct] nor a [wrong] marker.
class JudgeParseFailure : public Error
{
public:
  using Error::Error;
};

}  // namespace dbagent
