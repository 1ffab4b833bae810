#pragma once

#include <string>

namespace fscd {

/// Writes "[fscd] warning: ..." to stderr. Kept behind one function so tests
/// can count emitted warnings.
void warn(const std::string& message);
void info(const std::string& message);

/// Number of warnings emitted since process start (or the last reset).
long warning_count();
void reset_warning_count();

}  // namespace fscd
