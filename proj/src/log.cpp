#include "fscd/log.hpp"

#include <atomic>
#include <cstdio>

namespace fscd {

namespace {
std::atomic<long> g_warning_count{0};
}

void warn(const std::string& message) {
  g_warning_count.fetch_add(1, std::memory_order_relaxed);
  std::fprintf(stderr, "[fscd] warning: %s\n", message.c_str());
}

void info(const std::string& message) {
  std::fprintf(stderr, "[fscd] %s\n", message.c_str());
}

long warning_count() {
  return g_warning_count.load(std::memory_order_relaxed);
}

void reset_warning_count() {
  g_warning_count.store(0, std::memory_order_relaxed);
}

}  // namespace fscd
