#include "saeprobe/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace saeprobe::log {
namespace {

std::atomic<Level> g_level{Level::info};
std::ostream* g_stream = &std::cerr;
std::mutex g_mutex;

bool needs_quotes(std::string_view v) {
  if (v.empty()) return true;
  for (char c : v)
    if (c == ' ' || c == '"' || c == '=' || c == '\t') return true;
  return false;
}

}  // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void set_stream(std::ostream* stream) {
  std::lock_guard lock(g_mutex);
  g_stream = stream ? stream : &std::cerr;
}

void emit(Level lvl, std::string_view event, std::initializer_list<Field> fields) {
  if (static_cast<int>(lvl) > static_cast<int>(g_level.load())) return;
  std::string line = "event=";
  line += event;
  for (const auto& [key, value] : fields) {
    line += ' ';
    line += key;
    line += '=';
    if (needs_quotes(value)) {
      line += '"';
      for (char c : value) {
        if (c == '"') line += '\\';
        line += c;
      }
      line += '"';
    } else {
      line += value;
    }
  }
  line += '\n';
  std::lock_guard lock(g_mutex);
  *g_stream << line << std::flush;
}

}  // namespace saeprobe::log
