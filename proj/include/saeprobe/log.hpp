#pragma once

#include <initializer_list>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>

// key=value structured lines on the diagnostic stream.
namespace saeprobe::log {

enum class Level { quiet = 0, info = 1, debug = 2 };

void set_level(Level level);
Level level();
// Defaults to std::cerr. The stream must outlive all logging calls.
void set_stream(std::ostream* stream);

using Field = std::pair<std::string_view, std::string>;

void emit(Level level, std::string_view event, std::initializer_list<Field> fields);

inline void info(std::string_view event, std::initializer_list<Field> fields = {}) {
  emit(Level::info, event, fields);
}
inline void debug(std::string_view event, std::initializer_list<Field> fields = {}) {
  emit(Level::debug, event, fields);
}

}  // namespace saeprobe::log
