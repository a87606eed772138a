#pragma once

#include <map>
#include <string>

namespace masv {
namespace io {

// key=value text, one pair per line, `#` comments, blanks ignored.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::string kv_to_text(const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> read_kv_file(const std::string& path);
void write_kv_file(const std::string& path, const std::map<std::string, std::string>& kv);

}  // namespace io
}  // namespace masv
