#include "dbagent/prompts.hpp"

#include "dbagent/error.hpp"

namespace dbagent::prompts {

std::string_view get(std::string_view id)
{
  for (const auto& [key, value] : detail::table()) {
    if (key == id) return value;
  }
  throw Error("unknown prompt template: " + std::string(id));
}

std::vector<std::string_view> ids()
{
  std::vector<std::string_view> out;
  for (const auto& entry : detail::table()) out.push_back(entry.first);
  return out;
}

}  // namespace dbagent::prompts
