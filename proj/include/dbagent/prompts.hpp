#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dbagent::prompts {

// Template ids. The text ships verbatim under prompts/<id>.txt.
inline constexpr std::string_view kSearchAgent = "search_agent.v1";
inline constexpr std::string_view kStage1Answer = "stage1_answer.v1";
inline constexpr std::string_view kStage1Judge = "stage1_judge.v1";
inline constexpr std::string_view kStage2ImageAnswer = "stage2_image_answer.v1";
inline constexpr std::string_view kStage2ImageJudge = "stage2_image_judge.v1";
inline constexpr std::string_view kStage2TextAnswer = "stage2_text_answer.v1";
inline constexpr std::string_view kStage2TextJudge = "stage2_text_judge.v1";
inline constexpr std::string_view kStage3ImageAnswer = "stage3_image_answer.v1";
inline constexpr std::string_view kStage3ImageJudge = "stage3_image_judge.v1";
inline constexpr std::string_view kStage3TextAnswer = "stage3_text_answer.v1";
inline constexpr std::string_view kStage3TextJudge = "stage3_text_judge.v1";

/// Returns the embedded template text; throws dbagent::Error for unknown ids.
std::string_view get(std::string_view id);
std::vector<std::string_view> ids();

namespace detail {
const std::vector<std::pair<std::string_view, std::string_view>>& table();
}

}  // namespace dbagent::prompts
