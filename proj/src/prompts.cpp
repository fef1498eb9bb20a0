#include "routeforge/prompts.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "routeforge/common.hpp"

namespace routeforge {

namespace {

const char* kRawPrompt =
    "Given a question, a news context, and retrieved documents, answer the question.\n"
    "\n"
    "The final answer must appear on the last line in the format: \\boxed{<answer>}.\n";

const char* kCotPrompt =
    "You are a multi-hop reasoning expert and an expert QA agent. Given a question, and the "
    "context, think step-by-step.\n"
    "\n"
    "The final answer must appear on the last line in the format: \\boxed{<answer>}.\n";

const char* kScPrompt =
    "You are a self-consistency agent. Independently sample multiple plausible entity selections "
    "for the given question and context, then internally perform majority voting to decide the "
    "final set. Generate diverse candidate sets internally, then pick the majority-agreed "
    "entities.\n"
    "\n"
    "The final answer must appear on the last line in the format: \\boxed{<answer>}.\n";

const char* kMadPrompt =
    "[debater_a]\n"
    "You are Debater A. Your goal is to propose the most plausible answer using the provided "
    "context.\n"
    "- Make ONE clear claim (the candidate answer).\n"
    "- Support it with 1-2 ultra-short quotes (verbatim substrings) and name the hops.\n"
    "- Explain the link between the quotes in <= 2 sentences.\n"
    "Do NOT use outside knowledge and do NOT output the final boxed answer. Make your answer "
    "really short and concise.\n"
    "\n"
    "[debater_b]\n"
    "You are Debater B. Your goal is to stress-test A's claim using ONLY the provided context.\n"
    "- If A's quotes or hops are weak, inconsistent, or incomplete, point it out and give "
    "corrected quotes/hops.\n"
    "- If a better candidate exists, state ONE alternative with 1-2 short quotes and <= 2 "
    "sentences of reasoning.\n"
    "- If A is already well-supported, briefly confirm but add one missing check.\n"
    "Do NOT use outside knowledge and do NOT output the final boxed answer. Make your answer "
    "really short and concise.\n"
    "\n"
    "[judge]\n"
    "You are the Judge. Read A and B as supporting analyses and decide the best final answer "
    "using ONLY the given context. If evidence is thin, still make your best context-based "
    "guess.\n"
    "Output MUST include nothing but brief final answer in the format: \\boxed{<answer>}.\n";

const char* kReactReflectPrompt =
    "[react]\n"
    "You are a multi-hop reasoning expert and an expert QA agent. Given a question, a news "
    "context, and retrieved documents, think step-by-step, silently chain facts to derive a "
    "thinking plan, then use this plan to derive the final brief answer.\n"
    "Your output format MUST be a brief final answer on the last line in the format: "
    "\\boxed{<answer>}.\n"
    "\n"
    "[reflect]\n"
    "You are a judge overseeing a multi-hop reasoning expert and an expert QA agent. Given a "
    "question, a news context, and retrieved documents, you will evaluate the agent's answer "
    "based on the correctness and notes. If the answer is incorrect or incomplete, provide "
    "constructive feedback and suggest specific revisions to improve the answer. If the answer "
    "is correct and complete, indicate that no further revisions are needed.\n"
    "Your output MUST end with either:\n"
    "- \"Status: revise\" followed by specific feedback and revision suggestions, if the answer "
    "needs improvement.\n"
    "- \"Status: final\" if the answer is correct and complete.\n"
    "If you indicate \"Status: revise\", also include a short \"Feedback: <your feedback here>\" "
    "section before the final answer.\n";

const char* kSummaryPrompt =
    "[think]\n"
    "You are a multi-hop reasoning expert and an expert QA agent.\n"
    "Given a question, a news context, and retrieved documents, think step-by-step, chain facts "
    "to derive the answer.\n"
    "Give your final answer as a single entity, and a concise reasoning process that leads to "
    "the answer.\n"
    "\n"
    "[summarize]\n"
    "You are the multi-hop reasoning expert and an expert QA agent. You receive outputs from "
    "other agents. Use them as supporting signals.\n"
    "If A and B agree on the same short span, return it. If they differ, pick the best answer "
    "with your own reasoning.\n"
    "Your output format MUST end with the brief final answer on the last line in the format: "
    "\\boxed{<answer>}.\n";

const char* kSystemWrapper =
    "You are a QA agent. Your role is: <role_name>. Your way of thinking and acting is as "
    "follows: <role_prompt>. Given a question and context, output ONLY one JSON object: "
    "{\"answer\": \"<short factual answer>\"}.\n"
    "- The answer must be a short factual string (yes/no or a name/date/number from context).\n"
    "- NEVER explain. NEVER return empty. No sentences or verbs.\n"
    "- Keep the answer <= 12 words.\n"
    "\n"
    "Here are the rules you must STRICTLY follow:\n"
    "1. Always return the answer as the SHORTEST exact entity only. The answer is always within "
    "10 words, and usually within 5 words.\n"
    "2. If the question is yes/no, respond strictly with yes or no only.\n"
    "3. For year ranges, never use hyphens; instead, use \"from XXXX to YYYY\" or \"XXXX until "
    "YYYY\".\n"
    "4. Do not output sentences, explanations, or phrases with verbs; the answer must be a "
    "single entity expression only.\n"
    "5. One way or another, you must return your best guess, and the final answer must be in "
    "the format: \\boxed{<answer>}.\n";

const char* kRewriteTemplate =
    "You are an expert prompt engineer for multi-hop question answering agents.\n"
    "Your task: Given a current prompt for a QA agent role, failure examples, and error "
    "patterns, produce an IMPROVED version of the prompt that addresses the identified "
    "weaknesses.\n"
    "\n"
    "Mutation strategy - make only minimal, targeted changes:\n"
    "- You may ADD 1-3 sentences of clarifying instructions.\n"
    "- You may REPHRASE existing sentences for clarity.\n"
    "- You may REMOVE unhelpful or misleading instructions.\n"
    "- You must NOT rewrite the entire prompt from scratch or change the overall structure.\n"
    "- Keep the same opening sentence and general flow.\n"
    "\n"
    "Guidelines:\n"
    "- Keep the role's core strategy (e.g., CoT stays CoT, self-consistency stays "
    "self-consistency).\n"
    "- Preserve the output format: the agent must return a JSON object {\"answer\": \"<short "
    "factual answer>\"}.\n"
    "- Add specific, actionable reasoning instructions based on the failure patterns. For "
    "example:\n"
    "  - If the agent gives partial answers: \"Extract ALL entities mentioned in the question "
    "and trace each one through the context before answering.\"\n"
    "  - If the agent answers with wrong entities: \"Double-check that your answer directly "
    "answers the specific question being asked, not a related but different question.\"\n"
    "  - If the agent gives empty/unanswerable responses: \"You MUST always provide your best "
    "guess. Never say unanswerable or N/A.\"\n"
    "- Keep the prompt concise (under 500 words). Longer is not better.\n"
    "- Focus on the 1-2 most impactful changes based on the failure patterns.\n"
    "\n"
    "Output: Return ONLY the improved prompt text. No explanation, no markdown, no quotes.\n";

}  // namespace

std::vector<std::string> default_role_names() {
  return {"raw", "cot", "sc", "mad", "react_reflect", "summary"};
}

std::string default_role_prompt(const std::string& role) {
  if (role == "raw") return kRawPrompt;
  if (role == "cot") return kCotPrompt;
  if (role == "sc") return kScPrompt;
  if (role == "mad") return kMadPrompt;
  if (role == "react_reflect") return kReactReflectPrompt;
  if (role == "summary") return kSummaryPrompt;
  fail_data("no shipped prompt for role: " + role);
}

std::string system_wrapper_text() { return kSystemWrapper; }

std::string rewrite_template_text() { return kRewriteTemplate; }

std::map<std::string, std::string> parse_prompt_sections(const std::string& text) {
  std::map<std::string, std::string> sections;
  std::string current = "main";
  std::string body;
  std::istringstream in(text);
  std::string line;
  auto flush = [&]() {
    const std::string trimmed = trim_copy(body);
    if (!trimmed.empty()) sections[current] = trimmed;
    body.clear();
  };
  while (std::getline(in, line)) {
    const std::string t = trim_copy(line);
    if (t.size() >= 3 && t.front() == '[' && t.back() == ']' &&
        t.find(' ') == std::string::npos) {
      flush();
      current = t.substr(1, t.size() - 2);
      continue;
    }
    body += line;
    body += '\n';
  }
  flush();
  return sections;
}

void write_default_prompts(const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  for (const auto& role : default_role_names()) {
    const std::string text = default_role_prompt(role);
    std::ofstream out(std::filesystem::path(dir) / (role + ".txt"), std::ios::trunc);
    out << text;
    manifest.push_back(
        {{"role", role}, {"version", 0}, {"hash", hex64(fnv1a64(text))}});
  }
  {
    std::ofstream out(std::filesystem::path(dir) / "system_wrapper.txt", std::ios::trunc);
    out << system_wrapper_text();
  }
  {
    std::ofstream out(std::filesystem::path(dir) / "rewrite_template.txt", std::ios::trunc);
    out << rewrite_template_text();
  }
  std::ofstream mf(std::filesystem::path(dir) / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
}

std::string load_role_prompt(const std::string& dir, const std::string& role) {
  if (!dir.empty()) {
    const auto path = std::filesystem::path(dir) / (role + ".txt");
    std::ifstream in(path);
    if (in) {
      std::stringstream ss;
      ss << in.rdbuf();
      return ss.str();
    }
  }
  return default_role_prompt(role);
}

}  // namespace routeforge
