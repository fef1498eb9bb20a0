#pragma once

#include <map>
#include <string>
#include <vector>

namespace routeforge {

// The six shipped roles. Multi-turn roles carry [section] sub-prompts inside
// one prompt file; the whole file is versioned and hashed as a unit.
std::vector<std::string> default_role_names();

// Version-0 prompt text for a role. Throws Error(Data) for unknown roles.
std::string default_role_prompt(const std::string& role);

// Shared system wrapper with <role_name> and <role_prompt> slots.
std::string system_wrapper_text();

// Instruction template for the rewriter model.
std::string rewrite_template_text();

// Splits a prompt into sections. Lines of the form "[name]" open a section;
// text before any marker (or the whole prompt when none) lands in "main".
std::map<std::string, std::string> parse_prompt_sections(const std::string& text);

// Writes one <role>.txt per role plus wrapper/rewrite files and manifest.json
// into dir. Used to materialize the shipped defaults for editing.
void write_default_prompts(const std::string& dir);

// Loads a role prompt from dir/<role>.txt when present, else the default.
std::string load_role_prompt(const std::string& dir, const std::string& role);

}  // namespace routeforge
