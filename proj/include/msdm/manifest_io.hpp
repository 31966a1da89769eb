#pragma once

#include <filesystem>
#include <vector>

#include "msdm/synthdata.hpp"

namespace msdm::synth {

// <dir>/prompts.jsonl, <dir>/images.jsonl, <dir>/split.json and
// <dir>/images/<id>.png. Output is a pure function of the manifest.
void write_manifest(const std::filesystem::path& dir, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& dir);

void write_prompts_jsonl(const std::filesystem::path& path, const std::vector<PromptRecord>& prompts);
std::vector<PromptRecord> read_prompts_jsonl(const std::filesystem::path& path);

}  // namespace msdm::synth
