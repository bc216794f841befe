#pragma once

#include <string>
#include <vector>

#include "parsegrid/model.hpp"
#include "parsegrid/trainer.hpp"

namespace pg {

// Flat key=value run description: model structure, training recipe, data
// source and command plumbing. Unknown keys are rejected; every key has a
// default, and the effective config echoes losslessly (parse(to_text(c))
// reproduces c exactly).
struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  std::string data_source = "synth";  // synth | dir
  std::string data_root;              // images/labels/splits root for dir
  std::string data_classes = "synthetic";  // synthetic | lip
  i64 data_count = 200;               // synthetic training samples
  i64 data_val_count = 0;
  i64 data_height = 64, data_width = 64;
  u64 data_seed = 1234;

  std::string out_dir = "runs/out";
  std::string checkpoint;  // input for eval / infer
  bool tta = false;
  bool render = false;  // write prediction images during eval
  i64 workers = 1;

  // Cross-field checks beyond the nested configs' own validate().
  void validate() const;
  data::ClassTable class_table() const;
};

// One key=value per line, '#' comments, blank lines ignored.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
std::string to_text(const RunConfig& cfg);
// All recognized keys in serialization order, for documentation.
std::vector<std::string> config_keys();

}  // namespace pg
