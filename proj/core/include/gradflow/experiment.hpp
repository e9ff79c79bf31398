// Copyright 2026 The gradflow Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gradflow/geometry.hpp"
#include "gradflow/model.hpp"
#include "gradflow/synthdata.hpp"
#include "gradflow/training.hpp"

namespace gradflow {

struct DataConfig {
  std::size_t samples = 300;
  std::size_t resolution = 64;
  LabelRule rule;
  BlobRanges ranges;
};

/// One experiment = one versioned JSON file; a run is reproducible from the
/// config plus its seed alone. Unknown keys are rejected so configs stay
/// diffable and typo-proof.
struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::string out_dir = "run";
  std::size_t threads = 0;  // 0: $GRADFLOW_THREADS, else 1
  DataConfig data;
  ArchConfig arch;
  TrainConfig train;
  std::vector<std::string> features{"brightness", "extent",
                                    "log_aspect_ratio"};
  bool baseline_single_random = true;
  bool baseline_three_random = true;
  Head head = Head::kLogit;  // gradient head for alignment and flow
  FlowConfig flow;

  std::size_t effective_threads() const;
};

ExperimentConfig default_config();
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config_file(const std::string& path);
std::string config_to_json(const ExperimentConfig& cfg);  // canonical
std::uint64_t config_hash(const ExperimentConfig& cfg);

/// Well-known file names inside a run directory.
struct RunPaths {
  explicit RunPaths(const std::string& out_dir);
  std::string dir;
  std::string dataset;
  std::string dataset_manifest;
  std::string manifest;
  std::string checkpoint(const std::string& tag) const;
  std::string epoch_checkpoint(const std::string& tag, std::size_t e) const;
  std::string train_log(const std::string& tag) const;
  std::string scores(const std::string& tag) const;
  std::string scores_summary(const std::string& tag) const;
  std::string report(const std::string& table, const std::string& ext) const;
};

/// generate: synthesize (or import) the dataset into the run directory.
void run_generate(const ExperimentConfig& cfg,
                  const std::string& import_list = "");

struct TrainOptions {
  bool enhanced = false;             // lambda-rewarded training
  std::size_t checkpoint_every = 0;  // epochs; 0 disables periodic dumps
  std::string resume_from;           // checkpoint path; empty = fresh
};

/// train: fit the classifier on the run's dataset; writes the final
/// checkpoint (with optimizer state and the config hash) and a line-delimited
/// training log. Resuming refuses checkpoints whose config hash differs.
void run_train(const ExperimentConfig& cfg, const TrainOptions& opts);

struct AlignOptions {
  std::string checkpoint;       // defaults to the run's plain checkpoint
  std::string dataset;          // defaults to the run's dataset
  std::string split = "test";   // test | train | all
  bool flow = false;            // compute F along traced paths as well
  std::size_t threads = 0;      // overrides config when nonzero
  std::string tag = "plain";    // output name: scores_<tag>.jsonl
  std::string flow_dump_dir;    // per-sample CSV polylines when nonempty
};

/// align: per-sample S (and optionally F) records for every configured
/// feature, the combined set, and the random baselines.
void run_align(const ExperimentConfig& cfg, const AlignOptions& opts);

struct ReportOptions {
  std::string plain_scores;     // jsonl path; default run's scores_plain
  std::string enhanced_scores;  // optional; warning if missing
  std::string out_prefix;       // default <out_dir>/report
};

/// report: comparison tables (CSV + aligned text) from score files.
void run_report(const ExperimentConfig& cfg, const ReportOptions& opts);

struct SweepResult {
  double lambda = 0.0;
  double balanced_accuracy = 0.0;
  std::vector<std::pair<std::string, double>> mean_s;  // per feature tag
};

/// sweep-lambda: trains one enhanced model per lambda value and reports the
/// accuracy / alignment trade-off into sweep.csv.
std::vector<SweepResult> run_sweep_lambda(const ExperimentConfig& cfg,
                                          const std::vector<double>& lambdas);

/// generate -> train plain -> train enhanced -> align both -> report.
void run_full_pipeline(const ExperimentConfig& cfg);

}  // namespace gradflow
