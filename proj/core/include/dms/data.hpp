#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "dms/tensor.hpp"

namespace dms {

enum class TaskKind { planted_features, teacher_student, csv_classification };

struct TaskSpec {
  TaskKind kind = TaskKind::planted_features;
  int input_dim = 0;
  int classes = 0;     // classification tasks
  int output_dim = 0;  // regression targets (teacher-student)
  int train = 0, val = 0, test = 0;
  int informative = 0;  // planted-features: |S|
  int teacher_blocks = 0, teacher_hidden = 0, teacher_dim = 0;  // teacher-student
  double noise = 0.0;
  uint64_t seed = 0;
  std::string csv_path;
};

struct Dataset {
  bool classification = true;
  Tensor x_train, x_val, x_test;
  // classification: (n,) class indices; regression: (n, output_dim)
  Tensor y_train, y_val, y_test;
  std::vector<int> informative;  // planted-features: the set S, ascending
  int teacher_blocks = 0;        // teacher-student ground truth
};

// Labels depend only on a seeded random subset S of coordinates through a
// fixed random linear-plus-tanh rule; the rest is pure noise. Labels are
// quantile-binned so classes are balanced by construction.
Dataset gen_planted_features(const TaskSpec& spec);

// Regression targets produced by a seeded residual teacher of known depth.
Dataset gen_teacher_student(const TaskSpec& spec);

// Delimited text, header row, final column an integer class label. Features
// standardized with train-split statistics; deterministic seeded split.
Dataset load_csv_dataset(const TaskSpec& spec);

Dataset make_dataset(const TaskSpec& spec);

TaskKind task_kind_from_string(const std::string& s);
std::string to_string(TaskKind kind);

}  // namespace dms
