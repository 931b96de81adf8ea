#pragma once

#include "ordgaze/gaze_net.hpp"
#include "ordgaze/synth.hpp"
#include "ordgaze/train.hpp"

namespace ordgaze::testing {

inline SynthConfig tiny_data(std::uint64_t seed = 1) {
  SynthConfig c;
  c.train_subjects = 3;
  c.val_subjects = 1;
  c.test_subjects = 1;
  c.samples_per_subject = 16;
  c.patch_size = 8;
  c.sequence_points = 3;
  c.sequence_frames = 4;
  c.seed = seed;
  return c;
}

inline GazeNetConfig tiny_net() {
  GazeNetConfig c;
  c.patch_size = 8;
  c.branch_feature_dim = 6;
  c.fusion_dim = 5;
  c.bins_x = 6;
  c.bins_y = 8;
  c.conv_stack = {{4, 3, 2}, {6, 3, 1}};
  return c;
}

inline TatConfig tiny_tat() {
  TatConfig c;
  c.mini_generations = 3;
  c.epochs_per_generation = 2;
  c.optim.batch_size = 16;
  c.eval_batch = 32;
  return c;
}

}  // namespace ordgaze::testing
