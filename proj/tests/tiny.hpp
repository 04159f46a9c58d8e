#pragma once

// Small scene spec and network sizes that keep training tests to seconds.

#include "occdiff/train.hpp"

namespace tiny {

inline occdiff::SceneSpec spec() {
  occdiff::SceneSpec s;
  s.dims = {12, 12, 4};
  s.sensor = {6, 6, 2};
  s.max_range = 10.0;
  s.buildings = {0, 1};
  s.vehicles = {1, 2};
  s.pedestrians = {1, 2};
  s.vegetation = {0, 1};
  s.ground_height = {1, 1};
  return s;
}

inline occdiff::TrainConfig config(occdiff::Representation r = occdiff::Representation::kDiscrete) {
  occdiff::TrainConfig c;
  c.representation = r;
  c.schedule = r == occdiff::Representation::kDiscrete ? occdiff::ScheduleKind::kCosine : occdiff::ScheduleKind::kLinear;
  c.diffusion_steps = 50;
  c.spec = spec();
  c.train_count = 6;
  c.val_count = 3;
  c.batch_size = 2;
  c.total_steps = 20;
  c.log_every = 5;
  c.seed = 42;
  c.adam.lr = 3e-3;
  c.denoiser.embed_dim = 8;
  c.denoiser.time_dim = 8;
  c.denoiser.time_hidden = 16;
  c.denoiser.widths = {8, 12};
  c.baseline.embed_dim = 8;
  c.baseline.widths = {8, 12};
  c.baseline.feature_channels = 8;
  return c;
}

}  // namespace tiny
