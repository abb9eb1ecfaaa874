#pragma once

// Umbrella header for the DroneKey toolkit: synthetic drone sequences,
// transformer keypoint detection with a gated-sum head, pose-adaptive
// Mahalanobis training losses, geometric 6DoF recovery, Kalman smoothing,
// and the evaluation-metric suite.

#include "dronekey/common.hpp"
#include "dronekey/dataset_io.hpp"
#include "dronekey/gradcheck.hpp"
#include "dronekey/keyhead.hpp"
#include "dronekey/losses.hpp"
#include "dronekey/metrics.hpp"
#include "dronekey/pose3d.hpp"
#include "dronekey/pred_io.hpp"
#include "dronekey/so3.hpp"
#include "dronekey/synth.hpp"
#include "dronekey/tracking.hpp"
#include "dronekey/trainer.hpp"
#include "dronekey/types.hpp"
