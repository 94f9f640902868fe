// Umbrella header for the CNN-to-ViT distillation toolkit.
#pragma once

#include "c2v/common.hpp"
#include "c2v/config.hpp"
#include "c2v/container.hpp"
#include "c2v/data.hpp"
#include "c2v/feature_losses.hpp"
#include "c2v/metrics.hpp"
#include "c2v/models.hpp"
#include "c2v/nn.hpp"
#include "c2v/pixel_losses.hpp"
#include "c2v/tensor.hpp"
#include "c2v/trainer.hpp"
