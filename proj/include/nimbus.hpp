#pragma once

#include "nimbus/autodiff.hpp"
#include "nimbus/checkpoint.hpp"
#include "nimbus/dataset.hpp"
#include "nimbus/error.hpp"
#include "nimbus/experiment.hpp"
#include "nimbus/grad_check.hpp"
#include "nimbus/image.hpp"
#include "nimbus/kernels.hpp"
#include "nimbus/masks.hpp"
#include "nimbus/metrics.hpp"
#include "nimbus/random.hpp"
#include "nimbus/render.hpp"
#include "nimbus/tensor.hpp"
#include "nimbus/trainer.hpp"
#include "nimbus/unet.hpp"
