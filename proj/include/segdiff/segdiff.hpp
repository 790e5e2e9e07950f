#pragma once

// Umbrella header.

#include "segdiff/ablation.hpp"
#include "segdiff/checkpoint.hpp"
#include "segdiff/common.hpp"
#include "segdiff/dataset.hpp"
#include "segdiff/eval.hpp"
#include "segdiff/kv.hpp"
#include "segdiff/mask.hpp"
#include "segdiff/metrics.hpp"
#include "segdiff/ops.hpp"
#include "segdiff/optim.hpp"
#include "segdiff/pgm.hpp"
#include "segdiff/phantom.hpp"
#include "segdiff/rng.hpp"
#include "segdiff/sampler.hpp"
#include "segdiff/schedule.hpp"
#include "segdiff/tensor.hpp"
#include "segdiff/thread_pool.hpp"
#include "segdiff/train.hpp"
#include "segdiff/unet.hpp"
