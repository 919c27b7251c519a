#pragma once

#include "mtkd/car.hpp"
#include "mtkd/checkpoint.hpp"
#include "mtkd/config.hpp"
#include "mtkd/data.hpp"
#include "mtkd/error.hpp"
#include "mtkd/grad_check.hpp"
#include "mtkd/grad_suite.hpp"
#include "mtkd/image_io.hpp"
#include "mtkd/mask.hpp"
#include "mtkd/metrics.hpp"
#include "mtkd/model.hpp"
#include "mtkd/ops.hpp"
#include "mtkd/optim.hpp"
#include "mtkd/pipeline.hpp"
#include "mtkd/report.hpp"
#include "mtkd/rng.hpp"
#include "mtkd/routing.hpp"
#include "mtkd/tensor.hpp"
#include "mtkd/train.hpp"
