#pragma once

// Umbrella header.

#include "fame/config.hpp"
#include "fame/data.hpp"
#include "fame/dct.hpp"
#include "fame/errors.hpp"
#include "fame/grad_check.hpp"
#include "fame/image.hpp"
#include "fame/io.hpp"
#include "fame/losses.hpp"
#include "fame/metrics.hpp"
#include "fame/model.hpp"
#include "fame/ops.hpp"
#include "fame/png.hpp"
#include "fame/tensor.hpp"
#include "fame/trainer.hpp"
