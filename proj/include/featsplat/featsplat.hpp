#pragma once

#include "featsplat/core.hpp"
#include "featsplat/scene.hpp"
#include "featsplat/projection.hpp"
#include "featsplat/rasterizer.hpp"
#include "featsplat/decoder.hpp"
#include "featsplat/loss.hpp"
#include "featsplat/trainer.hpp"
#include "featsplat/oracle.hpp"
#include "featsplat/prompt_edit.hpp"
#include "featsplat/viz.hpp"
#include "featsplat/gsplat_io.hpp"
#include "featsplat/image_io.hpp"
