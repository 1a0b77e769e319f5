#pragma once

#include "gaussproto/autodiff.hpp"
#include "gaussproto/checkpoint.hpp"
#include "gaussproto/color.hpp"
#include "gaussproto/config.hpp"
#include "gaussproto/dataset.hpp"
#include "gaussproto/encoders.hpp"
#include "gaussproto/errors.hpp"
#include "gaussproto/evalkit.hpp"
#include "gaussproto/explain.hpp"
#include "gaussproto/gpl.hpp"
#include "gaussproto/image.hpp"
#include "gaussproto/linalg.hpp"
#include "gaussproto/nn_ops.hpp"
#include "gaussproto/ops.hpp"
#include "gaussproto/optim.hpp"
#include "gaussproto/parallel.hpp"
#include "gaussproto/pipeline.hpp"
#include "gaussproto/regions.hpp"
#include "gaussproto/render.hpp"
#include "gaussproto/slic.hpp"
#include "gaussproto/tensor.hpp"
