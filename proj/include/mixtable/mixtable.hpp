#pragma once

// umbrella header

#include "mixtable/common.hpp"
#include "mixtable/csv.hpp"
#include "mixtable/dataset.hpp"
#include "mixtable/diffusion.hpp"
#include "mixtable/embedding.hpp"
#include "mixtable/graph.hpp"
#include "mixtable/metrics.hpp"
#include "mixtable/model.hpp"
#include "mixtable/nn.hpp"
#include "mixtable/optim.hpp"
#include "mixtable/rng.hpp"
#include "mixtable/tensor.hpp"
#include "mixtable/training.hpp"
