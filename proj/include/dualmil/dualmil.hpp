#pragma once

#include "dualmil/adam.hpp"
#include "dualmil/bag.hpp"
#include "dualmil/checkpoint.hpp"
#include "dualmil/config.hpp"
#include "dualmil/data.hpp"
#include "dualmil/errors.hpp"
#include "dualmil/evaluate.hpp"
#include "dualmil/losses.hpp"
#include "dualmil/metrics.hpp"
#include "dualmil/model.hpp"
#include "dualmil/nn.hpp"
#include "dualmil/random.hpp"
#include "dualmil/tensor.hpp"
#include "dualmil/trainer.hpp"
