#pragma once

#include "pointvector/checkpoint.hpp"
#include "pointvector/config.hpp"
#include "pointvector/dataio.hpp"
#include "pointvector/geometry.hpp"
#include "pointvector/model.hpp"
#include "pointvector/nnops.hpp"
#include "pointvector/setabs.hpp"
#include "pointvector/train.hpp"
#include "pointvector/vecenc.hpp"
