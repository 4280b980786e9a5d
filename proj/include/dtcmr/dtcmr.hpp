#pragma once

#include "dtcmr/common.hpp"
#include "dtcmr/image.hpp"
#include "dtcmr/stack.hpp"
#include "dtcmr/lowrank.hpp"
#include "dtcmr/transform.hpp"
#include "dtcmr/register.hpp"
#include "dtcmr/select.hpp"
#include "dtcmr/dti.hpp"
#include "dtcmr/evalm.hpp"
#include "dtcmr/phantom.hpp"
#include "dtcmr/pipeline.hpp"
