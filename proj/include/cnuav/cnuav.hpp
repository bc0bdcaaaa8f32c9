#pragma once

#include "cnuav/error.hpp"
#include "cnuav/radio_env.hpp"
#include "cnuav/noma_phy.hpp"
#include "cnuav/gdbn.hpp"
#include "cnuav/mjpf.hpp"
#include "cnuav/env.hpp"
#include "cnuav/agent.hpp"
#include "cnuav/baselines.hpp"
#include "cnuav/harness.hpp"
