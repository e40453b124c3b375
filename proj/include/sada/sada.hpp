#pragma once

#include "sada/covariance.hpp"
#include "sada/embedding_store.hpp"
#include "sada/error.hpp"
#include "sada/gisc_losses.hpp"
#include "sada/ita_c.hpp"
#include "sada/ita_t.hpp"
#include "sada/rng.hpp"
#include "sada/testbed.hpp"
