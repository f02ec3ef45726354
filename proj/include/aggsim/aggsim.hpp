#pragma once

#include <aggsim/aggregator.hpp>
#include <aggsim/canonical.hpp>
#include <aggsim/common.hpp>
#include <aggsim/crypto.hpp>
#include <aggsim/identity.hpp>
#include <aggsim/ledger.hpp>
#include <aggsim/netsim.hpp>
#include <aggsim/scenario.hpp>
#include <aggsim/storage.hpp>
#include <aggsim/trace.hpp>
#include <aggsim/transform.hpp>
