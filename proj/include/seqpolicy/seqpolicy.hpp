#pragma once

#include "seqpolicy/binary_io.hpp"
#include "seqpolicy/checkpoint.hpp"
#include "seqpolicy/codec.hpp"
#include "seqpolicy/datastore.hpp"
#include "seqpolicy/envs.hpp"
#include "seqpolicy/error.hpp"
#include "seqpolicy/layers.hpp"
#include "seqpolicy/model.hpp"
#include "seqpolicy/optim.hpp"
#include "seqpolicy/policy.hpp"
#include "seqpolicy/positions.hpp"
#include "seqpolicy/random.hpp"
#include "seqpolicy/sequencer.hpp"
#include "seqpolicy/trainer.hpp"
