#pragma once

#include "braintok/checkpoint.hpp"
#include "braintok/config.hpp"
#include "braintok/dataset.hpp"
#include "braintok/encoder.hpp"
#include "braintok/features.hpp"
#include "braintok/mask.hpp"
#include "braintok/model.hpp"
#include "braintok/objective.hpp"
#include "braintok/probe.hpp"
#include "braintok/schedules.hpp"
#include "braintok/synthetic.hpp"
#include "braintok/tokenizer.hpp"
#include "braintok/trainer.hpp"
#include "braintok/views.hpp"
