#pragma once

#include "adseg/adam.hpp"
#include "adseg/adapt.hpp"
#include "adseg/autodiff.hpp"
#include "adseg/checkpoint.hpp"
#include "adseg/dataset.hpp"
#include "adseg/dataset_io.hpp"
#include "adseg/error.hpp"
#include "adseg/evaluate.hpp"
#include "adseg/guidance.hpp"
#include "adseg/image_io.hpp"
#include "adseg/losses.hpp"
#include "adseg/metrics.hpp"
#include "adseg/named_tensors.hpp"
#include "adseg/segnet.hpp"
#include "adseg/service.hpp"
#include "adseg/tensor.hpp"
#include "adseg/usersim.hpp"
