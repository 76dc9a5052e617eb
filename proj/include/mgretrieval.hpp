#pragma once

#include "mgretrieval/config.hpp"
#include "mgretrieval/error.hpp"
#include "mgretrieval/harness.hpp"
#include "mgretrieval/ingestion.hpp"
#include "mgretrieval/llm_gateway.hpp"
#include "mgretrieval/memory_store.hpp"
#include "mgretrieval/metrics.hpp"
#include "mgretrieval/prompts.hpp"
#include "mgretrieval/pyramid.hpp"
#include "mgretrieval/reflective_loop.hpp"
#include "mgretrieval/structured_output.hpp"
#include "mgretrieval/text.hpp"
