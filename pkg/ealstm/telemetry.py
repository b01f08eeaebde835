# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

"""Prometheus instruments, scraped through the monitor server's ``/metrics`` route."""

from __future__ import absolute_import

from prometheus_client import Counter, Gauge, Histogram

ADAM_STEPS = Counter("ealstm_adam_steps_total", "Adam parameter updates applied")
TRAIN_SECONDS = Histogram(
    "ealstm_train_seconds",
    "Wall-clock time of one gradient training run",
    buckets=(0.1, 0.5, 1, 2.5, 5, 10, 30, 60, 120, 300, 600, float("inf")),
)
FITNESS_EVALUATIONS = Counter(
    "ealstm_fitness_evaluations_total", "Attention candidates trained and scored"
)
FITNESS_CACHE_HITS = Counter(
    "ealstm_fitness_cache_hits_total", "Candidates scored from the per-generation cache"
)
DIVERGED_EVALUATIONS = Counter(
    "ealstm_diverged_evaluations_total", "Candidates whose training diverged"
)
GENERATIONS = Counter("ealstm_generations_total", "Search generations completed")
BEST_FITNESS = Gauge("ealstm_best_fitness", "Lowest validation loss observed so far")
