# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

"""Competitive Random Search over binary-encoded attention weights.

A genome holds one fixed-width segment per time step, most significant bit first.
Each generation trains the LSTM once per distinct genome, ranks the population by
validation loss, keeps the champions and refills the population with children built
from champion pairs by segment selection, parity recombination and a one-bit
mutation.
"""

from __future__ import absolute_import

import itertools
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from . import telemetry
from .data import WindowDataset
from .exceptions import ContractViolationError, DivergenceError, EvolutionError, NonFiniteError
from .gradtrain import TrainConfig, TrainResult, train
from .model import LstmParams, ModelConfig
from .ndcore import DTYPE, Rng

Bits = npt.NDArray[np.uint8]

SEGMENT_BITS = 6
DIVERGED_LOSS = sys.float_info.max
EVEN = 0
ODD = 1

# Root stream keys
POPULATION_STREAM = 0
REBUILD_STREAM = 1
GENERATION_STREAM = 2

# Keys under a generation's stream
SNAPSHOT_KEY = 0
ORDER_KEY = 1
MEMBER_KEY = 2


def _as_bits(values: Sequence[int]) -> Bits:
    bits = np.array(values, dtype=np.uint8)
    if bits.ndim != 1 or np.any(bits > 1):
        raise ContractViolationError("A bit string holds only 0 and 1")
    return bits


@dataclass(frozen=True, eq=False)
class Genome:
    """``L`` segments of ``segment_bits`` bits each."""

    bits: Bits
    segment_bits: int = SEGMENT_BITS

    def __post_init__(self) -> None:
        bits = _as_bits(self.bits)
        if self.segment_bits < 1 or bits.size == 0 or bits.size % self.segment_bits:
            raise ContractViolationError(
                f"{bits.size} bits do not split into {self.segment_bits}-bit segments"
            )
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_string(cls, text: str, segment_bits: int = SEGMENT_BITS) -> "Genome":
        return cls(_as_bits([int(ch) for ch in text]), segment_bits)

    @classmethod
    def from_segments(cls, segments: npt.NDArray[np.uint8]) -> "Genome":
        segments = np.asarray(segments, dtype=np.uint8)
        return cls(segments.reshape(-1), int(segments.shape[1]))

    @property
    def length(self) -> int:
        return self.bits.size // self.segment_bits

    def segments(self) -> npt.NDArray[np.uint8]:
        """An ``L x segment_bits`` writable copy."""
        return self.bits.reshape(self.length, self.segment_bits).copy()

    def segment(self, index: int) -> Bits:
        return self.segments()[index]

    def key(self) -> bytes:
        return self.bits.tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Genome):
            return NotImplemented
        return self.segment_bits == other.segment_bits and self.key() == other.key()

    def __hash__(self) -> int:
        return hash((self.segment_bits, self.key()))

    def __str__(self) -> str:
        return "".join(str(int(b)) for b in self.bits)

    def __repr__(self) -> str:
        return f"Genome('{self}', segment_bits={self.segment_bits})"


def decode(genome: Genome) -> npt.NDArray[np.float64]:
    """Attention weights ``(v + 1) / 2^bits`` per segment value ``v``.

    With 6-bit segments the weights lie on the grid 1/64, 2/64, ..., 1.
    """
    powers = 2 ** np.arange(genome.segment_bits - 1, -1, -1)
    values = genome.segments().astype(np.int64) @ powers
    return (values + 1).astype(DTYPE) / float(2 ** genome.segment_bits)


def encode(weights: Sequence[float], segment_bits: int = SEGMENT_BITS) -> Genome:
    """Nearest genome for attention weights in ``(0, 1]``."""
    scale = 2 ** segment_bits
    values = np.clip(np.rint(np.asarray(weights, dtype=DTYPE) * scale) - 1, 0, scale - 1)
    shifts = np.arange(segment_bits - 1, -1, -1)
    segments = (values.astype(np.int64)[:, None] >> shifts) & 1
    return Genome.from_segments(segments)


@dataclass
class Population:
    members: List[Genome]
    losses: Optional[List[float]] = None
    generation: int = 0

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ChampionSet:
    """The lowest-loss genomes of a generation, best first."""

    members: Tuple[Genome, ...]
    losses: Tuple[float, ...]
    indices: Tuple[int, ...]
    generation: int = 0

    def __len__(self) -> int:
        return len(self.members)


def init_population(
    n: int, length: int, rng: Rng, segment_bits: int = SEGMENT_BITS
) -> Population:
    """``n`` genomes of ``length`` segments with i.i.d. fair bits.

    Raises:
        ContractViolationError: ``n < 2`` or ``length < 1``.
    """
    if n < 2 or length < 1:
        raise ContractViolationError(f"Need N >= 2 and L >= 1, got N={n}, L={length}")
    bits = rng.bernoulli(0.5, (n, length * segment_bits)).astype(np.uint8)
    return Population(members=[Genome(row, segment_bits) for row in bits])


def rank(population: Population, n_champions: int) -> ChampionSet:
    """Pick the ``n_champions`` lowest-loss members; ties keep population order.

    Raises:
        ContractViolationError: Losses are unset or ``n_champions`` is out of range.
    """
    if population.losses is None or len(population.losses) != len(population):
        raise ContractViolationError("Cannot rank a population whose losses are unset")
    if not 1 <= n_champions <= len(population):
        raise ContractViolationError(
            f"Champion count {n_champions} must be in [1, {len(population)}]"
        )
    order = np.argsort(np.asarray(population.losses, dtype=DTYPE), kind="stable")
    chosen = [int(i) for i in order[:n_champions]]
    return ChampionSet(
        members=tuple(population.members[i] for i in chosen),
        losses=tuple(float(population.losses[i]) for i in chosen),
        indices=tuple(chosen),
        generation=population.generation,
    )


def select_segments(length: int, rng: Rng) -> Tuple[int, ...]:
    """Each segment index independently with probability 1/2, redrawn until non-empty."""
    if length < 1:
        raise ContractViolationError(f"Need L >= 1, got {length}")
    while True:
        mask = rng.bernoulli(0.5, length)
        if mask.any():
            return tuple(int(i) for i in np.flatnonzero(mask))


def recombine(seg_i: Bits, seg_j: Bits, rng: Rng, parity: Optional[int] = None) -> Bits:
    """Copy ``seg_i`` and take ``seg_j``'s bits at the even or odd positions.

    Positions count from 0 at the most significant bit. The parity is drawn uniformly
    unless given.
    """
    seg_i = _as_bits(seg_i)
    seg_j = _as_bits(seg_j)
    if seg_i.shape != seg_j.shape:
        raise ContractViolationError(f"Segments differ in width: {seg_i.size} vs {seg_j.size}")
    if parity is None:
        parity = rng.integer(2)
    child = seg_i.copy()
    child[parity::2] = seg_j[parity::2]
    return child


def mutate(segment: Bits, rng: Rng, index: Optional[int] = None) -> Bits:
    """Flip exactly one bit, chosen uniformly unless ``index`` is given."""
    child = _as_bits(segment).copy()
    if index is None:
        index = rng.integer(child.size)
    child[index] ^= 1
    return child


def make_child(parent_i: Genome, parent_j: Genome, rng: Rng) -> Genome:
    """Replace each selected segment of ``parent_i`` by a mutated recombination with
    ``parent_j``'s segment at the same index."""
    if parent_i.length != parent_j.length or parent_i.segment_bits != parent_j.segment_bits:
        raise ContractViolationError("Parents must share L and segment width")
    segments = parent_i.segments()
    other = parent_j.segments()
    for index in select_segments(parent_i.length, rng):
        segments[index] = mutate(recombine(segments[index], other[index], rng), rng)
    return Genome.from_segments(segments)


def rebuild(champions: ChampionSet, n: int, rng: Rng) -> Population:
    """Refill a population of ``n``: the champions first, then children.

    Children cycle over champion pairs ``(i, j)``, ``i < j``, in rank order
    ``(0, 1), (0, 2), ..., (K-2, K-1)`` and repeat the cycle until the population is
    full. The base parent is the better-ranked ``i``. A child identical to its base
    parent is redrawn, so segment choice, recombination parity and mutated bits follow
    their distribution conditioned on the child differing from its base. Losses are
    unset.

    Raises:
        ContractViolationError: Fewer than two champions or ``n`` below their count.
    """
    if len(champions) < 2:
        raise ContractViolationError("Rebuilding needs at least two champions")
    if n < len(champions):
        raise ContractViolationError(f"Population size {n} is below {len(champions)} champions")

    members = list(champions.members)
    pairs = itertools.cycle(itertools.combinations(range(len(champions)), 2))
    while len(members) < n:
        i, j = next(pairs)
        base = champions.members[i]
        child = make_child(base, champions.members[j], rng)
        while child == base:
            child = make_child(base, champions.members[j], rng)
        members.append(child)
    return Population(members=members, generation=champions.generation + 1)


@dataclass(frozen=True)
class CrsConfig:
    """Search settings: population ``N``, champions, generations and the root seed."""

    population: int = 36
    champions: int = 6
    generations: int = 20
    seed: int = 0
    segment_bits: int = SEGMENT_BITS
    workers: int = 1
    warm_start: bool = False

    def __post_init__(self) -> None:
        if self.generations < 1:
            raise ContractViolationError(f"Need at least one generation, got {self.generations}")
        if self.champions < 2 or self.population < self.champions:
            raise ContractViolationError(
                f"Need 2 <= champions <= population, got {self.champions}/{self.population}"
            )
        if self.workers < 1:
            raise ContractViolationError(f"workers must be >= 1, got {self.workers}")


@dataclass(frozen=True)
class GenerationReport:
    """Audit record of one generation."""

    generation: int
    champion_losses: Tuple[float, ...]
    champions: Tuple[str, ...]
    best_genome: str
    best_loss: float
    best_ever_loss: float
    mean_loss: float
    evaluations: int
    cache_hits: int
    diverged: int

    def to_dict(self) -> Dict[str, object]:
        out = asdict(self)
        out["champion_losses"] = list(self.champion_losses)
        out["champions"] = list(self.champions)
        return out


@dataclass
class EvolutionResult:
    best_genome: Genome
    best_loss: float
    reports: List[GenerationReport] = field(default_factory=list)

    @property
    def best_attention(self) -> npt.NDArray[np.float64]:
        return decode(self.best_genome)


def _fitness(
    dataset: WindowDataset,
    genome: Genome,
    cfg: TrainConfig,
    snapshot: LstmParams,
) -> Tuple[float, Optional[TrainResult]]:
    try:
        result = train(dataset, decode(genome), cfg, snapshot)
    except (DivergenceError, NonFiniteError) as e:
        logging.warning("Candidate %s diverged: %s", genome, e)
        telemetry.DIVERGED_EVALUATIONS.inc()
        return DIVERGED_LOSS, None
    telemetry.FITNESS_EVALUATIONS.inc()
    return result.final_valid_loss, result


def evaluate_population(
    population: Population,
    dataset: WindowDataset,
    cfg: TrainConfig,
    snapshot: LstmParams,
    workers: int = 1,
) -> Tuple[List[float], Dict[bytes, Optional[TrainResult]], int]:
    """Train once per distinct genome and score every member.

    Returns the member losses, the training results keyed by genome, and the number
    of members served from the cache. Results are merged by member index, so the
    outcome doesn't depend on ``workers``.
    """
    unique: Dict[bytes, Genome] = {}
    for genome in population.members:
        unique.setdefault(genome.key(), genome)
    keys = list(unique)

    def run(key: bytes) -> Tuple[float, Optional[TrainResult]]:
        return _fitness(dataset, unique[key], cfg, snapshot)

    if workers > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, keys))
    else:
        outcomes = [run(key) for key in keys]

    scored = dict(zip(keys, outcomes))
    losses = [scored[g.key()][0] for g in population.members]
    hits = len(population) - len(keys)
    telemetry.FITNESS_CACHE_HITS.inc(hits)
    return losses, {k: v[1] for k, v in scored.items()}, hits


def member_seed(seed: int, generation: int, index: int) -> int:
    """Seed labelling member ``index`` of ``generation``.

    It depends on the root seed and the two keys only, so a member keeps its label
    whatever the worker count or evaluation order.
    """
    return Rng(seed).spawn(GENERATION_STREAM, generation).derive_seed(MEMBER_KEY, index)


def evolve(
    dataset: WindowDataset,
    cfg: TrainConfig,
    crs_cfg: CrsConfig,
    model_cfg: ModelConfig,
    on_generation: Optional[Callable[[GenerationReport], None]] = None,
) -> EvolutionResult:
    """Search attention weights minimizing the validation loss of the trained LSTM.

    Every candidate of generation ``g`` trains from the same initial parameters and
    mini-batch order, both derived from ``(crs_cfg.seed, g)``; with
    ``crs_cfg.warm_start`` the parameters of the previous generation's best candidate
    are the starting point instead.

    Raises:
        EvolutionError: Every candidate of a generation diverged.
    """
    root = Rng(crs_cfg.seed)
    population = init_population(
        crs_cfg.population, dataset.length, root.spawn(POPULATION_STREAM), crs_cfg.segment_bits
    )
    rebuild_rng = root.spawn(REBUILD_STREAM)
    warm: Optional[LstmParams] = None
    best_genome: Optional[Genome] = None
    best_loss = math.inf
    reports: List[GenerationReport] = []

    for g in range(crs_cfg.generations):
        stream = root.spawn(GENERATION_STREAM, g)
        snapshot = warm or model_cfg.init(
            stream.spawn(SNAPSHOT_KEY), dataset.features, dataset.task
        )
        gen_cfg = replace(cfg, seed=stream.derive_seed(ORDER_KEY), attn_trainable=False)

        losses, results, hits = evaluate_population(
            population, dataset, gen_cfg, snapshot, crs_cfg.workers
        )
        diverged = sum(1 for value in losses if value == DIVERGED_LOSS)
        if diverged == len(losses):
            raise EvolutionError(
                f"All {len(losses)} candidates of generation {g} diverged; "
                "lower lr or enable clipping"
            )
        population.losses = losses
        for k, (genome, value) in enumerate(zip(population.members, losses)):
            logging.debug(
                "Generation %d member %d (seed %d): %s loss %.6g",
                g,
                k,
                member_seed(crs_cfg.seed, g, k),
                genome,
                value,
            )
        champions = rank(population, crs_cfg.champions)

        if champions.losses[0] < best_loss:
            best_loss = champions.losses[0]
            best_genome = champions.members[0]
        finite = [value for value in losses if value != DIVERGED_LOSS]
        report = GenerationReport(
            generation=g,
            champion_losses=champions.losses,
            champions=tuple(str(m) for m in champions.members),
            best_genome=str(champions.members[0]),
            best_loss=champions.losses[0],
            best_ever_loss=best_loss,
            mean_loss=float(np.mean(finite)),
            evaluations=len(losses) - hits,
            cache_hits=hits,
            diverged=diverged,
        )
        reports.append(report)
        telemetry.GENERATIONS.inc()
        telemetry.BEST_FITNESS.set(best_loss)
        logging.info(
            "Generation %d/%d: best %.6g, best ever %.6g, champions %s, cache hits %d",
            g + 1,
            crs_cfg.generations,
            report.best_loss,
            best_loss,
            ", ".join(f"{value:.4g}" for value in champions.losses),
            hits,
        )
        if on_generation is not None:
            on_generation(report)

        if crs_cfg.warm_start:
            best = results.get(champions.members[0].key())
            if best is not None:
                warm = best.params
        if g + 1 < crs_cfg.generations:
            population = rebuild(champions, crs_cfg.population, rebuild_rng)

    assert best_genome is not None
    return EvolutionResult(best_genome=best_genome, best_loss=best_loss, reports=reports)
