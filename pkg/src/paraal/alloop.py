"""Pool-based active-learning loop.

One run: train a starting model on a small random bootstrap set, then
repeat T times: draw a pool of unlabeled items, score them with the
acquisition strategy, label the top K, retrain, evaluate on the test
split.

Determinism discipline: a run is a pure function of (dataset, strategy,
schedule, configs, seed). Every random draw uses an rng derived from the
seed and a purpose tag, never a shared stream, so strategies under one
seed share their bootstrap set, their starting model (per embedding-loss
mode), and their pool rngs. Pools are drawn from the strategy's own
unlabeled remainder; strategies that have made identical selections so
far therefore see identical pools, and at the first iteration all of
them do.

Unselected pool items stay unlabeled and may be drawn into later pools.
"""

from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import metrics as mt
from . import uncertainty as un
from .autodiff import derive_seed, make_rng
from .embedspace import SemanticSpace, VsConfig, train_semantic_space
from .metrics import EvalReport
from .qamodel import QaConfig, QaModel, train_qa
from .taskgen import Dataset, caption_pairs
from .uncertainty import STRATEGIES, UncertaintyScore

# the _vs strategies require the embedding-distance loss at training time,
# the plain Bayesian ones forbid it; every other strategy follows the config
EMBED_ENABLED_BY_STRATEGY = {"baye": False, "baye_deno": False,
                             "baye_vs": True, "baye_vs_deno": True}


def strategy_embed_enabled(strategy: str, config_default: bool) -> bool:
    return EMBED_ENABLED_BY_STRATEGY.get(strategy, config_default)


@dataclass
class AlSchedule:
    bootstrap_fraction: float = 0.05
    pool_fraction: float = 0.15
    acquire_fraction: float = 0.05
    iterations: int = 5
    retrain_mode: str = "from_scratch"

    def validate(self) -> None:
        for name in ("bootstrap_fraction", "pool_fraction", "acquire_fraction"):
            f = getattr(self, name)
            if not 0.0 < f <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {f}")
        if self.acquire_fraction > self.pool_fraction:
            raise ValueError("acquire_fraction cannot exceed pool_fraction")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        budget = self.bootstrap_fraction + self.iterations * self.acquire_fraction
        if budget > 1.0 + 1e-9:
            raise ValueError(
                f"schedule infeasible: bootstrap + T * acquire = {budget:.3f} > 1")
        if self.retrain_mode not in ("from_scratch", "continue"):
            raise ValueError(
                f"retrain_mode must be 'from_scratch' or 'continue', "
                f"got {self.retrain_mode!r}")

    def counts(self, n_train: int) -> tuple[int, int, int]:
        """(bootstrap, pool, acquire) item counts for a train set of n_train."""
        self.validate()
        b = round(self.bootstrap_fraction * n_train)
        p = round(self.pool_fraction * n_train)
        k = round(self.acquire_fraction * n_train)
        if min(b, p, k) < 1:
            raise ValueError(
                f"train set of {n_train} rounds a schedule count to zero "
                f"(bootstrap {b}, pool {p}, acquire {k})")
        if self.iterations > 0:
            # every iteration must find a full pool among the unlabeled
            left = n_train - b - (self.iterations - 1) * k
            if left < p:
                raise ValueError(
                    f"schedule infeasible: final pool needs {p} unlabeled "
                    f"items but only {left} remain")
        return b, p, k

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AlSchedule":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class IterationRecord:
    iteration: int
    labeled_count: int
    labeled_fraction: float
    report: EvalReport


@dataclass
class SelectionRecord:
    iteration: int
    selected: list[int]          # dataset item indices, best score first
    scores: dict[int, float]     # every scored pool item
    type_percentages: dict[str, float]


@dataclass
class AlRunState:
    strategy: str
    n_train: int
    labeled_indices: list[int]          # insertion order = labeling order
    unlabeled_indices: set[int]
    pool_indices: list[int] | None
    iteration: int
    metric_history: list[IterationRecord] = field(default_factory=list)
    selection_log: list[SelectionRecord] = field(default_factory=list)

    @property
    def labeled_count(self) -> int:
        return len(self.labeled_indices)

    def check_invariants(self) -> None:
        labeled = set(self.labeled_indices)
        if len(labeled) != len(self.labeled_indices):
            raise AssertionError("duplicate labeled index")
        if labeled & self.unlabeled_indices:
            raise AssertionError("labeled and unlabeled sets overlap")
        if self.pool_indices is not None:
            if not set(self.pool_indices) <= self.unlabeled_indices:
                raise AssertionError("pool contains labeled items")


# ---------------------------------------------------------------------------
# Loop steps
# ---------------------------------------------------------------------------


def train_indices(dataset: Dataset) -> list[int]:
    return [i for i, it in enumerate(dataset.items) if it.split == "train_pool"]


def bootstrap(dataset: Dataset, schedule: AlSchedule, rng: np.random.Generator,
              strategy: str = "random") -> AlRunState:
    """Uniformly random initial labeled set; no training happens here."""
    idxs = train_indices(dataset)
    b, _, _ = schedule.counts(len(idxs))
    chosen = rng.choice(len(idxs), size=b, replace=False)
    labeled = [idxs[j] for j in chosen]
    state = AlRunState(strategy=strategy, n_train=len(idxs),
                       labeled_indices=labeled,
                       unlabeled_indices=set(idxs) - set(labeled),
                       pool_indices=None, iteration=0)
    state.check_invariants()
    return state


def draw_pool(state: AlRunState, schedule: AlSchedule,
              rng: np.random.Generator) -> list[int]:
    _, p, _ = schedule.counts(state.n_train)
    if len(state.unlabeled_indices) < p:
        raise ValueError(
            f"pool needs {p} unlabeled items but only "
            f"{len(state.unlabeled_indices)} remain "
            f"(short {p - len(state.unlabeled_indices)})")
    domain = sorted(state.unlabeled_indices)
    chosen = rng.choice(len(domain), size=p, replace=False)
    state.pool_indices = [domain[j] for j in chosen]
    state.check_invariants()
    return state.pool_indices


def select_top_k(scores: list[UncertaintyScore], k: int) -> list[int]:
    """Indices of the k highest scores; ties break to the lower item index."""
    if k > len(scores):
        raise ValueError(f"cannot select {k} of {len(scores)} scores")
    ranked = sorted(scores, key=lambda s: (-s.value, s.item_index))
    return [s.item_index for s in ranked[:k]]


def oracle_label(dataset: Dataset, state: AlRunState,
                 indices: list[int]) -> list[tuple[list[int], np.ndarray, list[int]]]:
    """Reveal ground-truth answers (the generator plays the human oracle)."""
    if len(set(indices)) != len(indices):
        raise ValueError("duplicate indices in one labeling request")
    for idx in indices:
        if idx not in state.unlabeled_indices:
            raise ValueError(f"item {idx} is not unlabeled")
    out = []
    for idx in indices:
        state.unlabeled_indices.remove(idx)
        state.labeled_indices.append(idx)
        it = dataset.items[idx]
        out.append((it.question_tokens, dataset.scene_features(it.scene_id),
                    it.answer_tokens))
    state.check_invariants()
    return out


def training_triples(dataset: Dataset, indices: list[int]):
    return [(dataset.items[i].question_tokens,
             dataset.scene_features(dataset.items[i].scene_id),
             dataset.items[i].answer_tokens) for i in indices]


def type_percentages(dataset: Dataset, indices: list[int]) -> dict[str, float]:
    counts = Counter(dataset.items[i].question_type for i in indices)
    return {t: 100.0 * c / len(indices) for t, c in sorted(counts.items())}


def train_space_for_run(dataset: Dataset, caption_count: int | None,
                        vs_config: VsConfig, seed: int,
                        answer_pair_indices: list[int]) -> SemanticSpace:
    """Per-seed semantic space trained before the first selection round.

    Captions need no labels, so the corpus defaults to every object slot;
    answer pairs come only from the already-labeled indices."""
    if caption_count is None:
        caption_count = sum(len(s.objects) for s in dataset.scenes)
    pairs, cap_groups = caption_pairs(
        dataset.scenes, make_rng(derive_seed(seed, "captions")),
        caption_count, dataset.table, dataset.vocab, return_groups=True)
    # bare-phrase captions join the labeled answers in the contrast channel,
    # where batches are scoped to one question type; full sentences stay in
    # the plain caption stream
    plain = [p for p, g in zip(pairs, cap_groups) if g is None]
    contrast_pairs = [(dataset.scene_features(dataset.items[i].scene_id),
                       dataset.items[i].answer_tokens)
                      for i in answer_pair_indices]
    contrast_groups = [(dataset.items[i].question_type, dataset.items[i].canonical_class)
                       for i in answer_pair_indices]
    contrast_pairs += [p for p, g in zip(pairs, cap_groups) if g is not None]
    contrast_groups += [g for g in cap_groups if g is not None]
    return train_semantic_space(plain, contrast_pairs, len(dataset.vocab),
                                vs_config, make_rng(derive_seed(seed, "vs")),
                                answer_groups=contrast_groups)


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------


def run_active_learning(dataset: Dataset, strategy: str, schedule: AlSchedule,
                        qa_config: QaConfig, vs_config: VsConfig, seed: int,
                        mc_samples: int = un.MC_SAMPLES_DEFAULT,
                        entropy_beam: int = un.ENTROPY_BEAM_DEFAULT,
                        space: SemanticSpace | None = None,
                        f0_params: dict | None = None,
                        on_iteration=None) -> AlRunState:
    """Execute one (strategy, seed) cell and return its full trace.

    space and f0_params allow the caller to reuse the per-seed semantic
    space and starting model across strategies; both are recomputed
    identically here when absent, so passing them is purely a speedup.
    on_iteration(state, record) fires after the bootstrap evaluation and
    after each loop iteration.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    b, p, k = schedule.counts(len(train_indices(dataset)))
    qa_config = dataclasses.replace(
        qa_config,
        embed_enabled=strategy_embed_enabled(strategy, qa_config.embed_enabled))

    state = bootstrap(dataset, schedule,
                      make_rng(derive_seed(seed, "bootstrap")), strategy)
    if space is None:
        space = train_space_for_run(dataset, None, vs_config, seed,
                                    state.labeled_indices)
    if qa_config.embed_enabled and space.embed_dim != qa_config.hidden_dim:
        raise ValueError(
            f"space dimension {space.embed_dim} != model hidden "
            f"{qa_config.hidden_dim}")

    init_seed = derive_seed(seed, "model_init")
    model = QaModel(len(dataset.vocab), dataset.config.feature_dim,
                    qa_config, seed=init_seed)
    if f0_params is not None:
        model.load_params(f0_params)
    else:
        train_qa(model, space, training_triples(dataset, state.labeled_indices),
                 qa_config, make_rng(derive_seed(seed, "train", 0)))

    def record_eval():
        rec = IterationRecord(state.iteration, state.labeled_count,
                              state.labeled_count / state.n_train,
                              mt.evaluate(model, dataset))
        state.metric_history.append(rec)
        if on_iteration is not None:
            on_iteration(state, rec)

    record_eval()

    for t in range(1, schedule.iterations + 1):
        state.iteration = t
        pool = draw_pool(state, schedule, make_rng(derive_seed(seed, "pool", t)))
        scores = un.score_pool(model, space, dataset, pool, strategy,
                               run_seed=derive_seed(seed, "score", t),
                               m=mc_samples, beam_width=entropy_beam)
        chosen = select_top_k(scores, k)
        state.pool_indices = None  # consumed by this selection
        oracle_label(dataset, state, chosen)
        state.selection_log.append(SelectionRecord(
            t, list(chosen), {s.item_index: s.value for s in scores},
            type_percentages(dataset, chosen)))

        if schedule.retrain_mode == "from_scratch":
            model = QaModel(len(dataset.vocab), dataset.config.feature_dim,
                            qa_config, seed=init_seed)
        train_qa(model, space, training_triples(dataset, state.labeled_indices),
                 qa_config, make_rng(derive_seed(seed, "train", t)))
        record_eval()

    return state
