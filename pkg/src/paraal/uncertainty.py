"""Acquisition scores for pool-based active learning.

Convention: higher score = more uncertain = selected first. Output-space
baselines (least confidence, margin, entropy) read beam-search hypothesis
probabilities; the Bayesian family measures the spread of Monte-Carlo
dropout samples of the fused representation, optionally after the
denoiser has snapped each sample onto the semantic space by decoding it
to tokens and re-encoding those.

Strategy names with a _vs suffix score identically to their plain
counterparts; the suffix records that the model being scored was trained
with the embedding-distance loss, which the loop layer enforces.

Determinism: every stochastic score draws only from the rng handed in.
Pool scoring derives one rng per item from (run seed, item index), so
scores are independent of scoring order and of worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qamodel as qm
from .autodiff import derive_seed, make_rng
from .embedspace import SemanticSpace, embed_text
from .qamodel import QaModel, strip_eos
from .taskgen import EOS, Dataset, ParaphraseTable

STRATEGIES = ("random", "least_confidence", "margin", "entropy",
              "baye", "baye_deno", "baye_vs", "baye_vs_deno")
BAYESIAN_STRATEGIES = ("baye", "baye_deno", "baye_vs", "baye_vs_deno")
DENOISED_STRATEGIES = ("baye_deno", "baye_vs_deno")

MC_SAMPLES_DEFAULT = 20
ENTROPY_BEAM_DEFAULT = 5


@dataclass
class UncertaintyScore:
    item_index: int
    value: float
    strategy: str

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not np.isfinite(self.value) or self.value < 0:
            raise ValueError(
                f"score for item {self.item_index} must be finite and "
                f"non-negative, got {self.value}")


@dataclass
class McSampleSet:
    """m dropout-sampled representation vectors plus their mask seeds."""
    embeddings: np.ndarray        # (m, D)
    seeds: list[int]
    denoised: bool
    empty_decodes: int = field(default=0)

    @property
    def m(self) -> int:
        return self.embeddings.shape[0]

    def validate(self) -> None:
        if self.embeddings.ndim != 2 or self.m < 2:
            raise ValueError("sample set needs an (m >= 2, D) embedding matrix")
        if len(self.seeds) != self.m or len(set(self.seeds)) != self.m:
            raise ValueError("sample set needs m distinct seeds")


def entropy_of_masses(masses) -> float:
    """-sum m log m over positive entries; zero-mass entries contribute 0.

    Masses need not sum to 1 (beam mass outside the kept hypotheses is
    simply absent), but each must lie in [0, 1] for the result to be a
    valid non-negative score.
    """
    masses = np.asarray(masses, dtype=np.float64)
    if masses.size and (masses.min() < 0 or masses.max() > 1):
        raise ValueError("masses must lie in [0, 1]")
    kept = masses[masses > 0]
    return float(-(kept * np.log(kept)).sum())


def merge_masses_by_class(sequences: list[list[int]], masses,
                          table: ParaphraseTable) -> np.ndarray:
    """Pool the mass of sequences that are surface forms of one class.

    Sequences matching no class each keep a singleton bucket, so no mass
    is ever dropped. Bucket order is not meaningful.
    """
    if len(sequences) != len(masses):
        raise ValueError("one mass per sequence required")
    membership = {tuple(form): cls
                  for cls, forms in table.forms.items() for form in forms}
    buckets: dict[object, float] = {}
    for j, (seq, mass) in enumerate(zip(sequences, masses)):
        key = membership.get(tuple(seq), ("other", j))
        buckets[key] = buckets.get(key, 0.0) + float(mass)
    return np.array(list(buckets.values()))


# ---------------------------------------------------------------------------
# Output-space baselines
# ---------------------------------------------------------------------------


def score_random(pool_size: int, rng: np.random.Generator) -> list[UncertaintyScore]:
    if pool_size < 1:
        raise ValueError(f"pool_size must be >= 1, got {pool_size}")
    values = rng.random(pool_size)
    return [UncertaintyScore(i, float(v), "random") for i, v in enumerate(values)]


def score_least_confidence(model: QaModel, question: list[int],
                           image: np.ndarray) -> float:
    hyps = qm.beam_decode(model, question, image, 1)
    if not hyps:
        raise RuntimeError("decoder produced no hypothesis")
    return 1.0 - float(np.exp(hyps[0].log_probability))


def score_margin(model: QaModel, question: list[int], image: np.ndarray) -> float:
    hyps = qm.beam_decode(model, question, image, 2)
    if not hyps:
        raise RuntimeError("decoder produced no hypothesis")
    p1 = float(np.exp(hyps[0].log_probability))
    p2 = float(np.exp(hyps[1].log_probability)) if len(hyps) > 1 else 0.0
    return 1.0 + p2 - p1


def score_entropy(model: QaModel, question: list[int], image: np.ndarray,
                  beam_width: int = ENTROPY_BEAM_DEFAULT,
                  normalize: bool = False) -> float:
    """Entropy of the top-b hypothesis probabilities.

    By default the probabilities enter unnormalized even though they sum
    to < 1 (mass outside the beam is dropped); normalize=True rescales
    them to a proper distribution first, for sensitivity checks.
    """
    if beam_width < 2:
        raise ValueError(f"entropy needs beam_width >= 2, got {beam_width}")
    hyps = qm.beam_decode(model, question, image, beam_width)
    probs = np.exp([h.log_probability for h in hyps])
    if normalize:
        probs = probs / probs.sum()
    return entropy_of_masses(probs)


def corrected_entropy(model: QaModel, question: list[int], image: np.ndarray,
                      beam_width: int, table: ParaphraseTable,
                      normalize: bool = False) -> float:
    """score_entropy after pooling beam mass within each paraphrase class.

    Hypotheses are matched to classes by exact token sequence (EOS
    stripped); unmatched hypotheses keep their own singleton bucket.
    Diagnostic only, never an acquisition score: the oracle class table
    is not available for unlabeled pool items.
    """
    hyps = qm.beam_decode(model, question, image, beam_width)
    merged = merge_masses_by_class(
        [strip_eos(h.tokens) for h in hyps],
        [float(np.exp(h.log_probability)) for h in hyps], table)
    if normalize:
        merged = merged / merged.sum()
    return entropy_of_masses(merged)


# ---------------------------------------------------------------------------
# Monte-Carlo dropout family
# ---------------------------------------------------------------------------


def mc_sample(model: QaModel, question: list[int], image: np.ndarray,
              m: int, rng: np.random.Generator) -> McSampleSet:
    """m mc-mode encodings under distinct mask seeds derived from rng."""
    if m < 2:
        raise ValueError(f"mc_sample needs m >= 2, got {m}")
    base = int(rng.integers(np.iinfo(np.int64).max))
    seeds: list[int] = []
    k = 0
    while len(seeds) < m:  # collisions are ~2^-64 events, but stay total
        s = derive_seed(base, k)
        if s not in seeds:
            seeds.append(s)
        k += 1
    samples = McSampleSet(model.encode_mc(question, image, seeds), seeds, False)
    samples.validate()
    return samples


def denoise(samples: McSampleSet, model: QaModel, space: SemanticSpace,
            max_len: int | None = None) -> McSampleSet:
    """Snap each sample onto the space: decode to tokens, re-encode those.

    The result vectors live in the space's dimension and take at most as
    many distinct values as there are distinct decoded sequences, so the
    variance afterwards reflects disagreement in meaning, not raw jitter.
    An empty decode falls back to the EOS-only sequence and is counted.
    """
    samples.validate()
    if samples.denoised:
        raise ValueError("sample set is already denoised")
    if max_len is None:
        max_len = model.config.max_len
    decoded = qm.decode_greedy_batch(model, samples.embeddings, max_len)
    empty = 0
    rows = []
    for seq in decoded:
        tokens = strip_eos(seq)
        if not tokens:
            tokens = [EOS]
            empty += 1
        rows.append(embed_text(space, tokens))
    return McSampleSet(np.stack(rows), list(samples.seeds), True, empty)


def variance_score(samples: McSampleSet, aggregate: str = "sum") -> float:
    """Per-dimension population variance over the m samples, summed.

    aggregate="mean" averages over dimensions instead; with fixed D both
    rank items identically, only the magnitude changes.
    """
    samples.validate()
    if aggregate not in ("sum", "mean"):
        raise ValueError(f"aggregate must be 'sum' or 'mean', got {aggregate!r}")
    # centering on the first sample leaves the variance unchanged but makes
    # identical samples score exactly 0 instead of ~1e-34 rounding residue
    centered = samples.embeddings - samples.embeddings[0]
    per_dim = centered.var(axis=0)
    return float(per_dim.sum() if aggregate == "sum" else per_dim.mean())


def score_bayesian(model: QaModel, space: SemanticSpace | None,
                   question: list[int], image: np.ndarray, m: int,
                   rng: np.random.Generator, use_denoiser: bool,
                   max_len: int | None = None, aggregate: str = "sum") -> float:
    if use_denoiser and space is None:
        raise ValueError("the denoiser requires a semantic space")
    samples = mc_sample(model, question, image, m, rng)
    if use_denoiser:
        samples = denoise(samples, model, space, max_len)
    return variance_score(samples, aggregate)


# ---------------------------------------------------------------------------
# Pool-level dispatch
# ---------------------------------------------------------------------------


def score_item(model: QaModel, space: SemanticSpace | None, question: list[int],
               image: np.ndarray, strategy: str,
               rng: np.random.Generator | None = None,
               m: int = MC_SAMPLES_DEFAULT,
               beam_width: int = ENTROPY_BEAM_DEFAULT) -> float:
    """One item's score under a named strategy (random excluded: it needs
    no model and is handled at pool level)."""
    if strategy == "least_confidence":
        return score_least_confidence(model, question, image)
    if strategy == "margin":
        return score_margin(model, question, image)
    if strategy == "entropy":
        return score_entropy(model, question, image, beam_width)
    if strategy in BAYESIAN_STRATEGIES:
        if rng is None:
            raise ValueError(f"strategy {strategy!r} needs an rng")
        return score_bayesian(model, space, question, image, m, rng,
                              use_denoiser=strategy in DENOISED_STRATEGIES)
    raise ValueError(f"unknown strategy {strategy!r}")


def score_pool(model: QaModel, space: SemanticSpace | None, dataset: Dataset,
               pool_indices: list[int], strategy: str, run_seed: int,
               m: int = MC_SAMPLES_DEFAULT,
               beam_width: int = ENTROPY_BEAM_DEFAULT) -> list[UncertaintyScore]:
    """Score every pool item; item rngs are derived, not shared, so the
    result is a pure function of (models, pool membership, run_seed)."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    out = []
    for idx in pool_indices:
        if strategy == "random":
            value = score_random(1, make_rng(derive_seed(run_seed, "acq", idx)))[0].value
        else:
            item = dataset.items[idx]
            rng = make_rng(derive_seed(run_seed, "mc", idx))
            value = score_item(model, space, item.question_tokens,
                               dataset.scene_features(item.scene_id), strategy,
                               rng=rng, m=m, beam_width=beam_width)
        out.append(UncertaintyScore(idx, value, strategy))
    return out
