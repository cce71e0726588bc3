"""Question-image answer generator with a dropout site on the fused vector.

Architecture: recurrent question encoder, concat with the raw image
features, one affine+tanh fusion producing the hidden representation h,
dropout on h, and a recurrent answer decoder conditioned on h. The
uncertainty machinery treats h as the representation whose Monte-Carlo
variance is measured, so everything downstream cares about two contracts:

* eval-mode encode is deterministic and dropout-free;
* mc-mode encode with a seed is deterministic given (input, seed), and
  with the default "fusion" site the sampled mask is the only difference
  from eval mode.

All decoding here returns token sequences that include the terminal EOS
when one was emitted; sequences cut off at max_len have none. Use
strip_eos before comparing against answer surface forms.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, derive_seed, make_rng
from .embedspace import SemanticSpace, TextDecoder, TextEncoder, embed_text
from .taskgen import BOS, EOS


@dataclass
class QaConfig:
    hidden_dim: int = 64            # D, must match the semantic space
    question_hidden_dim: int = 64
    token_embed_dim: int = 32
    keep_probability: float = 0.5
    iterations: int = 1500
    batch_size: int = 128
    learning_rate: float = 4e-3
    max_len: int = 6
    embed_enabled: bool = False     # adds the embedding-distance loss term
    dropout_sites: str = "fusion"   # "fusion" or "all" (adds the question vector)
    embed_distance: str = "per_dim"  # "per_dim" or "sum" scaling of the distance term

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QaConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown qa config keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self) -> None:
        if not 0.0 < self.keep_probability <= 1.0:
            raise ValueError(f"keep_probability must be in (0, 1], got {self.keep_probability}")
        if self.dropout_sites not in ("fusion", "all"):
            raise ValueError(f"dropout_sites must be 'fusion' or 'all', got {self.dropout_sites!r}")
        if self.embed_distance not in ("sum", "per_dim"):
            raise ValueError(f"embed_distance must be 'sum' or 'per_dim', got {self.embed_distance!r}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass
class BeamHypothesis:
    tokens: list[int]
    log_probability: float


@dataclass
class VqaLossParts:
    recon: Tensor
    embed: Tensor | None
    total: Tensor
    embed_enabled: bool


def strip_eos(tokens: list[int]) -> list[int]:
    return tokens[:-1] if tokens and tokens[-1] == EOS else list(tokens)


class QaModel:
    def __init__(self, vocab_size: int, feature_dim: int, config: QaConfig, seed: int):
        config.validate()
        rng = make_rng(derive_seed(seed, "qa_init"))
        self.config = config
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.question_encoder = TextEncoder(
            "qa_q", vocab_size, config.token_embed_dim,
            config.question_hidden_dim, 1, rng, normalize=False)
        fuse_in = config.question_hidden_dim + feature_dim
        self.w_fuse = Tensor(rng.normal(0, 1 / np.sqrt(fuse_in),
                                        (fuse_in, config.hidden_dim)),
                             requires_grad=True, name="qa_fuse/w")
        self.b_fuse = Tensor(np.zeros(config.hidden_dim), requires_grad=True,
                             name="qa_fuse/b")
        self.answer_decoder = TextDecoder(
            "qa_dec", vocab_size, config.token_embed_dim, config.hidden_dim,
            1, rng, embed=self.question_encoder.embed)
        self.training_trace: list[float] = []

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    def parameters(self) -> list[Tensor]:
        return (self.question_encoder.parameters() + [self.w_fuse, self.b_fuse]
                + self.answer_decoder.parameters())

    def params_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in params:
                raise ValueError(f"checkpoint missing parameter {p.name!r}")
            if params[p.name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {p.name!r}")
            p.data[...] = params[p.name]

    def _check_tokens(self, tokens) -> None:
        if len(tokens) == 0:
            raise ValueError("question must be non-empty")
        bad = [t for t in tokens if not 0 <= t < self.vocab_size]
        if bad:
            raise ValueError(f"unknown tokens {bad} (vocab size {self.vocab_size})")

    # -- eval / mc forward (graph-free) ------------------------------------

    def _fuse_values(self, q_vec: np.ndarray, image: np.ndarray) -> np.ndarray:
        pre = np.concatenate([q_vec, image]) @ self.w_fuse.data + self.b_fuse.data
        return np.tanh(pre)

    def encode(self, question: list[int], image: np.ndarray,
               mc_seed: int | None = None) -> np.ndarray:
        """h for one (question, image); mc_seed=None is eval mode."""
        self._check_tokens(question)
        q_vec = self.question_encoder.encode_values([list(question)])[0]
        if mc_seed is not None and self.config.dropout_sites == "all":
            q_mask = ad.make_dropout_mask(derive_seed(mc_seed, "question_mask"),
                                          q_vec.shape, self.config.keep_probability)
            q_vec = q_vec * q_mask.mask
        h = self._fuse_values(q_vec, image)
        if mc_seed is not None:
            mask = ad.make_dropout_mask(derive_seed(mc_seed, "fusion_mask"),
                                        h.shape, self.config.keep_probability)
            h = h * mask.mask
        return h

    def encode_mc(self, question: list[int], image: np.ndarray,
                  seeds: list[int]) -> np.ndarray:
        """(m, D) matrix of mc-mode encodings, one row per seed.

        With the default fusion-only site the pre-dropout vector is shared
        across rows, so it is computed once; rows equal encode() per seed.
        """
        if self.config.dropout_sites != "fusion":
            return np.stack([self.encode(question, image, mc_seed=s) for s in seeds])
        self._check_tokens(question)
        q_vec = self.question_encoder.encode_values([list(question)])[0]
        h = self._fuse_values(q_vec, image)
        masks = np.stack([
            ad.make_dropout_mask(derive_seed(s, "fusion_mask"), h.shape,
                                 self.config.keep_probability).mask
            for s in seeds])
        return h * masks

    def encode_eval_batch(self, questions: list[list[int]],
                          features: np.ndarray) -> np.ndarray:
        """(n, D) eval-mode rows; questions are grouped by length internally."""
        if len(questions) != features.shape[0]:
            raise ValueError("one feature row per question required")
        for q in questions:
            self._check_tokens(q)
        out = np.empty((len(questions), self.hidden_dim))
        groups: dict[int, list[int]] = {}
        for i, q in enumerate(questions):
            groups.setdefault(len(q), []).append(i)
        for _, idxs in sorted(groups.items()):
            q_mat = self.question_encoder.encode_values(
                [list(questions[i]) for i in idxs])
            fused = np.concatenate([q_mat, features[idxs]], axis=1)
            out[idxs] = np.tanh(fused @ self.w_fuse.data + self.b_fuse.data)
        return out

    # -- training forward (graph) ------------------------------------------

    def encode_batch_graph(self, questions: list[list[int]], features: np.ndarray,
                           rng: np.random.Generator | None,
                           training: bool) -> tuple[Tensor, Tensor]:
        """Graph-path (dropped h, clean h) for a uniform-question-length batch.

        The clean pre-dropout representation backs the embedding-distance
        term; measuring that distance on dropped rows would penalize the
        dropout noise itself and shrink h toward zero."""
        q = self.question_encoder.encode_batch(questions)
        if training and self.config.dropout_sites == "all":
            q, _ = ad.dropout_forward(q, self.config.keep_probability, rng, training)
        fused = ad.concat([q, Tensor(features)], axis=1)
        pre = ad.tanh(ad.add(ad.matmul(fused, self.w_fuse), self.b_fuse))
        h, _ = ad.dropout_forward(pre, self.config.keep_probability, rng, training)
        return h, pre


# ---------------------------------------------------------------------------
# Loss and training
# ---------------------------------------------------------------------------


def _bucket_triples(triples):
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, (q, _, a) in enumerate(triples):
        buckets.setdefault((len(q), len(a)), []).append(i)
    return sorted(buckets.items())


def vqa_loss(model: QaModel, space: SemanticSpace | None,
             triples: list[tuple[list[int], np.ndarray, list[int]]],
             embed_enabled: bool, rng: np.random.Generator | None = None,
             training: bool = False) -> VqaLossParts:
    """Reconstruction loss plus (optionally) the embedding-distance loss.

    triples: (question tokens, image features, answer tokens). The semantic
    space is a frozen target: answer embeddings enter as constants, so
    gradients reach the model only.
    """
    if not triples:
        raise ValueError("vqa_loss needs a non-empty batch")
    if embed_enabled:
        if space is None:
            raise ValueError("embed_enabled requires a semantic space")
        if space.embed_dim != model.hidden_dim:
            raise ValueError(
                f"space dimension {space.embed_dim} != model hidden {model.hidden_dim}")

    n = len(triples)
    recon_total: Tensor | None = None
    embed_total: Tensor | None = None
    for (_, _), idxs in _bucket_triples(triples):
        qs = [triples[i][0] for i in idxs]
        feats = np.stack([triples[i][1] for i in idxs])
        answers = [triples[i][2] for i in idxs]
        h, h_clean = model.encode_batch_graph(qs, feats, rng, training)
        recon = model.answer_decoder.teacher_forcing_loss(
            h, [a + [EOS] for a in answers])
        recon = ad.scale(recon, len(idxs) / n)
        recon_total = recon if recon_total is None else ad.add(recon_total, recon)
        if embed_enabled:
            targets = Tensor(np.stack([embed_text(space, a) for a in answers]))
            diff = ad.sub(h_clean, targets)
            sq = ad.multiply(diff, diff)
            per_item = ad.matmul(sq, Tensor(np.ones(sq.shape[1])))
            if model.config.embed_distance == "per_dim":
                per_item = ad.scale(per_item, 1.0 / model.hidden_dim)
            term = ad.scale(ad.reduce_mean(per_item), len(idxs) / n)
            embed_total = term if embed_total is None else ad.add(embed_total, term)

    if embed_enabled:
        return VqaLossParts(recon_total, embed_total,
                            ad.add(recon_total, embed_total), True)
    return VqaLossParts(recon_total, None, recon_total, False)


def train_qa(model: QaModel, space: SemanticSpace | None,
             triples: list[tuple[list[int], np.ndarray, list[int]]],
             config: QaConfig, rng: np.random.Generator) -> QaModel:
    """Minibatch Adam on vqa_loss with train-time dropout; trains in place."""
    if not triples:
        raise ValueError("training set must be non-empty")
    config.validate()
    if config.iterations == 0:
        return model
    opt = ad.Adam(model.parameters(), lr=config.learning_rate)
    for it in range(config.iterations):
        size = min(config.batch_size, len(triples))
        picked = rng.choice(len(triples), size=size, replace=False)
        batch = [triples[i] for i in picked]
        try:
            with ad.ComputeGraph() as g:
                parts = vqa_loss(model, space, batch, config.embed_enabled,
                                 rng=rng, training=True)
                ad.backward(g, parts.total)
            opt.step()
        except FloatingPointError as e:
            raise FloatingPointError(
                f"qa training diverged at iteration {it}: {e}") from e
        model.training_trace.append(parts.total.item())
    return model


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def decode_greedy(model: QaModel, h: np.ndarray, max_len: int) -> list[int]:
    """Stepwise-argmax decode from a given h; EOS kept when emitted."""
    return decode_greedy_batch(model, h[None, :], max_len)[0]


def decode_greedy_batch(model: QaModel, h_rows: np.ndarray, max_len: int) -> list[list[int]]:
    """Row-parallel greedy decode from (m, D) representations."""
    if h_rows.ndim != 2 or h_rows.shape[1] != model.hidden_dim:
        raise ValueError(f"expected (m, {model.hidden_dim}) representations, "
                         f"got {h_rows.shape}")
    dec = model.answer_decoder
    m = h_rows.shape[0]
    states = dec.init_state_values(h_rows)
    tokens = np.full(m, BOS, dtype=np.int64)
    done = np.zeros(m, dtype=bool)
    out: list[list[int]] = [[] for _ in range(m)]
    for _ in range(max_len):
        states, logits = dec.step_values(states, tokens)
        tokens = logits.argmax(axis=1)
        for i in range(m):
            if not done[i]:
                out[i].append(int(tokens[i]))
                if tokens[i] == EOS:
                    done[i] = True
        if done.all():
            break
    return out


def beam_decode(model: QaModel, question: list[int], image: np.ndarray,
                beam_width: int, max_len: int | None = None) -> list[BeamHypothesis]:
    """Length-capped beam search from eval-mode h.

    Each step expands every live hypothesis by one token, keeps the
    beam_width best extensions overall, and retires the kept ones that hit
    EOS or the cap. The retired pool is a subset of a partition of
    sequence space, so returned probabilities sum to at most 1. With
    beam_width=1 the kept extension is always the stepwise argmax, which
    makes it exactly greedy decoding.
    """
    if beam_width < 1:
        raise ValueError(f"beam_width must be >= 1, got {beam_width}")
    if max_len is None:
        max_len = model.config.max_len
    h = model.encode(question, image)
    dec = model.answer_decoder

    # live: (tokens, logp, per-layer state rows)
    live = [([], 0.0, dec.init_state_values(h[None, :]))]
    pool: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        prev = np.array([t[-1] if t else BOS for t, _, _ in live], dtype=np.int64)
        stacked = [np.concatenate([states[k] for _, _, states in live], axis=0)
                   for k in range(len(live[0][2]))]
        new_states, logits = dec.step_values(stacked, prev)
        logps = ad.log_softmax_values(logits)
        candidates = []
        for i, (tokens, logp, _) in enumerate(live):
            for v in range(logits.shape[1]):
                candidates.append((logp + logps[i, v], tokens + [v], i))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for logp, tokens, src in candidates[:beam_width]:
            if tokens[-1] == EOS or len(tokens) == max_len:
                pool.append((tokens, logp))
            else:
                live.append((tokens, logp,
                             [layer[src:src + 1] for layer in new_states]))
        if not live:
            break
    pool.sort(key=lambda c: (-c[1], c[0]))
    return [BeamHypothesis(tokens, logp) for tokens, logp in pool[:beam_width]]
