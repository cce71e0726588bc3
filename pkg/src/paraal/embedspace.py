"""Visual-semantic embedding space: text encoder/decoder plus image projector.

The space is trained so that a caption and its image land near each other
(two hinge losses with in-batch negatives) while the caption stays
decodable from its own embedding (reconstruction cross-entropy). Answer
surface forms pass through the same machinery, which is what pulls
paraphrases of one answer class toward a shared region; the denoising
step downstream depends on exactly that clustering.

The recurrent encoder/decoder classes here are generic over vocabularies
and are reused by the QA model for questions and answers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, derive_seed, make_rng
from .taskgen import BOS, EOS

DISTANCE_EPS = 1e-12  # keeps sqrt differentiable at zero distance


@dataclass
class VsConfig:
    embed_dim: int = 64          # D, shared by text and image embeddings
    token_embed_dim: int = 32
    encoder_layers: int = 1
    margin: float = 0.5          # hinge margin
    lambda1: float = 1.0         # weights the two hinge terms
    lambda2: float = 1.0         # weights reconstruction
    iterations: int = 1000
    batch_size: int = 128
    learning_rate: float = 1e-3
    answer_pair_prob: float = 0.3
    negative_scheme: str = "adjacent"  # "adjacent" or "hardest"; see README

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VsConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown vs config keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self) -> None:
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda1 + self.lambda2 <= 0:
            raise ValueError("lambda1/lambda2 must be non-negative with positive sum")
        if self.encoder_layers < 1:
            raise ValueError("encoder_layers must be >= 1")
        if self.negative_scheme not in ("adjacent", "hardest"):
            raise ValueError(
                f"negative_scheme {self.negative_scheme!r} not implemented; "
                "'adjacent' pairs j against j+1, 'hardest' mines the most "
                "violating in-batch negative")


class _RnnLayer:
    """Single tanh recurrence: h_t = tanh(x_t W_x + h_{t-1} W_h + b)."""

    def __init__(self, prefix: str, in_dim: int, hidden_dim: int,
                 rng: np.random.Generator):
        self.w_x = Tensor(rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, hidden_dim)),
                          requires_grad=True, name=f"{prefix}/w_x")
        self.w_h = Tensor(rng.normal(0, 1 / np.sqrt(hidden_dim), (hidden_dim, hidden_dim)),
                          requires_grad=True, name=f"{prefix}/w_h")
        self.b = Tensor(np.zeros(hidden_dim), requires_grad=True, name=f"{prefix}/b")

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        return ad.tanh(ad.add(ad.add(ad.matmul(x, self.w_x), ad.matmul(h, self.w_h)),
                              self.b))

    def step_values(self, x: np.ndarray, h: np.ndarray) -> np.ndarray:
        # mirrors step() exactly, same operation order, for graph-free eval
        return np.tanh((x @ self.w_x.data + h @ self.w_h.data) + self.b.data)

    def parameters(self) -> list[Tensor]:
        return [self.w_x, self.w_h, self.b]


class TextEncoder:
    """Recurrent encoder over learned token embeddings; final hidden state out."""

    def __init__(self, prefix: str, vocab_size: int, token_dim: int,
                 hidden_dim: int, layers: int, rng: np.random.Generator,
                 normalize: bool = True):
        self.embed = Tensor(rng.normal(0, 0.1, (vocab_size, token_dim)),
                            requires_grad=True, name=f"{prefix}/embed")
        self.layers = [
            _RnnLayer(f"{prefix}/layer{k}", token_dim if k == 0 else hidden_dim,
                      hidden_dim, rng)
            for k in range(layers)
        ]
        self.hidden_dim = hidden_dim
        self.normalize = normalize

    def encode_batch(self, sequences: list[list[int]]) -> Tensor:
        """Graph path; all sequences must share one length."""
        lengths = {len(s) for s in sequences}
        if lengths == {0} or not sequences:
            raise ValueError("cannot encode empty sequences")
        if len(lengths) != 1:
            raise ValueError(f"encode_batch needs uniform lengths, got {sorted(lengths)}")
        batch = len(sequences)
        states = [Tensor(np.zeros((batch, self.hidden_dim))) for _ in self.layers]
        for t in range(len(sequences[0])):
            x = ad.embedding_lookup(self.embed, [s[t] for s in sequences])
            for k, layer in enumerate(self.layers):
                states[k] = layer.step(x, states[k])
                x = states[k]
        # unit-norm output: hinge losses then act on direction, not magnitude
        return ad.normalize_rows(states[-1]) if self.normalize else states[-1]

    def encode_values(self, sequences: list[list[int]]) -> np.ndarray:
        """Graph-free twin of encode_batch; bitwise-identical outputs."""
        lengths = {len(s) for s in sequences}
        if lengths == {0} or not sequences:
            raise ValueError("cannot encode empty sequences")
        if len(lengths) != 1:
            raise ValueError(f"encode_values needs uniform lengths, got {sorted(lengths)}")
        batch = len(sequences)
        states = [np.zeros((batch, self.hidden_dim)) for _ in self.layers]
        for t in range(len(sequences[0])):
            x = self.embed.data[[s[t] for s in sequences]]
            for k, layer in enumerate(self.layers):
                states[k] = layer.step_values(x, states[k])
                x = states[k]
        return ad.normalize_rows_values(states[-1]) if self.normalize else states[-1]

    def parameters(self) -> list[Tensor]:
        out = [self.embed]
        for layer in self.layers:
            out.extend(layer.parameters())
        return out


class TextDecoder:
    """Recurrent decoder from a D-vector; teacher forcing for training,
    stepwise logits for search."""

    def __init__(self, prefix: str, vocab_size: int, token_dim: int,
                 hidden_dim: int, layers: int, rng: np.random.Generator,
                 embed: Tensor | None = None):
        # token table may be shared with an encoder over the same vocab
        self.embed = embed if embed is not None else Tensor(
            rng.normal(0, 0.1, (vocab_size, token_dim)),
            requires_grad=True, name=f"{prefix}/embed")
        self.owns_embed = embed is None
        self.layers = [
            _RnnLayer(f"{prefix}/layer{k}", token_dim if k == 0 else hidden_dim,
                      hidden_dim, rng)
            for k in range(layers)
        ]
        self.w_out = Tensor(rng.normal(0, 1 / np.sqrt(hidden_dim), (hidden_dim, vocab_size)),
                            requires_grad=True, name=f"{prefix}/w_out")
        self.b_out = Tensor(np.zeros(vocab_size), requires_grad=True,
                            name=f"{prefix}/b_out")
        self.hidden_dim = hidden_dim

    def teacher_forcing_loss(self, h: Tensor, targets: list[list[int]]) -> Tensor:
        """Token-mean cross-entropy of decoding targets from h (one length per call)."""
        lengths = {len(t) for t in targets}
        if len(lengths) != 1 or lengths == {0}:
            raise ValueError(f"teacher forcing needs uniform non-zero lengths, got {sorted(lengths)}")
        horizon = len(targets[0])
        inputs = [[BOS] + t[:-1] for t in targets]
        states = [h for _ in self.layers]
        blocks = []
        for t in range(horizon):
            x = ad.embedding_lookup(self.embed, [s[t] for s in inputs])
            for k, layer in enumerate(self.layers):
                states[k] = layer.step(x, states[k])
                x = states[k]
            blocks.append(ad.add(ad.matmul(states[-1], self.w_out), self.b_out))
        logits = ad.concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]
        flat_targets = [targets[b][t] for t in range(horizon) for b in range(len(targets))]
        return ad.cross_entropy(logits, flat_targets, ignore_index=-1)

    def init_state_values(self, h: np.ndarray) -> list[np.ndarray]:
        return [h.copy() for _ in self.layers]

    def step_values(self, states: list[np.ndarray], tokens) -> tuple[list[np.ndarray], np.ndarray]:
        """One decode step on a (B,) token batch; returns (new states, logits (B,V))."""
        x = self.embed.data[np.asarray(tokens, dtype=np.int64)]
        new_states = []
        for k, layer in enumerate(self.layers):
            s = layer.step_values(x, states[k])
            new_states.append(s)
            x = s
        return new_states, x @ self.w_out.data + self.b_out.data

    def parameters(self) -> list[Tensor]:
        out = [self.embed] if self.owns_embed else []
        for layer in self.layers:
            out.extend(layer.parameters())
        out.extend([self.w_out, self.b_out])
        return out


class ImageProjector:
    """Affine map from raw scene features to the shared embedding dimension."""

    def __init__(self, prefix: str, feature_dim: int, embed_dim: int,
                 rng: np.random.Generator):
        self.w = Tensor(rng.normal(0, 1 / np.sqrt(feature_dim), (feature_dim, embed_dim)),
                        requires_grad=True, name=f"{prefix}/w")
        self.b = Tensor(np.zeros(embed_dim), requires_grad=True, name=f"{prefix}/b")

    def project_batch(self, features: np.ndarray) -> Tensor:
        return ad.normalize_rows(ad.add(ad.matmul(Tensor(features), self.w), self.b))

    def project_values(self, features: np.ndarray) -> np.ndarray:
        return ad.normalize_rows_values(features @ self.w.data + self.b.data)

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]


class SemanticSpace:
    def __init__(self, vocab_size: int, feature_dim: int, config: VsConfig, seed: int):
        config.validate()
        rng = make_rng(derive_seed(seed, "vs_init"))
        self.config = config
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.encoder = TextEncoder("vs_enc", vocab_size, config.token_embed_dim,
                                   config.embed_dim, config.encoder_layers, rng)
        self.decoder = TextDecoder("vs_dec", vocab_size, config.token_embed_dim,
                                   config.embed_dim, config.encoder_layers, rng,
                                   embed=self.encoder.embed)
        self.projector = ImageProjector("vs_img", feature_dim, config.embed_dim, rng)
        self.training_trace: list[float] = []
        self._embed_cache: dict[tuple[int, ...], np.ndarray] = {}

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def parameters(self) -> list[Tensor]:
        return (self.encoder.parameters() + self.decoder.parameters()
                + self.projector.parameters())

    def params_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in params:
                raise ValueError(f"checkpoint missing parameter {p.name!r}")
            if params[p.name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {p.name!r}")
            p.data[...] = params[p.name]
        self._embed_cache.clear()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _distance(a: Tensor, b: Tensor) -> Tensor:
    return ad.sqrt(ad.add(ad.euclidean_sq_distance(a, b), Tensor(DISTANCE_EPS)))


def triplet_losses(anchor_caption: Tensor, pos_image: Tensor, neg_image: Tensor,
                   neg_caption: Tensor, margin: float) -> tuple[Tensor, Tensor]:
    """Two hinge losses pushing the matched pair together and mismatches apart.

    L_image = max(0, d(h_c, h_i+) - d(h_c, h_i-) + margin)
    L_lang  = max(0, d(h_i+, h_c) - d(h_i+, h_c-) + margin)
    with d the Euclidean distance.
    """
    shapes = {anchor_caption.shape, pos_image.shape, neg_image.shape, neg_caption.shape}
    if len(shapes) != 1:
        raise ValueError(f"triplet vectors must share one dimension, got {shapes}")
    d_pos = _distance(anchor_caption, pos_image)
    m = Tensor(margin)
    l_image = ad.relu(ad.add(ad.sub(d_pos, _distance(anchor_caption, neg_image)), m))
    l_lang = ad.relu(ad.add(ad.sub(d_pos, _distance(pos_image, neg_caption)), m))
    return l_image, l_lang


def _rowwise_distance(a: Tensor, b: Tensor) -> Tensor:
    """(B, D) x (B, D) -> (B,) Euclidean distances."""
    diff = ad.sub(a, b)
    sq = ad.multiply(diff, diff)
    row_sums = ad.matmul(sq, Tensor(np.ones(sq.shape[1])))
    return ad.sqrt(ad.add(row_sums, Tensor(np.full(sq.shape[0], DISTANCE_EPS))))


def _bucket_by_length(sequences: list[list[int]]) -> list[tuple[int, list[int]]]:
    buckets: dict[int, list[int]] = {}
    for i, seq in enumerate(sequences):
        buckets.setdefault(len(seq), []).append(i)
    return sorted(buckets.items())


def _hardest_negative_indices(hc: np.ndarray, hi: np.ndarray,
                              captions: list[list[int]],
                              features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Most-violating in-batch negative per anchor, mined on values only.

    Candidate l is excluded for anchor j when it is the same pairing in
    disguise: identical feature rows (same scene) or identical caption
    sequences, either of which would make the "negative" a correct match.
    An anchor with every candidate excluded falls back to its adjacent
    neighbor. Returns (caption negatives per image, image negatives per
    caption); the chosen indices are constants to the gradient.
    """
    b = hc.shape[0]
    d = np.sqrt(((hc[:, None, :] - hi[None, :, :]) ** 2).sum(-1))
    same_feat = (features[:, None, :] == features[None, :, :]).all(-1)
    key = [tuple(c) for c in captions]
    same_cap = np.array([[kj == kl for kl in key] for kj in key])
    blocked = same_feat | same_cap  # symmetric by construction

    def pick(dist):
        masked = np.where(blocked, np.inf, dist)
        idx = masked.argmin(axis=1)
        dead = ~np.isfinite(masked.min(axis=1))
        idx[dead] = (np.arange(b)[dead] + 1) % b
        return idx

    return pick(d.T), pick(d)


def vs_total_loss(space: SemanticSpace, captions: list[list[int]],
                  features: np.ndarray, weights: VsConfig) -> Tensor:
    """Weighted hinge + reconstruction loss over one batch with in-batch negatives.

    Captions are bucketed by length (the recurrence is batched per bucket).
    Under the "adjacent" scheme pair j's negative is pair j+1 cyclically,
    in bucket-sorted order; the batch order was random to begin with, so
    the neighbor is an arbitrary distinct pair. Under "hardest" each anchor
    takes its most violating in-batch candidate instead, which keeps the
    hinges active long after arbitrary negatives have gone quiet.
    """
    if len(captions) < 2:
        raise ValueError(f"need at least 2 pairs for in-batch negatives, got {len(captions)}")
    if len(captions) != len(features):
        raise ValueError("captions and features must align")

    h_parts, recon_terms, order = [], [], []
    for length, idxs in _bucket_by_length(captions):
        bucket_caps = [captions[i] for i in idxs]
        h = space.encoder.encode_batch(bucket_caps)
        h_parts.append(h)
        order.extend(idxs)
        recon = space.decoder.teacher_forcing_loss(h, [c + [EOS] for c in bucket_caps])
        recon_terms.append(ad.scale(recon, len(idxs) / len(captions)))

    h_c = ad.concat(h_parts, axis=0) if len(h_parts) > 1 else h_parts[0]
    ordered_feats = features[np.array(order)]
    h_i = space.projector.project_batch(ordered_feats)

    d_pos = _rowwise_distance(h_c, h_i)
    if weights.negative_scheme == "hardest":
        neg_c, neg_i = _hardest_negative_indices(
            h_c.data, h_i.data, [captions[i] for i in order], ordered_feats)
        d_img_neg = _rowwise_distance(h_c, ad.embedding_lookup(h_i, neg_i))
        d_lang_neg = _rowwise_distance(h_i, ad.embedding_lookup(h_c, neg_c))
    else:
        d_img_neg = _rowwise_distance(h_c, ad.roll_rows(h_i, -1))
        d_lang_neg = _rowwise_distance(h_i, ad.roll_rows(h_c, -1))
    m = Tensor(np.full(len(captions), weights.margin))
    l_image = ad.reduce_mean(ad.relu(ad.add(ad.sub(d_pos, d_img_neg), m)))
    l_lang = ad.reduce_mean(ad.relu(ad.add(ad.sub(d_pos, d_lang_neg), m)))

    l_recon = recon_terms[0]
    for term in recon_terms[1:]:
        l_recon = ad.add(l_recon, term)

    return ad.add(ad.scale(ad.add(l_image, l_lang), weights.lambda1),
                  ad.scale(l_recon, weights.lambda2))


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------


def _contrast_batch_order(groups: list[tuple], batch_size: int,
                          rng: np.random.Generator) -> list[int]:
    """Indices for one answer batch with in-batch negatives made informative.

    groups[i] = (batch_key, contrast_key). One batch_key (question type) is
    drawn per batch, so the rolled neighbor answers the same kind of question;
    contrast_keys (answer classes) are round-robined so neighbors almost
    always belong to different classes. Random batches rarely achieve either,
    and hinges against easy negatives go quiet long before paraphrase forms
    have been pulled together.
    """
    by_batch: dict = {}
    for i, (bkey, ckey) in enumerate(groups):
        by_batch.setdefault(bkey, {}).setdefault(ckey, []).append(i)
    eligible = [k for k, v in by_batch.items() if len(v) >= 2]
    if not eligible:
        return []
    weights = np.array([sum(len(ix) for ix in by_batch[k].values()) for k in eligible],
                       dtype=float)
    bkey = eligible[rng.choice(len(eligible), p=weights / weights.sum())]
    classes = list(by_batch[bkey])
    rng.shuffle(classes)
    pools = {c: list(rng.permutation(by_batch[bkey][c])) for c in classes}
    out: list[int] = []
    while len(out) < batch_size:
        progressed = False
        for c in classes:
            if pools[c] and len(out) < batch_size:
                out.append(int(pools[c].pop()))
                progressed = True
        if not progressed:
            break
    return out


def train_semantic_space(pairs: list[tuple[np.ndarray, list[int]]],
                         qa_answer_pairs: list[tuple[np.ndarray, list[int]]],
                         vocab_size: int, config: VsConfig,
                         rng: np.random.Generator,
                         answer_groups: list[tuple] | None = None) -> SemanticSpace:
    """Minibatch Adam on vs_total_loss; answer pairs substitute 10% of batches.

    answer_groups, when given, must parallel qa_answer_pairs with
    (batch_key, contrast_key) tuples; answer batches are then composed by
    _contrast_batch_order instead of uniform sampling.
    """
    if not pairs:
        raise ValueError("caption/image pairs must be non-empty")
    if answer_groups is not None and len(answer_groups) != len(qa_answer_pairs):
        raise ValueError("answer_groups must align with qa_answer_pairs")
    config.validate()
    feature_dim = len(pairs[0][0])
    space = SemanticSpace(vocab_size, feature_dim, config,
                          seed=int(rng.integers(0, 2**63)))
    if config.iterations == 0:
        return space
    opt = ad.Adam(space.parameters(), lr=config.learning_rate)
    for it in range(config.iterations):
        source = pairs
        picked = None
        if qa_answer_pairs and rng.random() < config.answer_pair_prob:
            source = qa_answer_pairs
            if answer_groups is not None:
                order = _contrast_batch_order(answer_groups, config.batch_size, rng)
                if len(order) >= 2:
                    picked = np.array(order)
        if picked is None:
            size = min(config.batch_size, len(source))
            picked = rng.choice(len(source), size=size, replace=False)
        feats = np.stack([source[i][0] for i in picked])
        caps = [source[i][1] for i in picked]
        try:
            with ad.ComputeGraph() as g:
                loss = vs_total_loss(space, caps, feats, config)
                ad.backward(g, loss)
            opt.step()
        except FloatingPointError as e:
            raise FloatingPointError(f"semantic-space training diverged at "
                                     f"iteration {it}: {e}") from e
        space.training_trace.append(loss.item())
    space._embed_cache.clear()
    return space


def embed_text(space: SemanticSpace, tokens: list[int]) -> np.ndarray:
    """Deterministic D-vector for a token sequence (no dropout anywhere here)."""
    if len(tokens) == 0:
        raise ValueError("cannot embed an empty token sequence")
    key = tuple(tokens)
    cached = space._embed_cache.get(key)
    if cached is None:
        cached = space.encoder.encode_values([list(tokens)])[0]
        space._embed_cache[key] = cached
    return cached.copy()


def embed_image(space: SemanticSpace, features: np.ndarray) -> np.ndarray:
    return space.projector.project_values(features)
