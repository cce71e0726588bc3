"""Unit tests for the visual-semantic embedding space."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paraal import autodiff as ad
from paraal import embedspace as es
from paraal import taskgen as tg
from paraal.autodiff import Tensor, make_rng
from paraal.taskgen import EOS


def vec(*xs):
    return Tensor(np.array(xs, dtype=float))


class TestTripletLosses:
    def test_far_negatives_floor_both_hinges_at_zero(self):
        l_img, l_lang = es.triplet_losses(
            vec(0.0, 0.0), vec(1.0, 0.0), vec(50.0, 0.0), vec(0.0, 50.0), margin=0.5)
        assert l_img.item() == 0.0
        assert l_lang.item() == 0.0

    def test_negative_equal_to_positive_gives_margin(self):
        a, p = vec(0.3, -0.2), vec(1.1, 0.4)
        l_img, l_lang = es.triplet_losses(a, p, p, a, margin=0.5)
        np.testing.assert_allclose(l_img.item(), 0.5, atol=1e-9)
        np.testing.assert_allclose(l_lang.item(), 0.5, atol=1e-9)

    def test_two_dimensional_hand_case(self):
        l_img, _ = es.triplet_losses(
            vec(0.0, 0.0), vec(1.0, 0.0), vec(3.0, 0.0), vec(9.0, 9.0), margin=1.0)
        np.testing.assert_allclose(l_img.item(), 0.0, atol=1e-9)
        l_img, _ = es.triplet_losses(
            vec(0.0, 0.0), vec(1.0, 0.0), vec(1.5, 0.0), vec(9.0, 9.0), margin=1.0)
        np.testing.assert_allclose(l_img.item(), 0.5, atol=1e-9)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dimension"):
            es.triplet_losses(vec(0.0, 0.0), vec(1.0), vec(1.0), vec(1.0), margin=0.5)

    @given(st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_hinges_are_never_negative(self, seed):
        rng = make_rng(seed)
        a, p, ni, nc = (Tensor(rng.normal(size=4)) for _ in range(4))
        l_img, l_lang = es.triplet_losses(a, p, ni, nc, margin=0.5)
        assert l_img.item() >= 0.0
        assert l_lang.item() >= 0.0


# independent numpy-only evaluation of the batched loss (single-layer spaces)


def oracle_encode(space, seq):
    layer = space.encoder.layers[0]
    h = np.zeros(space.embed_dim)
    for t in seq:
        h = np.tanh(space.encoder.embed.data[t] @ layer.w_x.data
                    + h @ layer.w_h.data + layer.b.data)
    return h / np.linalg.norm(h)


def oracle_recon(space, h, target):
    dec = space.decoder
    layer = dec.layers[0]
    state, total = h, 0.0
    for x_t, y_t in zip([tg.BOS] + target[:-1], target):
        state = np.tanh(dec.embed.data[x_t] @ layer.w_x.data
                        + state @ layer.w_h.data + layer.b.data)
        logits = state @ dec.w_out.data + dec.b_out.data
        shifted = logits - logits.max()
        total -= shifted[y_t] - np.log(np.exp(shifted).sum())
    return total / len(target)


def oracle_total_loss(space, captions, features, cfg):
    h_c = [oracle_encode(space, c) for c in captions]
    h_i = [f @ space.projector.w.data + space.projector.b.data for f in features]
    h_i = [v / np.linalg.norm(v) for v in h_i]

    def d(a, b):
        return np.sqrt(((a - b) ** 2).sum() + es.DISTANCE_EPS)

    n = len(captions)
    l_img = l_lang = 0.0
    for j in range(n):
        k = (j + 1) % n
        l_img += max(0.0, d(h_c[j], h_i[j]) - d(h_c[j], h_i[k]) + cfg.margin)
        l_lang += max(0.0, d(h_i[j], h_c[j]) - d(h_i[j], h_c[k]) + cfg.margin)
    l_recon = np.mean([oracle_recon(space, h_c[j], captions[j] + [EOS])
                       for j in range(n)])
    return cfg.lambda1 * (l_img / n + l_lang / n) + cfg.lambda2 * l_recon


def fresh_space(cfg, seed=0, vocab=40, feature_dim=8):
    return es.SemanticSpace(vocab, feature_dim, cfg, seed=seed)


class TestVsTotalLoss:
    def test_two_pair_hand_batch_matches_numpy_oracle(self):
        cfg = es.VsConfig(embed_dim=16, token_embed_dim=8, margin=0.4,
                          lambda1=0.7, lambda2=1.3)
        space = fresh_space(cfg, seed=21)
        captions = [[5, 9, 3], [7, 4]]  # distinct lengths on purpose
        features = make_rng(2).normal(size=(2, 8))
        loss = es.vs_total_loss(space, captions, features, cfg)
        np.testing.assert_allclose(
            loss.item(), oracle_total_loss(space, captions, features, cfg), atol=1e-9)

    def test_larger_batch_matches_numpy_oracle(self):
        # batch order is bucket-sorted before negatives are assigned
        cfg = es.VsConfig(embed_dim=16, token_embed_dim=8)
        space = fresh_space(cfg, seed=4)
        rng = make_rng(11)
        captions = [list(rng.integers(3, 40, size=rng.integers(2, 6))) for _ in range(9)]
        features = rng.normal(size=(9, 8))
        order = [i for _, idxs in es._bucket_by_length(captions) for i in idxs]
        loss = es.vs_total_loss(space, captions, features, cfg)
        want = oracle_total_loss(space, [captions[i] for i in order],
                                 features[np.array(order)], cfg)
        np.testing.assert_allclose(loss.item(), want, atol=1e-9)

    def test_lambda1_zero_reduces_to_reconstruction(self):
        cfg = es.VsConfig(embed_dim=16, token_embed_dim=8, lambda1=0.0, lambda2=2.0)
        space = fresh_space(cfg, seed=5)
        captions = [[4, 6], [8, 3]]
        features = make_rng(3).normal(size=(2, 8))
        loss = es.vs_total_loss(space, captions, features, cfg)
        want = 2.0 * np.mean([oracle_recon(space, oracle_encode(space, c), c + [EOS])
                              for c in captions])
        np.testing.assert_allclose(loss.item(), want, atol=1e-9)

    def test_lambda2_zero_with_inactive_hinges_is_exactly_zero(self):
        # place each image embedding exactly on its own caption embedding:
        # d_pos ~ 1e-6 while d_neg is the caption separation, so every hinge
        # sits strictly below zero and relu floors the whole term
        cfg = es.VsConfig(embed_dim=16, token_embed_dim=8, margin=0.01, lambda2=0.0)
        space = fresh_space(cfg, seed=6)
        captions = [[4, 6, 2], [8, 3]]
        features = make_rng(13).normal(size=(2, 8))
        h_c = np.stack([oracle_encode(space, c) for c in captions])
        space.projector.b.data[...] = 0.0
        space.projector.w.data[...] = np.linalg.lstsq(features, h_c, rcond=None)[0]
        separation = np.linalg.norm(h_c[0] - h_c[1])
        assert separation > 10 * cfg.margin  # precondition for inactive hinges
        loss = es.vs_total_loss(space, captions, features, cfg)
        assert loss.item() == 0.0

    def test_single_pair_batch_rejected(self):
        cfg = es.VsConfig(embed_dim=16, token_embed_dim=8)
        space = fresh_space(cfg)
        with pytest.raises(ValueError, match="at least 2"):
            es.vs_total_loss(space, [[4, 5]], np.zeros((1, 8)), cfg)


class TestTraining:
    def small_corpus(self):
        rng = make_rng(17)
        pairs = [(rng.normal(size=8), list(rng.integers(3, 30, size=rng.integers(2, 5))))
                 for _ in range(64)]
        return pairs

    def cfg(self, **kw):
        base = dict(embed_dim=16, token_embed_dim=8, iterations=60, batch_size=16)
        base.update(kw)
        return es.VsConfig(**base)

    def test_stock_defaults(self):
        cfg = es.VsConfig()
        assert cfg.batch_size == 128
        assert cfg.learning_rate == 1e-3
        assert cfg.answer_pair_prob == 0.3
        assert cfg.iterations == 1000

    def test_zero_iterations_returns_untrained_space(self):
        space = es.train_semantic_space(self.small_corpus(), [], 30,
                                        self.cfg(iterations=0), make_rng(1))
        assert space.training_trace == []

    def test_training_is_deterministic(self):
        runs = []
        for _ in range(2):
            space = es.train_semantic_space(self.small_corpus(), [], 30,
                                            self.cfg(), make_rng(5))
            runs.append(space.params_dict())
        for name in runs[0]:
            np.testing.assert_array_equal(runs[0][name], runs[1][name])

    def test_loss_trace_decreases(self):
        space = es.train_semantic_space(self.small_corpus(), [], 30,
                                        self.cfg(iterations=160), make_rng(2))
        trace = space.training_trace
        assert np.mean(trace[:50]) > np.mean(trace[-50:])

    def test_answer_pair_substitution_changes_training(self):
        answers = [(make_rng(50).normal(size=8), [5, 6]) for _ in range(16)]
        with_sub = es.train_semantic_space(
            self.small_corpus(), answers, 30,
            self.cfg(answer_pair_prob=1.0), make_rng(9))
        without = es.train_semantic_space(
            self.small_corpus(), answers, 30,
            self.cfg(answer_pair_prob=0.0), make_rng(9))
        assert any(not np.array_equal(with_sub.params_dict()[n], without.params_dict()[n])
                   for n in with_sub.params_dict())

    def test_non_finite_input_reports_iteration(self):
        bad = [(np.full(8, np.inf), [4, 5]), (np.ones(8), [6, 7])]
        with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError,
                                                          match="iteration 0"):
            es.train_semantic_space(bad, [], 30, self.cfg(), make_rng(0))

    def test_invalid_negative_scheme_rejected(self):
        with pytest.raises(ValueError, match="negative_scheme"):
            es.train_semantic_space(self.small_corpus(), [], 30,
                                    self.cfg(negative_scheme="all_pairs"), make_rng(0))


class TestEmbedText:
    def test_same_input_twice_is_identical(self):
        space = fresh_space(es.VsConfig(embed_dim=16, token_embed_dim=8), seed=3)
        a = es.embed_text(space, [4, 5, 6])
        b = es.embed_text(space, [4, 5, 6])
        np.testing.assert_array_equal(a, b)

    def test_output_dimension(self):
        space = fresh_space(es.VsConfig(embed_dim=16, token_embed_dim=8), seed=3)
        assert es.embed_text(space, [7]).shape == (16,)

    def test_empty_sequence_rejected(self):
        space = fresh_space(es.VsConfig(embed_dim=16, token_embed_dim=8), seed=3)
        with pytest.raises(ValueError, match="empty"):
            es.embed_text(space, [])

    def test_cache_result_is_isolated_from_caller_mutation(self):
        space = fresh_space(es.VsConfig(embed_dim=16, token_embed_dim=8), seed=3)
        a = es.embed_text(space, [4, 5])
        a[:] = 0.0
        assert not np.array_equal(es.embed_text(space, [4, 5]), a)

    def test_graph_and_value_paths_agree_bitwise(self):
        space = fresh_space(es.VsConfig(embed_dim=16, token_embed_dim=8), seed=8)
        seqs = [[3, 9, 2], [7, 7, 1]]
        with ad.ComputeGraph():
            graph_out = space.encoder.encode_batch(seqs).data
        np.testing.assert_array_equal(graph_out, space.encoder.encode_values(seqs))

    def test_checkpoint_round_trip_preserves_embeddings(self, tmp_path):
        cfg = es.VsConfig(embed_dim=16, token_embed_dim=8)
        space = fresh_space(cfg, seed=12)
        ad.save_checkpoint(tmp_path / "vs.ckpt", space.params_dict())
        clone = fresh_space(cfg, seed=999)
        clone.load_params(ad.load_checkpoint(tmp_path / "vs.ckpt"))
        np.testing.assert_array_equal(es.embed_text(space, [4, 5, 6]),
                                      es.embed_text(clone, [4, 5, 6]))


class TestTrainedSpaceGeometry:
    """Statistical oracles on the session-trained space."""

    def _class_embeddings(self, ds, space):
        out = {}
        for cid in ds.table.class_ids():
            forms = ds.table.forms[cid]
            if len(forms) > 1:
                out[cid] = np.stack([es.embed_text(space, list(f)) for f in forms])
        return out

    def test_intra_class_distance_below_inter_class(self, small_dataset, trained_space):
        groups = self._class_embeddings(small_dataset, trained_space)
        intra, inter = [], []
        cids = sorted(groups)
        for cid in cids:
            g = groups[cid]
            for i in range(len(g)):
                for j in range(i + 1, len(g)):
                    intra.append(np.linalg.norm(g[i] - g[j]))
        for a_idx in range(len(cids)):
            for b_idx in range(a_idx + 1, len(cids)):
                for u in groups[cids[a_idx]]:
                    for v in groups[cids[b_idx]]:
                        inter.append(np.linalg.norm(u - v))
        assert np.mean(intra) < np.mean(inter)

    def test_paraphrase_silhouette_is_positive(self, small_dataset, trained_space):
        groups = self._class_embeddings(small_dataset, trained_space)
        cids = sorted(groups)
        scores = []
        for cid in cids:
            g = groups[cid]
            for i, x in enumerate(g):
                same = [np.linalg.norm(x - y) for j, y in enumerate(g) if j != i]
                a = np.mean(same)
                b = min(np.mean([np.linalg.norm(x - y) for y in groups[other]])
                        for other in cids if other != cid)
                scores.append((b - a) / max(a, b))
        assert np.mean(scores) > 0.0

    def test_same_class_forms_are_nearer_in_most_triples(self, small_dataset,
                                                         trained_space):
        groups = self._class_embeddings(small_dataset, trained_space)
        cids = sorted(groups)
        rng = make_rng(31)
        hits, total = 0, 300
        for _ in range(total):
            cid, other = rng.choice(cids, size=2, replace=False)
            g = groups[cid]
            i, j = rng.choice(len(g), size=2, replace=False)
            k = rng.integers(len(groups[other]))
            if (np.linalg.norm(g[i] - g[j])
                    < np.linalg.norm(g[i] - groups[other][k])):
                hits += 1
        assert hits / total >= 0.8
