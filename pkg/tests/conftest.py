"""Session-scoped fixtures: one small dataset and one trained semantic space,
shared across test modules to keep the suite fast."""

import pytest

from paraal import embedspace as es
from paraal import taskgen as tg
from paraal.autodiff import make_rng


@pytest.fixture(scope="session")
def small_dataset():
    cfg = tg.TaskConfig(n_scenes=300, questions_per_scene=4,
                        paraphrase_fraction=1.0, test_fraction=0.2)
    return tg.generate_dataset(cfg, make_rng(1234))


@pytest.fixture(scope="session")
def trained_space(small_dataset):
    ds = small_dataset
    n_slots = sum(len(s.objects) for s in ds.scenes)
    pairs, groups = tg.caption_pairs(ds.scenes, make_rng(7), n_slots,
                                     ds.table, ds.vocab, return_groups=True)
    plain = [p for p, g in zip(pairs, groups) if g is None]
    contrast = [(ds.scene_features(it.scene_id), it.answer_tokens)
                for it in ds.train_items]
    contrast_groups = [(it.question_type, it.canonical_class)
                       for it in ds.train_items]
    contrast += [p for p, g in zip(pairs, groups) if g is not None]
    contrast_groups += [g for g in groups if g is not None]
    cfg = es.VsConfig(embed_dim=32, token_embed_dim=24, iterations=1200,
                      batch_size=64, answer_pair_prob=0.35, learning_rate=2e-3)
    return es.train_semantic_space(plain, contrast, len(ds.vocab), cfg,
                                   make_rng(99), answer_groups=contrast_groups)
