"""Synthetic grounded-QA generator with controllable paraphrase structure.

The world: scenes of 1..4 objects, each a (shape, color, size, material)
bundle. Shapes within a scene are pairwise distinct, so "the <shape>" is
always an unambiguous reference and every templated question is answerable
by construction. A scene's "image" is a fixed random projection of its
per-slot attribute one-hots plus seeded Gaussian noise.

Answers are organized into canonical classes (colors, materials, positions,
owners, feels, counts, yes/no). A paraphrase table assigns each class one
or more surface forms; a configurable fraction of classes get multiple
forms, the rest stay single-form. The ground-truth set of correct answers
for any question is exactly its class's form list, which is what makes
multiple-correct-answer evaluation and the corrected entropy diagnostic
possible downstream.

Two independent RNG streams matter here: the "structure" stream drives
scenes, questions, and splits; the "surface" stream only picks which
surface form each item's answer uses. Datasets that differ only in
paraphrase_fraction therefore share identical scenes, questions, and
splits, which is what paired control experiments rely on.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import derive_seed, make_rng

PAD, BOS, EOS = 0, 1, 2

SHAPES = ["cube", "ball", "pyramid", "cylinder"]
COLORS = ["red", "blue", "green", "yellow", "purple", "gray"]
SIZES = ["small", "large"]
MATERIALS = ["metal", "rubber", "wood", "glass"]
OWNERS = ["anna", "ben", "carla", "dan"]
FEELS = ["smooth", "soft", "rough", "fragile"]  # indexed by material
COUNT_WORDS = ["zero", "one", "two", "three", "four"]

QUESTION_TYPES = ["what", "where", "who", "how", "how_many", "exist"]

QUESTION_WORDS = [
    "what", "color", "is", "the", "material", "where", "who", "owns",
    "how", "does", "feel", "many", "things", "are", "there", "a",
]


@dataclass(frozen=True)
class AnswerClass:
    class_id: int
    name: str
    question_type: str
    form_pool: tuple[tuple[str, ...], ...]  # candidate surface forms, canonical first
    is_binary_yes: bool = False


def _forms(*phrases: str) -> tuple[tuple[str, ...], ...]:
    return tuple(tuple(p.split()) for p in phrases)


def default_answer_inventory() -> list[AnswerClass]:
    """The full answer-class inventory for the default world (29 classes)."""
    classes: list[AnswerClass] = []

    def register(name, qtype, pool, is_yes=False):
        classes.append(AnswerClass(len(classes), name, qtype, pool, is_yes))

    # synonyms are drop-in replacements: single tokens, or for positions a
    # fixed-length phrase whose varying word is shared across classes, so a
    # form carries no class signal beyond the word it replaces
    color_pools = {
        "red": _forms("red", "crimson", "scarlet", "ruby", "cherry", "reddish"),
        "blue": _forms("blue", "azure", "navy", "cobalt", "sapphire", "bluish"),
        "green": _forms("green", "emerald", "jade", "lime", "verdant", "greenish"),
        "yellow": _forms("yellow", "amber", "gold", "lemon", "saffron", "yellowish"),
        "purple": _forms("purple", "violet", "lilac", "plum", "mauve", "purplish"),
        "gray": _forms("gray", "grey", "silver", "ash", "slate", "grayish"),
    }
    for c in COLORS:
        register(c, "what", color_pools[c])
    material_pools = {
        "metal": _forms("metal", "metallic", "steel", "iron", "chrome", "brass"),
        "rubber": _forms("rubber", "rubbery", "latex", "elastic", "springy", "bouncy"),
        "wood": _forms("wood", "wooden", "timber", "oak", "pine", "birch"),
        "glass": _forms("glass", "glassy", "crystal", "quartz", "crystalline", "clear"),
    }
    for m in MATERIALS:
        register(m, "what", material_pools[m])
    register("position_left", "where", _forms(
        "on the left", "at the left", "by the left", "near the left",
        "beside the left", "toward the left"))
    register("position_middle", "where", _forms(
        "in the middle", "at the middle", "by the middle", "near the middle",
        "inside the middle", "toward the middle"))
    register("position_right", "where", _forms(
        "on the right", "at the right", "by the right", "near the right",
        "beside the right", "toward the right"))
    register("position_back", "where", _forms(
        "in the back", "at the back", "by the back", "near the back",
        "inside the back", "toward the back"))
    owner_pools = {
        "anna": _forms("anna", "ann", "annie", "anya", "annika", "nan"),
        "ben": _forms("ben", "benny", "benjamin", "benji", "bennett", "benton"),
        "carla": _forms("carla", "carly", "karla", "carlita", "carlotta", "carina"),
        "dan": _forms("dan", "danny", "daniel", "dani", "danno", "danton"),
    }
    for o in OWNERS:
        register(o, "who", owner_pools[o])
    feel_pools = {
        "smooth": _forms("smooth", "silky", "sleek", "polished", "satiny", "glossy"),
        "soft": _forms("soft", "plush", "cushy", "spongy", "tender", "supple"),
        "rough": _forms("rough", "coarse", "gritty", "jagged", "bumpy", "rugged"),
        "fragile": _forms("fragile", "brittle", "delicate", "flimsy", "frail", "breakable"),
    }
    for f in FEELS:
        register(f, "how", feel_pools[f])
    count_pools = {
        "zero": _forms("zero", "none", "nil", "nought", "naught", "zilch"),
        "one": _forms("one", "single", "lone", "solo", "sole", "unity"),
        "two": _forms("two", "pair", "couple", "twin", "dual", "deuce"),
        "three": _forms("three", "trio", "triple", "triad", "thrice", "treble"),
        "four": _forms("four", "quartet", "quad", "tetrad", "fourfold", "quadruple"),
    }
    for w in COUNT_WORDS:
        register(w, "how_many", count_pools[w])
    register("yes", "exist", _forms(
        "yes", "yeah", "yep", "sure", "indeed", "certainly", "aye"),
        is_yes=True)
    register("no", "exist", _forms(
        "no", "nope", "nah", "never", "negative", "naw"))
    return classes


class Vocab:
    """Token string <-> index bijection with fixed PAD/BOS/EOS slots."""

    def __init__(self, tokens: list[str]):
        self.index_to_token = list(tokens)
        self.token_to_index = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_index) != len(self.index_to_token):
            raise ValueError("vocab contains duplicate tokens")
        for i, t in enumerate(["<pad>", "<bos>", "<eos>"]):
            if self.index_to_token[i] != t:
                raise ValueError(f"reserved slot {i} must be {t!r}")

    def __len__(self) -> int:
        return len(self.index_to_token)

    def encode(self, words) -> list[int]:
        return [self.token_to_index[w] for w in words]

    def decode(self, indices) -> list[str]:
        return [self.index_to_token[i] for i in indices]


def build_vocab(classes: list[AnswerClass] | None = None) -> Vocab:
    """Deterministic vocab over templates, attributes, and every pool word.

    Includes all pool words regardless of paraphrase_fraction, so the vocab
    (and hence model shapes) is identical across fraction sweeps.
    """
    if classes is None:
        classes = default_answer_inventory()
    tokens = ["<pad>", "<bos>", "<eos>"]
    seen = set(tokens)

    def put(word):
        if word not in seen:
            seen.add(word)
            tokens.append(word)

    for w in QUESTION_WORDS:
        put(w)
    for w in SHAPES + COLORS + SIZES + MATERIALS:
        put(w)
    for cls in classes:
        for form in cls.form_pool:
            for w in form:
                put(w)
    return Vocab(tokens)


class ParaphraseTable:
    """class_id -> list of surface forms (token-index tuples), canonical first."""

    def __init__(self, forms: dict[int, list[tuple[int, ...]]],
                 question_type: dict[int, str], names: dict[int, str]):
        self.forms = forms
        self.question_type = question_type
        self.names = names
        self._validate()

    def _validate(self) -> None:
        owner: dict[tuple[int, ...], int] = {}
        for cid, form_list in self.forms.items():
            if not form_list:
                raise ValueError(f"class {cid} has no surface forms")
            if len(set(form_list)) != len(form_list):
                raise ValueError(f"class {cid} has duplicate surface forms")
            for form in form_list:
                if form in owner:
                    raise ValueError(f"form {form} in classes {owner[form]} and {cid}")
                owner[form] = cid

    def class_ids(self) -> list[int]:
        return sorted(self.forms)

    def form_count(self) -> int:
        return sum(len(v) for v in self.forms.values())


def build_paraphrase_table(config: "TaskConfig", rng: np.random.Generator,
                           classes: list[AnswerClass] | None = None,
                           vocab: Vocab | None = None) -> ParaphraseTable:
    """Select surface forms per class given the paraphrase fraction.

    Exactly round(fraction * n_classes) classes become multi-form. The
    selection order is a single rng permutation drawn before the fraction
    is applied, so for a fixed seed the selected sets are nested across
    fractions (mean answer-set size is monotone in the fraction by
    construction). The binary yes-class gets 7 forms when selected; every
    other selected class gets forms_per_class.
    """
    if not 0.0 <= config.paraphrase_fraction <= 1.0:
        raise ValueError(
            f"paraphrase_fraction must be in [0, 1], got {config.paraphrase_fraction}")
    if config.forms_per_class < 2:
        raise ValueError(f"forms_per_class must be >= 2, got {config.forms_per_class}")
    if classes is None:
        classes = default_answer_inventory()
    if vocab is None:
        vocab = build_vocab(classes)

    order = rng.permutation(len(classes))
    n_para = round(config.paraphrase_fraction * len(classes))
    chosen = set(int(i) for i in order[:n_para])

    forms: dict[int, list[tuple[int, ...]]] = {}
    for idx, cls in enumerate(classes):
        if idx in chosen:
            take = 7 if cls.is_binary_yes else config.forms_per_class
            if take > len(cls.form_pool):
                raise ValueError(
                    f"class {cls.name!r} has {len(cls.form_pool)} pooled forms, "
                    f"cannot take {take}")
            selected = cls.form_pool[:take]
        else:
            selected = cls.form_pool[:1]
        forms[cls.class_id] = [tuple(vocab.encode(f)) for f in selected]
    return ParaphraseTable(
        forms,
        {c.class_id: c.question_type for c in classes},
        {c.class_id: c.name for c in classes},
    )


@dataclass
class TaskConfig:
    n_scenes: int = 2000
    questions_per_scene: int = 5
    max_objects: int = 4
    feature_dim: int = 32
    noise_sigma: float = 0.05
    paraphrase_fraction: float = 0.5
    forms_per_class: int = 4
    test_fraction: float = 0.2
    question_type_weights: dict[str, float] = field(
        default_factory=lambda: {t: 1.0 for t in QUESTION_TYPES})

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown task config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Scene:
    id: int
    objects: list[tuple[int, int, int, int]]  # (shape, color, size, material) indices
    feature_vector: np.ndarray


@dataclass
class QaItem:
    scene_id: int
    question_tokens: list[int]
    answer_tokens: list[int]
    canonical_class: int
    question_type: str
    split: str  # train_pool | test


@dataclass
class Dataset:
    scenes: list[Scene]
    items: list[QaItem]
    table: ParaphraseTable
    vocab: Vocab
    config: TaskConfig
    seed: int

    @property
    def train_items(self) -> list[QaItem]:
        return [it for it in self.items if it.split == "train_pool"]

    @property
    def test_items(self) -> list[QaItem]:
        return [it for it in self.items if it.split == "test"]

    def scene_features(self, scene_id: int) -> np.ndarray:
        return self.scenes[scene_id].feature_vector


def answer_set(item: QaItem, table: ParaphraseTable) -> list[list[int]]:
    """All correct surface forms for the item's canonical class."""
    if item.canonical_class not in table.forms:
        raise ValueError(f"unknown canonical class {item.canonical_class}")
    return [list(f) for f in table.forms[item.canonical_class]]


def _validate_config(config: TaskConfig) -> None:
    if config.max_objects < 1 or config.max_objects > len(SHAPES):
        raise ValueError(
            f"max_objects must be in [1, {len(SHAPES)}] for this attribute "
            f"inventory, got {config.max_objects}")
    if not 0.0 < config.test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {config.test_fraction}")
    weights = config.question_type_weights
    unknown = set(weights) - set(QUESTION_TYPES)
    if unknown:
        raise ValueError(f"unknown question types in mix: {sorted(unknown)}")
    if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
        raise ValueError("question-type weights must be non-negative with positive sum")


_PER_SLOT = len(SHAPES) + len(COLORS) + len(SIZES) + len(MATERIALS)


def _raw_encoding_size(max_objects: int) -> int:
    return max_objects * _PER_SLOT + max_objects


def _raw_scene_encoding(objects, max_objects: int) -> np.ndarray:
    """Per-slot attribute one-hots plus an object-count one-hot."""
    per_slot = _PER_SLOT
    raw = np.zeros(_raw_encoding_size(max_objects))
    for slot, (sh, co, si, ma) in enumerate(objects):
        base = slot * per_slot
        raw[base + sh] = 1.0
        raw[base + len(SHAPES) + co] = 1.0
        raw[base + len(SHAPES) + len(COLORS) + si] = 1.0
        raw[base + len(SHAPES) + len(COLORS) + len(SIZES) + ma] = 1.0
    raw[max_objects * per_slot + len(objects) - 1] = 1.0
    return raw


def make_scene(scene_id: int, master_seed: int, config: TaskConfig,
               projection: np.ndarray) -> Scene:
    """Scene content and features are pure functions of (master_seed, scene_id)."""
    rng = make_rng(derive_seed(master_seed, "scene", scene_id))
    n_objects = int(rng.integers(1, config.max_objects + 1))
    shapes = rng.choice(len(SHAPES), size=n_objects, replace=False)
    objects = [
        (int(sh), int(rng.integers(len(COLORS))), int(rng.integers(len(SIZES))),
         int(rng.integers(len(MATERIALS))))
        for sh in shapes
    ]
    raw = _raw_scene_encoding(objects, config.max_objects)
    noise = make_rng(derive_seed(master_seed, "scene_noise", scene_id)).normal(
        0.0, config.noise_sigma, size=config.feature_dim)
    return Scene(scene_id, objects, raw @ projection + noise)


def _owner_index(color: int, material: int) -> int:
    return (color + material) % len(OWNERS)


def _class_lookup(classes: list[AnswerClass]) -> dict[str, int]:
    return {c.name: c.class_id for c in classes}


def _make_question(scene: Scene, qtype: str, rng: np.random.Generator,
                   by_name: dict[str, int], vocab: Vocab):
    """Returns (question words, canonical class id); answerable by construction."""
    slot = int(rng.integers(len(scene.objects)))
    sh, co, si, ma = scene.objects[slot]
    shape_w = SHAPES[sh]
    if qtype == "what":
        if rng.integers(2) == 0:
            return ["what", "color", "is", "the", shape_w], by_name[COLORS[co]]
        return ["what", "material", "is", "the", shape_w], by_name[MATERIALS[ma]]
    if qtype == "where":
        position = ["position_left", "position_middle", "position_right",
                    "position_back"][slot]
        return ["where", "is", "the", shape_w], by_name[position]
    if qtype == "who":
        return ["who", "owns", "the", shape_w], by_name[OWNERS[_owner_index(co, ma)]]
    if qtype == "how":
        return ["how", "does", "the", shape_w, "feel"], by_name[FEELS[ma]]
    if qtype == "how_many":
        dim = int(rng.integers(3))
        if dim == 0:
            value = int(rng.integers(len(COLORS)))
            word, count = COLORS[value], sum(1 for o in scene.objects if o[1] == value)
        elif dim == 1:
            value = int(rng.integers(len(SIZES)))
            word, count = SIZES[value], sum(1 for o in scene.objects if o[2] == value)
        else:
            value = int(rng.integers(len(MATERIALS)))
            word, count = MATERIALS[value], sum(1 for o in scene.objects if o[3] == value)
        return (["how", "many", word, "things", "are", "there"],
                by_name[COUNT_WORDS[count]])
    if qtype == "exist":
        present = {(o[1], o[0]) for o in scene.objects}
        if rng.integers(2) == 0 and present:
            c, s = list(sorted(present))[int(rng.integers(len(present)))]
            answer = "yes"
        else:
            while True:
                c = int(rng.integers(len(COLORS)))
                s = int(rng.integers(len(SHAPES)))
                if (c, s) not in present:
                    break
            answer = "no"
        return ["is", "there", "a", COLORS[c], SHAPES[s]], by_name[answer]
    raise ValueError(f"unknown question type {qtype!r}")


def generate_dataset(config: TaskConfig, rng: np.random.Generator) -> Dataset:
    """Build scenes, items, table, and vocab; byte-identical per input rng state."""
    _validate_config(config)
    classes = default_answer_inventory()
    by_name = _class_lookup(classes)
    vocab = build_vocab(classes)

    master = int(rng.integers(0, 2**63))
    table = build_paraphrase_table(
        config, make_rng(derive_seed(master, "table")), classes, vocab)

    projection = make_rng(derive_seed(master, "feature_projection")).normal(
        0.0, 1.0, size=(_raw_encoding_size(config.max_objects), config.feature_dim))
    projection /= np.sqrt(projection.shape[0])

    scenes = [make_scene(i, master, config, projection)
              for i in range(config.n_scenes)]

    structure = make_rng(derive_seed(master, "structure"))
    surface = make_rng(derive_seed(master, "surface"))

    n_test = round(config.test_fraction * config.n_scenes)
    test_scenes = set(int(i) for i in
                      structure.choice(config.n_scenes, size=n_test, replace=False))

    types = [t for t in QUESTION_TYPES if config.question_type_weights.get(t, 0.0) > 0]
    probs = np.array([config.question_type_weights[t] for t in types])
    probs = probs / probs.sum()

    items: list[QaItem] = []
    for scene in scenes:
        split = "test" if scene.id in test_scenes else "train_pool"
        for _ in range(config.questions_per_scene):
            qtype = types[int(structure.choice(len(types), p=probs))]
            words, cid = _make_question(scene, qtype, structure, by_name, vocab)
            form_list = table.forms[cid]
            form = form_list[int(surface.integers(len(form_list)))]
            items.append(QaItem(scene.id, vocab.encode(words), list(form),
                                cid, qtype, split))

    # split hygiene: keep only test classes that the train pool covers
    train_classes = {it.canonical_class for it in items if it.split == "train_pool"}
    items = [it for it in items
             if it.split == "train_pool" or it.canonical_class in train_classes]
    return Dataset(scenes, items, table, vocab, config, master)


def caption_pairs(scenes: list[Scene], rng: np.random.Generator, count: int,
                  table: ParaphraseTable, vocab: Vocab,
                  classes: list[AnswerClass] | None = None,
                  return_groups: bool = False):
    """(feature_vector, caption) pairs describing one object bundle each.

    Each picked slot gets one of five templates (attribute bundle,
    position, owner, feel, attribute count); every class mention runs
    through the paraphrase table, so the caption corpus carries the same
    surface-form variation as answers across all question types. Where
    the class phrase alone still identifies scene content (colors,
    materials, owners, feels), half the captions keep only that phrase,
    mimicking the short region descriptions found in natural caption
    corpora; position and count phrases stay embedded in their sentence
    because bare ones describe nearly every scene.

    With return_groups the result is (pairs, groups): groups[i] is the
    (question_type, class_id) of a bare-phrase caption, or None for a full
    sentence. Trainers use the keys to build contrast batches whose
    in-batch negatives share a question type.
    """
    if classes is None:
        classes = default_answer_inventory()
    by_name = _class_lookup(classes)
    slots = [(s, k) for s in scenes for k in range(len(s.objects))]
    if count < 0 or count > len(slots):
        raise ValueError(f"caption count {count} outside [0, {len(slots)}]")
    picked = rng.choice(len(slots), size=count, replace=False)

    def form_words(name: str) -> list[str]:
        forms = table.forms[by_name[name]]
        return list(vocab.decode(forms[int(rng.integers(len(forms)))]))

    positions = ["position_left", "position_middle", "position_right",
                 "position_back"]
    pairs, groups = [], []
    for i in picked:
        scene, k = slots[int(i)]
        sh, co, si, ma = scene.objects[k]
        shape_w = SHAPES[sh]
        template = int(rng.integers(5))
        short = bool(rng.integers(2))
        if template == 0:
            color_w, material_w = form_words(COLORS[co]), form_words(MATERIALS[ma])
            # the short variant keeps a single class so the phrase has one
            # unambiguous visual referent
            phrase_name = COLORS[co] if rng.integers(2) == 0 else MATERIALS[ma]
            phrase = color_w if phrase_name == COLORS[co] else material_w
            words = ["the", SIZES[si]] + color_w + material_w + [shape_w]
        elif template == 1:
            phrase_name, phrase = None, None
            words = ["the", shape_w, "is"] + form_words(positions[k])
        elif template == 2:
            phrase_name = OWNERS[_owner_index(co, ma)]
            phrase = form_words(phrase_name)
            words = phrase + ["owns", "the", shape_w]
        elif template == 3:
            phrase_name = FEELS[ma]
            phrase = form_words(phrase_name)
            words = ["the", shape_w, "does", "feel"] + phrase
        else:
            # count caption mirrors the counting questions: one attribute
            # dimension, count of matching objects in the whole scene
            dim = int(rng.integers(3))
            if dim == 0:
                value = int(rng.integers(len(COLORS)))
                word, n = COLORS[value], sum(1 for o in scene.objects if o[1] == value)
            elif dim == 1:
                value = int(rng.integers(len(SIZES)))
                word, n = SIZES[value], sum(1 for o in scene.objects if o[2] == value)
            else:
                value = int(rng.integers(len(MATERIALS)))
                word, n = MATERIALS[value], sum(1 for o in scene.objects if o[3] == value)
            phrase_name, phrase = None, None
            words = ["there", "are"] + form_words(COUNT_WORDS[n]) + [word, "things"]
        use_short = short and phrase is not None
        pairs.append((scene.feature_vector, vocab.encode(phrase if use_short else words)))
        if use_short:
            cid = by_name[phrase_name]
            groups.append((classes[cid].question_type, cid))
        else:
            groups.append(None)
    return (pairs, groups) if return_groups else pairs


# ---------------------------------------------------------------------------
# Serialization: header.json + scenes.jsonl + one jsonl per split
# ---------------------------------------------------------------------------


def write_dataset(directory, dataset: Dataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "seed": dataset.seed,
        "config": dataset.config.as_dict(),
        "vocab": dataset.vocab.index_to_token,
        "paraphrase_table": {
            str(cid): {
                "name": dataset.table.names[cid],
                "question_type": dataset.table.question_type[cid],
                "forms": [list(f) for f in dataset.table.forms[cid]],
            }
            for cid in dataset.table.class_ids()
        },
    }
    (directory / "header.json").write_text(
        json.dumps(header, indent=2, sort_keys=True) + "\n")
    with open(directory / "scenes.jsonl", "w") as fh:
        for s in dataset.scenes:
            fh.write(json.dumps({
                "id": s.id,
                "objects": [list(o) for o in s.objects],
                "feature_vector": [float(x) for x in s.feature_vector],
            }) + "\n")
    for split in ("train_pool", "test"):
        with open(directory / f"{split}.jsonl", "w") as fh:
            for it in dataset.items:
                if it.split != split:
                    continue
                fh.write(json.dumps({
                    "scene_id": it.scene_id,
                    "question_tokens": it.question_tokens,
                    "answer_tokens": it.answer_tokens,
                    "canonical_class": it.canonical_class,
                    "question_type": it.question_type,
                }) + "\n")


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    header = json.loads((directory / "header.json").read_text())
    config = TaskConfig.from_dict(header["config"])
    vocab = Vocab(header["vocab"])
    forms, qtypes, names = {}, {}, {}
    for cid_str, entry in header["paraphrase_table"].items():
        cid = int(cid_str)
        forms[cid] = [tuple(f) for f in entry["forms"]]
        qtypes[cid] = entry["question_type"]
        names[cid] = entry["name"]
    table = ParaphraseTable(forms, qtypes, names)
    scenes = []
    with open(directory / "scenes.jsonl") as fh:
        for line in fh:
            d = json.loads(line)
            scenes.append(Scene(d["id"], [tuple(o) for o in d["objects"]],
                                np.array(d["feature_vector"])))
    items = []
    for split in ("train_pool", "test"):
        with open(directory / f"{split}.jsonl") as fh:
            for line in fh:
                d = json.loads(line)
                items.append(QaItem(d["scene_id"], d["question_tokens"],
                                    d["answer_tokens"], d["canonical_class"],
                                    d["question_type"], split))
    # restore generation order so item indices stay valid across a save/load
    # round trip: items were emitted scene-major and a scene is all one
    # split, so a stable sort on scene id undoes the per-split file layout
    items.sort(key=lambda it: it.scene_id)
    return Dataset(scenes, items, table, vocab, config, header["seed"])
