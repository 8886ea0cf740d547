"""Loading and indexing of multimodal knowledge graphs.

Triples live in tab-separated text files (``head<TAB>relation<TAB>tail``).
Entity feature matrices use a small binary container::

    b"MMFT" | u32 version=1 | u32 rows | u32 cols | rows*cols float32 (LE, row-major)

with a plain CSV fallback (one row per entity). Feature rows are aligned to
entity ids either positionally or through an entity-order manifest
(``line i = name of entity i``).
"""

from __future__ import annotations

import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

MODALITIES = ("structural", "visual", "textual")
# labels for exported model embeddings
EXPORT_LABELS = ("fused", "contextual")
FEATURE_MAGIC = b"MMFT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class ParseError(ValueError):
    """Malformed triple file."""


class VocabError(KeyError):
    """Unknown entity or relation name."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class DataError(ValueError):
    """Feature file inconsistent with the vocabulary or containing bad values."""


# vocabulary and triples -----------------------------------------------------


@dataclass
class Vocab:
    entity_to_id: dict[str, int] = field(default_factory=dict)
    relation_to_id: dict[str, int] = field(default_factory=dict)

    @property
    def num_entities(self) -> int:
        return len(self.entity_to_id)

    @property
    def num_relations(self) -> int:
        return len(self.relation_to_id)

    @property
    def entities(self) -> list[str]:
        return sorted(self.entity_to_id, key=self.entity_to_id.__getitem__)

    @property
    def relations(self) -> list[str]:
        return sorted(self.relation_to_id, key=self.relation_to_id.__getitem__)

    def add_entity(self, name: str) -> int:
        return self.entity_to_id.setdefault(name, len(self.entity_to_id))

    def add_relation(self, name: str) -> int:
        return self.relation_to_id.setdefault(name, len(self.relation_to_id))

    def entity_id(self, name: str) -> int:
        try:
            return self.entity_to_id[name]
        except KeyError:
            raise VocabError(f"unknown entity {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self.relation_to_id[name]
        except KeyError:
            raise VocabError(f"unknown relation {name!r}") from None

    @classmethod
    def from_names(cls, entities: Iterable[str], relations: Iterable[str]) -> "Vocab":
        vocab = cls()
        for e in entities:
            vocab.add_entity(e)
        for r in relations:
            vocab.add_relation(r)
        return vocab

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        (directory / "entities.txt").write_text("".join(e + "\n" for e in self.entities), encoding="utf-8")
        (directory / "relations.txt").write_text("".join(r + "\n" for r in self.relations), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "Vocab":
        directory = Path(directory)
        return cls.from_names(
            read_manifest(directory / "entities.txt"),
            read_manifest(directory / "relations.txt"),
        )


def _empty_triples() -> np.ndarray:
    return np.zeros((0, 3), dtype=np.int64)


@dataclass
class TripleStore:
    """Integer triples per split, each an ``(n, 3)`` array of (head, relation, tail)."""

    train: np.ndarray = field(default_factory=_empty_triples)
    valid: np.ndarray = field(default_factory=_empty_triples)
    test: np.ndarray = field(default_factory=_empty_triples)

    def splits(self) -> dict[str, np.ndarray]:
        return {"train": self.train, "valid": self.valid, "test": self.test}

    def __getitem__(self, split: str) -> np.ndarray:
        return self.splits()[split]


def read_manifest(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").rstrip("\r") for line in fh if line.strip()]


def _read_raw_triples(path: str | Path) -> list[tuple[str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def _dedupe(triples: np.ndarray, label: str) -> np.ndarray:
    if len(triples) == 0:
        return triples
    _, first = np.unique(triples, axis=0, return_index=True)
    if len(first) < len(triples):
        logger.warning("%s: dropped %d duplicate triples", label, len(triples) - len(first))
        triples = triples[np.sort(first)]
    return triples


def load_triples(path: str | Path, vocab_mode: str = "build", vocab: Vocab | None = None):
    """Read one triple file.

    With ``vocab_mode="build"`` names are added to ``vocab`` (a fresh one if
    omitted); with ``"reuse"`` every name must already be known.

    Returns ``(vocab, triples)`` where ``triples`` is an ``(n, 3)`` int array.
    """
    if vocab_mode not in ("build", "reuse"):
        raise ValueError(f"vocab_mode must be 'build' or 'reuse', got {vocab_mode!r}")
    if vocab is None:
        if vocab_mode == "reuse":
            raise ValueError("vocab_mode='reuse' needs a vocabulary")
        vocab = Vocab()
    rows = _read_raw_triples(path)
    out = np.empty((len(rows), 3), dtype=np.int64)
    for i, (h, r, t) in enumerate(rows):
        if vocab_mode == "build":
            out[i] = vocab.add_entity(h), vocab.add_relation(r), vocab.add_entity(t)
        else:
            out[i] = vocab.entity_id(h), vocab.relation_id(r), vocab.entity_id(t)
    return vocab, _dedupe(out, str(path))


def load_dataset(directory: str | Path) -> tuple[Vocab, TripleStore]:
    """Load ``train.txt``/``valid.txt``/``test.txt`` from a directory.

    The vocabulary is built from the training split (or read from
    ``entities.txt``/``relations.txt`` when present, which fixes id order).
    """
    directory = Path(directory)
    if (directory / "entities.txt").exists() and (directory / "relations.txt").exists():
        vocab = Vocab.load(directory)
        _, train = load_triples(directory / "train.txt", "reuse", vocab)
    else:
        vocab, train = load_triples(directory / "train.txt", "build")
    store = TripleStore(train=train)
    for split in ("valid", "test"):
        path = directory / f"{split}.txt"
        if path.exists():
            _, triples = load_triples(path, "reuse", vocab)
            setattr(store, split, triples)
    return vocab, store


def write_triples(path: str | Path, triples: np.ndarray, vocab: Vocab) -> None:
    ents, rels = vocab.entities, vocab.relations
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in np.asarray(triples, dtype=np.int64):
            fh.write(f"{ents[h]}\t{rels[r]}\t{ents[t]}\n")


def split_triples(triples: np.ndarray, rng: np.random.Generator, fractions=(0.7, 0.1, 0.2)):
    """Shuffle and cut triples into train/valid/test by ``fractions``."""
    triples = np.asarray(triples)
    order = rng.permutation(len(triples))
    n_train = int(round(fractions[0] * len(triples)))
    n_valid = int(round(fractions[1] * len(triples)))
    a, b = n_train, n_train + n_valid
    return triples[order[:a]], triples[order[a:b]], triples[order[b:]]


# features -------------------------------------------------------------------


@dataclass
class ModalityFeatures:
    modality: str
    matrix: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def num_entities(self) -> int:
        return self.matrix.shape[0]


def write_feature_file(path: str | Path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_feature_file(path: str | Path) -> np.ndarray:
    """Read a binary feature file (or CSV fallback) into a float64 matrix."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if head[:4] != FEATURE_MAGIC:
            return _read_csv_features(path)
        magic, version, rows, cols = _HEADER.unpack(head)
        if version != FEATURE_VERSION:
            raise DataError(f"{path}: unsupported feature format version {version}")
        payload = fh.read()
    expected = rows * cols * 4
    if len(payload) != expected:
        raise DataError(f"{path}: expected {expected} payload bytes for {rows}x{cols}, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, cols)


def _read_csv_features(path: Path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append([float(x) for x in line.split(",")])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric feature value") from None
    if not rows:
        return np.zeros((0, 0))
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DataError(f"{path}: rows have differing widths {sorted(widths)}")
    return np.array(rows, dtype=np.float64)


def load_features(
    path: str | Path,
    vocab: Vocab,
    modality: str | None = None,
    manifest: str | Path | list[str] | None = None,
    missing: str = "zero",
) -> ModalityFeatures:
    """Load a feature matrix aligned to ``vocab`` entity ids.

    Without a manifest the file must hold exactly one row per entity in id
    order. With a manifest, rows are matched by entity name; vocabulary
    entities absent from the manifest get a zero row (``missing="zero"``) or the
    mean row (``missing="mean"``).

    The modality defaults to a guess from the file name.
    """
    path = Path(path)
    raw = read_feature_file(path)
    if modality is None:
        modality = _guess_modality(path)
    if modality not in MODALITIES + EXPORT_LABELS:
        raise ValueError(f"modality must be one of {MODALITIES + EXPORT_LABELS}, got {modality!r}")

    if manifest is None:
        if raw.shape[0] != vocab.num_entities:
            raise DataError(f"{path}: {raw.shape[0]} rows but vocabulary has {vocab.num_entities} entities")
        matrix = raw
    else:
        names = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
        if len(names) != raw.shape[0]:
            raise DataError(f"{path}: manifest lists {len(names)} entities for {raw.shape[0]} rows")
        if missing not in ("zero", "mean"):
            raise ValueError(f"missing must be 'zero' or 'mean', got {missing!r}")
        matrix = np.zeros((vocab.num_entities, raw.shape[1] if raw.size else 0))
        seen = np.zeros(vocab.num_entities, dtype=bool)
        for row, name in enumerate(names):
            idx = vocab.entity_to_id.get(name)
            if idx is not None:
                matrix[idx] = raw[row]
                seen[idx] = True
        if not seen.all():
            logger.warning("%s: %d entities have no features (%s fill)", path, (~seen).sum(), missing)
            if missing == "mean" and seen.any():
                matrix[~seen] = matrix[seen].mean(axis=0)

    bad = ~np.isfinite(matrix)
    if bad.any():
        row = int(np.argwhere(bad)[0, 0])
        raise DataError(f"{path}: non-finite feature value in row {row}")
    return ModalityFeatures(modality, matrix)


def _guess_modality(path: Path) -> str:
    stem = path.stem.lower()
    if stem.startswith(("struct", "s_")) or stem == "s":
        return "structural"
    if stem.startswith(("vis", "img", "image", "v_")) or stem == "v":
        return "visual"
    if stem.startswith(("text", "desc", "t_")) or stem == "t":
        return "textual"
    raise ValueError(f"cannot infer modality from file name {path.name!r}; pass modality=")


# indexes --------------------------------------------------------------------


@dataclass
class AnswerIndex:
    """Known answers per query in both directions.

    ``tails[(h, r)]`` is the set of tails seen with ``(h, r)``; ``heads[(t, r)]``
    the set of heads seen with ``(r, t)``.
    """

    tails: dict[tuple[int, int], frozenset[int]]
    heads: dict[tuple[int, int], frozenset[int]]

    def answers(self, anchor: int, relation: int, direction: str) -> frozenset[int]:
        table = self.tails if direction == "tail" else self.heads
        return table.get((anchor, relation), frozenset())

    def queries(self, num_relations: int):
        """All queries as ``(anchors, query_relations, answer_lists)``.

        Head queries use relation ids offset by ``num_relations`` so that a
        single relation table of size ``2 * num_relations`` addresses both
        directions.
        """
        anchors, rels, answers = [], [], []
        for (h, r), ts in sorted(self.tails.items()):
            anchors.append(h)
            rels.append(r)
            answers.append(np.fromiter(sorted(ts), dtype=np.int64))
        for (t, r), hs in sorted(self.heads.items()):
            anchors.append(t)
            rels.append(r + num_relations)
            answers.append(np.fromiter(sorted(hs), dtype=np.int64))
        return np.array(anchors, dtype=np.int64), np.array(rels, dtype=np.int64), answers


TargetsIndex = AnswerIndex
FilterIndex = AnswerIndex


def _index(triples_list: Iterable[np.ndarray]) -> AnswerIndex:
    tails: dict[tuple[int, int], set[int]] = defaultdict(set)
    heads: dict[tuple[int, int], set[int]] = defaultdict(set)
    for triples in triples_list:
        for h, r, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
            tails[(h, r)].add(t)
            heads[(t, r)].add(h)
    return AnswerIndex(
        {k: frozenset(v) for k, v in tails.items()},
        {k: frozenset(v) for k, v in heads.items()},
    )


def build_targets(train: np.ndarray) -> AnswerIndex:
    """1-vs-all training targets from the training split."""
    return _index([train])


def build_filter(*splits: np.ndarray) -> AnswerIndex:
    """Filter index over the union of the given splits (usually train, valid, test)."""
    if len(splits) == 1 and isinstance(splits[0], TripleStore):
        splits = tuple(splits[0].splits().values())
    return _index(splits)


def multi_hot(answer_lists: list[np.ndarray], num_entities: int, smoothing: float = 0.0) -> np.ndarray:
    out = np.zeros((len(answer_lists), num_entities))
    for i, ans in enumerate(answer_lists):
        out[i, ans] = 1.0
    if smoothing:
        out = (1.0 - smoothing) * out + smoothing / num_entities
    return out


# negative sampling ----------------------------------------------------------


def corrupt_triples(batch: np.ndarray, num_entities: int, rng: np.random.Generator) -> np.ndarray:
    """Replace the head or the tail (chosen uniformly) of each triple with a
    uniformly drawn *different* entity. Not filtered against true triples."""
    batch = np.asarray(batch, dtype=np.int64)
    if len(batch) == 0:
        raise ValueError("cannot corrupt an empty batch")
    if num_entities < 2:
        raise ValueError("need at least two entities to corrupt a triple")
    out = batch.copy()
    n = len(batch)
    side = np.where(rng.integers(0, 2, size=n) == 0, 0, 2)
    original = out[np.arange(n), side]
    draw = rng.integers(0, num_entities - 1, size=n)
    draw = draw + (draw >= original)
    out[np.arange(n), side] = draw
    return out
