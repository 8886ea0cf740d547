"""Command-line interface: ``imf {prepare,pretrain,train,eval,export}``.

Settings are resolved in increasing priority from built-in defaults, a JSON
file given with ``--config``, ``IMF_<KEY>`` environment variables and
command-line flags. Every command writes the resolved settings to
``<out>/config.json``; passing that file back with ``--config`` repeats the run.

Exit status is 0 on success, 1 for invalid input (bad flags, missing or
malformed files, incompatible checkpoints) and 2 for failures during
computation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import (
    DataError,
    ParseError,
    TripleStore,
    Vocab,
    VocabError,
    build_filter,
    load_dataset,
    load_features,
    load_triples,
    split_triples,
    write_feature_file,
    write_triples,
)
from .evaluation import evaluate
from .gat import GatConfig, pretrain
from .model import ABLATIONS, CheckpointError, IMFModel, ModelConfig, WEIGHT_PRIORS
from .scorer import SCORERS
from .trainer import TrainConfig, TrainingDiverged, train

logger = logging.getLogger("imf")

ENV_PREFIX = "IMF_"
FEATURE_FILES = {"s": "struct.mmft", "v": "visual.mmft", "t": "text.mmft"}
MODALITY_NAMES = {"s": "structural", "v": "visual", "t": "textual"}
FEATURE_KEYS = {"s": "features_struct", "v": "features_visual", "t": "features_text"}
UNSPLIT_NAMES = ("triples.txt", "all.txt")

# published dataset sizes: entities, relations, train, valid, test
KNOWN_DATASETS = {
    "DB15K": (14777, 279, 69319, 9903, 19806),
    "FB15K": (14951, 1345, 414549, 59221, 118443),
    "YAGO15K": (15283, 32, 86020, 12289, 24577),
    "FB15K-237": (14541, 237, 272115, 17535, 20466),
}


class UsageError(ValueError):
    """Invalid command-line input; reported with exit status 1."""


@dataclass
class RunConfig:
    command: str = ""
    dataset: str = ""
    features_struct: str = ""
    features_visual: str = ""
    features_text: str = ""
    out: str = "runs/imf"
    checkpoint: str = ""
    split: str = "test"
    dump_ranks: bool = False
    modality: str = "m"
    relation: str = ""
    output: str = ""
    name: str = ""
    dim: int = 256
    rel_dim: int = 64
    margin: float = 1.0
    lr: float = 1e-3
    batch: int = 128
    epochs: int = 100
    seed: int = 0
    ablation: str = "S+V+T"
    scorer: str = "contextual"
    contrastive_weight: float = 1.0
    cosine_scale: float = 10.0
    weight_prior: str = "normalized"
    label_smoothing: float = 0.0
    eval_every: int = 1
    patience: int = 10
    gat_layers: int = 2
    gat_heads: int = 2

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            dim=self.dim,
            rel_dim=self.rel_dim,
            mode=self.ablation,
            scorer=self.scorer,
            contrastive_weight=self.contrastive_weight,
            label_smoothing=self.label_smoothing,
            cosine_scale=self.cosine_scale,
            weight_prior=self.weight_prior,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch,
            lr=self.lr,
            seed=self.seed,
            eval_every=self.eval_every,
            patience=self.patience,
        )

    def gat_config(self) -> GatConfig:
        return GatConfig(
            dim=self.dim,
            layers=self.gat_layers,
            heads=self.gat_heads,
            margin=self.margin,
            epochs=self.epochs,
            batch_size=self.batch,
            lr=self.lr,
            seed=self.seed,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value, source: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off", ""):
                return False
            raise ValueError(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise UsageError(f"{source}: {key} expects {kind}, got {value!r}") from None


def resolve_config(command: str, flags: dict, config_path: str | None, environ=None) -> RunConfig:
    """Merge defaults < config file < environment < explicit flags."""
    environ = os.environ if environ is None else environ
    values = asdict(RunConfig())
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{config_path}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{config_path}: expected a JSON object")
        unknown = sorted(set(loaded) - set(values))
        if unknown:
            raise UsageError(f"{config_path}: unknown keys {unknown}")
        values.update({k: _coerce(k, v, config_path) for k, v in loaded.items()})
    for key in values:
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            values[key] = _coerce(key, environ[env_key], env_key)
    values.update({k: _coerce(k, v, f"--{k.replace('_', '-')}") for k, v in flags.items() if v is not None})
    values["command"] = command
    config = RunConfig(**values)
    _validate(config)
    return config


def _validate(c: RunConfig) -> None:
    problems = []
    for key in ("dim", "rel_dim", "batch", "eval_every", "patience", "gat_layers", "gat_heads"):
        if getattr(c, key) < 1:
            problems.append(f"{key} must be >= 1 (got {getattr(c, key)})")
    if c.epochs < 0:
        problems.append(f"epochs must be >= 0 (got {c.epochs})")
    if c.lr <= 0:
        problems.append(f"lr must be positive (got {c.lr})")
    if c.margin <= 0:
        problems.append(f"margin must be positive (got {c.margin})")
    if c.contrastive_weight < 0:
        problems.append(f"contrastive_weight must be >= 0 (got {c.contrastive_weight})")
    if c.scorer not in SCORERS:
        problems.append(f"scorer must be one of {list(SCORERS)} (got {c.scorer!r})")
    if c.weight_prior not in WEIGHT_PRIORS:
        problems.append(f"weight_prior must be one of {list(WEIGHT_PRIORS)} (got {c.weight_prior!r})")
    try:
        ModelConfig(mode=c.ablation)
    except ValueError:
        problems.append(f"ablation must be one of {sorted(ABLATIONS)} (got {c.ablation!r})")
    if c.split not in ("train", "valid", "test"):
        problems.append(f"split must be train, valid or test (got {c.split!r})")
    if problems:
        raise UsageError("; ".join(problems))


def write_config(config: RunConfig, out_dir: Path, name: str = "config.json") -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# prepare --------------------------------------------------------------------


def _unsplit_source(dataset: Path) -> Path | None:
    if dataset.is_file():
        return dataset
    if (dataset / "train.txt").exists():
        return None
    for name in UNSPLIT_NAMES:
        if (dataset / name).exists():
            return dataset / name
    return None


def _feature_sources(c: RunConfig) -> dict[str, Path]:
    return {k: Path(getattr(c, key)) for k, key in FEATURE_KEYS.items() if getattr(c, key)}


def _check_feature_paths(sources: dict[str, Path]) -> list[str]:
    return [
        f"{MODALITY_NAMES[k]} features: file not found: {path} (pass --{FEATURE_KEYS[k].replace('_', '-')})"
        for k, path in sources.items()
        if not path.is_file()
    ]


def _manifest_for(path: Path) -> Path | None:
    candidate = path.with_suffix(".entities.txt")
    return candidate if candidate.exists() else None


def dataset_stats(vocab: Vocab, store: TripleStore) -> dict[str, int]:
    return {
        "entities": vocab.num_entities,
        "relations": vocab.num_relations,
        "train": len(store.train),
        "valid": len(store.valid),
        "test": len(store.test),
    }


def compare_known(name: str, stats: dict[str, int]) -> list[str]:
    """Lines comparing ``stats`` against the published sizes of ``name`` (if known)."""
    key = name.upper().replace("_", "-")
    if key not in KNOWN_DATASETS:
        return []
    lines = [f"reference sizes for {key}:"]
    for field_name, expected in zip(("entities", "relations", "train", "valid", "test"), KNOWN_DATASETS[key]):
        got = stats[field_name]
        mark = "ok" if got == expected else "MISMATCH"
        lines.append(f"  {field_name:<10}{got:>9} expected {expected:>9}  {mark}")
    return lines


def cmd_prepare(c: RunConfig) -> int:
    if not c.dataset:
        raise UsageError("prepare needs --dataset")
    src = Path(c.dataset)
    problems = []
    if not src.exists():
        problems.append(f"dataset not found: {src}")
    sources = _feature_sources(c)
    problems += _check_feature_paths(sources)
    if problems:
        raise UsageError("\n".join(problems))

    unsplit = _unsplit_source(src)
    # manifests in the raw directory fix the id order that feature rows follow
    root = src if src.is_dir() else src.parent
    has_manifests = (root / "entities.txt").exists() and (root / "relations.txt").exists()
    vocab = Vocab.load(root) if has_manifests else Vocab()
    if unsplit is not None:
        _, triples = load_triples(unsplit, "build", vocab)
        train_t, valid_t, test_t = split_triples(triples, np.random.default_rng(c.seed))
        store = TripleStore(train_t, valid_t, test_t)
        logger.info("split %d triples from %s with seed %d", len(triples), unsplit, c.seed)
    else:
        missing = [s for s in ("train", "valid", "test") if not (src / f"{s}.txt").exists()]
        if missing:
            raise UsageError(f"{src}: missing split files {missing} (or provide an unsplit {UNSPLIT_NAMES[0]})")
        splits = {}
        for split in ("train", "valid", "test"):
            _, splits[split] = load_triples(src / f"{split}.txt", "build", vocab)
        store = TripleStore(**splits)

    features, problems = {}, []
    for k, path in sources.items():
        try:
            features[k] = load_features(path, vocab, MODALITY_NAMES[k], manifest=_manifest_for(path)).matrix
        except (DataError, ValueError) as exc:
            problems.append(f"{MODALITY_NAMES[k]} features: {exc}")
    if problems:
        raise UsageError("\n".join(problems))

    out = Path(c.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    for split, triples in store.splits().items():
        write_triples(out / f"{split}.txt", triples, vocab)
    for k, matrix in features.items():
        write_feature_file(out / FEATURE_FILES[k], matrix)
    stats = dataset_stats(vocab, store)
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    write_config(c, out)

    print(" ".join(f"{k}={v}" for k, v in stats.items()))
    for line in compare_known(c.name or src.name, stats):
        print(line)
    return 0


# pretrain / train -----------------------------------------------------------


def _load_prepared(c: RunConfig) -> tuple[Vocab, TripleStore]:
    if not c.dataset:
        raise UsageError(f"{c.command} needs --dataset (a directory written by 'imf prepare')")
    path = Path(c.dataset)
    if not (path / "train.txt").exists():
        raise UsageError(f"{path}: no train.txt; run 'imf prepare' first")
    return load_dataset(path)


def _load_model_features(c: RunConfig, vocab: Vocab, needed) -> dict[str, np.ndarray]:
    problems, out = [], {}
    for k in needed:
        path = getattr(c, FEATURE_KEYS[k]) or str(Path(c.dataset) / FEATURE_FILES[k])
        if not Path(path).is_file():
            problems.append(
                f"{MODALITY_NAMES[k]} features required by ablation {c.ablation} not found: {path} "
                f"(pass --{FEATURE_KEYS[k].replace('_', '-')})"
            )
            continue
        try:
            out[k] = load_features(path, vocab, MODALITY_NAMES[k], manifest=_manifest_for(Path(path))).matrix
        except (DataError, ValueError) as exc:
            problems.append(f"{MODALITY_NAMES[k]} features: {exc}")
    if problems:
        raise UsageError("\n".join(problems))
    return out


def cmd_pretrain(c: RunConfig) -> int:
    vocab, store = _load_prepared(c)
    out = Path(c.out)
    write_config(c, out)
    result = pretrain(store.train, vocab.num_entities, vocab.num_relations, c.gat_config(), out / FEATURE_FILES["s"])
    with open(out / "pretrain.jsonl", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"epoch": 0, "hinge": result.initial_loss}) + "\n")
        for epoch, loss in enumerate(result.losses, start=1):
            fh.write(json.dumps({"epoch": epoch, "hinge": loss}) + "\n")
    print(f"structural features {result.features.matrix.shape} -> {out / FEATURE_FILES['s']}")
    return 0


def cmd_train(c: RunConfig) -> int:
    vocab, store = _load_prepared(c)
    model_config = c.model_config()
    features = _load_model_features(c, vocab, model_config.inputs)
    out = Path(c.out)
    write_config(c, out)
    model = IMFModel(model_config, features, vocab.num_relations, seed=c.seed)
    try:
        result = train(model, store, c.train_config(), out)
    except TrainingDiverged as exc:
        kept = out / "checkpoint.npz"
        note = f"best checkpoint so far kept at {kept}" if kept.exists() else "no checkpoint was written"
        raise TrainingDiverged(f"run {out} (ablation {c.ablation}, seed {c.seed}): {exc}; {note}") from exc
    # record the run settings so eval/export can find the data again
    extra = {"epoch": result.best_epoch, "run": asdict(c)}
    if result.best_valid is not None:
        extra["valid"] = result.best_valid.to_dict()
    model.save(out / "checkpoint.npz", extra)
    if result.best_valid is not None:
        print(result.best_valid.to_table(f"best valid (epoch {result.best_epoch})"))
    print(f"checkpoint -> {out / 'checkpoint.npz'}")
    return 0


# eval / export --------------------------------------------------------------


def _checkpoint_path(c: RunConfig) -> Path:
    path = Path(c.checkpoint) if c.checkpoint else Path(c.out) / "checkpoint.npz"
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return path


def _load_run(c: RunConfig):
    """Model plus data for a checkpoint; dataset/feature paths fall back to the
    ones recorded at training time."""
    ckpt = _checkpoint_path(c)
    meta, _ = IMFModel.read_checkpoint(ckpt)
    run = meta.get("extra", {}).get("run", {})
    merged = dataclasses.replace(c)
    for key in ("dataset",) + tuple(FEATURE_KEYS.values()):
        if not getattr(merged, key) and run.get(key):
            setattr(merged, key, run[key])
    merged.ablation = meta["config"]["mode"]
    vocab, store = _load_prepared(merged)
    if vocab.num_entities != meta["num_entities"] or vocab.num_relations != meta["num_relations"]:
        raise CheckpointError(
            f"checkpoint was trained on {meta['num_entities']} entities / {meta['num_relations']} relations, "
            f"dataset has {vocab.num_entities} / {vocab.num_relations}"
        )
    features = _load_model_features(merged, vocab, list(meta["feature_dims"]))
    return IMFModel.load(ckpt, features), vocab, store


def _eval_out(c: RunConfig) -> Path:
    # reports land next to an explicitly given checkpoint unless --out says otherwise
    if c.checkpoint and c.out == RunConfig.out:
        return Path(c.checkpoint).parent
    return Path(c.out)


def cmd_eval(c: RunConfig) -> int:
    model, vocab, store = _load_run(c)
    triples = store[c.split]
    if len(triples) == 0:
        raise UsageError(f"split {c.split!r} is empty")
    report = evaluate(
        model.scorer_fn(),
        triples,
        build_filter(store.train, store.valid, store.test),
        vocab.num_relations,
        seed=c.seed,
        keep_ranks=c.dump_ranks,
    )
    out = _eval_out(c)
    # eval usually shares the training directory, so keep its config separate
    write_config(c, out, f"eval_{c.split}_config.json")
    (out / f"{c.split}_report.json").write_text(report.to_json(indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table = report.to_table(f"{c.split} ({len(triples)} triples, filtered)")
    (out / f"{c.split}_report.txt").write_text(table + "\n", encoding="utf-8")
    if c.dump_ranks:
        ents, rels = vocab.entities, vocab.relations
        with open(out / f"{c.split}_ranks.tsv", "w", encoding="utf-8") as fh:
            fh.write("anchor\trelation\tdirection\tanswer\trank\n")
            for r in report.ranks:
                fh.write(f"{ents[r.anchor]}\t{rels[r.relation]}\t{r.direction}\t{ents[r.true_entity]}\t{r.rank}\n")
    print(table)
    return 0


EXPORT_MODALITIES = ("s", "v", "t", "m", "contextual")


def _relation_index(text: str, vocab: Vocab) -> int:
    if text in vocab.relation_to_id:
        return vocab.relation_id(text)
    if text.startswith("inverse:") and text[8:] in vocab.relation_to_id:
        return vocab.relation_id(text[8:]) + vocab.num_relations
    try:
        idx = int(text)
    except ValueError:
        raise UsageError(f"unknown relation {text!r}") from None
    if not 0 <= idx < 2 * vocab.num_relations:
        raise UsageError(f"relation id {idx} outside 0..{2 * vocab.num_relations - 1}")
    return idx


def cmd_export(c: RunConfig) -> int:
    if c.modality not in EXPORT_MODALITIES:
        raise UsageError(f"modality must be one of {list(EXPORT_MODALITIES)} (got {c.modality!r})")
    if not c.output:
        raise UsageError("export needs --output")
    model, vocab, _ = _load_run(c)
    mats, latents = model.entity_matrices()
    if c.modality == "contextual":
        if not c.relation:
            raise UsageError("contextual export needs --relation (name, 'inverse:<name>' or integer id)")
        rel = _relation_index(c.relation, vocab)
        k = "m" if "m" in model.config.scorers else model.config.scorers[0]
        if model.config.scorer != "contextual":
            raise UsageError(f"checkpoint uses the {model.config.scorer} scorer, which has no contextual embedding")
        entities = np.arange(model.num_entities)
        matrix = model.contextual(k, entities, np.full(model.num_entities, rel), mats).data
    elif c.modality in mats:
        matrix = mats[c.modality].data
    elif c.modality in latents:
        matrix = latents[c.modality].data
    else:
        raise UsageError(f"modality {c.modality!r} is not part of ablation {model.config.mode}")
    output = Path(c.output)
    write_config(c, output.parent, output.name + ".config.json")
    write_feature_file(output, matrix)
    print(f"{c.modality} embeddings {matrix.shape} -> {c.output}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "export": cmd_export,
}


# argument parsing ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of settings (overridden by IMF_* env vars and flags)")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--features-struct", dest="features_struct", help="structural feature file")
    p.add_argument("--features-visual", dest="features_visual", help="visual feature file")
    p.add_argument("--features-text", dest="features_text", help="textual feature file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_hyper(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=int, help="embedding size D")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="imf", description="Multimodal knowledge-graph link prediction.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="index and validate a raw dataset")
    _add_common(p)
    p.add_argument("--name", help="dataset name for the size comparison (default: directory name)")

    p = sub.add_parser("pretrain", help="train the graph-attention encoder and export structural features")
    _add_common(p)
    _add_hyper(p)
    p.add_argument("--margin", type=float)
    p.add_argument("--gat-layers", dest="gat_layers", type=int)
    p.add_argument("--gat-heads", dest="gat_heads", type=int)

    p = sub.add_parser("train", help="train the fusion model")
    _add_common(p)
    _add_hyper(p)
    p.add_argument("--rel-dim", dest="rel_dim", type=int, help="relation embedding size")
    p.add_argument("--ablation", help=f"one of {', '.join(ABLATIONS)}")
    p.add_argument("--scorer", help=f"one of {', '.join(SCORERS)}")
    p.add_argument("--contrastive-weight", dest="contrastive_weight", type=float)
    p.add_argument("--cosine-scale", dest="cosine_scale", type=float)
    p.add_argument("--weight-prior", dest="weight_prior", help=f"one of {', '.join(WEIGHT_PRIORS)}")
    p.add_argument("--label-smoothing", dest="label_smoothing", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--patience", type=int)

    p = sub.add_parser("eval", help="filtered ranking evaluation of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: <out>/checkpoint.npz)")
    p.add_argument("--split", help="train, valid or test (default test)")
    p.add_argument("--dump-ranks", dest="dump_ranks", action="store_const", const=True, help="write per-query ranks")

    p = sub.add_parser("export", help="write entity embeddings in the binary feature format")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: <out>/checkpoint.npz)")
    p.add_argument("--modality", help=f"one of {', '.join(EXPORT_MODALITIES)}")
    p.add_argument("--relation", help="relation name, 'inverse:<name>' or id (contextual export)")
    p.add_argument("--output", help="destination file")
    return parser


VALIDATION_ERRORS = (UsageError, ParseError, DataError, VocabError, CheckpointError, FileNotFoundError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        config = resolve_config(args.command, flags, args.config)
        return COMMANDS[args.command](config)
    except VALIDATION_ERRORS as exc:
        print(f"imf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"imf {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
