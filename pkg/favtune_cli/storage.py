"""On-disk artifacts: checkpoints, tokens, SMPI, CSV reports and run directories.

Checkpoint layout: a UTF-8 header of `key=value` lines and `array <name> <dtype> <shape>`
declarations closed by an `end` line, then the arrays back to back as raw
little-endian data in declaration order.
"""
import ast
import csv
import io
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from favtune_cli.config import PipelineConfig, dumps_config, load_config, loads_config, save_config
from favtune_cli.errors import CheckpointFormatError, HashMismatch, VersionMismatch
from favtune_cli.pattern import PatternInterval, dumps_smpi, loads_smpi
from favtune_cli.predictor import CHECKPOINT_VERSION, FavoriteWeights, PredictorCheckpoint
from favtune_cli.remi_codec import CODEC_VERSION, VOCAB, EventFamily, TokenSequence, dumps_tokens, loads_tokens

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = "favtune-checkpoint"
_END = b"\nend\n"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4"}


# checkpoints

def _array_dtype(name: str, array: np.ndarray) -> str:
    if name == "weights.w":
        return "float64"
    return "int32" if np.issubdtype(array.dtype, np.integer) else "float32"


def dumps_checkpoint(ckpt: PredictorCheckpoint) -> bytes:
    lines = [
        f"{CHECKPOINT_MAGIC} version={ckpt.version}",
        f"kind={ckpt.kind}",
        f"vocab_hash={ckpt.vocab_hash}",
        f"seed={ckpt.seed}",
    ]
    lines += [f"hp.{key}={value!r}" for key, value in sorted(ckpt.hyperparameters.items())]
    lines.append("loss_curve=" + ",".join(repr(float(x)) for x in ckpt.loss_curve))
    arrays = dict(ckpt.arrays)
    if ckpt.weights is not None:
        lines.append(f"weights.alpha={ckpt.weights.alpha!r}")
        lines.append("weights.selected=" + ",".join(sorted(f.value for f in ckpt.weights.selected)))
        arrays["weights.w"] = ckpt.weights.w

    blobs = []
    for name, array in arrays.items():
        dtype = _array_dtype(name, array)
        shape = ",".join(str(n) for n in array.shape)
        lines.append(f"array {name} {dtype} {shape}")
        blobs.append(np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes())
    header = "\n".join(lines).encode("utf-8")
    return header + _END + b"".join(blobs)


def loads_checkpoint(data: bytes) -> PredictorCheckpoint:
    cut = data.find(_END)
    if cut < 0:
        raise CheckpointFormatError("checkpoint header has no 'end' line")
    try:
        lines = data[:cut].decode("utf-8").split("\n")
    except UnicodeDecodeError as e:
        raise CheckpointFormatError(f"checkpoint header is not UTF-8: {e}") from e

    magic, _, version = lines[0].partition(" version=")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a favtune checkpoint")
    if version != str(CHECKPOINT_VERSION):
        raise VersionMismatch(f"checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}")

    meta: Dict[str, str] = {}
    hyperparameters: Dict[str, Any] = {}
    declared: List[Tuple[str, str, Tuple[int, ...]]] = []
    for line in lines[1:]:
        if line.startswith("array "):
            parts = line.split(" ")
            if len(parts) != 4 or parts[2] not in _DTYPES:
                raise CheckpointFormatError(f"bad array declaration '{line}'")
            try:
                shape = tuple(int(n) for n in parts[3].split(",")) if parts[3] else ()
            except ValueError as e:
                raise CheckpointFormatError(f"bad array shape in '{line}'") from e
            declared.append((parts[1], parts[2], shape))
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointFormatError(f"bad header line '{line}'")
        if key.startswith("hp."):
            try:
                hyperparameters[key[3:]] = ast.literal_eval(value)
            except (ValueError, SyntaxError) as e:
                raise CheckpointFormatError(f"bad hyperparameter '{line}'") from e
        else:
            meta[key] = value
    for required in ("kind", "vocab_hash", "seed", "loss_curve"):
        if required not in meta:
            raise CheckpointFormatError(f"checkpoint header lacks '{required}'")

    arrays: Dict[str, np.ndarray] = {}
    offset = cut + len(_END)
    for name, dtype, shape in declared:
        dt = np.dtype(_DTYPES[dtype])
        size = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + size > len(data):
            raise CheckpointFormatError(f"array {name} is truncated")
        arrays[name] = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=offset).reshape(shape).copy()
        offset += size
    if offset != len(data):
        raise CheckpointFormatError(f"{len(data) - offset} unexpected bytes after the arrays")

    weights = None
    if "weights.w" in arrays:
        selected = frozenset(EventFamily(v) for v in meta.get("weights.selected", "").split(",") if v)
        weights = FavoriteWeights(w=arrays.pop("weights.w").astype(np.float64),
                                  alpha=float(meta.get("weights.alpha", "nan")), selected=selected)
    curve = [float(x) for x in meta["loss_curve"].split(",") if x]
    return PredictorCheckpoint(
        kind=meta["kind"],
        vocab_hash=meta["vocab_hash"],
        seed=int(meta["seed"]),
        hyperparameters=hyperparameters,
        arrays=arrays,
        loss_curve=curve,
        weights=weights,
        version=CHECKPOINT_VERSION,
    )


def save_checkpoint(ckpt: PredictorCheckpoint, path: PathLike):
    Path(path).write_bytes(dumps_checkpoint(ckpt))


def load_checkpoint(path: PathLike) -> PredictorCheckpoint:
    return loads_checkpoint(Path(path).read_bytes())


# tokens, patterns, reports

def save_tokens(seq: TokenSequence, path: PathLike):
    Path(path).write_text(dumps_tokens(seq), encoding="utf-8")


def load_tokens(path: PathLike) -> TokenSequence:
    return loads_tokens(Path(path).read_text(encoding="utf-8"))


def save_smpi(smpi: PatternInterval, path: PathLike):
    Path(path).write_text(dumps_smpi(smpi), encoding="utf-8")


def load_smpi(path: PathLike) -> PatternInterval:
    return loads_smpi(Path(path).read_text(encoding="utf-8"))


def _cell(value: Any) -> Any:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return value


def dumps_rows(rows: Sequence[Mapping[str, Any]]) -> str:
    """CSV text with columns in order of first appearance"""
    columns: List[str] = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(v) for k, v in row.items()})
    return out.getvalue()


def save_report(rows: Sequence[Mapping[str, Any]], path: PathLike):
    Path(path).write_text(dumps_rows(rows), encoding="utf-8")


def load_report(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


# run manifest

def file_sha256(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    run_id: str
    seed: int = 0
    codec_version: int = CODEC_VERSION
    vocab_hash: str = VOCAB.hash
    # config.env text the run was made with
    config: str = ""
    inputs: Dict[str, Dict[str, str]] = field(default_factory=dict)
    stages: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    @property
    def pipeline_config(self) -> PipelineConfig:
        """The settings recorded for this run (defaults for manifests without any)"""
        return loads_config(self.config) if self.config else PipelineConfig()

    def record_input(self, name: str, path: PathLike):
        path = Path(path)
        self.inputs[name] = {"path": str(path.resolve()), "sha256": file_sha256(path)}

    def record_stage(self, name: str, root: PathLike, outputs: Iterable[PathLike]):
        """Hash each output (stored relative to the run root) under a stage name"""
        root = Path(root)
        hashes = {}
        for output in outputs:
            rel = Path(output).resolve().relative_to(root.resolve())
            hashes[rel.as_posix()] = file_sha256(root / rel)
        self.stages[name] = {"finished_at": _now(), "outputs": hashes}

    def verify(self, root: PathLike):
        """Raise HashMismatch for the first input or output whose content changed"""
        root = Path(root)
        for entry in self.inputs.values():
            path = Path(entry["path"])
            if not path.exists() or file_sha256(path) != entry["sha256"]:
                raise HashMismatch(str(path))
        for stage in self.stages.values():
            for rel, digest in stage["outputs"].items():
                path = root / rel
                if not path.exists() or file_sha256(path) != digest:
                    raise HashMismatch(str(path))

    def save(self, path: PathLike):
        state = {
            "run_id": self.run_id,
            "seed": self.seed,
            "codec_version": self.codec_version,
            "vocab_hash": self.vocab_hash,
            "config": self.config,
            "inputs": self.inputs,
            "stages": self.stages,
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(state, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: PathLike) -> "RunManifest":
        with open(path, encoding="utf-8") as f:
            state = json.load(f)
        return cls(
            run_id=state["run_id"],
            seed=state.get("seed", 0),
            codec_version=state.get("codec_version", CODEC_VERSION),
            vocab_hash=state.get("vocab_hash", ""),
            config=state.get("config", ""),
            inputs=state.get("inputs", {}),
            stages=state.get("stages", {}),
        )


class RunDirectory:
    """config.env, manifest.json, tokens/, checkpoints/, patterns/, reports/, transferred.mid"""

    def __init__(self, root: PathLike):
        self.root = Path(root)
        self.config_file = self.root / "config.env"
        self.manifest_file = self.root / "manifest.json"
        self.tokens_dir = self.root / "tokens"
        self.checkpoints_dir = self.root / "checkpoints"
        self.patterns_dir = self.root / "patterns"
        self.reports_dir = self.root / "reports"
        self.transferred_file = self.root / "transferred.mid"

    def create(self) -> "RunDirectory":
        for directory in (self.tokens_dir, self.checkpoints_dir, self.patterns_dir, self.reports_dir):
            directory.mkdir(parents=True, exist_ok=True)
        return self

    def save_config(self, cfg: PipelineConfig):
        save_config(cfg, self.config_file)

    def load_config(self) -> PipelineConfig:
        return load_config(self.config_file)

    def new_manifest(self, cfg: PipelineConfig) -> RunManifest:
        """Manifest carrying the run's settings, with config.env recorded as its first stage"""
        self.save_config(cfg)
        manifest = RunManifest(run_id=self.root.name, seed=cfg.seed, config=dumps_config(cfg))
        manifest.record_stage("configure", self.root, [self.config_file])
        return manifest

    def load_manifest(self) -> Optional[RunManifest]:
        if not self.manifest_file.exists():
            return None
        return RunManifest.load(self.manifest_file)
