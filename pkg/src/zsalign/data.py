"""Embedding sets, semantic codebooks, class splits, on-disk formats and synthetic worlds."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .numeric import l2_normalize

FORMAT_VERSION = 1
NORM_TOL = 1e-6


class DataValidationError(ValueError):
    """Raised when an input file or structure violates its contract."""


def _to_unit_f32(rows: np.ndarray) -> np.ndarray:
    """Row-normalize and round to float32-representable values.

    Rows already unit-norm within NORM_TOL are kept verbatim so that
    load -> save -> load is bit-exact.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.size == 0:
        return rows
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    keep = np.abs(norms - 1.0) <= NORM_TOL
    out = np.where(keep, rows, l2_normalize(rows))
    return out.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# Core containers
# ---------------------------------------------------------------------------


class _Audited:
    """Optional read audit: when ``audit`` is a set, every class id read is recorded."""

    audit: Optional[Set[int]] = None

    def _touch(self, class_ids: Iterable[int]) -> None:
        if self.audit is not None:
            self.audit.update(int(c) for c in class_ids)


class EmbeddingSet(_Audited):
    """Labeled visual feature vectors (one row per sample)."""

    def __init__(self, sample_ids: Sequence[str], class_ids: Sequence[int], vectors,
                 normalize: bool = True):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise DataValidationError(f"vectors must be 2-D, got shape {vectors.shape}")
        if not (len(sample_ids) == len(class_ids) == vectors.shape[0]):
            raise DataValidationError("sample_ids, class_ids and vectors disagree in length")
        if len(set(sample_ids)) != len(sample_ids):
            raise DataValidationError("sample ids are not unique")
        bad = ~np.all(np.isfinite(vectors), axis=1)
        if np.any(bad):
            raise DataValidationError(
                f"non-finite value in sample {sample_ids[int(np.argmax(bad))]!r}")
        self._sample_ids = [str(s) for s in sample_ids]
        self._class_ids = np.asarray(class_ids, dtype=np.int64)
        self._vectors = _to_unit_f32(vectors) if normalize else vectors
        self._vectors.setflags(write=False)
        self._class_ids.setflags(write=False)

    @property
    def visual_dim(self) -> int:
        return self._vectors.shape[1]

    def __len__(self) -> int:
        return self._vectors.shape[0]

    @property
    def sample_ids(self) -> List[str]:
        return list(self._sample_ids)

    def labels(self) -> np.ndarray:
        """Class id of every sample. Reading labels is not a read of class content."""
        return self._class_ids

    def class_set(self) -> Set[int]:
        return set(int(c) for c in np.unique(self._class_ids))

    def select(self, class_ids: Iterable[int]) -> Tuple[np.ndarray, np.ndarray]:
        """Vectors and labels of all samples whose class is in ``class_ids``."""
        wanted = np.asarray(sorted(set(int(c) for c in class_ids)), dtype=np.int64)
        mask = np.isin(self._class_ids, wanted)
        self._touch(np.unique(self._class_ids[mask]))
        return self._vectors[mask], self._class_ids[mask]

    def subset(self, class_ids: Iterable[int]) -> "EmbeddingSet":
        wanted = set(int(c) for c in class_ids)
        idx = [i for i, c in enumerate(self._class_ids) if int(c) in wanted]
        self._touch(wanted & self.class_set())
        return EmbeddingSet([self._sample_ids[i] for i in idx], self._class_ids[idx],
                            self._vectors[idx], normalize=False)

    def all_vectors(self) -> np.ndarray:
        self._touch(self.class_set())
        return self._vectors


@dataclass(frozen=True)
class CodebookEntry:
    name: str
    descriptions: np.ndarray
    motion: Optional[np.ndarray] = None

    @property
    def n_descriptions(self) -> int:
        return self.descriptions.shape[0]


class SemanticCodebook(_Audited):
    """Per-class description embedding matrices plus an optional motion vector."""

    def __init__(self, entries: Dict[int, CodebookEntry], semantic_dim: Optional[int] = None,
                 normalize: bool = True):
        if not entries:
            raise DataValidationError("codebook has no classes")
        dims = {e.descriptions.shape[1] for e in entries.values() if e.descriptions.ndim == 2}
        if semantic_dim is None:
            if len(dims) != 1:
                raise DataValidationError(f"inconsistent semantic dims {sorted(dims)}")
            semantic_dim = dims.pop()
        self.semantic_dim = int(semantic_dim)
        self._entries: Dict[int, CodebookEntry] = {}
        for cid, e in entries.items():
            desc = np.asarray(e.descriptions, dtype=np.float64)
            if desc.ndim != 2 or desc.shape[0] < 1:
                raise DataValidationError(f"class {cid}: need an N_d x C_e matrix with N_d >= 1")
            if desc.shape[1] != self.semantic_dim:
                raise DataValidationError(
                    f"class {cid}: description dim {desc.shape[1]} != {self.semantic_dim}")
            if not np.all(np.isfinite(desc)):
                raise DataValidationError(f"class {cid}: non-finite description value")
            if not e.name:
                raise DataValidationError(f"class {cid}: missing class name")
            motion = None
            if e.motion is not None:
                motion = np.asarray(e.motion, dtype=np.float64).reshape(-1)
                if motion.shape[0] != self.semantic_dim:
                    raise DataValidationError(
                        f"class {cid}: motion dim {motion.shape[0]} != {self.semantic_dim}")
                if not np.all(np.isfinite(motion)):
                    raise DataValidationError(f"class {cid}: non-finite motion value")
            if normalize:
                desc = _to_unit_f32(desc)
                motion = None if motion is None else _to_unit_f32(motion[None])[0]
            desc.setflags(write=False)
            if motion is not None:
                motion.setflags(write=False)
            self._entries[int(cid)] = CodebookEntry(e.name, desc, motion)

    @property
    def class_ids(self) -> List[int]:
        return sorted(self._entries)

    def __contains__(self, cid) -> bool:
        return int(cid) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def name(self, cid: int) -> str:
        return self._entries[int(cid)].name

    def entry(self, cid: int) -> CodebookEntry:
        cid = int(cid)
        if cid not in self._entries:
            raise KeyError(f"unknown class id {cid}")
        self._touch([cid])
        return self._entries[cid]

    def restrict(self, class_ids: Iterable[int]) -> "SemanticCodebook":
        ids = sorted(set(int(c) for c in class_ids))
        return SemanticCodebook({c: self.entry(c) for c in ids}, self.semantic_dim,
                                normalize=False)

    def stack(self, class_ids: Sequence[int]):
        """Padded tensors for a list of classes.

        Returns ``(desc, n_valid, motion)`` with shapes (n, N_max, C_e), (n,)
        and (n, C_e). Padding rows are zero; absent motion is the zero vector.
        """
        entries = [self.entry(c) for c in class_ids]
        n_max = max(e.n_descriptions for e in entries)
        desc = np.zeros((len(entries), n_max, self.semantic_dim))
        motion = np.zeros((len(entries), self.semantic_dim))
        n_valid = np.zeros(len(entries), dtype=np.int64)
        for i, e in enumerate(entries):
            desc[i, :e.n_descriptions] = e.descriptions
            n_valid[i] = e.n_descriptions
            if e.motion is not None:
                motion[i] = e.motion
        return desc, n_valid, motion


@dataclass(frozen=True)
class SplitSpec:
    folds: Tuple[Tuple[frozenset, frozenset], ...]

    def __post_init__(self):
        for i, (seen, unseen) in enumerate(self.folds):
            if not unseen:
                raise DataValidationError(f"fold {i}: unseen set is empty")
            if set(seen) & set(unseen):
                raise DataValidationError(f"fold {i}: seen and unseen overlap")

    def fold(self, i: int) -> "Fold":
        seen, unseen = self.folds[i]
        return Fold(sorted(seen), sorted(unseen))

    def __len__(self) -> int:
        return len(self.folds)

    def validate_against(self, class_ids: Iterable[int]) -> None:
        known = set(int(c) for c in class_ids)
        for i, (seen, unseen) in enumerate(self.folds):
            extra = (set(seen) | set(unseen)) - known
            if extra:
                raise DataValidationError(f"fold {i}: unknown class ids {sorted(extra)}")

    def to_json(self) -> dict:
        return {"folds": [{"seen": sorted(int(c) for c in s), "unseen": sorted(int(c) for c in u)}
                          for s, u in self.folds]}

    @classmethod
    def from_json(cls, obj: dict) -> "SplitSpec":
        return cls(tuple((frozenset(f["seen"]), frozenset(f["unseen"])) for f in obj["folds"]))


@dataclass(frozen=True)
class Fold:
    seen: List[int]
    unseen: List[int]


def make_tri_splits(class_ids: Sequence[int], n_unseen: int, seed: int) -> SplitSpec:
    """Three seen/unseen folds; unseen sets are pairwise disjoint when the class count allows."""
    ids = sorted(set(int(c) for c in class_ids))
    if n_unseen < 1 or n_unseen >= len(ids):
        raise DataValidationError(
            f"n_unseen={n_unseen} must be in [1, {len(ids) - 1}] for {len(ids)} classes")
    rng = np.random.default_rng(seed)
    folds = []
    if 3 * n_unseen <= len(ids):
        perm = rng.permutation(ids)
        for f in range(3):
            unseen = frozenset(int(c) for c in perm[f * n_unseen:(f + 1) * n_unseen])
            folds.append((frozenset(ids) - unseen, unseen))
    else:
        for _ in range(3):
            unseen = frozenset(int(c) for c in rng.choice(ids, size=n_unseen, replace=False))
            folds.append((frozenset(ids) - unseen, unseen))
    return SplitSpec(tuple(folds))


# ---------------------------------------------------------------------------
# On-disk format: JSON manifest + raw little-endian f32 blobs (or CSV)
# ---------------------------------------------------------------------------


def _read_rows(path: Path, dtype: str, n_rows: int, dim: int, what: str) -> np.ndarray:
    if dtype == "f32le":
        raw = np.fromfile(path, dtype="<f4")
        if raw.size != n_rows * dim:
            raise DataValidationError(
                f"{what}: {path.name} holds {raw.size} values, expected {n_rows}x{dim}")
        return raw.reshape(n_rows, dim).astype(np.float64)
    if dtype == "csv":
        arr = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
        if arr.shape != (n_rows, dim):
            raise DataValidationError(
                f"{what}: {path.name} has shape {arr.shape}, expected ({n_rows}, {dim})")
        return arr
    raise DataValidationError(f"unsupported dtype {dtype!r}")


def _write_rows(path: Path, rows: np.ndarray, dtype: str) -> None:
    rows = np.asarray(rows, dtype=np.float64)
    if dtype == "f32le":
        rows.astype("<f4").tofile(path)
    elif dtype == "csv":
        np.savetxt(path, rows.astype(np.float32).astype(np.float64), delimiter=",", fmt="%.9g")
    else:
        raise DataValidationError(f"unsupported dtype {dtype!r}")


def _read_manifest(manifest_path) -> Tuple[dict, Path]:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DataValidationError(f"manifest not found: {path}")
    with open(path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataValidationError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("format_version", "semantic_dim", "classes"):
        if key not in manifest:
            raise DataValidationError(f"{path}: missing field {key!r}")
    if manifest.get("dtype", "f32le") not in ("f32le", "csv"):
        raise DataValidationError(f"{path}: unsupported dtype {manifest.get('dtype')!r}")
    return manifest, path.parent


def load_codebook(manifest_path) -> SemanticCodebook:
    manifest, root = _read_manifest(manifest_path)
    dtype = manifest.get("dtype", "f32le")
    c_e = int(manifest["semantic_dim"])
    entries = {}
    for cls in manifest["classes"]:
        cid = cls.get("id")
        if cid is None:
            raise DataValidationError("class record without id")
        if not cls.get("name"):
            raise DataValidationError(f"class {cid}: missing class name")
        n_d = int(cls["n_descriptions"])
        path = root / cls["descriptions_file"]
        if dtype == "f32le":
            raw = np.fromfile(path, dtype="<f4")
            if raw.size % c_e or raw.size // c_e != n_d:
                raise DataValidationError(
                    f"class {cid}: ragged description file {path.name} "
                    f"({raw.size} values for {n_d} x {c_e})")
            desc = raw.reshape(n_d, c_e).astype(np.float64)
        else:
            desc = _read_rows(path, dtype, n_d, c_e, f"class {cid}")
        motion = None
        if cls.get("motion_file"):
            mpath = root / cls["motion_file"]
            if dtype == "f32le":
                motion = np.fromfile(mpath, dtype="<f4").astype(np.float64)
            else:
                motion = np.loadtxt(mpath, delimiter=",", ndmin=1, dtype=np.float64).reshape(-1)
            if motion.shape[0] != c_e:
                raise DataValidationError(
                    f"class {cid}: motion dim {motion.shape[0]} != semantic_dim {c_e}")
        entries[int(cid)] = CodebookEntry(cls["name"], desc, motion)
    return SemanticCodebook(entries, c_e)


def load_embedding_set(manifest_path, codebook: Optional[SemanticCodebook] = None) -> EmbeddingSet:
    manifest, root = _read_manifest(manifest_path)
    for key in ("visual_dim", "embeddings_file", "labels_file", "n_samples"):
        if key not in manifest:
            raise DataValidationError(f"manifest missing field {key!r}")
    dtype = manifest.get("dtype", "f32le")
    dim = int(manifest["visual_dim"])
    n = int(manifest["n_samples"])
    vectors = _read_rows(root / manifest["embeddings_file"], dtype, n, dim, "embeddings")
    sample_ids, class_ids = [], []
    with open(root / manifest["labels_file"], newline="") as fh:
        for row in csv.DictReader(fh):
            sample_ids.append(row["sample_id"])
            class_ids.append(int(row["class_id"]))
    if len(sample_ids) != n:
        raise DataValidationError(f"labels file has {len(sample_ids)} rows, expected {n}")
    known = {int(c["id"]) for c in manifest["classes"]}
    if codebook is not None:
        known &= set(codebook.class_ids)
    for sid, cid in zip(sample_ids, class_ids):
        if cid not in known:
            raise DataValidationError(f"sample {sid!r}: unknown class_id {cid}")
    bad = ~np.all(np.isfinite(vectors), axis=1)
    if np.any(bad):
        raise DataValidationError(f"non-finite value in sample {sample_ids[int(np.argmax(bad))]!r}")
    return EmbeddingSet(sample_ids, class_ids, vectors)


def save_world(out_dir, data: EmbeddingSet, codebook: SemanticCodebook,
               dtype: str = "f32le") -> Path:
    """Write ``manifest.json`` plus blobs. Returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = "bin" if dtype == "f32le" else "csv"
    classes = []
    for cid in codebook.class_ids:
        e = codebook._entries[cid]
        rec = {"id": cid, "name": e.name, "descriptions_file": f"desc_{cid}.{ext}",
               "n_descriptions": e.n_descriptions}
        _write_rows(out / rec["descriptions_file"], e.descriptions, dtype)
        if e.motion is not None:
            rec["motion_file"] = f"motion_{cid}.{ext}"
            _write_rows(out / rec["motion_file"], e.motion[None], dtype)
        classes.append(rec)
    _write_rows(out / f"embeddings.{ext}", data._vectors, dtype)
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "class_id"])
        for sid, cid in zip(data._sample_ids, data._class_ids):
            w.writerow([sid, int(cid)])
    manifest = {
        "format_version": FORMAT_VERSION,
        "semantic_dim": codebook.semantic_dim,
        "visual_dim": data.visual_dim,
        "classes": classes,
        "embeddings_file": f"embeddings.{ext}",
        "labels_file": "labels.csv",
        "n_samples": len(data),
        "dtype": dtype,
        "endianness": "little",
    }
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def directory_checksums(root) -> Dict[str, str]:
    root = Path(root)
    return {str(p.relative_to(root)): file_sha256(p)
            for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# Synthetic worlds
# ---------------------------------------------------------------------------


@dataclass
class SyntheticWorldConfig:
    """Desk-scale stand-in for encoder outputs and description embeddings.

    Each class gets a latent prototype. Visual samples and description rows
    are noisy copies of it pushed through two fixed random linear maps.
    ``ambiguity_pairs`` pairs of classes get prototypes that differ only by
    ``ambiguity_offset``.

    With ``modes_per_class > 1`` a class is a mixture of modes placed
    ``mode_spread`` away from the prototype; each sample comes from one mode
    and description rows are spread evenly over the modes. A fraction
    ``distractor_fraction`` of description rows is replaced by off-class
    rows, either independent random directions or one direction shared by
    every class (``distractor_kind``).
    """

    n_classes: int = 10
    n_unseen: int = 2
    D: int = 16
    C_e: int = 32
    N_d: int = 20
    samples_per_class: int = 40
    visual_noise: float = 0.03
    description_spread: float = 0.1
    ambiguity_pairs: int = 0
    seed: int = 0
    latent_dim: int = 4
    ambiguity_offset: float = 0.15
    distractor_fraction: float = 0.0
    distractor_kind: str = "independent"
    modes_per_class: int = 1
    mode_spread: float = 0.6
    with_motion: bool = False

    def validate(self) -> None:
        if self.n_classes < 2:
            raise DataValidationError("need at least 2 classes")
        if not 1 <= self.n_unseen < self.n_classes:
            raise DataValidationError(
                f"n_unseen={self.n_unseen} must be in [1, n_classes) with n_classes={self.n_classes}")
        if self.visual_noise < 0 or self.description_spread < 0 or self.ambiguity_offset < 0:
            raise DataValidationError("noise and spread parameters must be nonnegative")
        if 2 * self.ambiguity_pairs > self.n_classes:
            raise DataValidationError("too many ambiguity pairs for the class count")
        if self.distractor_kind not in ("independent", "shared"):
            raise DataValidationError("distractor_kind must be 'independent' or 'shared'")
        if not 0.0 <= self.distractor_fraction < 1.0:
            raise DataValidationError("distractor_fraction must be in [0, 1)")
        if self.mode_spread < 0:
            raise DataValidationError("mode_spread must be nonnegative")
        for name in ("D", "C_e", "N_d", "samples_per_class", "latent_dim", "modes_per_class"):
            if getattr(self, name) < 1:
                raise DataValidationError(f"{name} must be >= 1")


@dataclass
class OracleReport:
    """Brute-force nearest-class-mean accuracy on the generated visual samples."""

    accuracy: float
    per_class: Dict[int, float]
    paired_classes: List[int] = field(default_factory=list)
    paired_accuracy: Optional[float] = None

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy,
                "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
                "paired_classes": self.paired_classes,
                "paired_accuracy": self.paired_accuracy}


def nearest_mean_oracle(vectors: np.ndarray, labels: np.ndarray,
                        paired: Sequence[int] = ()) -> OracleReport:
    classes = sorted(set(int(c) for c in labels))
    means = {c: vectors[labels == c].mean(axis=0) for c in classes}
    correct = np.zeros(len(labels), dtype=bool)
    for i in range(len(labels)):
        best, best_d = None, np.inf
        for c in classes:
            d = float(np.sum((vectors[i] - means[c]) ** 2))
            if d < best_d:
                best, best_d = c, d
        correct[i] = best == labels[i]
    per_class = {c: float(correct[labels == c].mean()) for c in classes}
    paired_acc = None
    if paired:
        mask = np.isin(labels, list(paired))
        paired_acc = float(correct[mask].mean())
    return OracleReport(float(correct.mean()), per_class, list(paired), paired_acc)


def gen_synthetic_world(cfg: SyntheticWorldConfig):
    """Returns ``(EmbeddingSet, SemanticCodebook, OracleReport)``; deterministic in ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    L = cfg.latent_dim
    protos = l2_normalize(rng.standard_normal((cfg.n_classes, L)))
    paired = []
    for p in range(cfg.ambiguity_pairs):
        a, b = 2 * p, 2 * p + 1
        offset = l2_normalize(rng.standard_normal(L))
        protos[b] = l2_normalize(protos[a] + cfg.ambiguity_offset * offset)
        paired += [a, b]
    vis_map = rng.standard_normal((cfg.D, L)) / np.sqrt(L)
    sem_map = rng.standard_normal((cfg.C_e, L)) / np.sqrt(L)
    # every class is a mixture of modes around its prototype; pairs share mode offsets
    M = cfg.modes_per_class
    modes = np.repeat(protos[:, None, :], M, axis=1)
    if M > 1:
        offsets = cfg.mode_spread * l2_normalize(rng.standard_normal((cfg.n_classes, M, L)))
        for p in range(cfg.ambiguity_pairs):
            offsets[2 * p + 1] = offsets[2 * p]
        modes = modes + offsets

    sample_ids, labels, vecs = [], [], []
    for c in range(cfg.n_classes):
        which = rng.integers(M, size=cfg.samples_per_class) if M > 1 else np.zeros(cfg.samples_per_class, int)
        noise = cfg.visual_noise * rng.standard_normal((cfg.samples_per_class, L))
        vecs.append((modes[c, which] + noise) @ vis_map.T)
        labels += [c] * cfg.samples_per_class
        sample_ids += [f"s{c:03d}_{i:04d}" for i in range(cfg.samples_per_class)]
    vecs = np.concatenate(vecs)

    n_distract = int(round(cfg.distractor_fraction * cfg.N_d))
    n_distract = min(n_distract, cfg.N_d - 1)
    generic = l2_normalize(rng.standard_normal(L))
    entries = {}
    for c in range(cfg.n_classes):
        centres = modes[c, np.arange(cfg.N_d) % M]
        latent = centres + cfg.description_spread * rng.standard_normal((cfg.N_d, L))
        if n_distract:
            rows = rng.choice(cfg.N_d, size=n_distract, replace=False)
            if cfg.distractor_kind == "shared":
                latent[rows] = generic + cfg.description_spread * rng.standard_normal((n_distract, L))
            else:
                latent[rows] = l2_normalize(rng.standard_normal((n_distract, L)))
        motion = None
        if cfg.with_motion:
            motion = (protos[c] + cfg.description_spread * rng.standard_normal(L)) @ sem_map.T
        entries[c] = CodebookEntry(f"class_{c:03d}", latent @ sem_map.T, motion)

    data = EmbeddingSet(sample_ids, labels, vecs)
    codebook = SemanticCodebook(entries, cfg.C_e)
    oracle = nearest_mean_oracle(data._vectors, data.labels(), paired)
    return data, codebook, oracle


def env_output_root() -> Path:
    return Path(os.environ.get("ZSALIGN_OUT", "runs"))
