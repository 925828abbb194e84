"""Multi-level alignment: an ensemble of branches, each projecting the visual feature,
attending over a class's descriptions with its own k, and scoring the pair with its own MLP head.

The forward/backward pass below is hand-written for this fixed graph:

    u -> projection -> top-k attention over e' -> softmax -> rows -> (+ motion)
      -> concat(u_hd, e) -> affine/relu -> affine/relu -> affine -> score
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import CodebookEntry, SemanticCodebook
from .numeric import l2_normalize, softmax
from .sfe import ProjectionLayer, select_topk

CHECKPOINT_VERSION = 1
AGGREGATIONS = ("topk", "avg")


class KScheduleError(ValueError):
    pass


def parse_k_schedule(spec) -> List[int]:
    """Parse ``"first_last_step"`` or a comma list into a strictly increasing list of k values.

    >>> parse_k_schedule("1_15_5")
    [1, 5, 10, 15]
    >>> parse_k_schedule("7")
    [7]
    """
    if isinstance(spec, (list, tuple)):
        ks = [int(k) for k in spec]
    else:
        text = str(spec).strip()
        m = re.fullmatch(r"(\d+)_(\d+)_(\d+)", text)
        if m:
            first, last, step = (int(g) for g in m.groups())
            if first < 1 or step < 1 or last < first:
                raise KScheduleError(f"invalid compact k schedule {text!r}")
            ks = sorted({first} | set(range(step, last + 1, step)))
        else:
            try:
                ks = [int(t) for t in text.split(",") if t.strip()]
            except ValueError as exc:
                raise KScheduleError(f"cannot parse k schedule {text!r}") from exc
    if not ks:
        raise KScheduleError("empty k schedule")
    if any(k < 1 for k in ks):
        raise KScheduleError(f"k values must be >= 1: {ks}")
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise KScheduleError(f"k values must be strictly increasing: {ks}")
    return ks


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ScoringNetwork:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray  # shape (1,)

    @classmethod
    def init(cls, in_dim: int, hidden: Tuple[int, int], rng: np.random.Generator):
        h1, h2 = hidden

        def layer(fan_in, fan_out):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)

        W1, b1 = layer(in_dim, h1)
        W2, b2 = layer(h1, h2)
        w3, b3 = layer(h2, 1)
        return cls(W1, b1, W2, b2, w3[0], b3)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.W1.shape[1], self.W1.shape[0], self.W2.shape[0]


PARAM_ORDER = ("proj.W", "proj.b", "head.W1", "head.b1", "head.W2", "head.b2", "head.w3", "head.b3")


@dataclass
class Branch:
    k: int
    projection: ProjectionLayer
    head: ScoringNetwork
    aggregation: str = "topk"

    def params(self) -> Dict[str, np.ndarray]:
        """Live views of every trainable array, keyed by a stable name."""
        p, h = self.projection, self.head
        return {"proj.W": p.W, "proj.b": p.b, "head.W1": h.W1, "head.b1": h.b1,
                "head.W2": h.W2, "head.b2": h.b2, "head.w3": h.w3, "head.b3": h.b3}


@dataclass
class MlaModel:
    branches: List[Branch]
    D: int
    C_e: int
    a_inv_until: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.branches:
            raise ValueError("model needs at least one branch")
        for i, br in enumerate(self.branches):
            if br.projection.in_dim != self.D or br.projection.out_dim != self.C_e:
                raise ValueError(f"branch {i}: projection dims disagree with model (D={self.D}, C_e={self.C_e})")
            if br.head.dims[0] != 2 * self.C_e:
                raise ValueError(f"branch {i}: head input {br.head.dims[0]} != 2*C_e")
            if br.aggregation not in AGGREGATIONS:
                raise ValueError(f"branch {i}: unknown aggregation {br.aggregation!r}")

    @classmethod
    def build(cls, D: int, C_e: int, k_list: Sequence[int], hidden=(1024, 512), seed: int = 0,
              aggregation: str = "topk", a_inv_until: int = 0) -> "MlaModel":
        seqs = np.random.SeedSequence(seed).spawn(len(k_list))
        branches = []
        for k, ss in zip(k_list, seqs):
            rng = np.random.default_rng(ss)
            proj = ProjectionLayer.init(D, C_e, rng)
            head = ScoringNetwork.init(2 * C_e, tuple(hidden), rng)
            branches.append(Branch(int(k), proj, head, aggregation))
        return cls(branches, D, C_e, a_inv_until, seed)

    @property
    def k_list(self) -> List[int]:
        return [b.k for b in self.branches]

    @property
    def hidden(self) -> Tuple[int, int]:
        return self.branches[0].head.dims[1:]

    def params(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, br in enumerate(self.branches):
            for name, arr in br.params().items():
                out[f"b{i}.{name}"] = arr
        return out

    def copy(self) -> "MlaModel":
        branches = [Branch(b.k, ProjectionLayer(b.projection.W.copy(), b.projection.b.copy()),
                           ScoringNetwork(*(a.copy() for a in (b.head.W1, b.head.b1, b.head.W2,
                                                                b.head.b2, b.head.w3, b.head.b3))),
                           b.aggregation)
                    for b in self.branches]
        return MlaModel(branches, self.D, self.C_e, self.a_inv_until, self.seed)


# ---------------------------------------------------------------------------
# Batched forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ClassStack:
    """Padded description tensors for a fixed list of classes."""

    class_ids: List[int]
    desc: np.ndarray     # (n, N_max, C_e)
    n_valid: np.ndarray  # (n,)
    motion: np.ndarray   # (n, C_e)
    row_mean: np.ndarray = field(init=False)

    def __post_init__(self):
        n_d = self.desc.shape[1]
        mask = (np.arange(n_d)[None, :] < self.n_valid[:, None]).astype(np.float64)
        self.row_mean = np.einsum("bn,bnc->bc", mask / self.n_valid[:, None], self.desc)

    @classmethod
    def from_codebook(cls, codebook: SemanticCodebook, class_ids: Sequence[int]) -> "ClassStack":
        desc, n_valid, motion = codebook.stack(class_ids)
        return cls(list(class_ids), desc, n_valid, motion)

    @classmethod
    def from_entry(cls, entry: CodebookEntry) -> "ClassStack":
        motion = np.zeros(entry.descriptions.shape[1]) if entry.motion is None else entry.motion
        return cls([0], entry.descriptions[None], np.array([entry.n_descriptions]), motion[None])

    def index(self, class_ids) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        return np.array([lookup[int(c)] for c in class_ids], dtype=np.int64)


def _groups(cls_idx: np.ndarray):
    """(class position, row indices) for every class present, in ascending class order."""
    order = np.argsort(cls_idx, kind="stable")
    classes, starts = np.unique(cls_idx[order], return_index=True)
    bounds = list(starts[1:]) + [len(order)]
    return [(int(c), order[a:b]) for c, a, b in zip(classes, starts, bounds)]


def branch_forward(branch: Branch, U: np.ndarray, cls_idx: np.ndarray, stack: ClassStack,
                   inverted: bool = False, groups=None):
    """Scores for P (visual, class) pairs. Returns ``(scores, cache)``."""
    P_, C = branch.projection, stack.desc.shape[2]
    if groups is None:
        groups = _groups(cls_idx)
    H = U @ P_.W.T + P_.b
    if branch.aggregation == "avg":
        E = stack.row_mean[cls_idx].copy()
        A = None
    else:
        n_max = stack.desc.shape[1]
        R = np.zeros((U.shape[0], n_max))
        scale = 1.0 / math.sqrt(C)
        for c, idx in groups:
            R[idx] = (H[idx] @ stack.desc[c].T) * scale
        logits = select_topk(R, branch.k, inverted, stack.n_valid[cls_idx])
        A = softmax(logits.values, axis=1)
        E = np.zeros((U.shape[0], C))
        for c, idx in groups:
            E[idx] = A[idx] @ stack.desc[c]
    E += stack.motion[cls_idx]
    X = np.concatenate([H, E], axis=1)
    hd = branch.head
    Z1 = X @ hd.W1.T + hd.b1
    A1 = np.maximum(Z1, 0.0)
    Z2 = A1 @ hd.W2.T + hd.b2
    A2 = np.maximum(Z2, 0.0)
    s = A2 @ hd.w3 + hd.b3[0]
    cache = (U, groups, stack, inverted, A, X, Z1, A1, Z2, A2)
    return s, cache


def branch_backward(branch: Branch, cache, ds: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradients of a downstream loss w.r.t. every parameter of ``branch`` given dL/ds."""
    U, groups, stack, inverted, A, X, Z1, A1, Z2, A2 = cache
    hd = branch.head
    C = stack.desc.shape[2]
    g = {"head.w3": A2.T @ ds, "head.b3": np.array([ds.sum()])}
    dZ2 = np.outer(ds, hd.w3) * (Z2 > 0)
    g["head.W2"] = dZ2.T @ A1
    g["head.b2"] = dZ2.sum(axis=0)
    dZ1 = (dZ2 @ hd.W2) * (Z1 > 0)
    g["head.W1"] = dZ1.T @ X
    g["head.b1"] = dZ1.sum(axis=0)
    dX = dZ1 @ hd.W1
    dH = dX[:, :C].copy()
    dE = dX[:, C:]
    if A is not None:
        dA = np.zeros_like(A)
        for c, idx in groups:
            dA[idx] = dE[idx] @ stack.desc[c].T
        dLogit = A * (dA - np.sum(A * dA, axis=1, keepdims=True))
        dR = -dLogit if inverted else dLogit
        scale = 1.0 / math.sqrt(C)
        for c, idx in groups:
            dH[idx] += (dR[idx] @ stack.desc[c]) * scale
    g["proj.W"] = dH.T @ U
    g["proj.b"] = dH.sum(axis=0)
    return g


def model_forward(model: MlaModel, U, cls_idx, stack: ClassStack, inverted: bool = False):
    """Mean branch score for each pair, plus per-branch caches for ``model_backward``."""
    U = np.asarray(U, dtype=np.float64)
    if U.shape[1] != model.D:
        raise ValueError(f"visual dim {U.shape[1]} != model D {model.D}")
    if stack.desc.shape[2] != model.C_e:
        raise ValueError(f"semantic dim {stack.desc.shape[2]} != model C_e {model.C_e}")
    total = np.zeros(U.shape[0])
    caches = []
    groups = _groups(cls_idx)
    for br in model.branches:
        s, cache = branch_forward(br, U, cls_idx, stack, inverted, groups)
        total += s
        caches.append(cache)
    return total / len(model.branches), caches


def model_backward(model: MlaModel, caches, ds_multi: np.ndarray) -> Dict[str, np.ndarray]:
    ds = ds_multi / len(model.branches)
    grads = {}
    for i, (br, cache) in enumerate(zip(model.branches, caches)):
        for name, g in branch_backward(br, cache, ds).items():
            grads[f"b{i}.{name}"] = g
    return grads


# ---------------------------------------------------------------------------
# Single-pair scoring
# ---------------------------------------------------------------------------


def branch_score(branch: Branch, u, class_entry: CodebookEntry, inverted: bool = False) -> float:
    stack = ClassStack.from_entry(class_entry)
    s, _ = branch_forward(branch, np.atleast_2d(np.asarray(u, dtype=np.float64)),
                          np.zeros(1, dtype=np.int64), stack, inverted)
    return float(s[0])


def ensemble_score(model: MlaModel, u, class_entry: CodebookEntry, inverted: bool = False) -> float:
    return float(np.mean([branch_score(br, u, class_entry, inverted) for br in model.branches]))


def score_matrix(model: MlaModel, U, codebook: SemanticCodebook, class_ids: Sequence[int],
                 chunk: int = 4096) -> np.ndarray:
    """Ensemble scores of every sample against every listed class, shape (N, n_classes)."""
    U = np.asarray(U, dtype=np.float64)
    stack = ClassStack.from_codebook(codebook, class_ids)
    n, n_cls = U.shape[0], len(class_ids)
    out = np.empty((n, n_cls))
    per = max(1, chunk // n_cls)
    for start in range(0, n, per):
        block = U[start:start + per]
        rows = np.repeat(block, n_cls, axis=0)
        cls_idx = np.tile(np.arange(n_cls), block.shape[0])
        s, _ = model_forward(model, rows, cls_idx, stack, inverted=False)
        out[start:start + block.shape[0]] = s.reshape(block.shape[0], n_cls)
    return out


# ---------------------------------------------------------------------------
# Training-free prompt ensemble
# ---------------------------------------------------------------------------


def training_free_aggregate(rows, query, k: int) -> np.ndarray:
    """Aggregate description rows using top-k cosine similarities to ``query`` as attention."""
    rows = np.asarray(rows, dtype=np.float64)
    sims = l2_normalize(rows) @ l2_normalize(np.asarray(query, dtype=np.float64))
    w = softmax(select_topk(sims, k).values)
    return w @ rows


def _cosine(a, b) -> float:
    return float(l2_normalize(a) @ l2_normalize(b))


def training_free_score(class_entry, query, k_list: Sequence[int]) -> float:
    """Sum over k of cosine(query, top-k-attention aggregate of the class's descriptions)."""
    if len(k_list) == 0:
        raise ValueError("k_list is empty")
    rows = class_entry.descriptions if isinstance(class_entry, CodebookEntry) else class_entry
    query = np.asarray(query, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[-1] != query.shape[-1]:
        raise ValueError(f"query dim {query.shape[-1]} != description dim {rows.shape[-1]}")
    return float(sum(_cosine(query, training_free_aggregate(rows, query, k)) for k in k_list))


def training_free_predict(codebook: SemanticCodebook, queries, k_list: Sequence[int],
                          class_ids: Optional[Sequence[int]] = None):
    """Return ``(predicted class ids, score matrix)``; ties go to the lowest class id."""
    ids = sorted(class_ids if class_ids is not None else codebook.class_ids)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    scores = np.array([[training_free_score(codebook.entry(c), q, k_list) for c in ids]
                       for q in queries])
    return np.asarray(ids)[np.argmax(scores, axis=1)], scores


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + one little-endian f32 blob per branch
# ---------------------------------------------------------------------------


def save_checkpoint(model: MlaModel, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    digest = hashlib.sha256()
    for i, br in enumerate(model.branches):
        params = br.params()
        blob = b"".join(np.ascontiguousarray(params[n], dtype="<f4").tobytes() for n in PARAM_ORDER)
        fname = f"branch_{i:03d}.bin"
        (out / fname).write_bytes(blob)
        sha = hashlib.sha256(blob).hexdigest()
        digest.update(sha.encode())
        records.append({"file": fname, "k": br.k, "aggregation": br.aggregation, "sha256": sha})
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "D": model.D, "C_e": model.C_e, "hidden": list(model.hidden),
        "k_list": model.k_list, "a_inv_until": model.a_inv_until, "seed": model.seed,
        "dtype": "f32le", "branches": records, "checksum": digest.hexdigest(),
    }
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> MlaModel:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"checkpoint manifest not found: {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    D, C_e = int(manifest["D"]), int(manifest["C_e"])
    h1, h2 = manifest["hidden"]
    shapes = {"proj.W": (C_e, D), "proj.b": (C_e,), "head.W1": (h1, 2 * C_e), "head.b1": (h1,),
              "head.W2": (h2, h1), "head.b2": (h2,), "head.w3": (h2,), "head.b3": (1,)}
    digest = hashlib.sha256()
    branches = []
    for rec in manifest["branches"]:
        blob = (path.parent / rec["file"]).read_bytes()
        sha = hashlib.sha256(blob).hexdigest()
        if sha != rec["sha256"]:
            raise CheckpointError(f"checksum mismatch in {rec['file']}")
        digest.update(sha.encode())
        flat = np.frombuffer(blob, dtype="<f4").astype(np.float64)
        expected = sum(int(np.prod(shapes[n])) for n in PARAM_ORDER)
        if flat.size != expected:
            raise CheckpointError(f"{rec['file']}: {flat.size} values, expected {expected}")
        arrays, off = {}, 0
        for n in PARAM_ORDER:
            size = int(np.prod(shapes[n]))
            arrays[n] = flat[off:off + size].reshape(shapes[n]).copy()
            off += size
        branches.append(Branch(int(rec["k"]), ProjectionLayer(arrays["proj.W"], arrays["proj.b"]),
                               ScoringNetwork(arrays["head.W1"], arrays["head.b1"], arrays["head.W2"],
                                              arrays["head.b2"], arrays["head.w3"], arrays["head.b3"]),
                               rec.get("aggregation", "topk")))
    if digest.hexdigest() != manifest["checksum"]:
        raise CheckpointError("checkpoint content checksum mismatch")
    return MlaModel(branches, D, C_e, int(manifest.get("a_inv_until", 0)), int(manifest.get("seed", 0)))
