"""Small feed-forward classifiers for the class-incremental harness.

Two model kinds share one surface (flat ParamVector, frozen mask, numpy
inference path, and a Tensor-graph logits builder):

  - MlpClassifier: shared backbone, single linear head whose class columns
    grow as tasks arrive. Used by the replay, weight-aligning and
    gradient-projection families.
  - ExpandableModel: frozen shared block, one specialist block and one head
    branch per task; expanding freezes everything trained so far and adds a
    fresh trainable block plus a zero-initialized branch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import CompGraph, Tensor, concat_cols, const, reshape, softmax_cross_entropy, take
from .errors import ContractViolation
from .params import ParamVector
from .rng import Xoshiro256, derive_seed

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    activation: str = "relu"
    head_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.input_dim < 1 or self.head_classes < 1 or any(d < 1 for d in self.hidden_dims):
            raise ContractViolation("all dimensions must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ContractViolation(f"activation must be relu or tanh, got {self.activation!r}")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "head_classes": self.head_classes,
        }


def glorot_uniform(shape: tuple[int, int], gen: Xoshiro256) -> np.ndarray:
    fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return (gen.uniforms(fan_in * fan_out) * 2.0 - 1.0).reshape(shape) * bound


def _activate_np(h: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(h, 0.0) if activation == "relu" else np.tanh(h)


def _activate_t(h: Tensor, activation: str) -> Tensor:
    return h.relu() if activation == "relu" else h.tanh()


class _FeedForwardBase:
    """Shared plumbing: flat params, leaf slicing, loss graphs, checkpoints."""

    params: ParamVector
    frozen_mask: np.ndarray
    spec: MlpSpec
    seed: int
    class_group_sizes: list[int]

    @property
    def n_classes(self) -> int:
        return sum(self.class_group_sizes)

    def _slice(self, leaf: Tensor, name: str) -> Tensor:
        entry = next(e for e in self.params.layout if e.name == name)
        return reshape(take(leaf, entry.offset, entry.size), entry.shape)

    def _theta(self, theta) -> np.ndarray:
        if theta is None:
            return self.params.data
        return theta.data if isinstance(theta, ParamVector) else np.asarray(theta, np.float64)

    def logits_tensor(self, leaf: Tensor, X: np.ndarray) -> Tensor:
        raise NotImplementedError

    def apply(self, X: np.ndarray, theta=None) -> np.ndarray:
        raise NotImplementedError

    def loss_graph(self, X: np.ndarray, targets: np.ndarray,
                   logits_transform=None) -> CompGraph:
        """CE loss graph over this model's parameters for a fixed batch.

        `logits_transform(logits_tensor, model)` may rewrite the logits
        (e.g. add a distillation term downstream builds on top of this).
        """
        X = np.asarray(X, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)

        def builder(leaf):
            logits = self.logits_tensor(leaf, X)
            if logits_transform is not None:
                logits = logits_transform(logits, self)
            return softmax_cross_entropy(logits, targets)

        return CompGraph(builder, len(self.params))

    def ce_graph(self, X: np.ndarray, labels: np.ndarray) -> CompGraph:
        targets = one_hot(labels, self.n_classes)
        return self.loss_graph(X, targets)

    def checkpoint_dict(self, meta: dict | None = None) -> dict:
        arrays = {}
        for entry in self.params.layout:
            arrays[entry.name] = {
                "shape": list(entry.shape),
                "data": [float(x) for x in self.params.view(entry.name).ravel()],
            }
        frozen_entries = [
            e.name
            for e in self.params.layout
            if bool(self.frozen_mask[e.offset : e.offset + e.size].all()) and e.size > 0
        ]
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": self.KIND,
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "class_group_sizes": list(self.class_group_sizes),
            "frozen_entries": frozen_entries,
            "arrays": arrays,
            "meta": meta or {},
        }


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractViolation("labels out of range for one-hot encoding")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


class MlpClassifier(_FeedForwardBase):
    KIND = "classifier"

    def __init__(self, spec: MlpSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self.class_group_sizes = [spec.head_classes]
        gen = Xoshiro256(derive_seed(seed, 0xC1A0))
        parts = []
        in_dim = spec.input_dim
        for i, width in enumerate(spec.hidden_dims):
            parts.append((f"layer{i}.w", glorot_uniform((in_dim, width), gen)))
            parts.append((f"layer{i}.b", np.zeros(width)))
            in_dim = width
        parts.append(("head.w", glorot_uniform((in_dim, spec.head_classes), gen)))
        parts.append(("head.b", np.zeros(spec.head_classes)))
        self.params = ParamVector.concat(parts)
        self.frozen_mask = np.zeros(len(self.params), dtype=bool)
        self._feat_dim = in_dim

    def add_classes(self, new_classes: int) -> None:
        """Append seeded fresh head columns for a new task's classes."""
        if new_classes < 1:
            raise ContractViolation("new_classes must be >= 1")
        gen = Xoshiro256(derive_seed(self.seed, 0xC1A1, len(self.class_group_sizes)))
        old_w = self.params.view("head.w").copy()
        old_b = self.params.view("head.b").copy()
        new_w = np.hstack([old_w, glorot_uniform((self._feat_dim, new_classes), gen)])
        new_b = np.concatenate([old_b, np.zeros(new_classes)])
        parts = []
        for entry in self.params.layout:
            if entry.name == "head.w":
                parts.append(("head.w", new_w))
            elif entry.name == "head.b":
                parts.append(("head.b", new_b))
            else:
                parts.append((entry.name, self.params.view(entry.name).copy()))
        self.params = ParamVector.concat(parts)
        self.frozen_mask = np.zeros(len(self.params), dtype=bool)
        self.class_group_sizes.append(new_classes)

    def _hidden_np(self, X: np.ndarray, theta: np.ndarray) -> list[np.ndarray]:
        pv = self.params.like(theta)
        acts = [np.asarray(X, dtype=np.float64)]
        h = acts[0]
        for i in range(len(self.spec.hidden_dims)):
            h = _activate_np(h @ pv.view(f"layer{i}.w") + pv.view(f"layer{i}.b"), self.spec.activation)
            acts.append(h)
        return acts

    def apply(self, X: np.ndarray, theta=None) -> np.ndarray:
        theta = self._theta(theta)
        pv = self.params.like(theta)
        h = self._hidden_np(X, theta)[-1]
        return h @ pv.view("head.w") + pv.view("head.b")

    def features(self, X: np.ndarray, theta=None) -> np.ndarray:
        return self._hidden_np(X, self._theta(theta))[-1]

    def layer_inputs(self, X: np.ndarray, theta=None) -> dict[str, np.ndarray]:
        """Input activation matrix feeding each weight entry (for projection bases)."""
        acts = self._hidden_np(X, self._theta(theta))
        out = {}
        for i in range(len(self.spec.hidden_dims)):
            out[f"layer{i}.w"] = acts[i]
        out["head.w"] = acts[-1]
        return out

    def logits_tensor(self, leaf: Tensor, X: np.ndarray) -> Tensor:
        if np.asarray(X).shape[1] != self.spec.input_dim:
            raise ContractViolation(
                f"input dim {np.asarray(X).shape[1]} != spec input_dim {self.spec.input_dim}"
            )
        h = const(np.asarray(X, dtype=np.float64))
        for i in range(len(self.spec.hidden_dims)):
            W = self._slice(leaf, f"layer{i}.w")
            b = reshape(self._slice(leaf, f"layer{i}.b"), (1, self.spec.hidden_dims[i]))
            h = _activate_t(h @ W + b, self.spec.activation)
        W = self._slice(leaf, "head.w")
        b = reshape(self._slice(leaf, "head.b"), (1, self.n_classes))
        return h @ W + b

    def head_split(self, n_old: int) -> "HeadSplit":
        w = self.params.view("head.w")
        if not 0 < n_old < self.n_classes:
            raise ContractViolation("head split needs both old and new columns")
        return HeadSplit(old_weights=w[:, :n_old].copy(), new_weights=w[:, n_old:].copy())

    def scale_new_head(self, gamma: float, n_old: int) -> None:
        """Fold the aligning factor into the new head columns (logits scale by gamma)."""
        self.params.view("head.w")[:, n_old:] *= gamma
        self.params.view("head.b")[n_old:] *= gamma


class ExpandableModel(_FeedForwardBase):
    KIND = "expandable"

    def __init__(self, spec: MlpSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self.class_group_sizes = [spec.head_classes]
        self.n_blocks = 1
        gen = Xoshiro256(derive_seed(seed, 0xE1A0))
        parts = []
        in_dim = spec.input_dim
        for i, width in enumerate(spec.hidden_dims):
            parts.append((f"shared{i}.w", glorot_uniform((in_dim, width), gen)))
            parts.append((f"shared{i}.b", np.zeros(width)))
            in_dim = width
        self._width = in_dim
        parts.append(("block0.w", glorot_uniform((in_dim, in_dim), gen)))
        parts.append(("block0.b", np.zeros(in_dim)))
        parts.append(("head0.w", np.zeros((in_dim, spec.head_classes))))
        parts.append(("head0.b", np.zeros(spec.head_classes)))
        self.params = ParamVector.concat(parts)
        self.frozen_mask = np.zeros(len(self.params), dtype=bool)

    def expand(self, new_classes: int) -> None:
        """Add one specialist block plus one zero-init head branch; freeze the rest.

        Previously learned values are preserved exactly; after expansion only
        the fresh block and branch are trainable.
        """
        if new_classes < 1:
            raise ContractViolation("new_classes must be >= 1")
        if self.n_blocks < 1:
            raise ContractViolation("expand requires an existing block")
        t = self.n_blocks
        gen = Xoshiro256(derive_seed(self.seed, 0xE1A1, t))
        parts = [(e.name, self.params.view(e.name).copy()) for e in self.params.layout]
        parts.append((f"block{t}.w", glorot_uniform((self._width, self._width), gen)))
        parts.append((f"block{t}.b", np.zeros(self._width)))
        parts.append((f"head{t}.w", np.zeros((self._width, new_classes))))
        parts.append((f"head{t}.b", np.zeros(new_classes)))
        self.params = ParamVector.concat(parts)
        self.n_blocks = t + 1
        self.class_group_sizes.append(new_classes)
        mask = np.ones(len(self.params), dtype=bool)
        for name in (f"block{t}.w", f"block{t}.b", f"head{t}.w", f"head{t}.b"):
            entry = next(e for e in self.params.layout if e.name == name)
            mask[entry.offset : entry.offset + entry.size] = False
        self.frozen_mask = mask

    def trainable_count(self) -> int:
        return int((~self.frozen_mask).sum())

    def _shared_np(self, X: np.ndarray, pv: ParamVector) -> np.ndarray:
        h = np.asarray(X, dtype=np.float64)
        for i in range(len(self.spec.hidden_dims)):
            h = _activate_np(h @ pv.view(f"shared{i}.w") + pv.view(f"shared{i}.b"),
                             self.spec.activation)
        return h

    def apply(self, X: np.ndarray, theta=None) -> np.ndarray:
        pv = self.params.like(self._theta(theta))
        shared = self._shared_np(X, pv)
        blocks = []
        for t in range(self.n_blocks):
            f = _activate_np(shared @ pv.view(f"block{t}.w") + pv.view(f"block{t}.b"),
                             self.spec.activation)
            blocks.append(f @ pv.view(f"head{t}.w") + pv.view(f"head{t}.b"))
        return np.concatenate(blocks, axis=1)

    def features(self, X: np.ndarray, theta=None) -> np.ndarray:
        pv = self.params.like(self._theta(theta))
        shared = self._shared_np(X, pv)
        feats = [
            _activate_np(shared @ pv.view(f"block{t}.w") + pv.view(f"block{t}.b"),
                         self.spec.activation)
            for t in range(self.n_blocks)
        ]
        return np.concatenate(feats, axis=1)

    def logits_tensor(self, leaf: Tensor, X: np.ndarray) -> Tensor:
        if np.asarray(X).shape[1] != self.spec.input_dim:
            raise ContractViolation(
                f"input dim {np.asarray(X).shape[1]} != spec input_dim {self.spec.input_dim}"
            )
        h = const(np.asarray(X, dtype=np.float64))
        for i in range(len(self.spec.hidden_dims)):
            W = self._slice(leaf, f"shared{i}.w")
            b = reshape(self._slice(leaf, f"shared{i}.b"), (1, self.spec.hidden_dims[i]))
            h = _activate_t(h @ W + b, self.spec.activation)
        branch_logits = []
        for t in range(self.n_blocks):
            Wb = self._slice(leaf, f"block{t}.w")
            bb = reshape(self._slice(leaf, f"block{t}.b"), (1, self._width))
            f = _activate_t(h @ Wb + bb, self.spec.activation)
            Wh = self._slice(leaf, f"head{t}.w")
            bh = reshape(self._slice(leaf, f"head{t}.b"), (1, self.class_group_sizes[t]))
            branch_logits.append(f @ Wh + bh)
        return concat_cols(branch_logits)


@dataclass
class HeadSplit:
    """Old/new head weight columns plus the aligning factor for the new ones."""

    old_weights: np.ndarray
    new_weights: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ContractViolation("gamma must be positive")


def wa_correct(head: HeadSplit) -> HeadSplit:
    """Weight aligning: gamma = mean L2 norm of old class vectors over new ones.

    New-class logits scaled by gamma at inference shrink over-confident fresh
    heads back to the old classes' scale.
    """
    if head.old_weights.size == 0 or head.new_weights.size == 0:
        raise ContractViolation("both head branches must be non-empty")
    old_norms = np.linalg.norm(head.old_weights, axis=0)
    new_norms = np.linalg.norm(head.new_weights, axis=0)
    new_mean = float(np.mean(new_norms))
    if new_mean <= 0.0:
        raise ContractViolation("degenerate head: new-class weight norms are all zero")
    gamma = float(np.mean(old_norms)) / new_mean
    return HeadSplit(head.old_weights, head.new_weights, gamma=gamma)


def save_checkpoint(model, path, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.checkpoint_dict(meta), fh, indent=1)


def load_checkpoint(path):
    """Rebuild a model from its checkpoint; bit-exact parameter round trip."""
    with open(path, "r", encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ContractViolation(
            f"unsupported checkpoint format_version {blob.get('format_version')!r}"
        )
    spec = MlpSpec(
        input_dim=blob["spec"]["input_dim"],
        hidden_dims=tuple(blob["spec"]["hidden_dims"]),
        activation=blob["spec"]["activation"],
        head_classes=blob["spec"]["head_classes"],
    )
    kind = blob["kind"]
    if kind == MlpClassifier.KIND:
        model = MlpClassifier(spec, seed=blob["seed"])
        for size in blob["class_group_sizes"][1:]:
            model.add_classes(size)
    elif kind == ExpandableModel.KIND:
        model = ExpandableModel(spec, seed=blob["seed"])
        for size in blob["class_group_sizes"][1:]:
            model.expand(size)
    else:
        raise ContractViolation(f"unknown checkpoint kind {kind!r}")
    for entry in model.params.layout:
        arr = blob["arrays"][entry.name]
        if tuple(arr["shape"]) != entry.shape:
            raise ContractViolation(f"checkpoint entry {entry.name!r} has wrong shape")
        model.params.view(entry.name)[...] = np.array(arr["data"], dtype=np.float64).reshape(entry.shape)
    frozen = np.zeros(len(model.params), dtype=bool)
    for name in blob["frozen_entries"]:
        entry = next(e for e in model.params.layout if e.name == name)
        frozen[entry.offset : entry.offset + entry.size] = True
    model.frozen_mask = frozen
    return model, blob.get("meta", {})
