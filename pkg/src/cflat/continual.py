"""Class-incremental training harness.

Four family strategies over a shared phase loop:

  - replay:         exemplar rehearsal with a distillation term from the
                    frozen end-of-previous-task teacher (CE + KD).
  - regularization: same rehearsal loss, plus weight aligning of the new
                    head columns at the end of each task.
  - expansion:      per-task specialist block and head branch; everything
                    previously trained is frozen, CE on the rehearsal set.
  - gpm:            no raw-data memory; per-layer orthonormal bases of past
                    representation subspaces, updates projected to their
                    orthogonal complement (optionally softened by a trained
                    significance diagonal).

The optimizer (sgd / sam / cflat) plugs into every family; the partial
application gate falls back to SGD on gated-out iterations.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import CompGraph, const, gradient, hvp, softmax_cross_entropy, take_cols
from .data import Dataset, split_train_test
from .errors import ContractViolation
from .landscape import hutchinson_trace, power_iteration_lambda_max
from .model import ExpandableModel, MlpClassifier, MlpSpec, one_hot, save_checkpoint, wa_correct
from .optim import CFlatConfig, StepReport, apply_gate, cflat_step, sam_step, schedule, sgd_step
from .params import ParamVector
from .rng import Xoshiro256, derive_seed

FAMILIES = ("replay", "regularization", "expansion", "gpm")
OPTIMIZERS = ("sgd", "sam", "cflat")

PHASES_CSV_COLUMNS = (
    "phase", "acc_overall", "acc_old", "acc_new", "loss_old", "forgetting",
    "lambda_max", "hessian_trace", "wall_ms",
)


# ---------------------------------------------------------------------------
# task streams


@dataclass(frozen=True)
class Protocol:
    kind: str  # "B0" | "B50"
    inc: int

    def __str__(self):
        return f"{self.kind}_Inc{self.inc}"


def parse_protocol(text) -> Protocol:
    if isinstance(text, Protocol):
        return text
    for kind in ("B50", "B0"):
        prefix = f"{kind}_Inc"
        if text.startswith(prefix):
            inc = int(text[len(prefix):])
            if inc < 1:
                raise ContractViolation(f"protocol {text!r}: increment must be >= 1")
            return Protocol(kind, inc)
    raise ContractViolation(f"unknown protocol {text!r}; expected B0_Inc<y> or B50_Inc<y>")


@dataclass
class Task:
    class_ids: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray  # global class ids
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class TaskStream:
    tasks: list[Task]
    protocol: str
    class_order: tuple[int, ...]  # concatenation of task class_ids

    def column_of(self) -> dict[int, int]:
        return {cls: i for i, cls in enumerate(self.class_order)}


def _partition_classes(order: list[int], protocol: Protocol) -> list[list[int]]:
    n = len(order)
    if protocol.kind == "B0":
        if n % protocol.inc != 0:
            raise ContractViolation(
                f"{protocol}: {n} classes not divisible into increments of {protocol.inc}"
            )
        return [order[i : i + protocol.inc] for i in range(0, n, protocol.inc)]
    base = n // 2
    if 2 * base != n:
        raise ContractViolation(f"{protocol}: class count {n} must be even")
    rest = n - base
    if rest % protocol.inc != 0:
        raise ContractViolation(
            f"{protocol}: remaining {rest} classes not divisible by increment {protocol.inc}"
        )
    parts = [order[:base]]
    parts.extend(order[base + i : base + i + protocol.inc] for i in range(0, rest, protocol.inc))
    return parts


def build_stream(dataset: Dataset, protocol, seed: int = 1993,
                 train_fraction: float = 0.8) -> TaskStream:
    """Shuffle classes with `seed`, partition per protocol, split train/test."""
    proto = parse_protocol(protocol)
    order = list(range(dataset.class_count))
    Xoshiro256(derive_seed(seed, 0x0DE0)).shuffle(order)
    parts = _partition_classes(order, proto)
    train, test = split_train_test(dataset, train_fraction=train_fraction, seed=seed)
    tasks = []
    for class_ids in parts:
        tr_idx = np.nonzero(np.isin(train.labels, class_ids))[0]
        te_idx = np.nonzero(np.isin(test.labels, class_ids))[0]
        tasks.append(
            Task(
                class_ids=tuple(class_ids),
                train_x=train.features[tr_idx],
                train_y=train.labels[tr_idx],
                test_x=test.features[te_idx],
                test_y=test.labels[te_idx],
            )
        )
    return TaskStream(tasks=tasks, protocol=str(proto), class_order=tuple(
        cls for part in parts for cls in part
    ))


# ---------------------------------------------------------------------------
# exemplar memory


def select_exemplars(features: np.ndarray, budget: int, mode: str, seed: int = 0) -> np.ndarray:
    """Pick `budget` sample indices for one class.

    herding: greedy choice whose running feature mean best tracks the class
    mean (ties resolved to the lowest index); random: seeded uniform draw.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n == 0:
        raise ContractViolation("cannot select exemplars from an empty class")
    if budget > n:
        raise ContractViolation(f"budget {budget} exceeds class sample count {n}")
    if mode == "random":
        gen = Xoshiro256(derive_seed(seed, 0x5E1E))
        return np.sort(gen.choice_without_replacement(n, budget))
    if mode != "herding":
        raise ContractViolation(f"unknown selection mode {mode!r}")
    mean = features.mean(axis=0)
    selected: list[int] = []
    chosen = np.zeros(n, dtype=bool)
    running = np.zeros(features.shape[1])
    for k in range(budget):
        candidate_means = (running + features) / (k + 1)
        dists = np.linalg.norm(candidate_means - mean, axis=1)
        dists[chosen] = np.inf
        best = int(np.argmin(dists))  # argmin returns the lowest index on ties
        selected.append(best)
        chosen[best] = True
        running += features[best]
    return np.array(selected, dtype=np.int64)


@dataclass
class MemoryBuffer:
    budget_per_class: int
    selection: str = "herding"
    exemplars: dict[int, np.ndarray] = field(default_factory=dict)  # class -> features

    def refresh_class(self, class_id: int, samples: np.ndarray,
                      selection_features: np.ndarray, seed: int = 0) -> None:
        ids = select_exemplars(selection_features, min(self.budget_per_class, len(samples)),
                               self.selection, seed=seed)
        self.exemplars[class_id] = np.asarray(samples, dtype=np.float64)[ids].copy()

    def all_samples(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.exemplars:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        xs = []
        ys = []
        for cls in sorted(self.exemplars):
            xs.append(self.exemplars[cls])
            ys.append(np.full(len(self.exemplars[cls]), cls, dtype=np.int64))
        return np.vstack(xs), np.concatenate(ys)

    def __len__(self) -> int:
        return sum(len(v) for v in self.exemplars.values())


# ---------------------------------------------------------------------------
# rehearsal loss


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def replay_loss_graph(model, X: np.ndarray, labels_cols: np.ndarray,
                      teacher_logits: Optional[np.ndarray] = None,
                      temperature: float = 2.0) -> CompGraph:
    """CE over all seen classes plus, when a teacher is given, the KL
    divergence between temperature-softened teacher and student
    distributions over the old classes (zero when they match)."""
    targets = one_hot(labels_cols, model.n_classes)
    if teacher_logits is None:
        return model.loss_graph(X, targets)
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    n_old = teacher_logits.shape[1]
    if n_old >= model.n_classes:
        raise ContractViolation("teacher must cover strictly fewer classes than the student")
    teacher_probs = softmax_np(teacher_logits / temperature)
    safe = np.clip(teacher_probs, 1e-300, 1.0)
    teacher_entropy = float(np.mean(-(teacher_probs * np.log(safe)).sum(axis=1)))
    X = np.asarray(X, dtype=np.float64)
    inv_t = 1.0 / temperature

    def builder(leaf):
        logits = model.logits_tensor(leaf, X)
        ce = softmax_cross_entropy(logits, targets)
        old_logits = take_cols(logits, 0, n_old)
        kd_ce = softmax_cross_entropy(old_logits * inv_t, teacher_probs)
        return ce + (kd_ce - const(teacher_entropy))

    return CompGraph(builder, len(model.params))


# ---------------------------------------------------------------------------
# gradient projection memory


@dataclass
class GpmState:
    """Per-layer orthonormal bases with a significance diagonal in [0, 1].

    significance_init "one" starts new columns fully protected (the classic
    hard projection); "spectral" starts them at their residual singular value
    over the largest one, so weak directions begin softly protected.
    """

    bases: dict[str, np.ndarray] = field(default_factory=dict)  # name -> (in_dim, k)
    significance: dict[str, np.ndarray] = field(default_factory=dict)  # name -> (k,)
    energy_threshold: float = 0.95
    significance_init: str = "one"

    def __post_init__(self):
        if not 0.0 < self.energy_threshold < 1.0:
            raise ContractViolation("energy_threshold must be in (0, 1)")
        if self.significance_init not in ("one", "spectral"):
            raise ContractViolation("significance_init must be 'one' or 'spectral'")

    def validate(self) -> None:
        for name, M in self.bases.items():
            gram = M.T @ M
            if not np.allclose(gram, np.eye(M.shape[1]), atol=1e-8):
                raise ContractViolation(f"basis {name!r} not column-orthonormal")
            lam = self.significance[name]
            if lam.min() < 0.0 or lam.max() > 1.0:
                raise ContractViolation(f"significance for {name!r} outside [0, 1]")

    def copy(self) -> "GpmState":
        return GpmState(
            bases={k: v.copy() for k, v in self.bases.items()},
            significance={k: v.copy() for k, v in self.significance.items()},
            energy_threshold=self.energy_threshold,
            significance_init=self.significance_init,
        )


def gpm_update_basis(state: GpmState, representations: dict[str, np.ndarray]) -> GpmState:
    """Grow each layer's basis from the SVD of the representation residual.

    Columns are appended until the captured squared-singular-value energy of
    the layer's representation matrix reaches the threshold; the basis is
    capped at the layer dimension. New significance entries are the residual
    singular values normalized by the largest one.
    """
    out = state.copy()
    for name, samples in representations.items():
        if samples.size == 0:
            raise ContractViolation(f"no representation samples for layer {name!r}")
        R = np.asarray(samples, dtype=np.float64).T  # (in_dim, n_samples)
        total = float(np.sum(R * R))
        if total <= 0.0:
            continue
        M = out.bases.get(name)
        if M is not None and M.size:
            captured = float(np.sum((M.T @ R) ** 2))
            resid = R - M @ (M.T @ R)
        else:
            M = np.zeros((R.shape[0], 0))
            captured = 0.0
            resid = R
        if captured >= out.energy_threshold * total:
            continue
        U, s, _ = np.linalg.svd(resid, full_matrices=False)
        new_cols = []
        new_sig = []
        energy = captured
        s_max = s[0] if s.size else 0.0
        for i in range(s.size):
            if energy >= out.energy_threshold * total:
                break
            if M.shape[1] + len(new_cols) >= R.shape[0]:
                break  # rank exhaustion: basis capped at the layer dimension
            if s[i] <= 1e-12 * max(s_max, 1.0):
                break
            col = U[:, i]
            # re-orthonormalize against the existing basis and accepted columns
            col = col - M @ (M.T @ col)
            for prev in new_cols:
                col = col - prev * float(prev @ col)
            norm = float(np.linalg.norm(col))
            if norm < 1e-10:
                continue
            new_cols.append(col / norm)
            if out.significance_init == "spectral":
                new_sig.append(float(np.clip(s[i] / s_max, 0.0, 1.0)))
            else:
                new_sig.append(1.0)
            energy += float(s[i] ** 2)
        if new_cols:
            out.bases[name] = np.column_stack([M] + new_cols) if M.size else np.column_stack(new_cols)
            old_sig = out.significance.get(name, np.zeros(0))
            out.significance[name] = np.concatenate([old_sig, np.array(new_sig)])
    out.validate()
    return out


def _project_layer_gradient(grad_mat: np.ndarray, M: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """(I - M diag(lam) M^T) applied along the input axis of a weight gradient."""
    coords = M.T @ grad_mat
    return grad_mat - M @ (lam[:, None] * coords)


def _modulated_perturbation(eps_vec: np.ndarray, params: ParamVector, state: GpmState) -> np.ndarray:
    """Damp the memory-subspace component of the perturbation by (1 - lam).

    At lam = 1 the perturbation is untouched; at lam = 0 it is confined to
    the orthogonal complement of the basis. This is what makes the loss at
    the perturbed point differentiable in the significance diagonal.
    """
    out = eps_vec.copy()
    pv = params.like(out)
    for name, M in state.bases.items():
        lam = state.significance[name]
        eps_mat = pv.view(name)
        coords = M.T @ eps_mat
        eps_mat -= M @ ((1.0 - lam)[:, None] * coords)
    return pv.data


def _significance_gradient(g_vec: np.ndarray, eps_vec: np.ndarray, params: ParamVector,
                           state: GpmState) -> dict[str, np.ndarray]:
    """d loss / d lam_k = <grad, M_k (M^T eps)_k> per basis column (chain rule)."""
    g_pv = params.like(g_vec.copy())
    e_pv = params.like(eps_vec.copy())
    out = {}
    for name, M in state.bases.items():
        g_coords = M.T @ g_pv.view(name)
        e_coords = M.T @ e_pv.view(name)
        out[name] = np.sum(g_coords * e_coords, axis=1)
    return out


def gpm_sgd_step(graph: CompGraph, params: ParamVector, state: GpmState,
                 eta: float) -> tuple[ParamVector, StepReport]:
    """Baseline projected step: theta' = theta - eta (I - M lam M^T) grad."""
    g = gradient(graph, params)
    update = g.data.copy()
    pv = params.like(update)
    for name, M in state.bases.items():
        mat = pv.view(name)
        mat[...] = _project_layer_gradient(mat, M, state.significance[name])
    report = StepReport(g_norm=float(np.linalg.norm(g.data)),
                        g0_norm=float(np.linalg.norm(pv.data)),
                        cgrad_norm=float(np.linalg.norm(pv.data)),
                        applied_cflat=False)
    return params.like(params.data - eta * pv.data), report


def cflat_gpm_step(graph: CompGraph, params: ParamVector, state: GpmState,
                   eta1: float, eta2: float, config: CFlatConfig,
                   rho_i: Optional[float] = None, joint_perturbation: bool = False,
                   freeze_significance: bool = False
                   ) -> tuple[ParamVector, GpmState, StepReport]:
    """Flatness-aware projected step (combined perturbation + basis projection).

    Computes the combined-flatness displacement eps_c (the zeroth-order
    ascent by default; `joint_perturbation` adds the curvature ascent term),
    evaluates the gradient at the significance-modulated perturbed point,
    descends the significance diagonal, then takes the projected update
    through (I - M diag(lam') M^T).
    """
    rho = config.rho if rho_i is None else float(rho_i)
    eps = config.eps_guard
    t = params.data

    g = gradient(graph, t)
    eps_c = rho * g / (np.linalg.norm(g) + eps)
    perturb1_norm = 0.0
    if joint_perturbation:
        h = hvp(graph, t, g / (np.linalg.norm(g) + eps))
        eps1 = rho * h / (np.linalg.norm(h) + eps)
        perturb1_norm = float(np.linalg.norm(eps1))
        eps_c = eps_c + eps1

    eps_mod = _modulated_perturbation(eps_c, params, state)
    g_pert = gradient(graph, t + eps_mod)

    new_state = state.copy()
    if not freeze_significance and state.bases:
        lam_grads = _significance_gradient(g_pert, eps_c, params, state)
        for name, lam_grad in lam_grads.items():
            new_state.significance[name] = np.clip(
                state.significance[name] - eta1 * lam_grad, 0.0, 1.0
            )

    update_pv = params.like(g_pert.copy())
    for name, M in new_state.bases.items():
        mat = update_pv.view(name)
        mat[...] = _project_layer_gradient(mat, M, new_state.significance[name])

    report = StepReport(
        eta_i=eta2,
        rho_i=rho,
        g_norm=float(np.linalg.norm(g)),
        g0_norm=float(np.linalg.norm(g_pert)),
        perturb0_norm=float(np.linalg.norm(eps_c)),
        perturb1_norm=perturb1_norm,
        cgrad_norm=float(np.linalg.norm(update_pv.data)),
        applied_cflat=True,
    )
    return params.like(t - eta2 * update_pv.data), new_state, report


# ---------------------------------------------------------------------------
# phase results and metrics


@dataclass
class PhaseResult:
    phase: int  # 1-based
    acc_overall: float
    acc_old: Optional[float]
    acc_new: float
    loss_old: Optional[float]
    forgetting: Optional[float]
    lambda_max: Optional[float] = None
    hessian_trace: Optional[float] = None
    wall_ms: Optional[float] = None

    def csv_row(self) -> list[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return [
            str(self.phase),
            fmt(self.acc_overall),
            fmt(self.acc_old),
            fmt(self.acc_new),
            fmt(self.loss_old),
            fmt(self.forgetting),
            fmt(self.lambda_max),
            fmt(self.hessian_trace),
            fmt(self.wall_ms),
        ]


def average_accuracy(results: list[PhaseResult]) -> float:
    if not results:
        raise ContractViolation("no phase results")
    return float(np.mean([r.acc_overall for r in results]))


def returns_from_deltas(deltas) -> tuple[float, float]:
    """(average return, maximum return) over per-method accuracy deltas."""
    deltas = [float(d) for d in deltas]
    if not deltas:
        raise ContractViolation("no deltas")
    return float(np.mean(deltas)), float(np.max(deltas))


def relative_return(base: float, treat: float) -> float:
    """Percent relative improvement of `treat` over `base`."""
    if base == 0:
        raise ContractViolation("relative return undefined for a zero baseline")
    return (treat - base) / base * 100.0


def compare_histories(base: list[PhaseResult], treat: list[PhaseResult]) -> dict:
    """Paired comparison of two runs sharing a stream and seed."""
    if len(base) != len(treat):
        raise ContractViolation("unpaired histories: phase counts differ")
    base_avg = average_accuracy(base)
    treat_avg = average_accuracy(treat)

    def mean_or_none(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    base_old = mean_or_none([r.acc_old for r in base])
    treat_old = mean_or_none([r.acc_old for r in treat])
    base_new = mean_or_none([r.acc_new for r in base])
    treat_new = mean_or_none([r.acc_new for r in treat])
    out = {
        "base_avg_acc": base_avg,
        "treat_avg_acc": treat_avg,
        "delta_avg_acc": treat_avg - base_avg,
        "per_phase_delta": [t.acc_overall - b.acc_overall for b, t in zip(base, treat)],
    }
    if base_old is not None and treat_old is not None and base_old != 0:
        out["bt_relative_return"] = relative_return(base_old, treat_old)
    if base_new is not None and treat_new is not None and base_new != 0:
        out["ft_relative_return"] = relative_return(base_new, treat_new)
    return out


# ---------------------------------------------------------------------------
# trainer


@dataclass
class TrainerConfig:
    family: str = "replay"
    optimizer: str = "cflat"
    cflat: CFlatConfig = field(default_factory=CFlatConfig)
    epochs: int = 4
    batch_size: int = 32
    hidden_dims: tuple[int, ...] = (16,)
    activation: str = "tanh"
    memory_budget: int = 20
    selection: str = "herding"
    kd: bool = True
    kd_temperature: float = 2.0
    gpm_energy_threshold: float = 0.95
    gpm_eta1: float = 0.05
    gpm_joint_perturbation: bool = False
    gpm_rep_samples: int = 128
    gpm_significance_init: str = "one"
    eta_bounds: Optional[tuple[float, float]] = None
    rho_bounds: Optional[tuple[float, float]] = None
    landscape: bool = False
    landscape_subsample: int = 256
    landscape_trace_probes: int = 32
    landscape_power_iters: int = 400
    record_timing: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractViolation(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ContractViolation(
                f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}"
            )
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("epochs and batch_size must be >= 1")
        if self.memory_budget < 0:
            raise ContractViolation("memory_budget must be >= 0")
        if self.cflat.scheduler == "linear_coupled" and (
            self.eta_bounds is None or self.rho_bounds is None
        ):
            raise ContractViolation("linear_coupled scheduler needs eta_bounds and rho_bounds")


class Trainer:
    """Runs one seeded class-incremental pass of a family/optimizer pairing."""

    def __init__(self, stream: TaskStream, config: TrainerConfig, seed: int,
                 out_dir=None):
        self.stream = stream
        self.config = config
        self.seed = seed
        self.col_of = stream.column_of()
        self.model = None
        self.teacher = None
        self.buffer = MemoryBuffer(config.memory_budget, config.selection)
        self.gpm_state = GpmState(energy_threshold=config.gpm_energy_threshold,
                                  significance_init=config.gpm_significance_init)
        self.task_acc: dict[int, dict[int, float]] = {}
        self.results: list[PhaseResult] = []
        self.step_reports: list[StepReport] = []
        self.cflat_steps_applied = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "phases.csv").write_text(",".join(PHASES_CSV_COLUMNS) + "\n")
            (self.out_dir / "steps.csv").write_text(",".join(StepReport.CSV_COLUMNS) + "\n")

    # -- helpers

    def _columns(self, labels: np.ndarray) -> np.ndarray:
        return np.array([self.col_of[int(c)] for c in labels], dtype=np.int64)

    def _make_model(self, n_new: int):
        spec = MlpSpec(
            input_dim=self.stream.tasks[0].train_x.shape[1],
            hidden_dims=self.config.hidden_dims,
            activation=self.config.activation,
            head_classes=n_new,
        )
        if self.config.family == "expansion":
            return ExpandableModel(spec, seed=self.seed)
        return MlpClassifier(spec, seed=self.seed)

    def _rehearsal_set(self, task: Task) -> tuple[np.ndarray, np.ndarray]:
        # gpm keeps no raw-data memory: the bases are the memory
        if self.config.family == "gpm" or len(self.buffer) == 0:
            return task.train_x, task.train_y
        bx, by = self.buffer.all_samples()
        return np.vstack([task.train_x, bx]), np.concatenate([task.train_y, by])

    def _loss_graph(self, bx, bcols, teacher_logits) -> CompGraph:
        if teacher_logits is not None:
            return replay_loss_graph(self.model, bx, bcols, teacher_logits,
                                     self.config.kd_temperature)
        return self.model.loss_graph(bx, one_hot(bcols, self.model.n_classes))

    def _step(self, graph: CompGraph, i: int, iters_per_epoch: int, total_iters: int):
        cfg = self.config
        eta_i, rho_i = schedule(cfg.cflat, i, cfg.eta_bounds, cfg.rho_bounds, total_iters)
        gated = apply_gate(cfg.cflat, i, iters_per_epoch)
        params = self.model.params
        frozen = self.model.frozen_mask
        is_gpm = cfg.family == "gpm"

        if cfg.optimizer == "sgd" or not gated:
            if is_gpm:
                new_params, report = gpm_sgd_step(graph, params, self.gpm_state, eta_i)
            else:
                grad = gradient(graph, params)
                new_params = sgd_step(params, grad, eta_i, frozen_mask=frozen)
                report = StepReport(g_norm=float(np.linalg.norm(grad.data)),
                                    g0_norm=float(np.linalg.norm(grad.data)),
                                    cgrad_norm=float(np.linalg.norm(grad.data)),
                                    applied_cflat=False)
        elif cfg.optimizer == "sam":
            if is_gpm:
                new_params, self.gpm_state, report = cflat_gpm_step(
                    graph, params, self.gpm_state, cfg.gpm_eta1, eta_i, cfg.cflat,
                    rho_i=rho_i, joint_perturbation=False, freeze_significance=True,
                )
            else:
                new_params, report = sam_step(graph, params, rho_i, eta_i,
                                              cfg.cflat.eps_guard, frozen_mask=frozen)
        else:  # cflat
            if is_gpm:
                new_params, self.gpm_state, report = cflat_gpm_step(
                    graph, params, self.gpm_state, cfg.gpm_eta1, eta_i, cfg.cflat,
                    rho_i=rho_i, joint_perturbation=cfg.gpm_joint_perturbation,
                )
            else:
                new_params, report = cflat_step(graph, params, cfg.cflat, i,
                                                eta_i=eta_i, rho_i=rho_i,
                                                frozen_mask=frozen)
        report.iteration = i
        report.eta_i = eta_i
        report.rho_i = rho_i
        if report.applied_cflat:
            self.cflat_steps_applied += 1
        self.step_reports.append(report)
        self.model.params = new_params

    # -- evaluation

    def _accuracy_for_task(self, s: int) -> float:
        task = self.stream.tasks[s]
        logits = self.model.apply(task.test_x)
        pred = np.argmax(logits, axis=1)
        return float(np.mean(pred == self._columns(task.test_y))) * 100.0

    def _evaluate(self, t: int) -> tuple[float, Optional[float], float, Optional[float], Optional[float]]:
        for s in range(t + 1):
            self.task_acc.setdefault(s, {})[t] = self._accuracy_for_task(s)
        # overall accuracy is sample-weighted over the union of seen test sets
        xs = np.vstack([self.stream.tasks[s].test_x for s in range(t + 1)])
        ys = np.concatenate([self.stream.tasks[s].test_y for s in range(t + 1)])
        pred = np.argmax(self.model.apply(xs), axis=1)
        acc_overall = float(np.mean(pred == self._columns(ys))) * 100.0
        acc_new = self.task_acc[t][t]
        if t == 0:
            return acc_overall, None, acc_new, None, None
        old_x = np.vstack([self.stream.tasks[s].test_x for s in range(t)])
        old_y = np.concatenate([self.stream.tasks[s].test_y for s in range(t)])
        old_logits = self.model.apply(old_x)
        old_cols = self._columns(old_y)
        acc_old = float(np.mean(np.argmax(old_logits, axis=1) == old_cols)) * 100.0
        probs = softmax_np(old_logits)
        loss_old = float(np.mean(-np.log(np.clip(probs[np.arange(len(old_cols)), old_cols],
                                                 1e-300, 1.0))))
        forgetting = float(np.mean([
            max(self.task_acc[s][p] for p in range(s, t)) - self.task_acc[s][t]
            for s in range(t)
        ]))
        return acc_overall, acc_old, acc_new, loss_old, forgetting

    def _landscape_numbers(self, t: int, X: np.ndarray, y_cols: np.ndarray):
        limit = min(self.config.landscape_subsample, len(y_cols))
        graph = self.model.loss_graph(X[:limit], one_hot(y_cols[:limit], self.model.n_classes))
        theta = self.model.params
        top = power_iteration_lambda_max(
            lambda v: hvp(graph, theta, v).data,
            len(theta),
            tol=1e-6,
            max_iter=self.config.landscape_power_iters,
            seed=derive_seed(self.seed, 0x1A5D, t),
        )
        trace = hutchinson_trace(
            lambda v: hvp(graph, theta, v).data,
            len(theta),
            self.config.landscape_trace_probes,
            seed=derive_seed(self.seed, 0x7ACE, t),
        )
        return top.value, trace.value

    # -- phase loop

    def run_phase(self, t: int) -> PhaseResult:
        cfg = self.config
        task = self.stream.tasks[t]
        n_new = len(task.class_ids)
        n_old = self.model.n_classes if self.model is not None else 0

        if self.model is None:
            self.model = self._make_model(n_new)
        elif cfg.family == "expansion":
            self.model.expand(n_new)
        else:
            self.model.add_classes(n_new)

        use_kd = cfg.kd and cfg.family in ("replay", "regularization") and t > 0
        if use_kd and self.teacher is None:
            raise ContractViolation("distillation needs the previous-task teacher model")

        X, y = self._rehearsal_set(task)
        y_cols = self._columns(y)
        teacher_logits_full = self.teacher.apply(X) if use_kd else None

        n = len(y)
        iters_per_epoch = int(np.ceil(n / cfg.batch_size))
        total_iters = cfg.epochs * iters_per_epoch
        wall_start = time.perf_counter()
        phase_step_start = len(self.step_reports)

        i_global = 0
        for epoch in range(cfg.epochs):
            gen = Xoshiro256(derive_seed(self.seed, 0xBA7C, t, epoch))
            perm = gen.permutation(n)
            for b0 in range(0, n, cfg.batch_size):
                i_global += 1
                idx = perm[b0 : b0 + cfg.batch_size]
                teacher_slice = teacher_logits_full[idx] if use_kd else None
                graph = self._loss_graph(X[idx], y_cols[idx], teacher_slice)
                self._step(graph, i_global, iters_per_epoch, total_iters)

        if cfg.family == "regularization" and t > 0:
            split = wa_correct(self.model.head_split(n_old))
            self.model.scale_new_head(split.gamma, n_old)

        if cfg.family in ("replay", "regularization"):
            self.teacher = copy.deepcopy(self.model)

        if cfg.family in ("replay", "regularization", "expansion") and cfg.memory_budget > 0:
            for cls in task.class_ids:
                mask = task.train_y == cls
                feats = self.model.features(task.train_x[mask])
                self.buffer.refresh_class(cls, task.train_x[mask], feats,
                                          seed=derive_seed(self.seed, 0xB0F0, cls))

        if cfg.family == "gpm":
            k = min(cfg.gpm_rep_samples, len(task.train_x))
            reps = self.model.layer_inputs(task.train_x[:k])
            self.gpm_state = gpm_update_basis(self.gpm_state, reps)

        wall_ms = (time.perf_counter() - wall_start) * 1000.0
        acc_overall, acc_old, acc_new, loss_old, forgetting = self._evaluate(t)
        lambda_max = hessian_trace = None
        if cfg.landscape:
            lambda_max, hessian_trace = self._landscape_numbers(t, X, y_cols)

        result = PhaseResult(
            phase=t + 1,
            acc_overall=acc_overall,
            acc_old=acc_old,
            acc_new=acc_new,
            loss_old=loss_old,
            forgetting=forgetting,
            lambda_max=lambda_max,
            hessian_trace=hessian_trace,
            wall_ms=wall_ms if cfg.record_timing else None,
        )
        self.results.append(result)
        if self.out_dir is not None:
            self._persist_phase(t, result, phase_step_start)
        return result

    def run(self) -> list[PhaseResult]:
        for t in range(len(self.stream.tasks)):
            self.run_phase(t)
        return self.results

    # -- persistence

    def _persist_phase(self, t: int, result: PhaseResult, step_start: int) -> None:
        with open(self.out_dir / "phases.csv", "a", encoding="utf-8") as fh:
            fh.write(",".join(result.csv_row()) + "\n")
        with open(self.out_dir / "steps.csv", "a", encoding="utf-8") as fh:
            for report in self.step_reports[step_start:]:
                fh.write(",".join(report.csv_row()) + "\n")
        meta = {
            "phase": t + 1,
            "protocol": self.stream.protocol,
            "seed": self.seed,
            "family": self.config.family,
            "optimizer": self.config.optimizer,
            "class_order": list(self.stream.class_order),
            "classes_seen": [list(task.class_ids) for task in self.stream.tasks[: t + 1]],
        }
        save_checkpoint(self.model, self.out_dir / f"checkpoint_phase{t + 1}.json", meta=meta)
        if self.config.landscape:
            blob = {
                "format_version": 1,
                "phase": t + 1,
                "lambda_max": result.lambda_max,
                "hessian_trace": result.hessian_trace,
            }
            with open(self.out_dir / f"landscape_phase{t + 1}.json", "w", encoding="utf-8") as fh:
                json.dump(blob, fh, indent=1)


def fisher_trace_for_model(model, X: np.ndarray, y_cols: np.ndarray,
                           limit: int = 128) -> float:
    """Empirical Fisher trace: mean squared per-example CE gradient norm."""
    from .landscape import fisher_trace

    limit = min(limit, len(y_cols))
    if limit == 0:
        raise ContractViolation("fisher trace needs at least one example")
    grads = []
    for i in range(limit):
        graph = model.loss_graph(X[i : i + 1], one_hot(y_cols[i : i + 1], model.n_classes))
        grads.append(gradient(graph, model.params).data)
    return fisher_trace(grads)
