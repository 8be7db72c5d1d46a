"""Loss composition, optimizer, schedule and the training loop."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .codec import rate_estimate
from .layers import Module
from .task import (
    IMAGE_SIZE,
    AuxiliaryBranch,
    Batch,
    ConfigurationError,
    RecognitionModel,
    task_loss,
    teacher_labels,
)

VARIANTS = ("RdImage", "Distill", "Task", "TaskAux", "TaskAuxMse")
AUX_VARIANTS = ("TaskAux", "TaskAuxMse")
LOG_COLUMNS = ("epoch", "lr", "R_bpp", "D_image", "D_task", "D_aux", "total", "val_total", "val_task_metric")


class TrainingDiverged(RuntimeError):
    pass


class RoutingViolation(AssertionError):
    pass


@dataclass
class LossConfig:
    variant: str = "Task"
    lam: float = 1.0
    alpha: float = 0.5
    position: str = "AuxEnc"  # AuxEnc | AuxDec | AuxTask | none
    distill_layers: list = field(default_factory=lambda: ["stage3", "stage4"])
    task: str = "segmentation"
    labels: str = "teacher"  # teacher | gt
    aux_task_tap: str = "stage2"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown loss variant {self.variant!r}")
        if not self.lam > 0:
            raise ConfigurationError("lambda must be positive")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be non-negative")
        if self.position not in ("AuxEnc", "AuxDec", "AuxTask", "none"):
            raise ConfigurationError(f"unknown aux position {self.position!r}")
        if self.labels not in ("teacher", "gt"):
            raise ConfigurationError(f"labels must be 'teacher' or 'gt', got {self.labels!r}")
        if self.variant == "Distill" and not self.distill_layers:
            raise ConfigurationError("Distill needs at least one tap name")

    @property
    def uses_aux(self) -> bool:
        return self.variant in AUX_VARIANTS and self.position != "none"

    @property
    def uses_recognizer(self) -> bool:
        return self.variant != "RdImage"


@dataclass
class LossTerms:
    variant: str
    lam: float
    alpha: float
    R: float  # bits
    R_bpp: float
    D_image: float = 0.0
    D_distill: float = 0.0
    D_task: float = 0.0
    D_aux: float = 0.0
    total: float = 0.0
    uses_aux: bool = False

    def recompute_total(self) -> float:
        lam = self.lam
        if self.variant == "RdImage":
            return self.R_bpp + lam * self.D_image
        if self.variant == "Distill":
            return self.R_bpp + lam * self.D_distill
        if self.variant == "Task":
            return self.R_bpp + lam * self.D_task
        inner = self.D_task + (self.alpha * self.D_aux if self.uses_aux else 0.0)
        if self.variant == "TaskAuxMse":
            inner += self.D_image
        return self.R_bpp + lam * inner

    def main_total(self) -> float:
        """Objective without the auxiliary term (comparable across aux positions)."""
        return self.total - (self.lam * self.alpha * self.D_aux if self.uses_aux else 0.0)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr0: float = 1e-3
    schedule: str = "poly"  # constant | poly
    power: float = 1.0
    start_epoch: int = 0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    audit_every: int = 100
    debug: bool = False
    entropy_lr_mult: float = 10.0

    def __post_init__(self):
        if self.schedule not in ("constant", "poly"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lr0
        return poly_lr(epoch, self.epochs, self.lr0, self.power, self.start_epoch)


def poly_lr(epoch: int, total: int, lr0: float, power: float = 1.0, start: int = 0) -> float:
    """``lr0`` until ``start``, then ``lr0 * (1 - (e - start) / (total - start)) ** power``."""
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    if epoch < start:
        return lr0
    return lr0 * (1.0 - (epoch - start) / (total - start)) ** power


class Adam:
    """Adam with bias correction; state is keyed by parameter position."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, params, lr: float, group_lr: dict | None = None) -> None:
        """``group_lr`` optionally scales the step per parameter group."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(params, self.m, self.v):
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            lr_p = lr * group_lr.get(getattr(p, "group", ""), 1.0) if group_lr else lr
            p.data = p.data - (lr_p * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_dict(self) -> dict:
        return {"t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.beta1, self.beta2, self.eps = state["beta1"], state["beta2"], state["eps"]
        self.m = [np.array(a) for a in state["m"]]
        self.v = [np.array(a) for a in state["v"]]


def adam_step(params, state: Adam, lr: float) -> Adam:
    state.step(params, lr)
    return state


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossGraph:
    terms: LossTerms
    total: Tensor
    main: Tensor
    aux_term: Tensor | None
    x_hat: Tensor
    y_hat: Tensor


def _labels_for(batch: Batch, cfg: LossConfig, recognizer: RecognitionModel, cached: dict | None) -> dict:
    if cfg.labels == "gt":
        return {"seg": batch.seg, "presence": batch.presence}
    if cached is not None:
        return cached
    return teacher_labels(recognizer, batch.x)


def compute_loss(codec, batch: Batch, cfg: LossConfig, *, recognizer: RecognitionModel | None = None,
                 aux: AuxiliaryBranch | None = None, rng: np.random.Generator | None = None,
                 training: bool = True, labels: dict | None = None) -> LossGraph:
    """Build the full loss graph for one batch.

    Training quantizes the rate path with uniform noise and the decoder/aux
    path with a straight-through round; evaluation rounds both.
    """
    x = Tensor(batch.x)
    n, _, h, w = batch.x.shape
    y = codec.encode(x)
    if training:
        y_rate = codec.quantize_latent(y, "noise", rng)
        y_hat = codec.quantize_latent(y, "ste")
    else:
        y_hat = codec.quantize_latent(y, "round")
        y_rate = y_hat
    bits = rate_estimate(y_rate, codec.entropy)
    bpp = ad.scale(bits, 1.0 / (n * h * w))
    x_hat, dec_tap = codec.decode(y_hat, with_tap=True)
    terms = LossTerms(cfg.variant, cfg.lam, cfg.alpha, float(bits.data), float(bpp.data),
                      uses_aux=cfg.uses_aux and training)
    aux_term = None

    if cfg.variant == "RdImage":
        d_img = ad.mse(x, x_hat)
        terms.D_image = float(d_img.data)
        main = bpp + ad.scale(d_img, cfg.lam)
    elif cfg.variant == "Distill":
        if recognizer is None:
            raise ConfigurationError("Distill needs a recognizer")
        unknown = [t for t in cfg.distill_layers if t not in recognizer.tap_names]
        if unknown:
            raise ConfigurationError(f"unknown tap names {unknown}")
        with ad.no_grad():
            ref = recognizer(x)["taps"]
        taps_hat = recognizer(x_hat)["taps"]
        d = None
        for name in cfg.distill_layers:
            term = ad.mse(taps_hat[name], ad.detach(ref[name]))
            d = term if d is None else d + term
        terms.D_distill = float(d.data)
        main = bpp + ad.scale(d, cfg.lam)
    else:
        if recognizer is None:
            raise ConfigurationError(f"{cfg.variant} needs a recognizer")
        y_lab = _labels_for(batch, cfg, recognizer, labels)
        out_hat = recognizer(x_hat)
        e_task = task_loss(out_hat, y_lab, cfg.task)
        terms.D_task = float(e_task.data)
        inner = e_task
        if cfg.variant == "TaskAuxMse":
            d_img = ad.mse(x, x_hat)
            terms.D_image = float(d_img.data)
            inner = inner + d_img
        main = bpp + ad.scale(inner, cfg.lam)
        if cfg.uses_aux and training:
            if aux is None:
                raise ConfigurationError(f"{cfg.variant} with position {cfg.position} needs an aux branch")
            if aux.position != cfg.position:
                raise ConfigurationError(f"aux branch is {aux.position}, loss wants {cfg.position}")
            if cfg.position == "AuxEnc":
                tap = y_hat
            elif cfg.position == "AuxDec":
                tap = dec_tap
            else:
                tap = out_hat["taps"][cfg.aux_task_tap]
            out_aux = aux.forward_output(tap)
            e_aux = task_loss(out_aux, y_lab, cfg.task)
            terms.D_aux = float(e_aux.data)
            aux_term = ad.scale(e_aux, cfg.lam * cfg.alpha)

    total = main if aux_term is None else main + aux_term
    terms.total = float(total.data)
    if not math.isfinite(terms.total):
        raise TrainingDiverged(f"non-finite loss: {terms}")
    return LossGraph(terms, total, main, aux_term, x_hat, y_hat)


def loss_rd_image(codec, batch, lam, **kw) -> LossGraph:
    return compute_loss(codec, batch, LossConfig("RdImage", lam), **kw)


def loss_distill(codec, batch, lam, layers, recognizer, **kw) -> LossGraph:
    return compute_loss(codec, batch, LossConfig("Distill", lam, distill_layers=list(layers)),
                        recognizer=recognizer, **kw)


def loss_task(codec, batch, lam, recognizer, task="segmentation", **kw) -> LossGraph:
    return compute_loss(codec, batch, LossConfig("Task", lam, task=task), recognizer=recognizer, **kw)


def loss_task_aux(codec, batch, lam, alpha, recognizer, aux, task="segmentation", **kw) -> LossGraph:
    cfg = LossConfig("TaskAux", lam, alpha, position=aux.position, task=task)
    return compute_loss(codec, batch, cfg, recognizer=recognizer, aux=aux, **kw)


def loss_task_aux_mse(codec, batch, lam, alpha, recognizer, aux, task="segmentation", **kw) -> LossGraph:
    cfg = LossConfig("TaskAuxMse", lam, alpha, position=aux.position if aux else "none", task=task)
    return compute_loss(codec, batch, cfg, recognizer=recognizer, aux=aux, **kw)


# ---------------------------------------------------------------------------
# gradient-routing audit


@dataclass
class AuditRecord:
    step: int
    position: str
    decoder_zero: bool
    encoder_nonzero: bool
    decoder_max_abs: float
    encoder_max_abs: float
    entropy_max_abs: float


def _group_max(params, group: str) -> float:
    vals = [float(np.abs(p.grad).max()) for p in params if p.group == group and p.grad is not None]
    return max(vals, default=0.0)


def audit_aux_routing(graph: LossGraph, codec: Module, position: str, step: int) -> AuditRecord:
    """Backward the auxiliary term alone and inspect where gradient landed.

    Leaves the auxiliary-term gradients accumulated in ``.grad`` so the caller
    only needs to add the main-term backward.
    """
    params = codec.parameters()
    ad.zero_grads(params)
    ad.backward(graph.aux_term)
    dec = [p for p in params if p.group == "decoder"]
    decoder_zero = all(p.grad is None or not np.any(p.grad) for p in dec)
    enc_max = _group_max(params, "encoder")
    rec = AuditRecord(step, position, decoder_zero, enc_max > 0, _group_max(params, "decoder"),
                      enc_max, _group_max(params, "entropy_model"))
    if position == "AuxEnc" and not (rec.decoder_zero and rec.encoder_nonzero):
        raise RoutingViolation(f"AuxEnc auxiliary gradient leaked or vanished at step {step}: {rec}")
    return rec


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TaskData:
    train: Batch
    val: Batch
    train_labels: dict | None = None
    val_labels: dict | None = None

    @classmethod
    def build(cls, train_seed: int, n_train: int, val_seed: int, n_val: int,
              recognizer: RecognitionModel | None = None) -> "TaskData":
        from .task import make_batch

        train = make_batch(train_seed, range(n_train))
        val = make_batch(val_seed, range(n_val))
        data = cls(train, val)
        if recognizer is not None:
            data.train_labels = _batched_teacher(recognizer, train)
            data.val_labels = _batched_teacher(recognizer, val)
        return data


def _batched_teacher(recognizer, batch: Batch, chunk: int = 64) -> dict:
    parts = [teacher_labels(recognizer, batch.x[s:s + chunk]) for s in range(0, len(batch), chunk)]
    return {k: np.concatenate([p[k] for p in parts]) for k in ("seg", "presence")}


def _slice_labels(labels: dict | None, idx) -> dict | None:
    if labels is None:
        return None
    return {k: v[idx] for k, v in labels.items()}


@dataclass
class TrainResult:
    rows: list
    audits: list
    final_val: LossTerms | None
    steps: int

    @property
    def final_val_total(self) -> float:
        return self.rows[-1]["val_total"]


def validate(codec, data: TaskData, cfg: LossConfig, recognizer=None, chunk: int = 32) -> tuple[LossTerms, float]:
    """Evaluation-mode loss (rounded latents, no auxiliary term) and task metric on the validation split."""
    from .metrics import miou, presence_accuracy
    from .task import N_SEG_CLASSES

    acc: dict[str, float] = {}
    preds = []
    n = len(data.val)
    with ad.no_grad():
        for s in range(0, n, chunk):
            idx = slice(s, min(n, s + chunk))
            sub = data.val.subset(idx)
            g = compute_loss(codec, sub, cfg, recognizer=recognizer, training=False,
                             labels=_slice_labels(data.val_labels, idx))
            w = len(sub) / n
            for key in ("R", "R_bpp", "D_image", "D_distill", "D_task", "total"):
                acc[key] = acc.get(key, 0.0) + w * getattr(g.terms, key)
            if recognizer is not None:
                out = recognizer(g.x_hat)
                preds.append(out["seg" if cfg.task == "segmentation" else "presence"].data)
    terms = LossTerms(cfg.variant, cfg.lam, cfg.alpha, acc["R"], acc["R_bpp"], acc["D_image"],
                      acc["D_distill"], acc["D_task"], 0.0, acc["total"])
    metric = float("nan")
    if recognizer is not None:
        p = np.concatenate(preds)
        if cfg.task == "segmentation":
            metric = miou(p.argmax(axis=1), data.val.seg, N_SEG_CLASSES)
        else:
            metric = presence_accuracy((p > 0).astype(np.int8), data.val.presence)
    return terms, metric


def train(codec, data: TaskData, loss_cfg: LossConfig, train_cfg: TrainConfig, *,
          recognizer: RecognitionModel | None = None, aux: AuxiliaryBranch | None = None,
          log_path: str | None = None, log=None) -> TrainResult:
    """Optimize codec (and aux branch) parameters; returns per-epoch log rows and audits."""
    if loss_cfg.uses_recognizer and recognizer is None:
        raise ConfigurationError(f"{loss_cfg.variant} training needs a frozen recognizer")
    if recognizer is not None and any(p.requires_grad for p in recognizer.parameters()):
        raise ConfigurationError("recognizer must be frozen before codec training")
    params: list[Parameter] = codec.parameters() + (aux.parameters() if aux is not None else [])
    opt = Adam(params, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    noise_rng = np.random.default_rng([train_cfg.seed, 1])
    n = len(data.train)
    bs = train_cfg.batch_size
    rows, audits = [], []
    step = 0
    final_val = None
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        order = np.random.default_rng([train_cfg.seed, 2, epoch]).permutation(n)
        sums = {"R_bpp": 0.0, "D_image": 0.0, "D_task": 0.0, "D_aux": 0.0, "total": 0.0}
        n_batches = 0
        for s in range(0, n - bs + 1, bs):
            idx = np.sort(order[s:s + bs])
            batch = data.train.subset(idx)
            try:
                graph = compute_loss(codec, batch, loss_cfg, recognizer=recognizer, aux=aux, rng=noise_rng,
                                     training=True, labels=_slice_labels(data.train_labels, idx))
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: first non-finite tensor from {exc.op} "
                                       f"with shape {exc.shape}") from exc
            ad.zero_grads(params)
            audit_now = graph.aux_term is not None and (
                train_cfg.debug or (train_cfg.audit_every > 0 and step % train_cfg.audit_every == 0))
            if audit_now:
                audits.append(audit_aux_routing(graph, codec, loss_cfg.position, step))
                ad.backward(graph.main)
            else:
                ad.backward(graph.total)
            if recognizer is not None and (train_cfg.debug or audit_now):
                leaked = [p.name for p in recognizer.parameters() if p.grad is not None]
                if leaked:
                    raise RoutingViolation(f"gradient reached frozen recognizer parameters: {leaked[:3]}")
            opt.step(params, lr, {"entropy_model": train_cfg.entropy_lr_mult})
            for k in sums:
                sums[k] += getattr(graph.terms, k)
            n_batches += 1
            step += 1
        final_val, metric = validate(codec, data, loss_cfg, recognizer)
        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        row["val_total"] = final_val.total
        row["val_task_metric"] = metric
        rows.append(row)
        if log is not None:
            log(f"[{loss_cfg.variant}/{loss_cfg.position} lam={loss_cfg.lam}] epoch {epoch} "
                f"train {row['total']:.4f} val {row['val_total']:.4f} bpp {final_val.R_bpp:.4f} metric {metric:.4f}")
    if log_path is not None:
        write_log_csv(log_path, rows)
    return TrainResult(rows, audits, final_val, step)


def write_log_csv(path: str, rows: list) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k != "epoch" else r[k]) for k in LOG_COLUMNS})


def read_log_csv(path: str) -> list:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def make_aux_branch(position: str, codec, recognizer, task: str, seed: int = 0, width: int = 24,
                    aux_task_tap: str = "stage2") -> AuxiliaryBranch:
    from .task import aux_input_shape

    return AuxiliaryBranch(position, task, aux_input_shape(position, codec, recognizer, aux_task_tap), width, seed)


def ablate_positions(make_codec, data: TaskData, loss_cfg: LossConfig, train_cfg: TrainConfig,
                     recognizer: RecognitionModel, seeds=(0, 1, 2), out_dir: str | None = None,
                     aux_width: int = 24, log=None) -> dict:
    """Train once per (position, seed) with everything else fixed; compare final validation loss.

    ``make_codec()`` must return a fresh codec in the common starting state.
    The comparison uses the main objective, which excludes the auxiliary term.
    """
    results: dict[str, list[float]] = {}
    for position in ("none", "AuxEnc", "AuxDec", "AuxTask"):
        finals = []
        for seed in seeds:
            codec = make_codec()
            cfg = LossConfig(**{**asdict(loss_cfg), "position": position})
            aux = None
            if position != "none":
                aux = make_aux_branch(position, codec, recognizer, cfg.task, seed, aux_width, cfg.aux_task_tap)
            tcfg = TrainConfig(**{**asdict(train_cfg), "seed": seed})
            path = os.path.join(out_dir, f"{position}_seed{seed}.csv") if out_dir else None
            res = train(codec, data, cfg, tcfg, recognizer=recognizer, aux=aux, log_path=path, log=log)
            finals.append(res.final_val_total)
        results[position] = finals
    medians = {k: float(np.median(v)) for k, v in results.items()}
    best_aux = min(("AuxEnc", "AuxDec", "AuxTask"), key=lambda k: medians[k])
    return {"finals": results, "medians": medians,
            "aux_enc_best": medians["AuxEnc"] <= min(medians["AuxDec"], medians["AuxTask"]),
            "best_position": best_aux}
