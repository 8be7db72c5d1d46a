"""Synthetic shape tasks, the frozen recognition model and the auxiliary branch."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LEAK, Conv2d, ConvTranspose2d, Module, ResBlock

IMAGE_SIZE = 64
N_SEG_CLASSES = 4  # 0 background, 1 circle, 2 square, 3 triangle
N_SHAPES = 3
TASKS = ("segmentation", "presence")
POSITIONS = ("AuxEnc", "AuxDec", "AuxTask")


class PretrainingFailed(RuntimeError):
    def __init__(self, metrics: dict):
        super().__init__(f"recognizer quality gate unmet: {metrics}")
        self.metrics = metrics


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data


@dataclass
class SyntheticSample:
    image: np.ndarray  # float32 [3, 64, 64] in [0, 1]
    seg_mask: np.ndarray  # int64 [64, 64]
    presence: np.ndarray  # int8 [3]


def _value_noise(rng: np.random.Generator, cells: int, size: int) -> np.ndarray:
    """Bilinearly upsampled random lattice, ``[3, size, size]`` in [0, 1]."""
    grid = rng.uniform(0.0, 1.0, size=(3, cells + 1, cells + 1))
    t = np.linspace(0.0, cells, size, endpoint=False)
    i0 = np.floor(t).astype(int)
    f = t - i0
    rows = grid[:, i0, :] * (1 - f)[None, :, None] + grid[:, i0 + 1, :] * f[None, :, None]
    return rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]


def _shape_mask(kind: int, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == 1:
        return dx * dx + dy * dy <= r * r
    if kind == 2:
        half = 0.8 * r
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    # upright equilateral triangle inscribed in radius r
    angles = np.deg2rad([-90.0, 30.0, 150.0])
    vx, vy = r * np.cos(angles), r * np.sin(angles)
    inside = np.ones((size, size), dtype=bool)
    for a in range(3):
        b = (a + 1) % 3
        cross = (vx[b] - vx[a]) * (dy - vy[a]) - (vy[b] - vy[a]) * (dx - vx[a])
        inside &= cross >= 0
    return inside


def generate_sample(dataset_seed: int, index: int, size: int = IMAGE_SIZE,
                    p_present: float = 0.6) -> SyntheticSample:
    """0-3 non-overlapping shapes on a value-noise background; pure in (seed, index)."""
    rng = np.random.default_rng([int(dataset_seed), int(index)])
    base = rng.uniform(0.25, 0.75, size=3)
    bg = base[:, None, None] + 0.16 * (_value_noise(rng, 4, size) - 0.5) + 0.08 * (_value_noise(rng, 10, size) - 0.5)
    image = bg
    seg = np.zeros((size, size), dtype=np.int64)
    presence = np.zeros(N_SHAPES, dtype=np.int8)
    placed: list[tuple[float, float, float]] = []
    wanted = [k for k in (1, 2, 3) if rng.uniform() < p_present]
    rng.shuffle(wanted)
    for kind in wanted:
        r = rng.uniform(8.0, 13.0)
        for _ in range(40):
            cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
            if all(math.hypot(cy - py, cx - px) > r + pr + 2 for py, px, pr in placed):
                break
        else:
            continue
        color = rng.uniform(0.0, 1.0, size=3)
        while np.linalg.norm(color - base) < 0.45:
            color = rng.uniform(0.0, 1.0, size=3)
        m = _shape_mask(kind, cy, cx, r, size)
        image = np.where(m[None], color[:, None, None], image)
        seg[m] = kind
        presence[kind - 1] = 1
        placed.append((cy, cx, r))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SyntheticSample(image, seg, presence)


@dataclass
class Batch:
    x: np.ndarray  # [N, 3, 64, 64] float32
    seg: np.ndarray  # [N, 64, 64] int64
    presence: np.ndarray  # [N, 3] int8

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.x[idx], self.seg[idx], self.presence[idx])


def make_batch(dataset_seed: int, indices) -> Batch:
    samples = [generate_sample(dataset_seed, i) for i in indices]
    return Batch(np.stack([s.image for s in samples]),
                 np.stack([s.seg_mask for s in samples]),
                 np.stack([s.presence for s in samples]))


# ---------------------------------------------------------------------------
# recognition model


@dataclass
class RecognizerConfig:
    widths: tuple[int, int, int, int] = (16, 32, 48, 64)
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class RecognitionModel(Module):
    """Small U-Net style segmenter with a global-pool presence head.

    Feature taps ``stage1``..``stage4`` sit after each encoder stage at
    resolutions 64, 32, 16 and 8.
    """

    tap_names = ("stage1", "stage2", "stage3", "stage4")

    def __init__(self, cfg: RecognizerConfig | None = None):
        cfg = cfg or RecognizerConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        w1, w2, w3, w4 = cfg.widths
        g = "recognizer"
        self.s1 = [Conv2d(3, w1, 3, rng, g)]
        self.s2 = [Conv2d(w1, w2, 3, rng, g, stride=2), Conv2d(w2, w2, 3, rng, g)]
        self.s3 = [Conv2d(w2, w3, 3, rng, g, stride=2), Conv2d(w3, w3, 3, rng, g)]
        self.s4 = [Conv2d(w3, w4, 3, rng, g, stride=2), Conv2d(w4, w4, 3, rng, g)]
        self.presence_head = Conv2d(w4, N_SHAPES, 1, rng, g)
        self.up3 = ConvTranspose2d(w4, w3, rng, g)
        self.fuse3 = Conv2d(w3, w3, 3, rng, g)
        self.up2 = ConvTranspose2d(w3, w2, rng, g)
        self.fuse2 = Conv2d(w2, w2, 3, rng, g)
        self.up1 = ConvTranspose2d(w2, w1, rng, g)
        self.seg_head = Conv2d(w1, N_SEG_CLASSES, 3, rng, g)

    def tap_shape(self, name: str) -> tuple[int, int, int]:
        i = self.tap_names.index(name)
        return (self.cfg.widths[i], IMAGE_SIZE >> i, IMAGE_SIZE >> i)

    @staticmethod
    def _stage(layers, h):
        for conv in layers:
            h = ad.leaky_relu(conv(h), LEAK)
        return h

    def __call__(self, x: Tensor) -> dict:
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ad.ShapeError(f"recognizer expects [N, 3, {IMAGE_SIZE}, {IMAGE_SIZE}], got {x.shape}")
        f1 = self._stage(self.s1, x)
        f2 = self._stage(self.s2, f1)
        f3 = self._stage(self.s3, f2)
        f4 = self._stage(self.s4, f3)
        pooled = ad.mean(f4, axis=(2, 3), keepdims=True)
        presence = ad.reshape(self.presence_head(pooled), (x.shape[0], N_SHAPES))
        u = ad.leaky_relu(self.up3(f4), LEAK) + f3
        u = ad.leaky_relu(self.fuse3(u), LEAK)
        u = ad.leaky_relu(self.up2(u), LEAK) + f2
        u = ad.leaky_relu(self.fuse2(u), LEAK)
        u = ad.leaky_relu(self.up1(u), LEAK) + f1
        seg = self.seg_head(u)
        return {"seg": seg, "presence": presence,
                "taps": {"stage1": f1, "stage2": f2, "stage3": f3, "stage4": f4}}

    def trunk_to(self, x: Tensor, tap: str) -> Tensor:
        """Run only the backbone stages up to and including ``tap``."""
        h = ad.as_tensor(x)
        for name, layers in zip(self.tap_names, (self.s1, self.s2, self.s3, self.s4)):
            h = self._stage(layers, h)
            if name == tap:
                return h
        raise KeyError(f"unknown tap {tap!r}")


def recognize(model: RecognitionModel, x) -> dict:
    return model(x)


def teacher_labels(model: RecognitionModel, x) -> dict:
    """Argmax labels of the recognizer on the original images; gradient-free."""
    with ad.no_grad():
        out = model(ad.detach(ad.as_tensor(x)))
    return {"seg": out["seg"].data.argmax(axis=1).astype(np.int64),
            "presence": (out["presence"].data > 0).astype(np.int8)}


def task_loss(out: dict, labels: dict, task: str) -> Tensor:
    """Concrete task loss E for the chosen task."""
    if task == "segmentation":
        return ad.softmax_cross_entropy(out["seg"], labels["seg"])
    if task == "presence":
        return ad.bce_with_logits(out["presence"], labels["presence"])
    raise ConfigurationError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# auxiliary branch


class AuxiliaryBranch(Module):
    """Lightweight residual head attached at one of three positions.

    AuxEnc reads the quantized latent (upsampling trunk), AuxDec reads the
    decoder's penultimate activation (downsampling first block) and AuxTask
    reads a mid-stage recognizer tap (head only).  All trunks hand a
    16x16 (or 32x32 for AuxTask) map to the task head.
    """

    def __init__(self, position: str, task: str, in_shape: tuple[int, int, int],
                 width: int = 24, seed: int = 0):
        if position not in POSITIONS:
            raise ConfigurationError(f"unknown aux position {position!r}")
        if task not in TASKS:
            raise ConfigurationError(f"unknown task {task!r}")
        self.position, self.task, self.in_shape, self.width = position, task, tuple(in_shape), width
        self.calls = 0
        rng = np.random.default_rng(seed)
        g = "aux_branch"
        cin, res, _ = in_shape
        if position == "AuxEnc":
            self.trunk = [ResBlock(cin, width, rng, g, "up"), ResBlock(width, width, rng, g)]
            res *= 2
        elif position == "AuxDec":
            self.trunk = [ResBlock(cin, width, rng, g, "down"), ResBlock(width, width, rng, g)]
            res //= 2
        else:
            self.trunk = []
        head_in = width if self.trunk else cin
        self.head_conv = Conv2d(head_in, width, 3, rng, g)
        if task == "segmentation":
            n_up = int(round(math.log2(IMAGE_SIZE / res)))
            if IMAGE_SIZE != res << n_up:
                raise ConfigurationError(f"tap resolution {in_shape[1]} cannot reach {IMAGE_SIZE}")
            chans = [width] + [max(8, width // (2 ** (i + 1))) for i in range(n_up)]
            self.ups = [Conv2d(chans[i], chans[i + 1], 3, rng, g) for i in range(n_up)]
            self.classifier = Conv2d(chans[-1], N_SEG_CLASSES, 1, rng, g)
        else:
            self.ups = []
            self.classifier = Conv2d(width, N_SHAPES, 1, rng, g)

    def __call__(self, tap: Tensor) -> Tensor:
        tap = ad.as_tensor(tap)
        if tap.shape[1:] != self.in_shape:
            raise ConfigurationError(
                f"{self.position} branch expects tap shape {self.in_shape}, got {tap.shape[1:]}")
        self.calls += 1
        h = tap
        for block in self.trunk:
            h = block(h)
        h = ad.leaky_relu(self.head_conv(h), LEAK)
        if self.task == "presence":
            pooled = ad.mean(h, axis=(2, 3), keepdims=True)
            return ad.reshape(self.classifier(pooled), (tap.shape[0], N_SHAPES))
        for conv in self.ups:
            h = ad.leaky_relu(conv(ad.upsample2x(h)), LEAK)
        return self.classifier(h)

    def forward_output(self, tap: Tensor) -> dict:
        key = "seg" if self.task == "segmentation" else "presence"
        return {key: self(tap)}


def aux_forward(branch: AuxiliaryBranch, tap: Tensor) -> Tensor:
    return branch(tap)


def aux_input_shape(position: str, codec, recognizer: RecognitionModel, aux_task_tap: str = "stage2") -> tuple:
    lat = IMAGE_SIZE // codec.downsample_factor
    if position == "AuxEnc":
        return (codec.latent_channels, lat, lat)
    if position == "AuxDec":
        return (codec.penultimate_channels, IMAGE_SIZE // 2, IMAGE_SIZE // 2)
    if position == "AuxTask":
        return recognizer.tap_shape(aux_task_tap)
    raise ConfigurationError(f"unknown aux position {position!r}")


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainReport:
    miou: float
    presence_accuracy: float
    steps: int
    final_loss: float
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"miou": self.miou, "presence_accuracy": self.presence_accuracy,
                "steps": self.steps, "final_loss": self.final_loss}


def evaluate_recognizer(model: RecognitionModel, batch: Batch, chunk: int = 32) -> dict:
    from .metrics import miou, presence_accuracy

    seg_pred, pres_pred = [], []
    for s in range(0, len(batch), chunk):
        lab = teacher_labels(model, batch.x[s:s + chunk])
        seg_pred.append(lab["seg"])
        pres_pred.append(lab["presence"])
    seg_pred = np.concatenate(seg_pred)
    pres_pred = np.concatenate(pres_pred)
    return {"miou": miou(seg_pred, batch.seg, N_SEG_CLASSES),
            "presence_accuracy": presence_accuracy(pres_pred, batch.presence)}


def pretrain_recognizer(train_seed: int, n_steps: int, lr: float, *, batch_size: int = 16,
                        heldout_seed: int | None = None, n_heldout: int = 256,
                        cfg: RecognizerConfig | None = None, min_miou: float = 0.85,
                        min_presence_acc: float = 0.95, log=None) -> tuple[RecognitionModel, PretrainReport]:
    """Train the recognizer on fresh synthetic samples, check the quality gate, freeze it."""
    from .training import Adam, poly_lr

    model = RecognitionModel(cfg or RecognizerConfig(seed=train_seed))
    params = model.parameters()
    opt = Adam(params)
    history = []
    loss_val = float("nan")
    for step in range(n_steps):
        batch = make_batch(train_seed, range(step * batch_size, (step + 1) * batch_size))
        out = model(Tensor(batch.x))
        loss = ad.softmax_cross_entropy(out["seg"], batch.seg) + ad.bce_with_logits(out["presence"], batch.presence)
        model.zero_grad()
        ad.backward(loss)
        opt.step(params, poly_lr(step, n_steps, lr, power=1.0, start=n_steps // 2))
        loss_val = float(loss.data)
        history.append(loss_val)
        if log is not None and step % 100 == 0:
            log(f"pretrain step {step} loss {loss_val:.4f}")
    heldout = make_batch(train_seed + 7919 if heldout_seed is None else heldout_seed, range(n_heldout))
    metrics = evaluate_recognizer(model, heldout)
    report = PretrainReport(metrics["miou"], metrics["presence_accuracy"], n_steps, loss_val, history)
    model.freeze()
    if metrics["miou"] < min_miou or metrics["presence_accuracy"] < min_presence_acc:
        raise PretrainingFailed(report.to_dict())
    return model, report
