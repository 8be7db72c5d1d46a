"""RD curves, task metrics, BD-rate and report/bit-map emitters."""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import bit_allocation_map, bit_map_diff, to_latent_code
from .coder import build_cdf, rc_decode, rc_encode

BD_METHOD = "pchip-harmonic"
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class NonComparableError(ValueError):
    pass


class BDRateWarning(UserWarning):
    pass


def miou(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> float:
    """Mean IoU over classes present in ``gt`` or ``pred``; absent classes are skipped."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ad.ShapeError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    ious = []
    for c in range(n_classes):
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        if union:
            ious.append(np.count_nonzero(p & g) / union)
    return float(np.mean(ious)) if ious else 1.0


def presence_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ad.ShapeError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    return float(np.mean(pred == gt))


@dataclass
class RDPoint:
    bpp: float
    quality: float
    label: str = ""

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")


@dataclass
class RDCurve:
    points: list
    label: str = ""

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)
        bpps = [p.bpp for p in self.points]
        if len(set(bpps)) != len(bpps):
            raise ValueError("RD curve bpp values must be distinct")

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def quality(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])

    @classmethod
    def from_arrays(cls, bpp, quality, label: str = "") -> "RDCurve":
        return cls([RDPoint(float(b), float(q), label) for b, q in zip(bpp, quality)], label)


# ---------------------------------------------------------------------------
# monotone piecewise-cubic interpolation


def _edge_slope(h0, h1, d0, d1):
    s = ((2 * h0 + h1) * d0 - h0 * d1) / (h0 + h1)
    if np.sign(s) != np.sign(d0):
        return 0.0
    if np.sign(d0) != np.sign(d1) and abs(s) > abs(3 * d0):
        return 3 * d0
    return s


def pchip_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Fritsch-Carlson derivatives with weighted harmonic-mean interior slopes."""
    h = np.diff(x)
    delta = np.diff(y) / h
    n = x.size
    if n == 2:
        return np.array([delta[0], delta[0]])
    d = np.zeros(n)
    for k in range(1, n - 1):
        if delta[k - 1] * delta[k] > 0:
            w1 = 2 * h[k] + h[k - 1]
            w2 = h[k] + 2 * h[k - 1]
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k])
    d[0] = _edge_slope(h[0], h[1], delta[0], delta[1])
    d[-1] = _edge_slope(h[-1], h[-2], delta[-1], delta[-2])
    return d


def pchip_eval(x: np.ndarray, y: np.ndarray, xq: np.ndarray) -> np.ndarray:
    x, y, xq = (np.asarray(a, np.float64) for a in (x, y, xq))
    d = pchip_slopes(x, y)
    k = np.clip(np.searchsorted(x, xq, side="right") - 1, 0, x.size - 2)
    h = x[k + 1] - x[k]
    t = (xq - x[k]) / h
    t2, t3 = t * t, t * t * t
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + t
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    return h00 * y[k] + h10 * h * d[k] + h01 * y[k + 1] + h11 * h * d[k + 1]


def _isotonic(y: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators fit of a non-decreasing sequence."""
    blocks = [[float(v), 1] for v in y]
    out: list = []
    for b in blocks:
        out.append(b)
        while len(out) > 1 and out[-2][0] > out[-1][0]:
            v2, n2 = out.pop()
            v1, n1 = out.pop()
            out.append([(v1 * n1 + v2 * n2) / (n1 + n2), n1 + n2])
    return np.concatenate([[v] * n for v, n in out])


def _log_rate_knots(curve: RDCurve) -> tuple[np.ndarray, np.ndarray]:
    """Quality knots (strictly increasing) and log-rate values, projected to monotone if needed."""
    q = curve.quality.astype(np.float64)
    lr = np.log(curve.bpp.astype(np.float64))
    if np.any(np.diff(q) <= 0):
        warnings.warn(f"RD curve {curve.label!r} is not monotone in quality; using its isotonic projection",
                      BDRateWarning, stacklevel=3)
        q = _isotonic(q)
        uq = np.unique(q)
        lr = np.array([lr[q == v].mean() for v in uq])
        q = uq
    return q, lr


def bd_rate(anchor: RDCurve, test: RDCurve, n_samples: int = 1000) -> float:
    """Average rate difference (percent) of ``test`` vs ``anchor`` at equal quality.

    Negative means ``test`` needs fewer bits.
    """
    for c in (anchor, test):
        if len(c.points) < 4:
            raise ValueError(f"curve {c.label!r} has {len(c.points)} points; need at least 4")
    qa, la = _log_rate_knots(anchor)
    qt, lt = _log_rate_knots(test)
    if qa.size < 2 or qt.size < 2:
        raise NonComparableError("curve collapses to a single quality level")
    lo, hi = max(qa[0], qt[0]), min(qa[-1], qt[-1])
    if not hi > lo:
        raise NonComparableError(f"no quality overlap: [{qa[0]}, {qa[-1]}] vs [{qt[0]}, {qt[-1]}]")
    grid = np.linspace(lo, hi, n_samples)
    diff = pchip_eval(qt, lt, grid) - pchip_eval(qa, la, grid)
    mean_diff = _trapezoid(diff, grid) / (hi - lo)
    return float((math.exp(mean_diff) - 1.0) * 100.0)


def bd_rate_matrix(curves: dict) -> dict:
    labels = list(curves)
    out = {}
    for a in labels:
        for b in labels:
            try:
                out[(a, b)] = 0.0 if a == b else bd_rate(curves[a], curves[b])
            except NonComparableError:
                out[(a, b)] = float("nan")
    return out


def emit_rd_report(curves: dict, path: str) -> dict:
    """Write all points to ``path`` and the pairwise BD-rate matrix next to it."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "bpp", "quality", "point_label"])
        for name, curve in curves.items():
            for p in curve.points:
                w.writerow([name, repr(float(p.bpp)), repr(float(p.quality)), p.label])
    matrix = bd_rate_matrix(curves)
    with open(_matrix_path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        names = list(curves)
        w.writerow([f"anchor\\test ({BD_METHOD})"] + names)
        for a in names:
            w.writerow([a] + [repr(matrix[(a, b)]) for b in names])
    return matrix


def _matrix_path(path: str) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}_bdrate{ext or '.csv'}"


def load_rd_report(path: str) -> dict:
    pts: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pts.setdefault(row["curve"], []).append(RDPoint(float(row["bpp"]), float(row["quality"]), row["point_label"]))
    return {k: RDCurve(v, k) for k, v in pts.items()}


# ---------------------------------------------------------------------------
# bit maps as 16-bit PGM


def write_pgm16(path: str, pixels: np.ndarray, comments=()) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError("PGM expects a 2-d array")
    h, w = pixels.shape
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    head = "P5\n" + "".join(f"# {c}\n" for c in comments) + f"{w} {h}\n65535\n"
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii"))
        fh.write(pixels.astype(">u2").tobytes())


def read_pgm16(path: str) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, comments, pos = [], {}, 0
    while len(tokens) < 4:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition(" ")
            comments[key] = val
        else:
            tokens.extend(line.split())
    if tokens[0] != "P5" or int(tokens[3]) != 65535:
        raise ValueError("not a 16-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    pix = np.frombuffer(data[pos:pos + 2 * w * h], dtype=">u2").reshape(h, w).astype(np.int64)
    return pix, comments


def bitmap_to_pgm(bits: np.ndarray) -> tuple[np.ndarray, float]:
    """Normalize an absolute bit map by its max; returns pixels and bits-per-level scale."""
    bits = np.asarray(bits, np.float64)
    peak = float(bits.max()) if bits.size else 0.0
    if peak <= 0:
        return np.zeros(bits.shape, np.uint16), 0.0
    return np.round(bits / peak * 65535).astype(np.uint16), peak / 65535


def diffmap_to_pgm(diff: np.ndarray) -> tuple[np.ndarray, float]:
    """Signed map to [0, 65535] with 32768 meaning zero."""
    diff = np.asarray(diff, np.float64)
    peak = float(np.abs(diff).max()) if diff.size else 0.0
    if peak <= 0:
        return np.full(diff.shape, 32768, np.uint16), 0.0
    return (32768 + np.round(diff / peak * 32767)).astype(np.uint16), peak / 32767


def emit_bitmap(latent, entropy, path: str) -> np.ndarray:
    bits = bit_allocation_map(latent, entropy)
    pix, scale = bitmap_to_pgm(bits)
    write_pgm16(path, pix, [f"scale {scale!r}", f"total_bits {float(bits.sum())!r}", f"digest {latent.model_digest}"])
    return bits


def emit_bitmap_diff(map_a: np.ndarray, map_b: np.ndarray, path: str) -> np.ndarray:
    diff = bit_map_diff(map_a, map_b)
    pix, scale = diffmap_to_pgm(diff)
    write_pgm16(path, pix, [f"scale {scale!r}", "zero 32768", f"total_bits {float(diff.sum())!r}"])
    return diff


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    bpp: float
    bpp_coded: float
    quality_gt: float
    quality_teacher: float
    task: str
    image_bits: np.ndarray = field(repr=False)
    image_coded_bits: np.ndarray = field(repr=False)
    image_table_bits: np.ndarray = field(repr=False)
    roundtrip_ok: bool = True
    latents: list = field(default_factory=list, repr=False)

    def point(self, label: str = "") -> RDPoint:
        return RDPoint(self.bpp, self.quality_gt, label)

    def to_dict(self) -> dict:
        return {"bpp": self.bpp, "bpp_coded": self.bpp_coded, "quality_gt": self.quality_gt,
                "quality_teacher": self.quality_teacher, "task": self.task, "roundtrip_ok": self.roundtrip_ok}


def encode_latents(codec, x: np.ndarray, chunk: int = 32, transform=None) -> list:
    """Rounded, support-clamped latent codes for a stack of images.

    ``transform(y, idx)`` may rewrite the continuous latent before rounding
    (used by the ROI baseline).
    """
    codes = []
    with ad.no_grad():
        for s in range(0, x.shape[0], chunk):
            y = codec.encode(Tensor(x[s:s + chunk])).data
            for i in range(y.shape[0]):
                yi = y[i] if transform is None else transform(y[i], s + i)
                codes.append(to_latent_code(yi, codec.entropy))
    return codes


def decode_latents(codec, codes: list, chunk: int = 32) -> np.ndarray:
    outs = []
    with ad.no_grad():
        for s in range(0, len(codes), chunk):
            v = np.stack([c.values for c in codes[s:s + chunk]]).astype(np.float32)
            outs.append(codec.decode(Tensor(v)).data)
    return np.concatenate(outs)


def evaluate_codec(codec, recognizer, batch, task: str, *, teacher: dict | None = None,
                   code: bool = True, transform=None, keep_latents: bool = False) -> EvalResult:
    """Rounded-latent evaluation: estimated and (optionally) range-coded bpp plus task quality."""
    from .task import N_SEG_CLASSES, teacher_labels

    n, _, h, w = batch.x.shape
    pixels = h * w
    codes = encode_latents(codec, batch.x, transform=transform)
    est = np.array([bit_allocation_map(c, codec.entropy).sum() for c in codes])
    coded = np.full(n, np.nan)
    table_bits = np.full(n, np.nan)
    ok = True
    if code:
        table = build_cdf(codec.entropy)
        for i, c in enumerate(codes):
            bs = rc_encode(c, table)
            coded[i] = bs.payload_bits
            table_bits[i] = float(table.code_lengths(c.values).sum())
            ok &= bool(np.array_equal(rc_decode(bs, table).values, c.values))
    x_hat = decode_latents(codec, codes)
    q_gt = q_teacher = float("nan")
    if recognizer is not None:
        if teacher is None:
            teacher = {k: np.concatenate([teacher_labels(recognizer, batch.x[s:s + 32])[k]
                                          for s in range(0, n, 32)]) for k in ("seg", "presence")}
        pred = {k: np.concatenate([teacher_labels(recognizer, x_hat[s:s + 32])[k] for s in range(0, n, 32)])
                for k in ("seg", "presence")}
        if task == "segmentation":
            q_gt = miou(pred["seg"], batch.seg, N_SEG_CLASSES)
            q_teacher = miou(pred["seg"], teacher["seg"], N_SEG_CLASSES)
        else:
            q_gt = presence_accuracy(pred["presence"], batch.presence)
            q_teacher = presence_accuracy(pred["presence"], teacher["presence"])
    return EvalResult(float(est.mean() / pixels), float(np.nanmean(coded) / pixels) if code else float("nan"),
                      q_gt, q_teacher, task, est, coded, table_bits, ok, codes if keep_latents else [])
