"""Loss, Adam, window sampling, the BPTT training loop and tracking metrics."""

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .augment import AugmentConfig, augment
from .model import to_normalized, to_pixels

logger = logging.getLogger(__name__)

TOLERANCES = (1, 3, 5, 10)
BETA_FLOOR = 1e-6   # learnable decays are clamped to [BETA_FLOOR, 1]


# ---------------------------------------------------------------- loss

@dataclass
class LossTerms:
    l_pos: float
    l_vel: float
    total: float


def loss(pred, target, variant="combined", weights=None):
    """Position + velocity MSE on normalized coordinates.

    ``pred`` and ``target`` are (T, ..., 2). ``weights`` (T, ...) optionally
    masks frames (1 keep, 0 drop). ``variant="pos"`` trains on L_pos only
    (L_vel is still reported). Returns (LossTerms, dL/dpred).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {target.shape}")
    if variant not in ("combined", "pos"):
        raise ValueError(f"unknown loss variant {variant!r}")
    w = np.ones(pred.shape[:-1]) if weights is None else np.asarray(weights, dtype=np.float64)
    w2 = w[..., None]
    n_pos = max(w.sum() * pred.shape[-1], 1.0)
    err = pred - target
    l_pos = float((w2 * err ** 2).sum() / n_pos)
    g = 2.0 * w2 * err / n_pos
    T = pred.shape[0]
    if T < 2:
        warnings.warn("velocity term needs at least 2 frames; L_vel = 0")
        l_vel = 0.0
    else:
        wv = (w[1:] * w[:-1])[..., None]
        n_vel = max(wv.sum() * pred.shape[-1], 1.0)
        dv = np.diff(err, axis=0)
        l_vel = float((wv * dv ** 2).sum() / n_vel)
        if variant == "combined":
            gd = 2.0 * wv * dv / n_vel
            g[1:] += gd
            g[:-1] -= gd
    total = l_pos + l_vel if variant == "combined" else l_pos
    return LossTerms(l_pos, l_vel, total), g


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    skipped: int = 0


def adam_step(tensors, grads, state, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8,
              clip_norm=0.0, clamp=("lif3.beta",)):
    """In-place Adam update of ``tensors`` (dict name -> array) from ``grads``.

    A step with any non-finite gradient is skipped and counted in
    ``state.skipped``. ``clip_norm`` > 0 rescales the global gradient norm.
    Tensors named in ``clamp`` are clipped to (0, 1] afterwards.
    """
    for name, g in grads.items():
        if g.shape != tensors[name].shape:
            raise ValueError(f"gradient shape {g.shape} != {tensors[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            logger.warning("non-finite gradient in %s; step skipped", name)
            return tensors
    scale = 1.0
    if clip_norm > 0:
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        if norm > clip_norm:
            scale = clip_norm / norm
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = tensors[name]
        g = g * scale if scale != 1.0 else g
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        if name in clamp:
            np.clip(p, BETA_FLOOR, 1.0, out=p)
    return tensors


# ---------------------------------------------------------------- metrics

@dataclass
class MetricReport:
    p_acc: dict
    euclidean: float
    frames_scored: int
    frames_blinked: int

    def row(self):
        out = {"euc": self.euclidean}
        out.update({f"p{p}": v for p, v in self.p_acc.items()})
        return out


def evaluate(pred_px, labels_px, blink=None, tolerances=TOLERANCES):
    """Euclidean distance and P-accuracy over non-blink frames (80 x 60 pixel units).

    With zero scored frames, every figure is 0.0 and ``frames_scored`` is 0.
    """
    pred_px = np.asarray(pred_px, dtype=np.float64).reshape(-1, 2)
    labels_px = np.asarray(labels_px, dtype=np.float64).reshape(-1, 2)
    if pred_px.shape != labels_px.shape:
        raise ValueError("predictions and labels are not aligned")
    blink = np.zeros(len(pred_px), bool) if blink is None else np.asarray(blink, bool).reshape(-1)
    keep = ~blink
    d = np.sqrt(((pred_px[keep] - labels_px[keep]) ** 2).sum(axis=1))
    n = int(d.size)
    if n == 0:
        return MetricReport({p: 0.0 for p in tolerances}, 0.0, 0, int(blink.sum()))
    return MetricReport({p: float(np.count_nonzero(d <= p)) / n for p in tolerances},
                        float(d.mean()), n, int(blink.sum()))


def predict_session(params, session, chunk=1000, state=None):
    """Continuous (never reset) predictions over a whole session, grid pixels."""
    state = M.initial_state(params) if state is None else state
    n = len(session)
    out = np.empty((n, 2))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        pred, state, _ = M.forward_sequence(params, state, session.frames.window(lo, hi - lo, params.dtype),
                                            keep_trace=False)
        out[lo:hi] = to_pixels(pred)
    return out


def evaluate_sessions(params, sessions):
    preds, labs, blinks = [], [], []
    for s in sessions:
        preds.append(predict_session(params, s))
        labs.append(s.labels.xy[:len(s)])
        blinks.append(s.labels.blink[:len(s)])
    return evaluate(np.concatenate(preds), np.concatenate(labs), np.concatenate(blinks))


def center_baseline(sessions):
    """Metrics of always predicting the grid centre."""
    labs = np.concatenate([s.labels.xy[:len(s)] for s in sessions])
    blink = np.concatenate([s.labels.blink[:len(s)] for s in sessions])
    center = np.broadcast_to(np.array([M.GRID_WIDTH / 2, M.GRID_HEIGHT / 2]), labs.shape)
    return evaluate(center, labs, blink)


# ---------------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 40
    window_ms: int = 450
    stride_ms: int = 10
    batch: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "combined"          # or "pos"
    exclude_blinks: bool = False    # drop blink frames from the training loss
    clip_norm: float = 0.0
    windows_per_epoch: int = 0      # 0 = every window

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.window_ms <= 0 or self.stride_ms <= 0 or self.batch <= 0:
            raise ValueError("lr, epochs, window, stride and batch must be positive")
        if self.loss not in ("combined", "pos"):
            raise ValueError(f"unknown loss variant {self.loss!r}")
        if self.windows_per_epoch < 0 or self.clip_norm < 0:
            raise ValueError("windows_per_epoch and clip_norm must be non-negative")


@dataclass
class History:
    records: list = field(default_factory=list)
    initial: MetricReport = None
    best_epoch: int = 0

    COLUMNS = ("epoch", "loss", "l_pos", "l_vel", "val_euc", "val_p1", "val_p3", "val_p5", "val_p10",
               "skipped", "seconds")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r["epoch"]] + [format_float(r[c]) for c in self.COLUMNS[1:-2]]
                           + [r["skipped"], f"{r['seconds']:.1f}"])


def format_float(v, digits=6):
    return f"{v:.{digits}f}"


def window_index(sessions, window, stride):
    """All (session, start) pairs; windows never cross sessions."""
    idx = [(i, int(s)) for i, sess in enumerate(sessions)
           for s in range(0, len(sess) - window + 1, stride)]
    return idx


def _gather(session, start, T, dtype):
    n = len(session)
    frames = session.frames.window(start, T, dtype=dtype)
    rows = np.clip(np.arange(start, start + T), 0, n - 1)
    return frames, session.labels.xy[rows], session.labels.blink[rows]


def make_batch(sessions, picks, T, aug_cfg, rng, dtype=np.float32):
    """Stack augmented windows into (T, B, 2, 60, 80), labels (T, B, 2), blink (T, B)."""
    B = len(picks)
    frames = np.zeros((T, B, *M.FRAME_SHAPE), dtype=dtype)
    labels = np.zeros((T, B, 2))
    blink = np.zeros((T, B), bool)
    for b, (si, start) in enumerate(picks):
        sess = sessions[si]
        win, lab, bl = _gather(sess, start, T, dtype)
        if aug_cfg is not None and aug_cfg.enabled:
            def source(dt, sess=sess, start=start):
                return _gather(sess, start + dt, T, dtype)
            win, lab, bl = augment(win, lab, bl, aug_cfg, rng, source=source)
        frames[:, b] = win
        labels[:, b] = lab
        blink[:, b] = bl
    return frames, labels, blink


def train_step(params, opt, frames, labels, blink, cfg):
    state = M.initial_state(params, batch=frames.shape[1])
    pred, _, trace = M.forward_sequence(params, state, frames)
    weights = (~blink).astype(np.float64) if cfg.exclude_blinks else None
    terms, g = loss(pred, to_normalized(labels), cfg.loss, weights)
    grads = M.backward_sequence(params, trace, g)
    adam_step(params.tensors, grads, opt, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.clip_norm)
    return terms


def train(train_sessions, val_sessions, cfg, model_cfg, aug_cfg=None, params=None, progress=None):
    """Train and return (best params by validation Euclidean distance, History)."""
    if not train_sessions or not val_sessions:
        raise ValueError("need at least one training and one validation session")
    aug_cfg = AugmentConfig(rng_seed=cfg.seed) if aug_cfg is None else aug_cfg
    T = int(cfg.window_ms)
    index = window_index(train_sessions, T, int(cfg.stride_ms))
    if not index:
        raise ValueError(f"no {T} ms window fits in the training sessions")
    if params is None:
        params, _ = M.build(model_cfg)
    opt = AdamState()
    hist = History()
    hist.initial = evaluate_sessions(params, val_sessions)
    best, best_euc = params.copy(), hist.initial.euclidean
    order_rng = np.random.default_rng([cfg.seed, 1])
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        aug_rng = np.random.default_rng([aug_cfg.rng_seed, 2, epoch])
        perm = order_rng.permutation(len(index))
        if cfg.windows_per_epoch:
            perm = perm[:cfg.windows_per_epoch]
        sums = np.zeros(3)
        steps = 0
        for lo in range(0, len(perm), cfg.batch):
            picks = [index[j] for j in perm[lo:lo + cfg.batch]]
            frames, labels, blink = make_batch(train_sessions, picks, T, aug_cfg, aug_rng, params.dtype)
            terms = train_step(params, opt, frames, labels, blink, cfg)
            sums += (terms.total, terms.l_pos, terms.l_vel)
            steps += 1
        rep = evaluate_sessions(params, val_sessions)
        rec = {"epoch": epoch, "loss": sums[0] / steps, "l_pos": sums[1] / steps, "l_vel": sums[2] / steps,
               "val_euc": rep.euclidean, "skipped": opt.skipped, "seconds": time.perf_counter() - t0}
        rec.update({f"val_p{p}": rep.p_acc[p] for p in TOLERANCES})
        hist.records.append(rec)
        if rep.euclidean < best_euc:
            best, best_euc, hist.best_epoch = params.copy(), rep.euclidean, epoch
        logger.info("epoch %d loss %.5f val_euc %.3f p10 %.3f (%.0fs)", epoch, rec["loss"],
                    rep.euclidean, rep.p_acc[10], rec["seconds"])
        if progress is not None:
            progress(rec)
    return best, hist
