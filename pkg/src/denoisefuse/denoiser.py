"""Per-layer linear noise predictors: training, explicit reverse steps and losses.

Block ``k`` (0-based, counted from the input) is bound to timestep
``t = steps_per_layer * (N - k)``: the first block after the embedding
removes the most noise and the last block finishes at ``t = 1``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .backbone import ToyBackbone, forward
from .exceptions import CorruptFileError, DivergenceError, ScheduleError, ShapeError
from .numerics import Rng, as_matrix
from .schedule import NoiseSchedule, c1, forward_noise, noise_scale

FORMAT_VERSION = 1
# an objective this many times above its starting value counts as divergence
BLOWUP_FACTOR = 1e6


def layer_timesteps(n_blocks: int, steps_per_layer: int = 1) -> list[int]:
    if steps_per_layer not in (1, 2):
        raise ValueError(f"steps_per_layer must be 1 or 2, got {steps_per_layer}")
    return [steps_per_layer * (n_blocks - k) for k in range(n_blocks)]


@dataclass(frozen=True)
class DenoiseLayer:
    W_D: np.ndarray
    layer: int
    t: int

    def __post_init__(self):
        W = as_matrix(self.W_D, "W_D").copy()
        if W.shape[0] != W.shape[1]:
            raise ShapeError(f"W_D must be square, got {W.shape}")
        W.setflags(write=False)
        object.__setattr__(self, "W_D", W)

    @property
    def dim(self) -> int:
        return self.W_D.shape[0]

    @classmethod
    def zeros(cls, dim: int, layer: int = 0, t: int = 1) -> "DenoiseLayer":
        return cls(np.zeros((dim, dim)), layer, t)


@dataclass(frozen=True)
class TrainConfig:
    """Gradient-descent settings.

    ``lam`` is the weight on the supervised (cross-entropy) term; ``lam == 0``
    trains label-free on the noise-prediction loss alone.
    """

    epochs: int = 120
    lr: float = 4e-4
    batch: int = 64
    seed: int = 0
    lam: float = 0.0
    probe_epochs: int = 200
    probe_lr: float = 0.5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")


@dataclass
class TrainReport:
    curves: list = field(default_factory=list)
    initial_losses: list = field(default_factory=list)
    final_losses: list = field(default_factory=list)
    timesteps: list = field(default_factory=list)
    diverged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _check_dims(d: DenoiseLayer, x: np.ndarray) -> None:
    if x.shape[-1] != d.dim:
        raise ShapeError(f"feature shape {x.shape} incompatible with W_D shape {d.W_D.shape}")


def predict_noise(d: DenoiseLayer, x_t) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    _check_dims(d, x_t)
    return x_t @ d.W_D.T


def loss_p(d: DenoiseLayer, x0, t: int, eps, s: NoiseSchedule) -> float:
    """Squared noise-prediction error; batches return the mean over rows."""
    x_t = forward_noise(s, x0, t, eps)
    r = np.asarray(eps, dtype=np.float64) - predict_noise(d, x_t)
    return float(np.mean(np.sum(r * r, axis=-1)))


def grad_loss_p(d: DenoiseLayer, x0, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    """Analytic gradient of :func:`loss_p` with respect to ``W_D``."""
    x_t = forward_noise(s, x0, t, eps)
    r = predict_noise(d, x_t) - np.asarray(eps, dtype=np.float64)
    if x_t.ndim == 1:
        return 2.0 * np.outer(r, x_t)
    return 2.0 * (r.T @ x_t) / x_t.shape[0]


def denoise_step(x_t, t: int, d: DenoiseLayer, s: NoiseSchedule, z=None,
                 noise_scale_mode: str = "sigma") -> np.ndarray:
    """One reverse step ``x_t -> x_{t-1}`` using ``d`` as the noise predictor."""
    x_t = np.asarray(x_t, dtype=np.float64)
    a_t, ab_t = s.a(t), s.abar(t)
    if ab_t >= 1.0:
        raise ScheduleError(f"degenerate schedule at t={t}")
    out = (x_t - (1.0 - a_t) / math.sqrt(1.0 - ab_t) * predict_noise(d, x_t)) / math.sqrt(a_t)
    if z is not None:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != x_t.shape[-1]:
            raise ShapeError(f"z shape {z.shape} incompatible with x_t shape {x_t.shape}")
        out = out + noise_scale(s, t, noise_scale_mode) * z
    return out


def denoise_chain(x_T, steps: int, d, s: NoiseSchedule, z_policy: str = "zero",
                  rng: Rng | None = None, noise_scale_mode: str = "sigma") -> np.ndarray:
    """Apply reverse steps ``t = steps, ..., 1``.

    ``d`` is one :class:`DenoiseLayer` shared by every step, or a sequence
    where ``d[t - 1]`` serves step ``t``.
    """
    if steps > s.T:
        raise ValueError(f"steps={steps} exceeds schedule length {s.T}")
    if z_policy not in ("zero", "sampled"):
        raise ValueError(f"z_policy must be 'zero' or 'sampled', got {z_policy!r}")
    if z_policy == "sampled" and rng is None:
        raise ValueError("z_policy 'sampled' needs an rng")
    x = np.asarray(x_T, dtype=np.float64)
    for t in range(steps, 0, -1):
        layer = d if isinstance(d, DenoiseLayer) else d[t - 1]
        z = rng.standard_normal(x.shape) if z_policy == "sampled" else None
        x = denoise_step(x, t, layer, s, z, noise_scale_mode)
    return x


def label_argumented_loss(task_loss: float, p_loss: float, lam: float) -> float:
    """``(1 - lam) * task_loss + lam * p_loss``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return (1.0 - lam) * task_loss + lam * p_loss


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def task_loss(d: DenoiseLayer, x0, labels, t: int, s: NoiseSchedule, coef, intercept) -> float:
    """Cross-entropy of a frozen linear probe on the deterministically denoised features."""
    y = denoise_step(np.atleast_2d(x0), t, d, s)
    p = _softmax(y @ coef.T + intercept)
    labels = np.asarray(labels)
    return float(-np.mean(np.log(p[np.arange(len(labels)), labels] + 1e-300)))


def grad_task_loss(d: DenoiseLayer, x0, labels, t: int, s: NoiseSchedule, coef, intercept) -> np.ndarray:
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    y = denoise_step(x0, t, d, s)
    g = _softmax(y @ coef.T + intercept)
    g[np.arange(len(labels)), np.asarray(labels)] -= 1.0
    # dy/dW_D = -c1(t) * x0^T (per row)
    return -c1(s, t) * (g @ coef).T @ x0 / x0.shape[0]


def _fit_layer(X: np.ndarray, t: int, s: NoiseSchedule, cfg: TrainConfig, rng: Rng,
               labels, probe) -> tuple[np.ndarray, list, float, float]:
    n, dim = X.shape
    W = np.zeros((dim, dim))
    train_rng, eval_rng = rng.split(2)
    eval_eps = eval_rng.standard_normal(X.shape)
    supervised = cfg.lam > 0
    w_p = 1.0 - cfg.lam

    def objective(W_cur):
        layer = DenoiseLayer(W_cur, 0, t)
        value = w_p * loss_p(layer, X, t, eval_eps, s)
        if supervised:
            value += cfg.lam * task_loss(layer, X, labels, t, s, *probe)
        return value

    initial = objective(W)
    curve = []
    for _ in range(cfg.epochs):
        order = train_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            xb = X[idx]
            eps = train_rng.standard_normal(xb.shape)
            layer = DenoiseLayer(W, 0, t)
            grad = w_p * grad_loss_p(layer, xb, t, eps, s)
            batch_loss = w_p * loss_p(layer, xb, t, eps, s)
            if supervised:
                yb = labels[idx]
                grad = grad + cfg.lam * grad_task_loss(layer, xb, yb, t, s, *probe)
                batch_loss += cfg.lam * task_loss(layer, xb, yb, t, s, *probe)
            W = W - cfg.lr * grad
            total += batch_loss * len(idx)
            if not np.all(np.isfinite(W)):
                curve.append(float("nan"))
                return W, curve, initial, float("nan")
        epoch_loss = total / n
        curve.append(epoch_loss)
        if not (np.isfinite(epoch_loss) and np.all(np.isfinite(W))):
            return W, curve, initial, float("nan")
    return W, curve, initial, objective(W)


def train_denoisers(bb: ToyBackbone, data, s: NoiseSchedule, cfg: TrainConfig,
                    labels=None, steps_per_layer: int = 1) -> tuple[list[DenoiseLayer], TrainReport]:
    """Fit one linear noise predictor per block on the frozen backbone's block inputs.

    Raises :class:`DivergenceError` (carrying the partial report as ``.report``)
    if any layer's loss becomes non-finite.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("training data must be a non-empty (n, d_in) array")
    timesteps = layer_timesteps(bb.N, steps_per_layer)
    if max(timesteps) > s.T:
        raise ValueError(f"backbone needs timesteps up to {max(timesteps)}, schedule has T={s.T}")
    if cfg.lam > 0:
        if labels is None:
            raise ValueError("lam > 0 requires identity labels")
        labels = np.asarray(labels)
        if labels.shape != (data.shape[0],):
            raise ShapeError(f"labels shape {labels.shape} does not match {data.shape[0]} samples")

    feats = forward(bb, data).inputs
    layer_rngs = Rng(cfg.seed).split(bb.N)
    report = TrainReport(timesteps=list(timesteps))
    layers = []
    for k, (X, t, rng) in enumerate(zip(feats, timesteps, layer_rngs)):
        probe = None
        if cfg.lam > 0:
            from .evalkit import LinearProbe
            clf = LinearProbe(epochs=cfg.probe_epochs, lr=cfg.probe_lr, random_state=cfg.seed).fit(X, labels)
            probe = (clf.coef_, clf.intercept_)
        W, curve, initial, final = _fit_layer(X, t, s, cfg, rng, labels, probe)
        report.curves.append(curve)
        report.initial_losses.append(initial)
        report.final_losses.append(final)
        if not np.isfinite(final) or final > BLOWUP_FACTOR * max(initial, 1e-12):
            report.diverged = True
            err = DivergenceError(f"training diverged at block {k} (t={t})")
            err.report = report
            raise err
        layers.append(DenoiseLayer(W, k, t))
    return layers, report


def save_denoisers(layers, s: NoiseSchedule, path, steps_per_layer: int = 1, extra: dict | None = None) -> None:
    header = {
        "kind": "denoisers",
        "version": FORMAT_VERSION,
        "N": len(layers),
        "dims": [d.dim for d in layers],
        "timesteps": [d.t for d in layers],
        "schedule": s.params(),
        "steps_per_layer": steps_per_layer,
    }
    if extra:
        header.update(extra)
    checkpoint.write(path, header, [d.W_D for d in layers])


def load_denoisers(path) -> tuple[list[DenoiseLayer], NoiseSchedule, dict]:
    header, arrays = checkpoint.read(path)
    if header.get("kind") != "denoisers":
        raise CorruptFileError(f"{path} is not a denoiser checkpoint (kind={header.get('kind')!r})")
    if len(arrays) != header["N"]:
        raise CorruptFileError(f"expected {header['N']} denoisers, found {len(arrays)}")
    try:
        layers = [DenoiseLayer(W, k, t) for k, (W, t) in enumerate(zip(arrays, header["timesteps"]))]
    except ShapeError as exc:
        raise CorruptFileError(str(exc)) from exc
    return layers, NoiseSchedule.from_params(header["schedule"]), header
