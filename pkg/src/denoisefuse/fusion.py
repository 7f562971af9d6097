"""Closed-form merging of linear denoisers into the affine layers they precede.

A block computing ``y = W x + b`` whose input is first passed through a reverse
step ``x -> (x - k * W_D x) / sqrt(a_t) + scale * z`` collapses into a single
affine map ``y = W' x + b'``. Two algebras are available:

``derivation_consistent``
    ``W' = W / sqrt(a_t) - c1(t) W W_D``; exact identity with the explicit path.
``paper_literal``
    ``W' = W - c1(t) W W_D``, ``b' = W c2(t) z + b``; drops the ``1/sqrt(a_t)``
    gain, so it matches the explicit path only in the ``beta -> 0`` limit.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .backbone import Block, ToyBackbone, backbone_header, blocks_from_arrays, param_count
from .denoiser import DenoiseLayer, denoise_step, layer_timesteps
from .exceptions import CorruptFileError, ShapeError
from .numerics import Rng, matmul
from .schedule import NoiseSchedule, c1, c2, noise_scale

ALGEBRAS = ("paper_literal", "derivation_consistent")
Z_POLICIES = ("zero", "sampled_once")


@dataclass(frozen=True)
class FusionMode:
    algebra: str = "derivation_consistent"
    z_policy: str = "zero"
    noise_scale: str = "sigma"
    steps_per_layer: int = 1

    def __post_init__(self):
        if self.algebra not in ALGEBRAS:
            raise ValueError(f"algebra must be one of {ALGEBRAS}, got {self.algebra!r}")
        if self.z_policy not in Z_POLICIES:
            raise ValueError(f"z_policy must be one of {Z_POLICIES}, got {self.z_policy!r}")
        if self.noise_scale not in ("c2", "sigma"):
            raise ValueError(f"noise_scale must be 'c2' or 'sigma', got {self.noise_scale!r}")
        if self.steps_per_layer not in (1, 2):
            raise ValueError(f"steps_per_layer must be 1 or 2, got {self.steps_per_layer}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FusedModel(ToyBackbone):
    """A backbone whose blocks carry fused weights.

    ``noise`` holds the per-block draw baked into the biases (``None`` when
    ``z_policy`` is ``zero``); it is provenance, not an inference parameter.
    """

    provenance: dict = field(default_factory=dict, compare=False)
    noise: tuple | None = field(default=None, compare=False)


def _check_operands(W, W_D, z):
    W = np.asarray(W, dtype=np.float64)
    W_D = np.asarray(W_D, dtype=np.float64)
    if W_D.ndim != 2 or W_D.shape[0] != W_D.shape[1] or W.shape[1] != W_D.shape[0]:
        raise ShapeError(f"cannot fuse W {W.shape} with W_D {W_D.shape}")
    if z is not None:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (W_D.shape[1],):
            raise ShapeError(f"z shape {z.shape} does not match W_D {W_D.shape}")
    return W, W_D, z


def fuse_one_step(W, b, W_D, t: int, s: NoiseSchedule, mode: FusionMode = FusionMode(),
                  z=None) -> tuple[np.ndarray, np.ndarray]:
    W, W_D, z = _check_operands(W, W_D, z)
    b = np.asarray(b, dtype=np.float64)
    if mode.z_policy == "zero":
        z = None
    k1 = c1(s, t)
    WWD = matmul(W, W_D)
    if mode.algebra == "paper_literal":
        W_new = W - k1 * WWD
        b_new = b if z is None else matmul(W, c2(s, t) * z) + b
    else:
        W_new = W / math.sqrt(s.a(t)) - k1 * WWD
        b_new = b if z is None else b + noise_scale(s, t, mode.noise_scale) * matmul(W, z)
    return W_new, np.array(b_new, dtype=np.float64)


def fuse_two_step(W, b, W_D, t: int, s: NoiseSchedule, mode: FusionMode = FusionMode(),
                  z=None) -> tuple[np.ndarray, np.ndarray]:
    """Fold reverse steps ``t`` and ``t - 1`` (same predictor, same ``z``) into the affine map."""
    if t < 2:
        raise ValueError(f"two-step fusion needs t >= 2, got {t}")
    W, W_D, z = _check_operands(W, W_D, z)
    b = np.asarray(b, dtype=np.float64)
    if mode.z_policy == "zero":
        z = None
    a_t, a_p = s.a(t), s.a(t - 1)
    k_t, k_p = c1(s, t), c1(s, t - 1)
    WWD = matmul(W, W_D)
    if mode.algebra == "paper_literal":
        WWDWD = matmul(WWD, W_D)
        W_new = (W / math.sqrt(a_t) - (k_t + k_p) * WWD
                 + math.sqrt(a_t) * k_p * k_t * WWDWD) / math.sqrt(a_p)
        if z is None:
            return W_new, b.copy()
        noise = (c2(s, t) * W + math.sqrt(a_t) * c2(s, t - 1) * W
                 - math.sqrt(a_t) * k_p * c2(s, t) * WWD) / math.sqrt(a_p)
        return W_new, matmul(noise, z) + b
    eye = np.eye(W_D.shape[0])
    step_t = eye / math.sqrt(a_t) - k_t * W_D
    step_p = eye / math.sqrt(a_p) - k_p * W_D
    W_new = matmul(W, matmul(step_p, step_t))
    if z is None:
        return W_new, b.copy()
    shift = (noise_scale(s, t, mode.noise_scale) * matmul(step_p, z)
             + noise_scale(s, t - 1, mode.noise_scale) * z)
    return W_new, b + matmul(W, shift)


def _check_pairing(bb: ToyBackbone, ds, mode: FusionMode) -> list[int]:
    if len(ds) != bb.N:
        raise ShapeError(f"{len(ds)} denoisers for a backbone with {bb.N} blocks")
    for k, (blk, d) in enumerate(zip(bb.blocks, ds)):
        if d.dim != blk.d_in:
            raise ShapeError(f"block {k} input dim {blk.d_in} but denoiser is {d.dim}x{d.dim}")
    return layer_timesteps(bb.N, mode.steps_per_layer)


def layer_noise(bb: ToyBackbone, rng: Rng | None, mode: FusionMode):
    """One standard-normal draw per block (``None`` under ``z_policy='zero'``)."""
    if mode.z_policy == "zero":
        return None
    if rng is None:
        raise ValueError("z_policy 'sampled_once' needs an rng")
    return tuple(r.standard_normal(blk.d_in) for r, blk in zip(rng.split(bb.N), bb.blocks))


def fuse_model(bb: ToyBackbone, ds, s: NoiseSchedule, mode: FusionMode = FusionMode(),
               rng: Rng | None = None) -> FusedModel:
    timesteps = _check_pairing(bb, ds, mode)
    if max(timesteps) > s.T:
        raise ValueError(f"fusion needs timesteps up to {max(timesteps)}, schedule has T={s.T}")
    noise = layer_noise(bb, rng, mode)
    fuse = fuse_one_step if mode.steps_per_layer == 1 else fuse_two_step
    blocks = []
    for k, (blk, d, t) in enumerate(zip(bb.blocks, ds, timesteps)):
        z = None if noise is None else noise[k]
        W_new, b_new = fuse(blk.W, blk.b, d.W_D, t, s, mode, z)
        blocks.append(Block(W_new, b_new, blk.activation))
    provenance = {
        "backbone": bb.digest(),
        "denoisers": checkpoint.array_digest([d.W_D for d in ds]),
        "mode": mode.to_dict(),
        "schedule": s.params(),
        "seed": None if rng is None else rng.seed,
        "timesteps": timesteps,
    }
    return FusedModel(bb.embed, tuple(blocks), bb.seed, provenance=provenance, noise=noise)


def explicit_forward(bb: ToyBackbone, ds, s: NoiseSchedule, x, mode: FusionMode = FusionMode(),
                     noise=None) -> np.ndarray:
    """Reference path: run each block's reverse step(s) on its input, then the original affine map."""
    timesteps = _check_pairing(bb, ds, mode)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = bb.embed.affine(np.atleast_2d(x))
    for k, (blk, d, t) in enumerate(zip(bb.blocks, ds, timesteps)):
        z = None if noise is None or mode.z_policy == "zero" else noise[k]
        scale_mode = "c2" if mode.algebra == "paper_literal" else mode.noise_scale
        h = denoise_step(h, t, d, s, z, scale_mode)
        if mode.steps_per_layer == 2:
            h = denoise_step(h, t - 1, d, s, z, scale_mode)
        h = blk.activate(blk.affine(h))
    return h[0] if single else h


def verify_equivalence(bb: ToyBackbone, ds, fm: FusedModel, s: NoiseSchedule,
                       mode: FusionMode = FusionMode(), samples: int = 1000, tol: float = 1e-9,
                       seed: int = 0) -> dict:
    """Compare fused and explicit outputs on random inputs.

    ``max_rel_err`` is the largest per-sample ``||fused - explicit|| / ||explicit||``.
    A failed comparison is reported, never raised.
    """
    X = Rng(seed).standard_normal((samples, bb.d_in))
    ref = explicit_forward(bb, ds, s, X, mode, fm.noise)
    out = fm(X)
    diff = out - ref
    abs_err = np.linalg.norm(diff, axis=1)
    ref_norm = np.linalg.norm(ref, axis=1)
    rel_err = np.where(ref_norm > 0, abs_err / np.where(ref_norm > 0, ref_norm, 1.0), abs_err)
    max_abs = float(np.max(np.abs(diff))) if samples else 0.0
    max_rel = float(np.max(rel_err)) if samples else 0.0
    return {
        "mode": mode.to_dict(),
        "samples": int(samples),
        "tol": float(tol),
        "max_abs_err": max_abs,
        "max_rel_err": max_rel,
        "pass": bool(tol > 0 and max_rel <= tol),
    }


def unfused_param_count(bb: ToyBackbone, ds) -> int:
    return param_count(bb) + int(sum(d.W_D.size for d in ds))


def save_fused(fm: FusedModel, path) -> None:
    header = backbone_header(fm, kind="fused")
    header["provenance"] = fm.provenance
    header["n_noise"] = 0 if fm.noise is None else len(fm.noise)
    arrays = fm.arrays() + ([] if fm.noise is None else list(fm.noise))
    checkpoint.write(path, header, arrays)


def load_fused(path) -> FusedModel:
    header, arrays = checkpoint.read(path)
    if header.get("kind") != "fused":
        raise CorruptFileError(f"{path} is not a fused checkpoint (kind={header.get('kind')!r})")
    n_weights = 2 * len(header["dims"])
    n_noise = int(header.get("n_noise", 0))
    if len(arrays) != n_weights + n_noise:
        raise CorruptFileError(f"expected {n_weights + n_noise} blobs, found {len(arrays)}")
    embed, blocks = blocks_from_arrays(header, arrays[:n_weights])
    noise = tuple(a.ravel() for a in arrays[n_weights:]) if n_noise else None
    try:
        return FusedModel(embed, blocks, header.get("seed"), provenance=header.get("provenance", {}),
                          noise=noise)
    except ShapeError as exc:
        raise CorruptFileError(str(exc)) from exc
