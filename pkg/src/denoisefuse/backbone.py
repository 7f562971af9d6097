"""Frozen toy feature extractor: a square input embedding followed by N affine blocks.

``dims = [d0, d1, ..., dN]`` builds an embedding ``d0 -> d0`` and blocks
``d_{k-1} -> d_k`` for ``k = 1..N``. Each block exposes its pre-activation
affine output; the activation (if any) is applied after.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .exceptions import CorruptFileError, ShapeError
from .numerics import Rng, as_matrix, as_vector

ACTIVATIONS = ("none", "relu", "tanh")
FORMAT_VERSION = 1


def _activate(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "none":
        return x
    if activation == "relu":
        return np.maximum(x, 0.0)
    if activation == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {activation!r}")


@dataclass(frozen=True)
class Block:
    W: np.ndarray
    b: np.ndarray
    activation: str = "none"

    def __post_init__(self):
        W = as_matrix(self.W, "W").copy()
        b = as_vector(self.b, "b").copy()
        if W.shape[0] != b.shape[0]:
            raise ShapeError(f"W shape {W.shape} inconsistent with bias shape {b.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    def affine(self, x: np.ndarray) -> np.ndarray:
        # x is (n, d_in); row-vector convention
        return x @ self.W.T + self.b

    def activate(self, y: np.ndarray) -> np.ndarray:
        return _activate(y, self.activation)


@dataclass(frozen=True)
class LayerFeatures:
    """Per-block activations of one forward pass.

    ``inputs[k]`` is what block ``k``'s affine layer consumes (the features a
    fused denoiser acts on); ``per_layer[k]`` is block ``k``'s pre-activation output.
    """

    inputs: list
    per_layer: list
    final: np.ndarray


@dataclass(frozen=True)
class ToyBackbone:
    embed: Block
    blocks: tuple
    seed: int | None = None

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if len(blocks) < 1:
            raise ValueError("backbone needs at least one block")
        if self.embed.activation != "none":
            raise ValueError("embedding layer must not carry an activation")
        prev = self.embed.d_out
        for k, blk in enumerate(blocks):
            if blk.d_in != prev:
                raise ShapeError(f"block {k} expects input dim {blk.d_in}, previous stage gives {prev}")
            prev = blk.d_out
        object.__setattr__(self, "blocks", blocks)

    @property
    def N(self) -> int:
        return len(self.blocks)

    @property
    def dims(self) -> list[int]:
        return [self.embed.d_in] + [blk.d_out for blk in self.blocks]

    @property
    def activation(self) -> str:
        return self.blocks[0].activation

    @property
    def d_in(self) -> int:
        return self.embed.d_in

    def layers(self) -> list[Block]:
        return [self.embed, *self.blocks]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers():
            out.extend([layer.W, layer.b])
        return out

    def digest(self) -> str:
        return checkpoint.array_digest(self.arrays())

    def replace_blocks(self, blocks) -> "ToyBackbone":
        return ToyBackbone(self.embed, tuple(blocks), self.seed)

    def forward(self, x) -> LayerFeatures:
        return forward(self, x)

    def __call__(self, x) -> np.ndarray:
        return forward(self, x).final


def make_toy_backbone(seed: int, dims, activation: str = "none") -> ToyBackbone:
    """Random backbone: weights ~ N(0, 1/fan_in), zero biases, deterministic in ``seed``."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"dims must have length >= 2 with entries >= 1, got {dims}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
    rngs = Rng(seed).split(len(dims))
    shapes = [(dims[0], dims[0])] + [(dims[k], dims[k - 1]) for k in range(1, len(dims))]
    layers = []
    for k, ((d_out, d_in), rng) in enumerate(zip(shapes, rngs)):
        W = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        layers.append(Block(W, np.zeros(d_out), "none" if k == 0 else activation))
    return ToyBackbone(layers[0], tuple(layers[1:]), seed=seed)


def forward(bb: ToyBackbone, x) -> LayerFeatures:
    """Run the chain; accepts a single vector or an ``(n, d_in)`` batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != bb.d_in:
        raise ShapeError(f"input shape {x.shape} incompatible with backbone input dim {bb.d_in}")
    h = bb.embed.affine(X)
    inputs, per_layer = [], []
    for blk in bb.blocks:
        inputs.append(h)
        y = blk.affine(h)
        per_layer.append(y)
        h = blk.activate(y)
    if single:
        inputs = [v[0] for v in inputs]
        per_layer = [v[0] for v in per_layer]
        h = h[0]
    return LayerFeatures(inputs, per_layer, h)


def param_count(bb: ToyBackbone) -> int:
    return int(sum(arr.size for arr in bb.arrays()))


def backbone_header(bb: ToyBackbone, kind: str = "backbone") -> dict:
    return {"kind": kind, "version": FORMAT_VERSION, "dims": bb.dims,
            "activation": bb.activation, "seed": bb.seed}


def blocks_from_arrays(header: dict, arrays: list[np.ndarray]) -> tuple[Block, tuple]:
    dims = header["dims"]
    n_layers = len(dims)
    if len(arrays) < 2 * n_layers:
        raise CorruptFileError(f"expected {2 * n_layers} weight blobs, found {len(arrays)}")
    layers = []
    for k in range(n_layers):
        W, b = arrays[2 * k], arrays[2 * k + 1]
        act = "none" if k == 0 else header["activation"]
        try:
            layers.append(Block(W, b.ravel(), act))
        except (ShapeError, ValueError) as exc:
            raise CorruptFileError(f"layer {k}: {exc}") from exc
    return layers[0], tuple(layers[1:])


def save(bb: ToyBackbone, path) -> None:
    checkpoint.write(path, backbone_header(bb), bb.arrays())


def load(path) -> ToyBackbone:
    header, arrays = checkpoint.read(path)
    if header.get("kind") != "backbone":
        raise CorruptFileError(f"{path} is not a backbone checkpoint (kind={header.get('kind')!r})")
    embed, blocks = blocks_from_arrays(header, arrays)
    try:
        return ToyBackbone(embed, blocks, seed=header.get("seed"))
    except ShapeError as exc:
        raise CorruptFileError(str(exc)) from exc
