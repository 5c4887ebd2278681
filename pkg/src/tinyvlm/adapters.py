"""Low-rank adapters for partial training of the backbones.

LoRA: the wrapped weight behaves as W + (alpha/rank) * A @ B with A small
random and B zero, so a fresh adapter is an exact no-op. DoRA additionally
reparameterizes the combined weight into per-column magnitude times
direction; the magnitude starts at the column norms of W, making the init
an identity up to float rounding. The norm stays in the graph, so gradient
checks are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import VLM, Linear


@dataclass
class AdapterConfig:
    rank: int = 8
    scale_alpha: float = 16.0
    dora: bool = False
    # name fragments selecting which Linears get wrapped
    target: tuple[str, ...] = (".attn.", "connector")

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {self.rank}")


class LowRankAdapter:
    def __init__(self, rng: np.random.Generator, linear: Linear, cfg: AdapterConfig):
        d_in, d_out = linear.w.shape
        if cfg.rank > min(d_in, d_out):
            raise ValueError(
                f"adapter rank {cfg.rank} exceeds weight dims {d_in}x{d_out} "
                f"({linear.prefix})"
            )
        self.cfg = cfg
        self.prefix = f"{linear.prefix}.adapter"
        self.scaling = cfg.scale_alpha / cfg.rank
        self.a = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, cfg.rank)), requires_grad=True
        )
        self.b = Tensor(np.zeros((cfg.rank, d_out)), requires_grad=True)
        self.magnitude: Tensor | None = None
        if cfg.dora:
            col_norms = np.sqrt((linear.w.data**2).sum(axis=0))
            self.magnitude = Tensor(col_norms, requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        out = {f"{self.prefix}.a": self.a, f"{self.prefix}.b": self.b}
        if self.magnitude is not None:
            out[f"{self.prefix}.magnitude"] = self.magnitude
        return out

    def __call__(self, x: Tensor, linear: Linear) -> Tensor:
        if self.magnitude is None:
            y = ag.add(
                ag.matmul(x, linear.w),
                ag.scale(ag.matmul(ag.matmul(x, self.a), self.b), self.scaling),
            )
        else:
            w_plus = ag.add(linear.w, ag.scale(ag.matmul(self.a, self.b), self.scaling))
            inv_norm = ag.power(ag.tsum(ag.mul(w_plus, w_plus), axis=0), -0.5)
            w_eff = ag.mul(ag.mul(w_plus, inv_norm), self.magnitude)
            y = ag.matmul(x, w_eff)
        if linear.b is not None:
            y = ag.add(y, linear.b)
        return y


def iter_linears(model: VLM):
    """All Linear layers in the model, found by attribute walk."""
    seen: set[int] = set()
    stack: list[object] = [model.vision, model.lm, model.connector, *model.cross_blocks.values()]
    while stack:
        obj = stack.pop()
        if obj is None or id(obj) in seen:
            continue
        seen.add(id(obj))
        if isinstance(obj, Linear):
            yield obj
            continue
        for attr in vars(obj).values():
            if isinstance(attr, (list, tuple)):
                stack.extend(attr)
            elif isinstance(attr, dict):
                stack.extend(attr.values())
            elif hasattr(attr, "__dict__"):
                stack.append(attr)


def apply_adapters(model: VLM, cfg: AdapterConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Attach adapters to every targeted Linear; returns the new parameters.

    Base weights are left in place (freezing is the training policy's job);
    a freshly adapted model computes exactly what the base model did.
    """
    added: dict[str, Tensor] = {}
    for lin in iter_linears(model):
        if lin.adapter is not None:
            continue
        if any(frag in lin.prefix for frag in cfg.target):
            lin.adapter = LowRankAdapter(rng, lin, cfg)
            added.update(lin.adapter.params())
    if not added:
        raise ValueError(f"no weights matched adapter targets {cfg.target}")
    return added


def is_adapter_param(name: str) -> bool:
    return ".adapter." in name


def is_backbone_param(name: str) -> bool:
    """Base weights of the two pretrained-style backbones (adapters excluded)."""
    return (name.startswith("vision.") or name.startswith("lm.")) and not is_adapter_param(name)


def trainable_names(params: dict[str, Tensor], policy: str) -> set[str]:
    """Which parameters the optimizer may update under a freezing policy.

    frozen: backbones fixed, newly initialized parts (connector, fusion,
    adapters) train. adapters: only adapter and connector parameters train.
    full: everything trains.
    """
    if policy == "full":
        return set(params)
    if policy == "frozen":
        return {n for n in params if not is_backbone_param(n)}
    if policy == "adapters":
        return {n for n in params if is_adapter_param(n) or n.startswith("connector.")}
    raise ValueError(f"unknown freezing policy {policy!r}")


def set_requires_grad(params: dict[str, Tensor], trainable: set[str]) -> None:
    for name, t in params.items():
        t.requires_grad = name in trainable
