"""Named parameter declarations shared by the model modules.

Each module describes its parameters as an ordered ``{name: ParamSpec}``
mapping, so parameter counts come from shapes alone and allocation happens
in exactly one place (``network.init_model``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import Tensor

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    init: str = "fan_in"  # fan_in | zeros | ones
    fan_in: int = 1

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def conv(
    prefix: str,
    out_ch: int,
    in_ch: int,
    k: int,
    groups: int = 1,
    bias: bool = True,
    zero: bool = False,
) -> dict[str, ParamSpec]:
    fan_in = (in_ch // groups) * k * k
    init = "zeros" if zero else "fan_in"
    specs = {f"{prefix}.weight": ParamSpec((out_ch, in_ch // groups, k, k), init, fan_in)}
    if bias:
        specs[f"{prefix}.bias"] = ParamSpec((out_ch,), init, fan_in)
    return specs


def norm(prefix: str, channels: int) -> dict[str, ParamSpec]:
    return {
        f"{prefix}.weight": ParamSpec((channels,), "ones"),
        f"{prefix}.bias": ParamSpec((channels,), "zeros"),
    }


def allocate(specs: Mapping[str, ParamSpec], rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    """Draw every parameter in declaration order from one generator."""
    out = {}
    for name, s in specs.items():
        if s.init == "zeros":
            a = np.zeros(s.shape)
        elif s.init == "ones":
            a = np.ones(s.shape)
        else:
            bound = 1.0 / np.sqrt(s.fan_in)
            a = rng.uniform(-bound, bound, s.shape)
        out[name] = Tensor(a.astype(dtype), requires_grad=True, dtype=dtype, name=name)
    return out


def bias_of(params: Params, prefix: str) -> Tensor | None:
    return params.get(f"{prefix}.bias")
