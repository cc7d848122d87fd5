"""Attention traces of the grid-centre query token along a sampling run."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..diffusion import NoiseSchedule, SamplerConfig, sample_network
from ..networks import DenoisingNetwork
from ..tensor.core import ContractError
from ..tmsa import center_token_map
from .images import write_pgm


@dataclass
class AttnTrace:
    layer: int
    maps: dict = field(default_factory=dict)  # step -> (H, W) float64
    sigmas: dict = field(default_factory=dict)
    samples: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return len(self.maps)

    def to_csv(self) -> str:
        lines = ["step,row,col,value"]
        for step in sorted(self.maps):
            m = self.maps[step]
            for (r, c), v in np.ndenumerate(m):
                lines.append(f"{step},{r},{c},{v:.9g}")
        return "\n".join(lines) + "\n"


def collect_attention(network: DenoisingNetwork, schedule: NoiseSchedule, sampler: SamplerConfig,
                      layer: int = 0, label=None) -> AttnTrace:
    """Run one single-sample sampling pass and keep, for every sampler step,
    the centre-token map of ``layer`` from the first network evaluation of
    that step."""
    layers = network.tmsa_layers()
    if not 0 <= layer < len(layers):
        raise ContractError(f"layer {layer} out of range: network has {len(layers)} attention layers")
    m = layers[layer]
    gh, gw = m.config.grid
    trace = AttnTrace(layer)
    pending = {}

    def on_step(i, sigma):
        pending["step"] = i
        trace.sigmas[i] = float(sigma)

    def forward_hook(mod, *args):
        step = pending.pop("step", None)
        if step is not None:
            trace.maps[step] = center_token_map(mod, gh, gw)

    original = m.forward

    def recording_forward(x_s, x_t):
        y = original(x_s, x_t)
        forward_hook(m)
        return y

    m.record_attention(True)
    m.forward = recording_forward
    try:
        trace.samples = sample_network(network, 1, schedule, sampler, label=label, on_step=on_step)
    finally:
        del m.forward
        m.record_attention(False)
    return trace


def heatmap(m: np.ndarray) -> np.ndarray:
    peak = m.max()
    scaled = m / peak if peak > 0 else m
    return np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)


def write_trace(trace: AttnTrace, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv = out / "attention.csv"
    csv.write_text(trace.to_csv())
    for step, m in sorted(trace.maps.items()):
        write_pgm(out / f"attn_step_{step:04d}.pgm", heatmap(m))
    return csv


def attn_dump(network: DenoisingNetwork, schedule: NoiseSchedule, sampler: SamplerConfig, layer: int,
              out_dir, label=None) -> AttnTrace:
    trace = collect_attention(network, schedule, sampler, layer, label)
    write_trace(trace, out_dir)
    return trace
