"""Per-patch score export for heatmap rendering downstream.

Runs a checkpoint over one bag and emits, per patch, the grid coordinates,
the instance probability, all four selection criteria scores, the softmax
attention weight, and whether the patch made the selected set. Output is a
pure function of the checkpoint and the bag; no pixels are touched here.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .aps import APSWeights
from .config import EncoderConfig, TrainConfig
from .data import Bag
from .encoders import ModelParams, forward
from .errors import ConfigError, ShapeError
from .numeric import sigmoid

CSV_HEADER = "index,x,y,p,s_rel,s_div,s_unc,s_final,attention,selected"


@dataclass
class HeatmapRecord:
    index: int
    x: int
    y: int
    p: float
    s_rel: float
    s_div: float
    s_unc: float
    s_final: float
    attention: float
    selected: bool


def export_heatmap(params: ModelParams, enc_config: EncoderConfig, config: TrainConfig,
                   bag: Bag) -> list[HeatmapRecord]:
    """One record per patch, in patch-index order."""
    if bag.coords is None:
        raise ConfigError(
            f"bag {bag.id!r} has no patch coordinates; use the coordinate-free "
            "'select' CSV export instead"
        )
    if bag.d != params.d:
        raise ShapeError(f"bag dimension {bag.d} does not match checkpoint dimension {params.d}")
    trace = forward(bag.features, params, enc_config, APSWeights(*config.aps_weights),
                    config.big_lambda)
    probs = sigmoid(trace.instance_logits.data[:, 0])
    mask = trace.aps.selected_mask
    records = []
    for i in range(bag.n):
        records.append(HeatmapRecord(
            index=i,
            x=int(bag.coords[i, 0]),
            y=int(bag.coords[i, 1]),
            p=float(probs[i]),
            s_rel=float(trace.aps.s_rel[i]),
            s_div=float(trace.aps.s_div[i]),
            s_unc=float(trace.aps.s_unc[i]),
            s_final=float(trace.aps.s_final[i]),
            attention=float(trace.aps.attention[i]),
            selected=bool(mask[i]),
        ))
    return records


def records_to_csv(records: list[HeatmapRecord]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for r in records:
        buf.write(f"{r.index},{r.x},{r.y},{r.p!r},{r.s_rel!r},{r.s_div!r},"
                  f"{r.s_unc!r},{r.s_final!r},{r.attention!r},{int(r.selected)}\n")
    return buf.getvalue()
