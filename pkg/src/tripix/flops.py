"""Exact FLOPs accounting.

One multiply-accumulate counts as one FLOP unit. Only convolution kernels
are counted (bias adds, activations, softmax and upsampling are free), and
the gate convolutions are tallied in a separate column since they are
overhead of the gating mechanism rather than payload compute. Counts are
incremented at the execution sites from the work actually performed, so a
report derived from mask counts must agree with them exactly.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .tensor import ConvSpec

CSV_HEADER = "layer_id,module,c_k,area,policy2_count,hard_sparsity,executed_flops"

MODULES = ("query_encoder", "memory_encoder", "decoder")


def layer_cost(spec: ConvSpec) -> int:
    """Multiply-accumulates per output pixel: k^2 * C_i * C_o."""
    return spec.ksize * spec.ksize * spec.in_channels * spec.out_channels


@dataclass
class FrameTally:
    """Per-frame execution record: layer_id -> (policy2 positions, runs)."""

    role: str  # "memory" or "query"
    processing: str  # "dense" or "sparse"
    policy2: Dict[str, int] = field(default_factory=dict)
    runs: Dict[str, int] = field(default_factory=dict)
    sparse_invocations: int = 0
    gate_macs: int = 0


class FlopCounter:
    """Accumulates executed work for one inference run."""

    def __init__(self):
        self.registry: Dict[str, Tuple[str, int, int]] = {}  # id -> (module, c_k, area)
        self.frames: List[FrameTally] = []
        self._current: Optional[FrameTally] = None

    def begin_frame(self, role: str, processing: str) -> None:
        self._current = FrameTally(role=role, processing=processing)

    def register(self, layer_id: str, module: str, c_k: int, area: int) -> None:
        known = self.registry.get(layer_id)
        if known is not None and known != (module, c_k, area):
            raise ValueError(f"layer {layer_id} re-registered with different geometry")
        self.registry[layer_id] = (module, c_k, area)

    def _tally(self) -> FrameTally:
        if self._current is None:
            # tolerate counting outside an explicit frame (unit tests)
            self._current = FrameTally(role="query", processing="dense")
        return self._current

    def count_dense(self, layer_id: str, module: str, c_k: int, area: int) -> None:
        self.register(layer_id, module, c_k, area)
        t = self._tally()
        t.policy2[layer_id] = t.policy2.get(layer_id, 0) + area
        t.runs[layer_id] = t.runs.get(layer_id, 0) + 1

    def count_sparse(
        self, layer_id: str, module: str, c_k: int, area: int, n_compute: int
    ) -> None:
        self.register(layer_id, module, c_k, area)
        t = self._tally()
        t.policy2[layer_id] = t.policy2.get(layer_id, 0) + n_compute
        t.runs[layer_id] = t.runs.get(layer_id, 0) + 1
        t.sparse_invocations += 1

    def count_gate(self, macs: int) -> None:
        self._tally().gate_macs += macs

    def end_frame(self) -> None:
        if self._current is not None:
            self.frames.append(self._current)
            self._current = None

    def report(self) -> "SparsityReport":
        return SparsityReport.from_frames(dict(self.registry), list(self.frames))


@dataclass
class LayerRow:
    layer_id: str
    module: str
    c_k: int
    area: int
    policy2_count: int
    runs: int

    @property
    def executed_flops(self) -> int:
        return self.c_k * self.policy2_count

    @property
    def dense_flops(self) -> int:
        return self.c_k * self.area * self.runs

    @property
    def hard_sparsity(self) -> float:
        total = self.area * self.runs
        return self.policy2_count / total if total else 0.0


@dataclass
class SparsityReport:
    """Aggregated layer/module/global FLOPs for a set of processed frames."""

    rows: List[LayerRow]
    frames: int
    gate_flops: int
    sparse_invocations_by_role: Dict[str, int]
    registry: Dict[str, Tuple[str, int, int]]
    frame_tallies: List[FrameTally] = field(default_factory=list)

    @classmethod
    def from_frames(cls, registry, frames: List[FrameTally]) -> "SparsityReport":
        acc: Dict[str, LayerRow] = {}
        gate = 0
        by_role: Dict[str, int] = {"memory": 0, "query": 0}
        for tally in frames:
            gate += tally.gate_macs
            by_role[tally.role] = by_role.get(tally.role, 0) + tally.sparse_invocations
            for layer_id, p2 in tally.policy2.items():
                module, c_k, area = registry[layer_id]
                row = acc.get(layer_id)
                if row is None:
                    row = LayerRow(layer_id, module, c_k, area, 0, 0)
                    acc[layer_id] = row
                row.policy2_count += p2
                row.runs += tally.runs[layer_id]
        rows = [acc[k] for k in sorted(acc)]
        return cls(
            rows=rows,
            frames=len(frames),
            gate_flops=gate,
            sparse_invocations_by_role=by_role,
            registry=dict(registry),
            frame_tallies=list(frames),
        )

    @property
    def executed_flops(self) -> int:
        return sum(r.executed_flops for r in self.rows)

    @property
    def dense_flops(self) -> int:
        return sum(r.dense_flops for r in self.rows)

    @property
    def flops_ratio(self) -> float:
        dense = self.dense_flops
        return self.executed_flops / dense if dense else 1.0

    def module_totals(self) -> Dict[str, Dict[str, int]]:
        out = {m: {"executed": 0, "dense": 0} for m in MODULES}
        for r in self.rows:
            out.setdefault(r.module, {"executed": 0, "dense": 0})
            out[r.module]["executed"] += r.executed_flops
            out[r.module]["dense"] += r.dense_flops
        return out

    def per_frame_executed(self) -> float:
        return self.executed_flops / self.frames if self.frames else 0.0

    def cost_weighted_sparsity(self) -> float:
        """sum(c_k * s_k * A_k * runs) / sum(c_k * A_k * runs) == executed/dense."""
        return self.flops_ratio

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for r in self.rows:
            buf.write(
                f"{r.layer_id},{r.module},{r.c_k},{r.area},"
                f"{r.policy2_count},{r.hard_sparsity:.9f},{r.executed_flops}\n"
            )
        return buf.getvalue()

    def summary(self) -> str:
        lines = []
        totals = self.module_totals()
        dense = self.dense_flops
        executed = self.executed_flops
        lines.append(f"frames processed: {self.frames}")
        lines.append(
            f"executed FLOPs: {executed}  dense-equivalent: {dense}  "
            f"ratio: {self.flops_ratio:.4f}"
        )
        for m in MODULES:
            t = totals.get(m, {"executed": 0, "dense": 0})
            share = t["executed"] / executed * 100.0 if executed else 0.0
            red = t["dense"] - t["executed"]
            lines.append(
                f"  {m}: executed {t['executed']}  dense {t['dense']}  "
                f"share {share:.1f}%  reduction {red}"
            )
        lines.append(f"gate overhead FLOPs (separate): {self.gate_flops}")
        lines.append(
            "executed+gate FLOPs: "
            f"{executed + self.gate_flops}"
        )
        return "\n".join(lines)


def aggregate(reports: List[SparsityReport]) -> SparsityReport:
    """Merge reports (across frames or sequences) into one."""
    if not reports:
        raise ValueError("aggregate needs at least one report")
    registry: Dict[str, Tuple[str, int, int]] = {}
    frames: List[FrameTally] = []
    for rep in reports:
        for layer_id, geom in rep.registry.items():
            if layer_id in registry and registry[layer_id] != geom:
                raise ValueError(f"layer {layer_id} geometry differs across reports")
            registry[layer_id] = geom
        frames.extend(rep.frame_tallies)
    return SparsityReport.from_frames(registry, frames)
