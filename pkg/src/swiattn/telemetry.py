"""Routing statistics and the needle-in-a-haystack sweep."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import NEEDLE_VALUES, NeedleInstance, make_niah
from .inference import InferenceSession
from .model import SwiAttnModel
from .routing import GateRecord

DEPTH_GRID = (0, 25, 50, 75, 100)


@dataclass
class RouteStats:
    layer_full_ratio: np.ndarray
    layer_counts: np.ndarray
    iteration_series: list = field(default_factory=list)
    depth_series: dict = field(default_factory=dict)

    @property
    def overall(self) -> float:
        """Token-weighted mean of the per-layer ratios."""
        total = self.layer_counts.sum()
        return float((self.layer_full_ratio * self.layer_counts).sum() / total) if total else float("nan")


def ratios_from_records(records, n_layers: int) -> RouteStats:
    hits, counts = np.zeros(n_layers), np.zeros(n_layers)
    for r in records:
        hits[r.layer] += r.hard_gate
        counts[r.layer] += 1
    ratio = np.divide(hits, counts, out=np.full(n_layers, np.nan), where=counts > 0)
    return RouteStats(ratio, counts)


def route_stats(model: SwiAttnModel, dataset, history=None) -> RouteStats:
    """Per-layer full-attention ratio over the prefill gates of every sequence in ``dataset``."""
    records = []
    for seq in dataset:
        session = InferenceSession(model)
        session.prefill(seq)
        records.extend(session.prefill_gate_log)
    stats = ratios_from_records(records, model.cfg.n_layers)
    if history:
        stats.iteration_series = [(row["step"], row["full_ratio"]) for row in history]
    return stats


def write_gates_csv(records, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GateRecord.FIELDS)
        for r in records:
            w.writerow([r.layer, r.token_index, repr(r.logit), repr(r.soft_gate), r.hard_gate])
    return path


def read_gates_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [GateRecord(int(r["layer"]), int(r["token_index"]), float(r["logit"]), float(r["soft_gate"]),
                       int(r["hard_gate"])) for r in rows]


@dataclass
class NiahResult:
    instance: NeedleInstance
    generated: list
    answer_gates: list        # GateRecords at positions whose next token is an answer token
    query_gates: list         # prefill GateRecords at the final prompt position

    @property
    def correct(self) -> bool:
        return list(self.generated) == [int(t) for t in self.instance.answer]

    @property
    def full_ratio(self) -> float:
        return float(np.mean([r.hard_gate for r in self.answer_gates])) if self.answer_gates else float("nan")


@dataclass
class NiahSweep:
    results: list

    def select(self, relation: str) -> list:
        return [r for r in self.results if r.instance.window_relation == relation]

    def ratio(self, relation: str) -> float:
        gates = [g.hard_gate for r in self.select(relation) for g in r.answer_gates]
        return float(np.mean(gates)) if gates else float("nan")

    def query_ratio(self, relation: str) -> float:
        gates = [g.hard_gate for r in self.select(relation) for g in r.query_gates]
        return float(np.mean(gates)) if gates else float("nan")

    def accuracy(self, relation: str) -> float:
        sel = self.select(relation)
        return float(np.mean([r.correct for r in sel])) if sel else float("nan")

    def depth_series(self) -> dict:
        """{(context_len, depth_percent): answer-step full ratio}."""
        groups: dict = {}
        for r in self.results:
            key = (len(r.instance.tokens), r.instance.depth_percent)
            groups.setdefault(key, []).extend(g.hard_gate for g in r.answer_gates)
        return {k: float(np.mean(v)) for k, v in sorted(groups.items())}

    def records(self) -> list:
        return [g for r in self.results for g in r.answer_gates]


def run_niah(model: SwiAttnModel, inst: NeedleInstance) -> NiahResult:
    session = InferenceSession(model)
    generated = session.generate(inst.tokens, max_new=NEEDLE_VALUES)
    last = len(inst.tokens) - 1
    wanted = set(int(p) for p in inst.answer_positions)
    answer = [r for r in session.prefill_gate_log + session.gate_log if r.token_index in wanted]
    query = [r for r in session.prefill_gate_log if r.token_index == last]
    return NiahResult(inst, generated, answer, query)


def niah_sweep(model: SwiAttnModel, context_lengths, depths=DEPTH_GRID, repeats: int = 4,
               seed: int = 0) -> NiahSweep:
    """Greedy retrieval over a (context length x depth) grid, instances generated in a fixed order."""
    rng = np.random.default_rng(seed)
    results = []
    for ctx in context_lengths:
        for depth in depths:
            for _ in range(repeats):
                results.append(run_niah(model, make_niah(ctx, depth, model.cfg.window, rng)))
    return NiahSweep(results)
