"""Communication-agent placement: path-loss power, AMTP, and placement sweeps.

Task agents are scattered over a square window; communication agents are
added to connect them.  A placement is scored by the average edge weight of
the minimum spanning tree of the complete graph over all agents, each edge
weighted by the transmit power needed to cover it.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erfinv

from .convnet import NetworkParams, forward
from .raster import PointSet, WindowSpec, estimate_cardinality, extract_points, rasterize_gaussian

TASK_SIGMA = 6.4
MID_RESOLUTION = 1.25
DEFAULT_MAX_HOP = 30.0
CSV_FIELDS = ("window_m", "task_agents", "comm_agents_mean", "amtp_mean_mw", "amtp_std_mw")


@dataclass(frozen=True)
class ChannelParams:
    noise: float = 1e-7
    gain: float = 5e-6
    exponent: float = 2.52
    rate: float = 0.5

    def __post_init__(self):
        if min(self.noise, self.gain, self.exponent, self.rate) <= 0 or self.rate >= 1:
            raise ValueError("channel parameters must be positive with rate < 1")


@dataclass
class MidScenario:
    window_T: float
    task_agents: PointSet
    comm_agents: PointSet | None = None

    def all_agents(self) -> np.ndarray:
        parts = [self.task_agents.points]
        if self.comm_agents is not None and len(self.comm_agents):
            parts.append(self.comm_agents.points)
        return np.concatenate(parts)


def task_count(T: float) -> int:
    return int(round(5 * (T / 320.0) ** 2))


def gen_task_config(T: float, seed: int, index: int = 0) -> MidScenario:
    """Uniform task agents, five per 320 m square on average (rounded count)."""
    if T <= 0:
        raise ValueError("window width must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))
    pts = rng.uniform(-T / 2, T / 2, size=(task_count(T), 2))
    return MidScenario(T, PointSet(pts, 2))


def power_required(d, ch: ChannelParams = ChannelParams()):
    """Transmit power (mW) to reach distance ``d`` at the channel's rate."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    p = erfinv(ch.rate) ** 2 * ch.noise * d ** ch.exponent / ch.gain
    return float(p) if p.ndim == 0 else p


# --------------------------------------------------------------------------
# minimum spanning trees over complete graphs

def _weights(points: np.ndarray, ch: ChannelParams) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return power_required(np.sqrt((diff ** 2).sum(-1)), ch)


def mst_kruskal(w: np.ndarray) -> list[tuple[int, int]]:
    """Edges (i < j) added greedily by (weight, i, j) with union-find cycle checks."""
    n = len(w)
    iu, ju = np.triu_indices(n, 1)
    order = np.lexsort((ju, iu, w[iu, ju]))
    parent = list(range(n))

    def root(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    edges = []
    for e in order:
        i, j = int(iu[e]), int(ju[e])
        ri, rj = root(i), root(j)
        if ri != rj:
            parent[ri] = rj
            edges.append((i, j))
            if len(edges) == n - 1:
                break
    return edges


def mst_prim(w: np.ndarray) -> list[tuple[int, int]]:
    """Tree grown from node 0; ties go to the lexicographically smallest edge."""
    n = len(w)
    inside = np.zeros(n, dtype=bool)
    inside[0] = True
    best = w[0].copy()
    link = np.zeros(n, dtype=int)
    edges = []
    for _ in range(n - 1):
        cand = [(best[j], min(link[j], j), max(link[j], j), j) for j in range(n) if not inside[j]]
        _, a, b, j = min(cand)
        edges.append((a, b))
        inside[j] = True
        closer = ~inside & ((w[j] < best) | ((w[j] == best) & (j < link)))
        best[closer] = w[j][closer]
        link[closer] = j
    return sorted(edges)


def amtp(agents, ch: ChannelParams = ChannelParams(), method: str = "kruskal") -> float:
    """Mean power over the edges of the power-weighted minimum spanning tree."""
    pts = agents.points if isinstance(agents, PointSet) else np.asarray(agents, dtype=np.float64)
    if len(pts) < 2:
        raise ValueError("need at least two agents")
    w = _weights(pts, ch)
    edges = mst_kruskal(w) if method == "kruskal" else mst_prim(w)
    return math.fsum(w[i, j] for i, j in edges) / len(edges)


# --------------------------------------------------------------------------
# placement

def heuristic_placer(task, max_hop: float = DEFAULT_MAX_HOP) -> PointSet:
    """Relay chain along the Euclidean MST of the task agents.

    Every tree edge longer than ``max_hop`` gets ``ceil(len / max_hop) - 1``
    equally spaced communication agents, so no hop exceeds ``max_hop``.
    """
    pts = task.points if isinstance(task, PointSet) else np.asarray(task, dtype=np.float64)
    if len(pts) < 2:
        raise ValueError("need at least two task agents")
    if max_hop <= 0:
        raise ValueError("max_hop must be positive")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    out = []
    for i, j in mst_kruskal(dist):
        k = math.ceil(dist[i, j] / max_hop)
        for s in range(1, k):
            out.append(pts[i] + (pts[j] - pts[i]) * (s / k))
    return PointSet(np.asarray(out).reshape(-1, 2), 2)


def task_window(T: float, multiple: int = 1) -> WindowSpec:
    w = WindowSpec(T, MID_RESOLUTION, 2)
    return w.padded(multiple) if multiple > 1 else w


def task_image(scenario: MidScenario, multiple: int = 1):
    return rasterize_gaussian(scenario.task_agents, task_window(scenario.window_T, multiple),
                              TASK_SIGMA)


def network_placer(params: NetworkParams, seed: int = 0):
    """Placement from a trained image-to-image network.

    The task set is rasterised on a window padded up to a multiple of the
    network's total stride; the comm-agent count is the rounded output mass.
    """

    def place(scenario: MidScenario) -> PointSet:
        img = task_image(scenario, params.total_stride)
        out = forward(params.astype(np.float64), img)
        k = min(estimate_cardinality(out), int(np.count_nonzero(out.data > 0)))
        return extract_points(out, k, seed=seed)

    return place


def mid_training_pairs(T: float, n: int, seed: int, max_hop: float = DEFAULT_MAX_HOP,
                       multiple: int = 4, dtype=np.float32):
    """Task-image / heuristic-comm-image pairs for fitting a surrogate placer."""
    xs, ys = [], []
    w = task_window(T, multiple)
    for i in range(n):
        sc = gen_task_config(T, seed, i)
        xs.append(rasterize_gaussian(sc.task_agents, w, TASK_SIGMA).data[None])
        ys.append(rasterize_gaussian(heuristic_placer(sc.task_agents, max_hop), w,
                                     TASK_SIGMA).data[None])
    return np.asarray(xs, dtype=dtype), np.asarray(ys, dtype=dtype)


def evaluate_mid(placer="heuristic", T_list: Sequence[float] = (320, 640, 960),
                 n_samples: int = 50, ch: ChannelParams = ChannelParams(), seed: int = 0,
                 max_hop: float = DEFAULT_MAX_HOP) -> list[dict]:
    """Per window width: task count, mean comm count, AMTP mean and sample std."""
    if isinstance(placer, NetworkParams):
        place = network_placer(placer, seed)
    elif placer == "heuristic":
        place = lambda sc: heuristic_placer(sc.task_agents, max_hop)  # noqa: E731
    elif callable(placer):
        place = placer
    else:
        raise ValueError(f"unknown placer {placer!r}")
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    rows = []
    for ti, T in enumerate(T_list):
        if task_count(T) < 2:
            raise ValueError(f"window {T} m holds fewer than two task agents")
        powers, comms = [], []
        for i in range(n_samples):
            sc = gen_task_config(T, seed + ti, i)
            sc.comm_agents = place(sc)
            comms.append(len(sc.comm_agents))
            powers.append(amtp(sc.all_agents(), ch))
        p = np.asarray(powers)
        rows.append(dict(window_m=T, task_agents=task_count(T),
                         comm_agents_mean=float(np.mean(comms)), amtp_mean_mw=float(p.mean()),
                         amtp_std_mw=float(p.std(ddof=1)) if n_samples > 1 else 0.0))
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([f"{r['window_m']:g}", r["task_agents"], repr(r["comm_agents_mean"]),
                    repr(r["amtp_mean_mw"]), repr(r["amtp_std_mw"])])
    return buf.getvalue()
