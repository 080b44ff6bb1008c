"""Losses, OSPA, and numerical checks of the window-transfer bound."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .convnet import LayerSpec, NetworkParams, center_crop, filter_l1_product, forward, init_network
from .raster import PointSet, WindowSpec, rasterize_gaussian

Z95 = 1.959963984540054


def _data(a):
    return np.asarray(getattr(a, "data", a))


def mse_windowed(predicted, target) -> float:
    """Mean over pixels of the squared difference."""
    p, t = _data(predicted), _data(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(np.mean(np.square(p.astype(np.float64) - t.astype(np.float64))))


class RunningStats:
    """Welford accumulator; ``merge`` combines partial results in any order."""

    def __init__(self):
        self.n, self.mean, self.m2 = 0, 0.0, 0.0

    def push(self, x: float):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def merge(self, other: "RunningStats") -> "RunningStats":
        out = RunningStats()
        out.n = self.n + other.n
        if out.n == 0:
            return out
        delta = other.mean - self.mean
        out.mean = self.mean + delta * other.n / out.n
        out.m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / out.n
        return out

    @property
    def var(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0

    @property
    def std(self) -> float:
        return math.sqrt(self.var)

    @property
    def se(self) -> float:
        return self.std / math.sqrt(self.n) if self.n else float("nan")

    @property
    def ci95(self) -> float:
        return Z95 * self.se


# --------------------------------------------------------------------------
# assignment and OSPA

def linear_assignment(cost: np.ndarray) -> tuple[float, np.ndarray]:
    """Minimum-cost assignment of every row to a distinct column (rows <= cols).

    Shortest augmenting paths with row/column potentials, O(n^2 m).
    Returns the total cost and ``col_of_row``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError("need at least as many columns as rows")
    if n == 0:
        return 0.0, np.zeros(0, dtype=int)
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j]: 1-based row matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=int)
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    total = float(cost[np.arange(n), col_of_row].sum())
    return total, col_of_row


def _as_points(s) -> np.ndarray:
    pts = s.points if isinstance(s, PointSet) else np.asarray(s, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, pts.shape[-1] if pts.ndim == 2 else 0))
    return pts.reshape(len(pts), -1)


def ospa(truth, estimate, cutoff: float = 500.0, form: str = "paper") -> float:
    """Optimal sub-pattern assignment distance between two point sets.

    ``form="paper"`` computes ``sqrt((sum_i ||x_i - y_pi(i)||^2 + c (n - m)) / n)``
    with untruncated distances, where n is the larger cardinality.
    ``form="standard"`` is the order-2 metric of Schuhmacher et al.:
    distances truncated at c and a ``c^2`` cardinality penalty.
    """
    if form not in ("paper", "standard"):
        raise ValueError(f"unknown OSPA form {form!r}")
    x, y = _as_points(truth), _as_points(estimate)
    if len(x) < len(y):
        x, y = y, x
    n, m = len(x), len(y)
    if n == 0:
        return 0.0
    if m and x.shape[1] != y.shape[1]:
        raise ValueError("point sets differ in dimension")
    if m:
        d2 = ((y[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1)
        if form == "standard":
            d2 = np.minimum(d2, cutoff * cutoff)
        matched, _ = linear_assignment(d2)
    else:
        matched = 0.0
    penalty = cutoff if form == "paper" else cutoff * cutoff
    return math.sqrt((matched + penalty * (n - m)) / n)


# --------------------------------------------------------------------------
# window-transfer bound

@dataclass
class BoundInputs:
    """Quantities entering the bound constant; widths share one unit (pixels here)."""

    A: float
    B: float
    L: int
    K: float
    d: int
    H: float
    second_moment: float = 0.0

    def __post_init__(self):
        if not (self.A >= self.B > 0):
            raise ValueError("need A >= B > 0")
        if self.L < 1 or self.K <= 0 or self.d < 1:
            raise ValueError("need L >= 1, K > 0, d >= 1")
        if self.H < 0 or self.second_moment < 0:
            raise ValueError("H and the second moment must be non-negative")

    @classmethod
    def for_network(cls, params: NetworkParams, A: float, B: float,
                    second_moment: float = 0.0) -> "BoundInputs":
        """L*K taken as the network's receptive footprint in input pixels."""
        n = len(params.specs)
        return cls(A, B, n, params.receptive_footprint() / n, params.dim,
                   filter_l1_product(params, "schur"), second_moment)


def bound_constant(inputs: BoundInputs) -> float:
    """``H^2 / B^d * max(0, (B + L K)^d - A^d)``."""
    b, d = inputs.B, inputs.d
    reach = (b + inputs.L * inputs.K) ** d - inputs.A ** d
    return inputs.H ** 2 / b ** d * max(0.0, reach)


def bound_value(loss_window: float, second_moment: float, constant: float) -> float:
    return (loss_window + second_moment * constant
            + math.sqrt(loss_window * second_moment * constant))


@dataclass
class BoundReport:
    loss_window: float
    loss_window_se: float
    constant: float
    bound_value: float
    loss_large: float
    loss_large_se: float
    verdict: bool
    H: float = 0.0
    second_moment: float = 0.0
    A: float = 0.0
    B: float = 0.0
    footprint: float = 0.0
    large_width: float = 0.0
    exact: bool = True
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


# A sampler maps (window width, seed, index) to an (input stack, target) pair
# drawn from a jointly stationary pair of fields; extra tuple items are ignored.
PairSampler = Callable[[float, int, int], tuple]


def _per_window_mse(params: NetworkParams, x: np.ndarray, y: np.ndarray, margin: int) -> float:
    out = forward(params, x)
    d = params.dim
    y = np.asarray(y).reshape(out.shape)
    return mse_windowed(center_crop(out, margin, d), center_crop(y, margin, d))


def estimate_loss_large(params: NetworkParams, scenario_generator: PairSampler,
                        large_T: float, n_samples: int, seed: int,
                        margin: int = 0) -> tuple[float, float]:
    """Monte Carlo mean and standard error of the per-window MSE at width ``large_T``.

    Every sample is a fresh scenario; the network runs on the whole window
    without retraining.  ``margin`` pixels are dropped on every side before
    averaging.
    """
    if n_samples < 30:
        raise ValueError("need at least 30 samples for a standard error")
    stats = RunningStats()
    for i in range(n_samples):
        sample = scenario_generator(large_T, seed, i)
        stats.push(_per_window_mse(params, sample[0], sample[1], margin))
    return stats.mean, stats.se


def interior_margin(params: NetworkParams) -> int:
    """Smallest stride-aligned margin at least half the receptive footprint."""
    m = params.total_stride
    half = math.ceil(params.receptive_footprint() / 2)
    return -(-half // m) * m


def bound_report(params: NetworkParams, sampler: PairSampler, train_width: float,
                 large_width: float, n_window: int, n_large: int, seed: int,
                 second_moment: float | None = None, margin: int | None = None,
                 pixel_size: float = 1.0) -> BoundReport:
    """Evaluate both sides of the transfer bound.

    The windowed loss uses an input window of ``A = train_width / pixel_size``
    pixels and scores the centre ``B = A - 2 * margin`` pixels; the margin
    defaults to :func:`interior_margin`, which makes ``A >= B + L K`` and
    the constant zero.  The large-window loss scores everything except the
    same margin at ``large_width``, so both estimate the loss of the network
    applied to the unbounded signal.  ``E[X(0)^2]`` defaults to the mean
    squared input pixel over the windowed samples.  The verdict allows three
    combined standard errors of Monte Carlo noise.
    """
    if margin is None:
        margin = interior_margin(params)
    a = round(train_width / pixel_size)
    b = a - 2 * margin
    if b <= 0:
        raise ValueError("margin leaves no output window")
    win = RunningStats()
    sq = RunningStats()
    for i in range(n_window):
        sample = sampler(train_width, seed + 1, i)
        win.push(_per_window_mse(params, sample[0], sample[1], margin))
        sq.push(float(np.mean(np.square(np.asarray(sample[0], dtype=np.float64)))))
    large = RunningStats()
    for i in range(n_large):
        sample = sampler(large_width, seed + 2, i)
        large.push(_per_window_mse(params, sample[0], sample[1], margin))
    mom = sq.mean if second_moment is None else second_moment
    inputs = BoundInputs.for_network(params, a, b, mom)
    c = bound_constant(inputs)
    bv = bound_value(win.mean, mom, c)
    slack = 3 * math.hypot(win.se, large.se)
    exact = not any(b_ is not None for b_ in params.biases)
    notes = [] if exact else ["network has biases; the bound is stated for bias-free filters"]
    return BoundReport(win.mean, win.se, c, bv, large.mean, large.se,
                       bool(large.mean <= bv + slack), inputs.H, mom, a, b,
                       params.receptive_footprint(), large_width, exact, notes)


@dataclass
class PulsePairSampler:
    """Jointly stationary test fields: Poisson points drawn with two kernels.

    The input is the points rasterised with ``sigma_in``, the target the same
    points with ``sigma_out``.  Points are simulated on a margin around the
    window so the fields are crops of an unbounded stationary process.
    """

    density: float = 0.02
    sigma_in: float = 2.0
    sigma_out: float = 1.0
    dim: int = 1
    pad: float = 20.0

    def __call__(self, width: float, seed: int, index: int):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))
        h = width / 2 + self.pad
        n = rng.poisson(self.density * (2 * h) ** self.dim)
        pts = PointSet(rng.uniform(-h, h, size=(n, self.dim)), self.dim)
        w = WindowSpec(width, 1.0, self.dim)
        x = rasterize_gaussian(pts, w, self.sigma_in).data[None]
        y = rasterize_gaussian(pts, w, self.sigma_out).data[None]
        return x, y


# --------------------------------------------------------------------------
# layer-wise window lemma

@dataclass
class LemmaResult:
    holds: bool
    n_trials: int
    failures: int
    min_margin: float
    mean_margin: float
    margins: np.ndarray = field(repr=False)


def window_mask(n: int, width: float, d: int = 1) -> np.ndarray:
    """Indicator of the open width-``width`` cube centred on index ``n // 2``."""
    c = n // 2
    axis = np.abs(np.arange(n) - c) < width / 2
    m = axis
    for _ in range(d - 1):
        m = m[..., None] & axis
    return m


def lemma_sides(params: NetworkParams, signal: np.ndarray, A: float, B: float
                ) -> tuple[float, float]:
    """Both sides of ``||W_B(x_L - x~_L)|| <= ||W_{B+LK}(X - W_A X)|| * prod ||h_l||_1``.

    ``signal`` is a single-channel array of odd side length; indices are
    measured from its centre.  Every layer must be unpadded and stride 1 so
    output index j sits over input index ``j + sum(K_l - 1) / 2``.
    """
    for s in params.specs:
        if s.padding != "none":
            raise ValueError("the window lemma needs unpadded layers")
        if s.resample != 1:
            raise ValueError("the window lemma needs stride-1 layers")
    x = np.asarray(signal, dtype=np.float64)
    d = x.ndim
    n = x.shape[0]
    if n % 2 == 0 or any(s != n for s in x.shape):
        raise ValueError("signal must be a cube of odd side length")
    lk = sum(s.kernel_width for s in params.specs)
    shrink = sum(s.kernel_width - 1 for s in params.specs)
    if n - shrink < B or n < B + lk:
        raise ValueError("signal too short for the requested windows")
    xa = x * window_mask(n, A, d)
    h = filter_l1_product(params, "schur")
    rhs = np.linalg.norm((x - xa)[window_mask(n, B + lk, d)]) * h
    if not params.specs:
        lhs = np.linalg.norm((x - xa)[window_mask(n, B, d)])
        return lhs, rhs
    p64 = params.astype(np.float64)
    out = forward(p64, x[None])[0]
    out_a = forward(p64, xa[None])[0]
    off = shrink // 2
    full = np.zeros_like(x)
    full[(slice(off, off + out.shape[0]),) * d] = out - out_a
    mask = window_mask(n, B, d)
    lhs = np.linalg.norm(full[mask])
    return lhs, rhs


def random_lemma_network(rng: np.random.Generator, dim: int = 1,
                         max_layers: int = 4) -> NetworkParams:
    """Bias-free, unpadded, single-channel stride-1 network with random filters."""
    n_layers = int(rng.integers(1, max_layers + 1))
    specs = []
    for _ in range(n_layers):
        k = int(rng.choice([1, 3, 5, 7]))
        nl = str(rng.choice(["leaky_relu", "relu", "tanh", "identity"]))
        specs.append(LayerSpec("hidden", 1, 1, k, nonlinearity=nl, slope=float(rng.uniform(0, 1)),
                               padding="none", bias=False))
    params = init_network(specs, dim=dim, seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    return params.with_tensors([rng.normal(0, rng.uniform(0.1, 2.0), size=w.shape)
                                for w in params.tensors()])


def verify_lemma1(params: NetworkParams | None = None, signal: np.ndarray | None = None,
                  A: float | None = None, B: float | None = None, n_trials: int = 1000,
                  seed: int = 0, slack: float = 1e-9) -> LemmaResult:
    """Check the layer-wise window inequality on randomised 1-D trials.

    Anything left as None is redrawn each trial: a random bias-free
    unpadded network, a Gaussian white-noise signal, and window widths with
    ``A >= B``.  Margins are ``rhs - lhs``.
    """
    if params is not None and any(s.padding != "none" for s in params.specs):
        raise ValueError("the window lemma needs unpadded layers")
    rng = np.random.default_rng(seed)
    margins = np.empty(n_trials)
    for t in range(n_trials):
        net = params if params is not None else random_lemma_network(rng)
        lk = sum(s.kernel_width for s in net.specs)
        b = B if B is not None else float(rng.integers(1, 40))
        a = A if A is not None else b + float(rng.integers(0, 2 * lk + 10))
        if signal is not None:
            x = signal
        else:
            n = int(max(a, b + lk)) + 2 * lk + 5
            n += 1 - n % 2
            x = rng.normal(0, rng.uniform(0.1, 3.0), size=n)
        lhs, rhs = lemma_sides(net, x, a, b)
        margins[t] = rhs - lhs
    failures = int(np.sum(margins < -slack))
    return LemmaResult(failures == 0, n_trials, failures, float(margins.min()),
                       float(margins.mean()), margins)
