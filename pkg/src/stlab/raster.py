"""Point sets <-> intensity images.

A point set is drawn as a superposition of unit-mass kernels on a square
pixel grid centred on the origin.  Isotropic Gaussians are integrated
exactly over every pixel cell (separable difference of normal CDFs), so a
point well inside the window contributes exactly one unit of pixel mass.
Range-bearing likelihoods are evaluated on a sub-pixel lattice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

# range-bearing kernels are truncated this many standard deviations out
RB_CUTOFF = 5.0


@dataclass
class PointSet:
    """Finite set of d-dimensional points, stored as an ``(n, d)`` array."""

    points: np.ndarray
    dim: int = 2

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, self.dim)
        if pts.ndim != 2 or pts.shape[1] != self.dim:
            raise ValueError(f"points must have shape (n, {self.dim}), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        self.points = pts

    @classmethod
    def empty(cls, dim: int = 2) -> "PointSet":
        return cls(np.zeros((0, dim)), dim)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)


@dataclass(frozen=True)
class WindowSpec:
    """Square window of width ``width`` metres centred on the origin."""

    width: float
    resolution: float
    dim: int = 2

    def __post_init__(self):
        if self.width <= 0 or self.resolution <= 0:
            raise ValueError("window width and resolution must be positive")
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        if self.n_pixels < 1:
            raise ValueError("window is narrower than one pixel")

    @property
    def n_pixels(self) -> int:
        return int(math.floor(self.width / self.resolution + 1e-9))

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_pixels,) * self.dim

    @property
    def half_extent(self) -> float:
        """Half of the width actually covered by whole pixels."""
        return 0.5 * self.n_pixels * self.resolution

    def edges(self) -> np.ndarray:
        return (np.arange(self.n_pixels + 1) - 0.5 * self.n_pixels) * self.resolution

    def centers(self) -> np.ndarray:
        return (np.arange(self.n_pixels) + 0.5 - 0.5 * self.n_pixels) * self.resolution

    def contains(self, points: np.ndarray) -> np.ndarray:
        h = self.half_extent
        return np.all((points >= -h) & (points < h), axis=1)

    def padded(self, multiple: int) -> "WindowSpec":
        """Smallest window with a pixel count divisible by ``multiple``."""
        n = -(-self.n_pixels // multiple) * multiple
        return WindowSpec(n * self.resolution, self.resolution, self.dim)


@dataclass
class IntensityImage:
    """Pixel data on a window.

    ``data`` has the window shape for a single channel and
    ``(channels, *window.shape)`` otherwise.
    """

    data: np.ndarray
    window: WindowSpec
    channels: int = 1

    def __post_init__(self):
        expect = self.window.shape if self.channels == 1 else (self.channels,) + self.window.shape
        if self.data.shape != expect:
            raise ValueError(f"data shape {self.data.shape} does not match {expect}")

    def total(self) -> float:
        return float(self.data.sum())


@dataclass(frozen=True)
class MeasurementModel:
    kind: str
    sigma: float = 0.0
    sensor: tuple[float, float] = (0.0, 0.0)
    eta_r: float = 0.0
    eta_theta: float = 0.0

    def __post_init__(self):
        if self.kind == "isotropic_gaussian":
            if self.sigma <= 0:
                raise ValueError("sigma must be positive")
        elif self.kind == "range_bearing":
            if self.eta_r <= 0 or self.eta_theta <= 0:
                raise ValueError("range and bearing noise must be positive")
        else:
            raise ValueError(f"unknown measurement model {self.kind!r}")

    @classmethod
    def isotropic_gaussian(cls, sigma: float) -> "MeasurementModel":
        return cls("isotropic_gaussian", sigma=sigma)

    @classmethod
    def range_bearing(cls, sensor, eta_r: float, eta_theta: float) -> "MeasurementModel":
        return cls("range_bearing", sensor=(float(sensor[0]), float(sensor[1])),
                   eta_r=eta_r, eta_theta=eta_theta)


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]."""
    if isinstance(theta, float):
        return theta - 2 * math.pi * math.ceil((theta - math.pi) / (2 * math.pi))
    return theta - 2 * np.pi * np.ceil((theta - np.pi) / (2 * np.pi))


def _cell_masses(coords: np.ndarray, edges: np.ndarray, sigma: float) -> np.ndarray:
    """(n, N) probability that N(coord, sigma^2) falls in each pixel interval."""
    cdf = ndtr((edges[None, :] - coords[:, None]) / sigma)
    return np.diff(cdf, axis=1)


def rasterize_gaussian(points: PointSet, window: WindowSpec, sigma: float) -> IntensityImage:
    """Pixel-integrated sum of unit-mass isotropic Gaussians, one per point."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if points.dim != window.dim:
        raise ValueError(f"point dimension {points.dim} != window dimension {window.dim}")
    d = window.dim
    if len(points) == 0:
        return IntensityImage(np.zeros(window.shape), window)
    edges = window.edges()
    masses = [_cell_masses(points.points[:, a], edges, sigma) for a in range(d)]
    if d == 1:
        data = masses[0].sum(axis=0)
    elif d == 2:
        data = masses[0].T @ masses[1]
    else:
        letters = "abcdefghijklm"[:d]
        spec = ",".join("z" + c for c in letters) + "->" + letters
        data = np.einsum(spec, *masses)
    return IntensityImage(data, window)


def _rb_bbox(sx: float, sy: float, r: float, theta: float, model: MeasurementModel):
    """Bounding box of the truncated annular sector around a range-bearing measurement."""
    r_lo = max(r - RB_CUTOFF * model.eta_r, 0.0)
    r_hi = r + RB_CUTOFF * model.eta_r
    span = RB_CUTOFF * model.eta_theta
    if span >= math.pi:
        return sx - r_hi, sy - r_hi, sx + r_hi, sy + r_hi
    xs, ys = [], []
    for a in (theta - span, theta + span):
        c, s = math.cos(a), math.sin(a)
        xs += [r_lo * c, r_hi * c]
        ys += [r_lo * s, r_hi * s]
    # axis directions swept by the sector reach out to r_hi
    for k, (c, s) in enumerate(((1, 0), (0, 1), (-1, 0), (0, -1))):
        if abs(wrap_angle(k * math.pi / 2 - theta)) <= span:
            xs.append(r_hi * c)
            ys.append(r_hi * s)
    return sx + min(xs), sy + min(ys), sx + max(xs), sy + max(ys)


def _add_range_bearing(data: np.ndarray, window: WindowSpec, centers: np.ndarray,
                       z: np.ndarray, model: MeasurementModel, supersample: int):
    sx, sy = model.sensor
    dx0, dy0 = float(z[0]) - sx, float(z[1]) - sy
    r_z = math.hypot(dx0, dy0)
    th_z = math.atan2(dy0, dx0)
    x_lo, y_lo, x_hi, y_hi = _rb_bbox(sx, sy, r_z, th_z, model)
    rho = window.resolution
    h = window.half_extent
    n = window.n_pixels
    i0 = min(max(math.floor((x_lo + h) / rho), 0), n)
    i1 = min(max(math.ceil((x_hi + h) / rho), 0), n)
    j0 = min(max(math.floor((y_lo + h) / rho), 0), n)
    j1 = min(max(math.ceil((y_hi + h) / rho), 0), n)
    if i1 <= i0 or j1 <= j0:
        return
    offs = ((np.arange(supersample) + 0.5) / supersample - 0.5) * rho
    dx = (centers[i0:i1, None] + offs).ravel()[:, None] - sx
    dy = (centers[j0:j1, None] + offs).ravel()[None, :] - sy
    r = np.hypot(dx, dy)
    dth = np.arctan2(dy, dx) - th_z
    dth -= 2 * np.pi * np.round(dth / (2 * np.pi))
    q = ((r - r_z) / model.eta_r) ** 2 + (dth / model.eta_theta) ** 2
    dens = np.exp(-0.5 * q)
    dens[q >= RB_CUTOFF ** 2] = 0.0
    scale = rho * rho / (2 * np.pi * model.eta_r * model.eta_theta * supersample ** 2)
    if supersample > 1:
        dens = dens.reshape(i1 - i0, supersample, j1 - j0, supersample).sum(axis=(1, 3))
    data[i0:i1, j0:j1] += scale * dens


def rasterize_density(measurements: PointSet, models: list[MeasurementModel],
                      window: WindowSpec, supersample: int = 2) -> IntensityImage:
    """Sum of per-measurement likelihoods ``g_i(z_i | t)`` over the pixel grid.

    Isotropic Gaussian components go through :func:`rasterize_gaussian`.
    A range-bearing component is the Gaussian density of the measured
    (range, bearing) given a candidate position t, normalised in
    (range, bearing) space and evaluated at Cartesian positions without a
    Jacobian; each pixel holds the cell-area-weighted mean over a
    ``supersample``-per-axis lattice.
    """
    if len(models) != len(measurements):
        raise ValueError(f"{len(models)} models for {len(measurements)} measurements")
    if measurements.dim != window.dim:
        raise ValueError("measurement and window dimensions differ")
    data = np.zeros(window.shape)
    iso: dict[float, list[int]] = {}
    rb: list[int] = []
    for i, m in enumerate(models):
        if m.kind == "isotropic_gaussian":
            iso.setdefault(m.sigma, []).append(i)
        else:
            rb.append(i)
    for sigma, idx in iso.items():
        img = rasterize_gaussian(PointSet(measurements.points[idx], window.dim), window, sigma)
        if len(iso) == 1 and not rb:
            return img
        data += img.data
    if rb and window.dim != 2:
        raise ValueError("range-bearing models need a 2-D window")
    centers = window.centers()
    for i in rb:
        _add_range_bearing(data, window, centers, measurements.points[i], models[i], supersample)
    return IntensityImage(data, window)


def estimate_cardinality(image: IntensityImage) -> int:
    """Round the clamped pixel mass to the nearest integer (halves round up)."""
    total = float(np.clip(image.data, 0, None).sum())
    return int(math.floor(total + 0.5))


def _support(image: IntensityImage) -> tuple[np.ndarray, np.ndarray]:
    w = np.clip(np.asarray(image.data, dtype=np.float64), 0, None)
    idx = np.nonzero(w)
    c = image.window.centers()
    pts = np.stack([c[i] for i in idx], axis=1)
    return pts, w[idx]


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d2 = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(axis=1)[None, :]
    return np.maximum(d2, 0.0)


def _seed_greedy(x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
    """Heaviest pixel first, then repeatedly the pixel maximising ``w * d^2``."""
    j = int(np.argmax(w))
    centers = [x[j]]
    d2 = ((x - x[j]) ** 2).sum(axis=1)
    for _ in range(1, k):
        j = int(np.argmax(w * d2))
        centers.append(x[j])
        d2 = np.minimum(d2, ((x - x[j]) ** 2).sum(axis=1))
    return np.asarray(centers, dtype=np.float64)


def _seed_plusplus(x: np.ndarray, w: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.choice(len(x), p=w / w.sum())]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        score = w * d2
        total = score.sum()
        j = int(np.argmax(d2)) if total <= 0 else rng.choice(len(x), p=score / total)
        centers.append(x[j])
        d2 = np.minimum(d2, ((x - x[j]) ** 2).sum(axis=1))
    return np.asarray(centers, dtype=np.float64)


def _lloyd(x: np.ndarray, w: np.ndarray, centers: np.ndarray, max_iter: int):
    k = len(centers)
    labels = None
    for _ in range(max_iter):
        new = np.argmin(_sqdist(x, centers), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        mass = np.bincount(labels, weights=w, minlength=k)
        keep = mass > 0
        for a in range(x.shape[1]):
            s = np.bincount(labels, weights=w * x[:, a], minlength=k)
            centers[keep, a] = s[keep] / mass[keep]
    inertia = float((w * ((x - centers[labels]) ** 2).sum(axis=1)).sum())
    return centers, labels, inertia


def weighted_kmeans(x: np.ndarray, w: np.ndarray, k: int, rng: np.random.Generator,
                    max_iter: int = 100, n_init: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Weighted Lloyd iterations, best of several seedings.

    One run starts from a deterministic farthest-point seeding and
    ``n_init`` more from weighted k-means++ draws; the run with the lowest
    weighted inertia wins (earliest on ties).  Assignment ties go to the
    lowest centre index.  Returns centres and labels.
    """
    seeds = [_seed_greedy(x, w, k)] + [_seed_plusplus(x, w, k, rng) for _ in range(n_init)]
    best = None
    for c0 in seeds:
        run = _lloyd(x, w, c0, max_iter)
        if best is None or run[2] < best[2]:
            best = run
    return best[0], best[1]


def weighted_gmm_em(x: np.ndarray, w: np.ndarray, k: int, rng: np.random.Generator,
                    max_iter: int = 200, tol: float = 1e-9, min_var: float = 1e-6):
    """EM for an isotropic k-component Gaussian mixture with sample weights.

    Initialised from :func:`weighted_kmeans`.  Returns (means, variances, mixing weights).
    """
    n, d = x.shape
    means, labels = weighted_kmeans(x, w, k, rng)
    wsum = w.sum()
    var = np.empty(k)
    mix = np.empty(k)
    for j in range(k):
        sel = labels == j
        mj = w[sel].sum()
        mix[j] = max(mj / wsum, 1e-12)
        var[j] = (w[sel] * ((x[sel] - means[j]) ** 2).sum(1)).sum() / (d * mj) if mj > 0 else 1.0
    var = np.maximum(var, min_var)
    prev = -np.inf
    for _ in range(max_iter):
        logp = (np.log(mix)[None] - 0.5 * d * np.log(2 * np.pi * var)[None]
                - 0.5 * _sqdist(x, means) / var[None])
        top = logp.max(axis=1, keepdims=True)
        lse = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
        resp = np.exp(logp - lse[:, None]) * w[:, None]
        ll = float((w * lse).sum() / wsum)
        nk = resp.sum(axis=0) + 1e-300
        means = (resp.T @ x) / nk[:, None]
        var = np.maximum((resp * _sqdist(x, means)).sum(axis=0) / (d * nk), min_var)
        mix = np.maximum(nk / wsum, 1e-12)
        if abs(ll - prev) < tol:
            break
        prev = ll
    return means, var, mix


def extract_points(image: IntensityImage, k: int | None = None, method: str = "kmeans",
                   seed: int = 0) -> PointSet:
    """Recover ``k`` point positions from an intensity image.

    ``k`` defaults to :func:`estimate_cardinality`.  Clustering runs on
    pixel centres weighted by the clamped intensity.
    """
    d = image.window.dim
    if k is None:
        k = estimate_cardinality(image)
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return PointSet.empty(d)
    x, w = _support(image)
    if k > len(w):
        raise ValueError(f"k={k} exceeds the {len(w)} non-zero pixels")
    rng = np.random.default_rng(seed)
    if method == "kmeans":
        centers, _ = weighted_kmeans(x, w, k, rng)
    elif method == "gmm_em":
        rho = image.window.resolution
        centers, _, _ = weighted_gmm_em(x, w, k, rng, min_var=rho * rho / 12)
    else:
        raise ValueError(f"unknown extraction method {method!r}")
    return PointSet(centers, d)
