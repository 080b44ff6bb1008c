"""Multi-target tracking scenarios: CV targets, range-bearing sensors, clutter.

Targets and sensors live on a padded square of width ``2R + T`` so that
everything able to influence the central ``T``-wide window is simulated.
All Poisson means in :class:`SimParams` are expected counts *per T x T
window*; the simulator scales them by the padded area so the spatial density
is the same for every window width.

Randomness comes from numpy's PCG64 generator seeded with
``SeedSequence(seed, spawn_key=(scenario_index,))``; every scenario owns an
independent stream and reproduces bit-for-bit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .raster import (RB_CUTOFF, IntensityImage, MeasurementModel, PointSet, WindowSpec,
                     rasterize_density, rasterize_gaussian, wrap_angle)


@dataclass(frozen=True)
class SimParams:
    p_death: float = 0.05
    p_detect: float = 0.95
    sigma_a: float = 1.0
    sigma_v: float = 5.0
    eta_r: float = 10.0
    eta_theta: float = 0.035
    lambda_birth: float = 0.5
    lambda_initial: float = 10.0
    lambda_sensor: float = 0.25
    lambda_clutter: float = 40.0
    sensor_range: float = 2000.0
    tau: float = 1.0
    window_T: float = 1000.0
    resolution: float = 1000.0 / 128
    target_sigma: float = 10.0
    supersample: int = 1

    def __post_init__(self):
        for name in ("p_death", "p_detect"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        for name in ("lambda_birth", "lambda_initial", "lambda_sensor", "lambda_clutter",
                     "sigma_a", "sigma_v", "eta_r", "eta_theta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("sensor_range", "tau", "window_T", "resolution", "target_sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def table1(cls, window_T: float = 1000.0, **overrides) -> "SimParams":
        """Default parameters with rates scaled to a window of ``window_T`` metres."""
        tau = overrides.get("tau", 1.0)
        t_km = window_T / 1000.0
        base = dict(window_T=window_T,
                    lambda_birth=0.5 * t_km ** 2 * tau,
                    lambda_initial=10.0 * t_km ** 2,
                    lambda_sensor=0.25 * t_km ** 2,
                    lambda_clutter=40.0 * tau)
        base.update(overrides)
        return cls(**base)

    def rescaled(self, window_T: float) -> "SimParams":
        """Same densities on a different window width."""
        k = (window_T / self.window_T) ** 2
        return replace(self, window_T=window_T, lambda_birth=self.lambda_birth * k,
                       lambda_initial=self.lambda_initial * k,
                       lambda_sensor=self.lambda_sensor * k)

    @property
    def half_region(self) -> float:
        return self.sensor_range + 0.5 * self.window_T

    @property
    def area_factor(self) -> float:
        """Padded-square area over window area."""
        return (2 * self.half_region / self.window_T) ** 2

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(self.window_T, self.resolution, 2)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TargetState:
    position: np.ndarray
    velocity: np.ndarray
    id: int


@dataclass
class SimState:
    n: int
    positions: np.ndarray
    velocities: np.ndarray
    ids: np.ndarray
    sensors: np.ndarray
    rng: np.random.Generator
    next_id: int = 0

    @property
    def targets(self) -> list[TargetState]:
        return [TargetState(p.copy(), v.copy(), int(i))
                for p, v, i in zip(self.positions, self.velocities, self.ids)]

    def target_points(self) -> PointSet:
        return PointSet(self.positions.copy(), 2)


@dataclass
class MeasurementFrame:
    sensor_index: np.ndarray
    range: np.ndarray
    bearing: np.ndarray
    clutter: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.range)

    def cartesian(self, sensors: np.ndarray) -> np.ndarray:
        s = sensors[self.sensor_index] if len(self) else np.zeros((0, 2))
        return s + self.range[:, None] * np.stack([np.cos(self.bearing),
                                                   np.sin(self.bearing)], axis=-1)


def scenario_rng(seed: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def new_scenario(params: SimParams, seed: int, index: int = 0) -> SimState:
    rng = scenario_rng(seed, index)
    h = params.half_region
    n0 = rng.poisson(params.lambda_initial * params.area_factor)
    pos = rng.uniform(-h, h, size=(n0, 2))
    vel = rng.normal(0.0, params.sigma_v, size=(n0, 2))
    m = rng.poisson(params.lambda_sensor * params.area_factor)
    sensors = rng.uniform(-h, h, size=(m, 2))
    return SimState(0, pos, vel, np.arange(n0), sensors, rng, next_id=n0)


def propagate(state: SimState, params: SimParams) -> SimState:
    """Advance one step in place: deaths, then births, then CV motion of survivors."""
    rng = state.rng
    keep = rng.random(len(state.ids)) >= params.p_death
    pos, vel, ids = state.positions[keep], state.velocities[keep], state.ids[keep]

    h = params.half_region
    nb = rng.poisson(params.lambda_birth * params.area_factor)
    new_pos = rng.uniform(-h, h, size=(nb, 2))
    new_vel = rng.normal(0.0, params.sigma_v, size=(nb, 2))

    tau = params.tau
    mu = rng.normal(0.0, params.sigma_a, size=pos.shape)
    pos = pos + tau * vel + 0.5 * tau * tau * mu
    vel = vel + tau * mu

    state.positions = np.concatenate([pos, new_pos])
    state.velocities = np.concatenate([vel, new_vel])
    state.ids = np.concatenate([ids, state.next_id + np.arange(nb)])
    state.next_id += nb
    state.n += 1
    return state


def sense(state: SimState, params: SimParams) -> MeasurementFrame:
    """Range-bearing detections within sensor range, plus uniform clutter per sensor."""
    rng = state.rng
    idx, rs, bs, cl = [], [], [], []
    for j, s in enumerate(state.sensors):
        rel = state.positions - s
        dist = np.hypot(rel[:, 0], rel[:, 1])
        near = np.nonzero(dist <= params.sensor_range)[0]
        hit = near[rng.random(len(near)) < params.p_detect]
        r = dist[hit] + params.eta_r * rng.standard_normal(len(hit))
        b = np.arctan2(rel[hit, 1], rel[hit, 0]) + params.eta_theta * rng.standard_normal(len(hit))
        neg = r < 0
        r = np.abs(r)
        b = wrap_angle(b + np.pi * neg)
        nc = rng.poisson(params.lambda_clutter)
        rc = params.sensor_range * np.sqrt(rng.random(nc))
        bc = wrap_angle(rng.uniform(-np.pi, np.pi, nc))
        idx.append(np.full(len(hit) + nc, j))
        rs += [r, rc]
        bs += [b, bc]
        cl += [np.zeros(len(hit), bool), np.ones(nc, bool)]
    if not idx:
        e = np.zeros(0)
        return MeasurementFrame(np.zeros(0, int), e, e.copy(), np.zeros(0, bool))
    return MeasurementFrame(np.concatenate(idx), np.concatenate(rs), np.concatenate(bs),
                            np.concatenate(cl))


def measurement_image(frame: MeasurementFrame, sensors: np.ndarray, params: SimParams,
                      window: WindowSpec | None = None) -> IntensityImage:
    """Rasterise one frame of measurements with their range-bearing likelihoods."""
    window = window or params.window
    pts = frame.cartesian(sensors)
    reach = (RB_CUTOFF * (params.eta_r + params.eta_theta * frame.range) * 1.05
             + 2 * window.resolution)
    h = window.half_extent
    near = np.all(np.abs(pts) <= h + reach[:, None], axis=1)
    models = [MeasurementModel.range_bearing(sensors[j], params.eta_r, params.eta_theta)
              for j in frame.sensor_index[near]]
    return rasterize_density(PointSet(pts[near], 2), models, window, params.supersample)


def target_image(state: SimState, params: SimParams,
                 window: WindowSpec | None = None) -> IntensityImage:
    return rasterize_gaussian(state.target_points(), window or params.window,
                              params.target_sigma)


@dataclass
class Trajectory:
    """Per-step images of one scenario plus the final truth."""

    frames: np.ndarray
    targets: np.ndarray
    truth: list[np.ndarray]
    window: WindowSpec

    def stack(self, n: int, depth: int) -> np.ndarray:
        return self.frames[n - depth + 1:n + 1]


def simulate_frames(params: SimParams, n_steps: int, seed: int, index: int = 0,
                    window: WindowSpec | None = None, dtype=np.float32,
                    first_target_step: int = 0) -> Trajectory:
    """Run one scenario and rasterise every step.

    Step 0 is the initial state; each later step propagates once before
    sensing.  Target images are kept from ``first_target_step`` on.
    """
    window = window or params.window
    state = new_scenario(params, seed, index)
    frames = np.empty((n_steps,) + window.shape, dtype=dtype)
    targets, truth = [], []
    for n in range(n_steps):
        if n:
            propagate(state, params)
        frames[n] = measurement_image(sense(state, params), state.sensors, params, window).data
        if n >= first_target_step:
            targets.append(target_image(state, params, window).data.astype(dtype))
            truth.append(state.positions[window.contains(state.positions)].copy())
    return Trajectory(frames, np.asarray(targets, dtype=dtype).reshape((-1,) + window.shape),
                      truth, window)


def run_simulation(params: SimParams, n_steps: int, seed: int, stack_depth: int = 20,
                   index: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """(input stack, target image) pairs for every step with a full stack.

    Returns ``n_steps - stack_depth + 1`` pairs; the stack holds the
    ``stack_depth`` most recent measurement images, oldest first.
    """
    if n_steps <= stack_depth - 1 or stack_depth < 1:
        raise ValueError(f"n_steps={n_steps} leaves no step with a full stack of {stack_depth}")
    traj = simulate_frames(params, n_steps, seed, index, first_target_step=stack_depth - 1)
    return [(traj.stack(n, stack_depth), traj.targets[n - stack_depth + 1])
            for n in range(stack_depth - 1, n_steps)]


@dataclass
class ScenarioSampler:
    """Fresh scenario per call, scored at its last step.

    ``sampler(width, seed, index)`` runs ``n_steps`` steps with the densities
    of ``params`` on a window of ``width`` metres and returns the final input
    stack, target image and in-window truth positions.
    """

    params: SimParams
    n_steps: int = 30
    stack_depth: int = 20

    def __call__(self, width: float, seed: int, index: int):
        p = self.params.rescaled(width)
        traj = simulate_frames(p, self.n_steps, seed, index, first_target_step=self.n_steps - 1)
        return traj.stack(self.n_steps - 1, self.stack_depth), traj.targets[0], traj.truth[0]
