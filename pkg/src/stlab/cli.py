"""Command line: simulate, train, eval-transfer, bound, mid.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import archive
from .config import ConfigError, architecture, channel, load_config, sim_params, train_config
from .convnet import LayerSpec, NetworkParams, forward, init_network, train
from .metrics import RunningStats, bound_report, mse_windowed, ospa
from .mid import evaluate_mid, rows_to_csv
from .mtt_sim import ScenarioSampler, SimParams, simulate_frames
from .raster import IntensityImage, estimate_cardinality, extract_points

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _mkdir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {p}: {e.strerror}") from None
    return p


# --------------------------------------------------------------------------
# datasets

def pair_steps(n_steps: int, depth: int, stride: int) -> list[int]:
    if n_steps < depth:
        raise ConfigError(f"n_steps={n_steps} is shorter than the stack depth {depth}; "
                          "steps without a full stack are excluded")
    return list(range(depth - 1, n_steps, stride))


def cmd_simulate(cfg: dict, out_dir) -> dict:
    """One shard per scenario: all measurement frames plus target images at pair steps."""
    params = sim_params(cfg)
    ds = cfg["dataset"]
    depth, n_steps = ds["stack_depth"], ds["n_steps"]
    steps = pair_steps(n_steps, depth, ds["pair_stride"])
    seed = cfg["seeds"]["simulate"]
    out = _mkdir(out_dir)
    shards = []
    for i in range(ds["n_sims"]):
        traj = simulate_frames(params, n_steps, seed, i, first_target_step=depth - 1)
        targets = traj.targets[[s - depth + 1 for s in steps]]
        fname, tname = f"sim_{i:05d}_frames.stla", f"sim_{i:05d}_targets.stla"
        try:
            fsum = archive.write_archive(out / fname, traj.frames)
            tsum = archive.write_archive(out / tname, targets)
        except OSError as e:
            raise DataError(f"cannot write shard {i} in {out}: {e.strerror}") from None
        shards.append({"index": i, "frames": fname, "frames_sha256": fsum,
                       "targets": tname, "targets_sha256": tsum, "steps": steps})
    manifest = {"format": "stlab-dataset-1", "sim": params.to_dict(), "dataset": ds,
                "seed": seed, "stack_depth": depth, "window_px": params.window.n_pixels,
                "shards": shards}
    _dump_json(out / "manifest.json", manifest)
    return manifest


class StackDataset:
    """Pairs drawn from dataset shards; stacks are sliced out of the stored frames."""

    def __init__(self, root, verify: bool = True):
        root = Path(root)
        try:
            self.manifest = json.loads((root / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read dataset manifest in {root}: {e}") from None
        self.depth = self.manifest["stack_depth"]
        self.frames, self.targets, self.index = [], [], []
        for sh in self.manifest["shards"]:
            for key in ("frames", "targets"):
                path = root / sh[key]
                if verify:
                    try:
                        digest = archive.sha256_file(path)
                    except OSError as e:
                        raise DataError(f"cannot read {path}: {e.strerror}") from None
                    if digest != sh[key + "_sha256"]:
                        raise DataError(f"checksum mismatch for {path}")
            try:
                frames = archive.read_archive(root / sh["frames"], mmap=True)
                targets = archive.read_archive(root / sh["targets"], mmap=True)
            except (OSError, archive.ArchiveError) as e:
                raise DataError(f"shard {sh['index']}: {e}") from None
            k = len(self.frames)
            self.frames.append(frames)
            self.targets.append(targets)
            self.index += [(k, j, s) for j, s in enumerate(sh["steps"])]

    @property
    def sim(self) -> SimParams:
        return SimParams(**self.manifest["sim"])

    def __len__(self):
        return len(self.index)

    def batch(self, idx):
        xs, ys = [], []
        for i in np.atleast_1d(idx):
            k, j, s = self.index[int(i)]
            xs.append(self.frames[k][s - self.depth + 1:s + 1])
            ys.append(self.targets[k][j][None])
        return np.asarray(xs, dtype=np.float32), np.asarray(ys, dtype=np.float32)


# --------------------------------------------------------------------------
# models

def save_model(out_dir, params: NetworkParams, meta: dict) -> None:
    out = _mkdir(out_dir)
    archive.write_archive(out / "model.stla", params.flatten()[None], np.float32)
    doc = dict(meta, architecture=[s.to_dict() for s in params.specs], dim=params.dim,
               dtype="f32", n_params=int(params.flatten().size))
    _dump_json(out / "model.json", doc)


def load_model(model_dir) -> tuple[NetworkParams, dict]:
    d = Path(model_dir)
    try:
        meta = json.loads((d / "model.json").read_text())
        flat = archive.read_archive(d / "model.stla")[0]
    except (OSError, json.JSONDecodeError, archive.ArchiveError) as e:
        raise DataError(f"cannot load model from {d}: {e}") from None
    specs = [LayerSpec(**s) for s in meta["architecture"]]
    template = init_network(specs, dim=meta["dim"], dtype=np.float32)
    return template.unflatten(flat), meta


def cmd_train(cfg: dict, dataset_dir, out_dir) -> list[float]:
    ds = StackDataset(dataset_dir)
    specs = architecture(cfg)
    tc = train_config(cfg, seed=cfg["seeds"]["train"])
    out = _mkdir(out_dir)
    rows = []

    def log(epoch, loss):
        rows.append((epoch + 1, loss))
        print(f"epoch {epoch + 1}/{tc.epochs} loss {loss:.6e}", file=sys.stderr, flush=True)

    params, history = train(ds, specs, tc, dim=2, callback=log)
    manifest_sha = hashlib.sha256((Path(dataset_dir) / "manifest.json").read_bytes()).hexdigest()
    save_model(out, params, {"sim": ds.manifest["sim"], "stack_depth": ds.depth,
                             "train": asdict(tc), "dataset_manifest_sha256": manifest_sha})
    with open(out / "loss.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for e, loss in rows:
            w.writerow([e, repr(loss)])
    return history


# --------------------------------------------------------------------------
# evaluation

def _pad_forward(params: NetworkParams, stack: np.ndarray) -> tuple[np.ndarray, int]:
    """Zero-pad the stack up to the total stride, run, and crop back."""
    m = params.total_stride
    n = stack.shape[-1]
    pad = (-n) % m
    if pad:
        lo = pad // 2
        width = [(0, 0)] + [(lo, pad - lo)] * (stack.ndim - 1)
        out = forward(params, np.pad(stack, width))
        out = out[(slice(None),) + (slice(lo, lo + n),) * (stack.ndim - 1)]
    else:
        out = forward(params, stack)
    return out[0], pad


def cmd_eval_transfer(cfg: dict, model_dir, out_dir) -> list[dict]:
    params, meta = load_model(model_dir)
    base = SimParams(**meta["sim"])
    ev = cfg["eval"]
    if min(ev["T_list"]) < base.window_T:
        raise ConfigError("eval.T_list must not go below the training width "
                          f"{base.window_T:g} m")
    sampler = ScenarioSampler(base, ev["n_steps"], meta["stack_depth"])
    seed = cfg["seeds"]["eval"]
    out = _mkdir(out_dir)
    rows = []
    for T in ev["T_list"]:
        mse, dist = RunningStats(), RunningStats()
        pad = 0
        for i in range(ev["n_samples"]):
            stack, target, truth = sampler(T, seed, i)
            pred, pad = _pad_forward(params, stack)
            if not np.all(np.isfinite(pred)):
                raise FloatingPointError(f"non-finite network output at T={T:g}")
            mse.push(mse_windowed(pred, target))
            img = IntensityImage(pred.astype(np.float64), base.rescaled(T).window)
            k = min(estimate_cardinality(img), int(np.count_nonzero(img.data > 0)))
            est = extract_points(img, k, method=ev["extraction"], seed=i)
            dist.push(ospa(truth, est, ev["ospa_cutoff"], ev["ospa_form"]))
            if i < ev["n_pgm"]:
                tag = f"T{T:g}_s{i}"
                archive.write_pgm(out / f"{tag}_input.pgm", stack[-1], log_scale=True)
                archive.write_pgm(out / f"{tag}_output.pgm", pred, log_scale=True)
                archive.write_pgm(out / f"{tag}_target.pgm", target, log_scale=True)
        rows.append({"T_km": T / 1000.0, "n_samples": ev["n_samples"],
                     "mse_mean": mse.mean, "mse_ci95": mse.ci95,
                     "ospa_mean": dist.mean, "ospa_ci95": dist.ci95, "pad_px": pad})
        print(f"T={T / 1000:g} km  mse {mse.mean:.4e} +- {mse.ci95:.1e}  "
              f"ospa {dist.mean:.1f} +- {dist.ci95:.1f} m", file=sys.stderr, flush=True)
    with open(out / "transfer.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return rows


def cmd_bound(cfg: dict, model_dir, out_path) -> dict:
    params, meta = load_model(model_dir)
    base = SimParams(**meta["sim"])
    b = cfg["bound"]
    sampler = ScenarioSampler(base, b["n_steps"], meta["stack_depth"])
    rep = bound_report(params, sampler, base.window_T, b["large_T"], b["n_window"], b["n_large"],
                       cfg["seeds"]["bound"], margin=b["margin"], pixel_size=base.resolution)
    doc = rep.to_dict()
    doc["mode"] = "theorem" if rep.exact else "approximate"
    out = Path(out_path)
    if out.parent != Path(""):
        _mkdir(out.parent)
    _dump_json(out, doc)
    return doc


def cmd_mid(cfg: dict, out_csv) -> list[dict]:
    m = cfg["mid"]
    placer = "heuristic"
    if m["placer"] == "network":
        if not m.get("model"):
            raise ConfigError("mid.placer=network needs mid.model")
        placer, _ = load_model(m["model"])
    rows = evaluate_mid(placer, m["T_list"], m["n_samples"], channel(cfg), cfg["seeds"]["mid"],
                        m["max_hop"])
    out = Path(out_csv)
    if out.parent != Path(""):
        _mkdir(out.parent)
    out.write_text(rows_to_csv(rows))
    return rows


# --------------------------------------------------------------------------

def _threads(arg: int | None):
    n = arg if arg is not None else os.environ.get("STLAB_THREADS")
    if n is None:
        return nullcontext()
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"thread count must be an integer, got {n!r}") from None
    if n < 1:
        raise ConfigError("thread count must be positive")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(n)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON overrides on top of the preset")
    common.add_argument("--preset", choices=["desk", "paper"], default="desk")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--threads", type=int, help="BLAS threads (default: $STLAB_THREADS)")
    common.add_argument("--out", type=Path, required=True, help="output directory or file")

    p = argparse.ArgumentParser(prog="stlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate a training dataset")
    t = sub.add_parser("train", parents=[common], help="fit a network to a dataset")
    t.add_argument("--dataset", type=Path, required=True)
    e = sub.add_parser("eval-transfer", parents=[common], help="MSE/OSPA at larger windows")
    e.add_argument("--model", type=Path, required=True)
    b = sub.add_parser("bound", parents=[common], help="check the window-transfer bound")
    b.add_argument("--model", type=Path, required=True)
    sub.add_parser("mid", parents=[common], help="AMTP sweep over window widths")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("stlab: --seed must fit in an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.preset, args.seed)
        with _threads(args.threads):
            if args.command == "simulate":
                cmd_simulate(cfg, args.out)
            elif args.command == "train":
                cmd_train(cfg, args.dataset, args.out)
            elif args.command == "eval-transfer":
                cmd_eval_transfer(cfg, args.model, args.out)
            elif args.command == "bound":
                doc = cmd_bound(cfg, args.model, args.out)
                print(json.dumps({k: doc[k] for k in ("loss_window", "constant", "bound_value",
                                                      "loss_large", "loss_large_se", "verdict")}))
            else:
                cmd_mid(cfg, args.out)
    except ConfigError as e:
        print(f"stlab: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, archive.ArchiveError) as e:
        print(f"stlab: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"stlab: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
