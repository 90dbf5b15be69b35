"""Experiment configuration, manifests, splits and the end-to-end steps
shared by the command line and the acceptance suite.

Manifests are CSV files whose paths are stored relative to the manifest's
own directory so a work directory can be moved or re-created byte-for-byte.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import baseline, dataio, diffusion, metrics, motionsim, preprocess, viz
from .neural import UNet, UNetConfig

log = logging.getLogger("mocodiff")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field '{field_name}': {message}")
        self.field = field_name


class UsageError(ValueError):
    """Bad invocation or missing inputs (exit code 2 on the command line)."""


# ---------------------------------------------------------------- config


# bump when phantom or simulator semantics change, to invalidate cached models
DATA_VERSION = 2

_TRAIN_FIELDS = {
    "common": ("seed", "image_size", "plane", "splits", "split_unit", "batch_size", "val_every", "patience", "channels", "depth", "time_embed_dim"),
    "ddpm": ("timesteps", "beta_start", "beta_end", "lr_ddpm", "ddpm_steps", "augment"),
    "unet": ("lr_unet", "unet_steps", "severity", "train_severities", "pairs_per_clean", "order"),
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    image_size: int = 64
    plane: str = "transverse"
    timesteps: int = diffusion.DEFAULT_T
    n: int = diffusion.DEFAULT_N
    beta_start: float = diffusion.DEFAULT_BETA_START
    beta_end: float = diffusion.DEFAULT_BETA_END
    lr_ddpm: float = diffusion.DDPM_LR
    lr_unet: float = baseline.UNET_LR
    batch_size: int = 6
    splits: dict = field(default_factory=lambda: {"train": 30, "val": 10, "test": 25})
    split_unit: str = "patient"
    severity: float = 3.0
    train_severities: list = field(default_factory=lambda: [1.0, 3.0, 5.0])
    pairs_per_clean: int = 2
    order: str = "linear"
    ddpm_steps: int = 6000
    unet_steps: int = 2000
    val_every: int = 200
    patience: int = 10
    channels: int = 16
    depth: int = 2
    time_embed_dim: int = 32
    augment: bool = True
    paper_literal_noising: bool = False
    n_list: list = field(default_factory=lambda: [0, 50, 100, 150, 250, 400])
    eval_chunk: int = 25
    eval_pairs: int | None = None
    workers: int | None = None
    per_plane: bool = True
    paths: dict = field(default_factory=dict)

    def validate(self) -> "ExperimentConfig":
        def need(ok, name, msg):
            if not ok:
                raise ConfigError(name, msg)

        need(isinstance(self.seed, int), "seed", "must be an integer")
        need(self.depth >= 1, "depth", "must be >= 1")
        need(self.image_size >= 32, "image_size", "size < 32")
        need(self.image_size % 2**self.depth == 0, "image_size", f"must be divisible by {2**self.depth}")
        need(self.plane in preprocess.PLANES, "plane", f"must be one of {preprocess.PLANES}")
        need(self.timesteps >= 1, "timesteps", "must be >= 1")
        need(0 <= self.n < self.timesteps, "n", f"must satisfy 0 <= n < timesteps ({self.timesteps})")
        need(0 < self.beta_start <= self.beta_end < 1, "beta_start", "need 0 < beta_start <= beta_end < 1")
        need(self.lr_ddpm > 0, "lr_ddpm", "must be positive")
        need(self.lr_unet > 0, "lr_unet", "must be positive")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(
            isinstance(self.splits, dict) and set(self.splits) == {"train", "val", "test"},
            "splits",
            "must have exactly the keys train, val, test",
        )
        for k, v in self.splits.items():
            need(isinstance(v, int) and v >= 0, "splits", f"{k} must be a non-negative integer")
        need(self.splits["train"] >= 1, "splits", "train must be >= 1")
        need(self.split_unit in ("patient", "slice"), "split_unit", "must be 'patient' or 'slice'")
        need(self.severity >= 0, "severity", "must be >= 0")
        need(all(s >= 0 for s in self.train_severities) and self.train_severities, "train_severities", "must be non-negative and nonempty")
        need(self.pairs_per_clean >= 1, "pairs_per_clean", "must be >= 1")
        need(self.order in ("linear", "centric"), "order", "must be 'linear' or 'centric'")
        need(self.ddpm_steps >= 1, "ddpm_steps", "must be >= 1")
        need(self.unet_steps >= 1, "unet_steps", "must be >= 1")
        need(self.val_every >= 1, "val_every", "must be >= 1")
        need(self.patience >= 1, "patience", "must be >= 1")
        need(self.time_embed_dim > 0 and self.time_embed_dim % 2 == 0, "time_embed_dim", "must be even and positive")
        need(self.channels >= 1 and self.channels % math.gcd(self.channels, 8) == 0, "channels", "must be positive")
        need(all(0 <= int(n) < self.timesteps for n in self.n_list), "n_list", "every n must satisfy 0 <= n < timesteps")
        need(self.workers is None or self.workers >= 1, "workers", "must be >= 1")
        need(self.eval_pairs is None or self.eval_pairs >= 1, "eval_pairs", "must be >= 1")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        cfg = cls(**d)
        env_seed = os.environ.get("MOCODIFF_SEED")
        if env_seed is not None:
            try:
                cfg.seed = int(env_seed)
            except ValueError:
                raise ConfigError("seed", f"MOCODIFF_SEED={env_seed!r} is not an integer") from None
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self, kind: str) -> dict:
        """Fields that determine the weights of a ``kind`` ("ddpm" or "unet")
        model trained by ``run_experiment``. Evaluation-only and
        machine-local settings are left out, so changing them keeps cached
        checkpoints valid."""
        names = _TRAIN_FIELDS["common"] + _TRAIN_FIELDS[kind]
        d = {k: v for k, v in self.to_dict().items() if k in names}
        d["data_version"] = DATA_VERSION
        return json.loads(json.dumps(d))

    def schedule(self) -> diffusion.NoiseSchedule:
        return diffusion.build_schedule(self.timesteps, self.beta_start, self.beta_end)

    def unet_config(self, seed_offset: int = 0) -> UNetConfig:
        return UNetConfig(
            in_channels=1,
            base_channels=self.channels,
            depth=self.depth,
            time_embed_dim=self.time_embed_dim,
            groups=math.gcd(self.channels, 8),
            seed=self.seed + seed_offset,
        )

    def n_workers(self) -> int:
        return self.workers or (os.cpu_count() or 1)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config (optional), apply non-None overrides, validate."""
    d: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                d = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("<file>", "top level must be an object")
    for k, v in (overrides or {}).items():
        if v is not None:
            d[k] = v
    try:
        cfg = ExperimentConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError("<file>", str(exc)) from None
    return cfg.validate()


def sub_seed(seed: int, *keys: int) -> int:
    """Stable integer seed derived from ``(seed, *keys)``."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)[0])


# purpose codes for sub_seed
PHANTOM, SIMULATE, TRAIN_DDPM, TRAIN_UNET, CORRECT, SWEEP = range(1, 7)


# ---------------------------------------------------------------- manifests


def write_manifest(path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})


def read_manifest(path) -> list[dict]:
    if not os.path.isfile(path):
        raise UsageError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    base = os.path.dirname(os.path.abspath(path))
    for r in rows:
        for k in list(r):
            if k.endswith("path") and r[k]:
                r[k] = os.path.normpath(os.path.join(base, r[k]))
    return rows


def _rel(path, manifest_path) -> str:
    return os.path.relpath(path, os.path.dirname(os.path.abspath(manifest_path))).replace(os.sep, "/")


class AuditedReader:
    """Reads tensors and records every path it touched."""

    def __init__(self):
        self.paths: list[str] = []

    def __call__(self, path) -> np.ndarray:
        self.paths.append(os.path.abspath(path))
        return dataio.read_tensor(path)

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for p in self.paths:
                fh.write(p + "\n")


def _ensure_dir(path) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory not writable: {path}")


# ---------------------------------------------------------------- splits


def split_units(rows: list[dict], cfg: ExperimentConfig) -> dict[str, set]:
    """Assign patients (or slices) to train/val/test in sorted order.

    Every row of a unit lands in the same split, so no test patient is ever
    seen in training.
    """
    if cfg.split_unit == "patient":
        units = sorted({r["patient"] for r in rows})
    else:
        units = sorted({unit_key(r) for r in rows})
    need = cfg.splits["train"] + cfg.splits["val"] + cfg.splits["test"]
    if need > len(units):
        raise ConfigError("splits", f"need {need} {cfg.split_unit}s, manifest has {len(units)}")
    a = cfg.splits["train"]
    b = a + cfg.splits["val"]
    return {"train": set(units[:a]), "val": set(units[a:b]), "test": set(units[b:need])}


def unit_key(row: dict) -> str:
    return f"{row['patient']}/{row.get('plane', '')}/{row.get('slice', 0)}"


def select(rows: list[dict], cfg: ExperimentConfig, split: str) -> list[dict]:
    if split == "all":
        return list(rows)
    units = split_units(rows, cfg)[split]
    key = (lambda r: r["patient"]) if cfg.split_unit == "patient" else unit_key
    out = [r for r in rows if key(r) in units]
    if split == "test" and cfg.eval_pairs is not None:
        # evaluation may use only the first few corrupted draws per clean image
        out = [r for r in out if "pair" not in r or int(r["pair"]) < cfg.eval_pairs]
    return out


# ---------------------------------------------------------------- steps

CLEAN_COLUMNS = ("id", "patient", "plane", "slice", "path", "seed")
PAIR_COLUMNS = ("id", "patient", "plane", "slice", "pair", "severity", "seed", "clean_path", "corrupted_path")
CORRECTED_COLUMNS = ("id", "patient", "plane", "slice", "method", "n", "clean_path", "corrupted_path", "corrected_path", "preview_path")


def phantom_gen(count: int, size: int, seed: int, out_dir, plane: str = "transverse") -> str:
    """Write ``count`` clean phantoms (one per desk-scale patient) and
    ``manifest.csv``; returns the manifest path."""
    if size < 32:
        raise UsageError("size < 32")
    if count < 1:
        raise UsageError("count must be >= 1")
    _ensure_dir(os.path.join(out_dir, "clean"))
    manifest = os.path.join(out_dir, "manifest.csv")
    rows = []
    for i in range(count):
        s = sub_seed(seed, PHANTOM, i)
        img = motionsim.phantom(np.random.default_rng(s), size, size)
        pid = f"P{i:04d}"
        path = os.path.join(out_dir, "clean", f"{pid}.mrtn")
        dataio.write_tensor(path, img)
        rows.append({"id": pid, "patient": pid, "plane": plane, "slice": 0, "path": _rel(path, manifest), "seed": s})
    write_manifest(manifest, rows, CLEAN_COLUMNS)
    return manifest


def _simulate_one(args):
    clean_path, severity, s, order = args
    clean = dataio.read_tensor(clean_path)
    rng = np.random.default_rng(s)
    sev = severity if np.isscalar(severity) else float(rng.choice(severity))
    acq = motionsim.acquisition_order(clean.shape[0], order)
    traj = motionsim.random_trajectory(rng, clean.shape[0], sev, order=acq)
    out = motionsim.simulate_motion(clean, traj, acq)
    return out, sev


def _pool_map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def simulate(
    manifest_path,
    out_dir,
    severity,
    pairs_per_clean: int = 2,
    seed: int = 0,
    order: str = "linear",
    workers: int = 1,
) -> str:
    """Create ``pairs_per_clean`` corrupted copies of every clean image.

    ``severity`` is a number, or a list to draw one value per pair from.
    Returns the path of ``pairs.csv``.
    """
    rows = read_manifest(manifest_path)
    if not rows:
        raise UsageError(f"manifest is empty: {manifest_path}")
    if pairs_per_clean < 1:
        raise UsageError("pairs-per-clean must be >= 1")
    _ensure_dir(os.path.join(out_dir, "corrupted"))
    pairs_path = os.path.join(out_dir, "pairs.csv")
    jobs, meta = [], []
    for i, r in enumerate(rows):
        for k in range(pairs_per_clean):
            s = sub_seed(seed, SIMULATE, i, k)
            jobs.append((r["path"], severity, s, order))
            meta.append((r, k, s))
    results = _pool_map(_simulate_one, jobs, workers)
    out_rows = []
    for (r, k, s), (img, sev) in zip(meta, results):
        pid = f"{r['id']}_{k}"
        path = os.path.join(out_dir, "corrupted", f"{pid}.mrtn")
        dataio.write_tensor(path, img)
        out_rows.append(
            {
                "id": pid,
                "patient": r["patient"],
                "plane": r.get("plane", ""),
                "slice": r.get("slice", 0),
                "pair": k,
                "severity": repr(float(sev)),
                "seed": s,
                "clean_path": _rel(r["path"], pairs_path),
                "corrupted_path": _rel(path, pairs_path),
            }
        )
    write_manifest(pairs_path, out_rows, PAIR_COLUMNS)
    return pairs_path


def _stack(paths, reader) -> np.ndarray:
    return np.stack([reader(p) for p in paths])[:, None]


def _write_loss_csv(path, losses, rounds) -> None:
    vals = dict(rounds)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "val_loss"])
        for i, loss in enumerate(losses, start=1):
            w.writerow([i, repr(float(loss)), repr(float(vals[i])) if i in vals else ""])


def train_ddpm_cmd(cfg: ExperimentConfig, manifest_path, out_checkpoint, plane: str | None = None) -> dict:
    """Train the denoiser on clean train-split images; validation on the val
    split drives early stopping. Writes the checkpoint, ``.loss.csv`` and an
    ``.audit.log`` listing every tensor read."""
    rows = read_manifest(manifest_path)
    if "path" not in (rows[0] if rows else {}):
        raise UsageError(f"{manifest_path} is not a clean-image manifest (no 'path' column)")
    if plane is not None:
        rows = [r for r in rows if r.get("plane", plane) == plane]
    reader = AuditedReader()
    train = _stack([r["path"] for r in select(rows, cfg, "train")], reader)
    val_rows = select(rows, cfg, "val")
    val = _stack([r["path"] for r in val_rows], reader) if val_rows else None
    model = UNet(cfg.unet_config())
    sched = cfg.schedule()
    rng = np.random.default_rng(sub_seed(cfg.seed, TRAIN_DDPM))

    def progress(step, loss):
        if (step + 1) % 100 == 0:
            log.info("ddpm step %d loss %.5f", step + 1, loss)

    hist = diffusion.train_ddpm(
        model,
        train,
        sched,
        steps=cfg.ddpm_steps,
        rng=rng,
        lr=cfg.lr_ddpm,
        batch_size=cfg.batch_size,
        val_images=val,
        val_every=cfg.val_every,
        patience=cfg.patience,
        augment=cfg.augment,
        callback=progress,
    )
    _ensure_dir(os.path.dirname(os.path.abspath(out_checkpoint)))
    extra = {
        "kind": "ddpm",
        "schedule": {"T": cfg.timesteps, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end},
        "best_step": hist.best_step,
        "optimizer": {"name": "adam", "lr": cfg.lr_ddpm},
        "experiment": cfg.fingerprint("ddpm"),
    }
    dataio.save_checkpoint(out_checkpoint, model, extra)
    _write_loss_csv(f"{out_checkpoint}.loss.csv", hist.losses, hist.val_rounds)
    reader.write_log(f"{out_checkpoint}.audit.log")
    return {"history": hist, "model": model, "files_read": list(reader.paths)}


def _pairs_dataset(rows, reader) -> baseline.PairedDataset:
    items = [
        baseline.PairedItem(
            reader(r["corrupted_path"]),
            reader(r["clean_path"]),
            patient=r["patient"],
            plane=r.get("plane", ""),
            slice=int(r.get("slice") or 0),
        )
        for r in rows
    ]
    return baseline.PairedDataset(items)


def train_baseline_cmd(cfg: ExperimentConfig, pairs_path, out_checkpoint, label: str = "UNet Synth") -> dict:
    rows = read_manifest(pairs_path)
    if not rows or "corrupted_path" not in rows[0]:
        raise UsageError(f"{pairs_path} is not a pairs manifest")
    reader = AuditedReader()
    train = _pairs_dataset(select(rows, cfg, "train"), reader)
    val = _pairs_dataset(select(rows, cfg, "val"), reader)
    if len(val) == 0:
        raise ConfigError("splits", "baseline training needs a nonempty val split")
    model = UNet(cfg.unet_config(seed_offset=1))
    rng = np.random.default_rng(sub_seed(cfg.seed, TRAIN_UNET))

    def progress(step, loss):
        if (step + 1) % 100 == 0:
            log.info("unet step %d loss %.6f", step + 1, loss)

    hist = baseline.train_supervised(
        model,
        train,
        val,
        lr=cfg.lr_unet,
        batch_size=cfg.batch_size,
        steps=cfg.unet_steps,
        rng=rng,
        val_every=cfg.val_every,
        patience=cfg.patience,
        callback=progress,
    )
    _ensure_dir(os.path.dirname(os.path.abspath(out_checkpoint)))
    extra = {
        "kind": "unet",
        "label": label,
        "best_step": hist.best_step,
        "optimizer": {"name": "adam", "lr": cfg.lr_unet},
        "experiment": cfg.fingerprint("unet"),
    }
    dataio.save_checkpoint(out_checkpoint, model, extra)
    _write_loss_csv(f"{out_checkpoint}.loss.csv", hist.losses, hist.val_rounds)
    reader.write_log(f"{out_checkpoint}.audit.log")
    return {"history": hist, "model": model}


def _schedule_from_meta(meta: dict, cfg: ExperimentConfig) -> diffusion.NoiseSchedule:
    s = meta.get("schedule")
    if s is None:
        return cfg.schedule()
    return diffusion.build_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))


def _correct_chunk(args):
    ckpt, method, n, Y, seed, literal, cfg_dict = args
    model, meta = dataio.load_checkpoint(ckpt, with_meta=True)
    if method == "unet":
        return baseline.correct_supervised(model, Y)
    sched = _schedule_from_meta(meta, ExperimentConfig.from_dict(cfg_dict))
    rng = np.random.default_rng(seed)
    out = diffusion.correct(Y, n, model, sched, rng, paper_literal_noising=literal)
    return np.clip(out, 0.0, 1.0)


def correct_cmd(
    cfg: ExperimentConfig,
    checkpoint,
    in_manifest,
    out_dir,
    method: str,
    n: int | None = None,
    split: str = "all",
    label: str | None = None,
) -> str:
    """Correct every corrupted input; write tensors, 16-bit PGM previews and
    ``corrected.csv``. Outputs are clipped to [0, 1] for both methods."""
    if method not in ("ddpm", "unet"):
        raise UsageError(f"unknown method {method!r}")
    n = cfg.n if n is None else n
    _, meta = dataio.load_checkpoint(checkpoint, with_meta=True)
    if method == "ddpm":
        T = int(meta.get("schedule", {}).get("T", cfg.timesteps))
        if not 0 <= n < T:
            raise UsageError(f"n must satisfy 0 <= n < T={T}, got {n}")
    rows = select(read_manifest(in_manifest), cfg, split)
    if not rows:
        raise UsageError("no inputs to correct")
    col = "corrupted_path" if "corrupted_path" in rows[0] else "path"
    Y = np.stack([dataio.read_tensor(r[col]) for r in rows])
    chunk = cfg.eval_chunk
    jobs = [
        (checkpoint, method, n, Y[s : s + chunk], sub_seed(cfg.seed, CORRECT, i), cfg.paper_literal_noising, cfg.to_dict())
        for i, s in enumerate(range(0, len(rows), chunk))
    ]
    if method == "ddpm" and n == 0:
        outs = [j[3].copy() for j in jobs]
    else:
        outs = _pool_map(_correct_chunk, jobs, cfg.n_workers())
    out = np.concatenate(outs)
    _ensure_dir(os.path.join(out_dir, "previews"))
    manifest = os.path.join(out_dir, "corrected.csv")
    label = label or ("Diffusion" if method == "ddpm" else meta.get("label", "UNet Synth"))
    out_rows = []
    for r, img in zip(rows, out):
        path = os.path.join(out_dir, f"{r['id']}.mrtn")
        prev = os.path.join(out_dir, "previews", f"{r['id']}.pgm")
        dataio.write_tensor(path, img)
        viz.write_pgm(prev, img)
        out_rows.append(
            {
                "id": r["id"],
                "patient": r["patient"],
                "plane": r.get("plane", ""),
                "slice": r.get("slice", 0),
                "method": label,
                "n": n if method == "ddpm" else "",
                "clean_path": _rel(r["clean_path"], manifest) if r.get("clean_path") else "",
                "corrupted_path": _rel(r[col], manifest),
                "corrected_path": _rel(path, manifest),
                "preview_path": _rel(prev, manifest),
            }
        )
    write_manifest(manifest, out_rows, CORRECTED_COLUMNS)
    return manifest


def evaluate_cmd(cfg: ExperimentConfig, manifest_path, out_csv, method: str | None = None, split: str = "all", column: str | None = None):
    """Score predictions against ``clean_path``.

    The prediction column defaults to ``corrected_path`` when present, else
    ``corrupted_path`` (scoring the uncorrected inputs)."""
    rows = select(read_manifest(manifest_path), cfg, split)
    if not rows:
        raise UsageError("no pairs to evaluate")
    if "clean_path" not in rows[0] or not rows[0]["clean_path"]:
        raise UsageError(f"{manifest_path} has no clean references")
    col = column or ("corrected_path" if "corrected_path" in rows[0] else "corrupted_path")
    recs = []
    for r in rows:
        pred = dataio.read_tensor(r[col])
        ref = dataio.read_tensor(r["clean_path"])
        label = method or r.get("method") or "Uncorrected"
        recs.append(
            metrics.evaluate_pair(
                pred, ref, patient=r["patient"], plane=r.get("plane", ""), slice=int(r.get("slice") or 0), method=label
            )
        )
    _ensure_dir(os.path.dirname(os.path.abspath(out_csv)))
    metrics.write_records_csv(out_csv, recs)
    return recs


def report_cmd(record_paths, out_dir) -> str:
    """Aggregate metric records into ``summary.csv`` and ``report.txt`` with
    one table per plane (rows UNet Real / UNet Synth / Diffusion)."""
    recs = []
    for p in record_paths:
        if not os.path.isfile(p):
            raise UsageError(f"records file not found: {p}")
        recs.extend(metrics.read_records_csv(p))
    if not recs:
        raise UsageError("no records to report")
    summaries = metrics.aggregate(recs)
    _ensure_dir(out_dir)
    metrics.write_summary_csv(os.path.join(out_dir, "summary.csv"), summaries)
    canonical = [s for s in summaries if s.method in metrics.METHOD_ORDER]
    planes = []
    for s in canonical:
        if s.plane not in planes:
            planes.append(s.plane)
    missing = {(m, p) for p in planes for m in metrics.METHOD_ORDER} - {(s.method, s.plane) for s in canonical}
    for m, p in sorted(missing):
        log.warning("report: no records for %s on %s plane", m, p)
    text = "\n\n".join(metrics.format_table(canonical, p) for p in planes) + "\n"
    path = os.path.join(out_dir, "report.txt")
    with open(path, "w") as fh:
        fh.write(text)
    return path


def sweep_cmd(cfg: ExperimentConfig, checkpoint, pairs_path, out_dir, n_list=None, split: str = "all", n_samples: int = 4):
    """Sweep the re-entry step: CSV, SVG chart and per-n PGM samples."""
    n_list = list(n_list if n_list is not None else cfg.n_list)
    model, meta = dataio.load_checkpoint(checkpoint, with_meta=True)
    sched = _schedule_from_meta(meta, cfg)
    for n in n_list:
        if not 0 <= n < sched.T:
            raise UsageError(f"n must satisfy 0 <= n < T={sched.T}, got {n}")
    rows = select(read_manifest(pairs_path), cfg, split)
    if not rows:
        raise UsageError("missing pairs")
    Y = np.stack([dataio.read_tensor(r["corrupted_path"]) for r in rows])
    X = np.stack([dataio.read_tensor(r["clean_path"]) for r in rows])
    table, images = sweep(Y, X, n_list, model, sched, cfg, keep_images=True)
    _ensure_dir(os.path.join(out_dir, "samples"))
    diffusion.write_sweep_csv(os.path.join(out_dir, "sweep.csv"), table)
    svg = viz.line_chart_svg(
        [r["n"] for r in table],
        {"NMSE": [r["nmse_mean"] for r in table], "SSIM": [r["ssim_mean"] for r in table]},
        title="Correction quality vs re-entry step n",
        xlabel="n",
    )
    with open(os.path.join(out_dir, "sweep.svg"), "w") as fh:
        fh.write(svg)
    for n, imgs in images.items():
        for i in range(min(n_samples, len(rows))):
            viz.write_pgm(os.path.join(out_dir, "samples", f"n{n:03d}_{rows[i]['id']}.pgm"), imgs[i, 0])
    return table


def sweep(Y, X, n_list, model, sched, cfg: ExperimentConfig, keep_images=False):
    """Like :func:`diffusion.sweep_n` but with outputs clipped to [0, 1] and
    chunks spread over the worker pool."""
    Y = diffusion._as_batch(Y)
    X = diffusion._as_batch(X)
    if Y.shape[0] != X.shape[0]:
        raise ValueError(f"mismatched set lengths: {Y.shape[0]} vs {X.shape[0]}")
    rows, images = [], {}
    for n in n_list:
        out = correct_stack(Y, int(n), model, sched, cfg, purpose=SWEEP)
        recs = [metrics.evaluate_pair(out[i, 0], X[i, 0]) for i in range(X.shape[0])]
        row = {"n": int(n)}
        for name in ("ssim", "nmse", "psnr"):
            row[f"{name}_mean"], row[f"{name}_std"] = metrics.mean_std([getattr(r, name) for r in recs])
        rows.append(row)
        if keep_images:
            images[int(n)] = out
    return (rows, images) if keep_images else rows


def correct_stack(Y, n, model, sched, cfg: ExperimentConfig, purpose=CORRECT) -> np.ndarray:
    """Diffusion-correct a ``[B,1,H,W]`` stack chunk by chunk (each chunk with
    its own seed), clipped to [0, 1]."""
    Y = diffusion._as_batch(Y)
    if n == 0:
        return Y.copy()
    chunk = cfg.eval_chunk
    outs = []
    for i, s in enumerate(range(0, Y.shape[0], chunk)):
        rng = np.random.default_rng(sub_seed(cfg.seed, purpose, i))
        out = diffusion.correct(Y[s : s + chunk], n, model, sched, rng, paper_literal_noising=cfg.paper_literal_noising)
        outs.append(np.clip(out, 0.0, 1.0))
    return np.concatenate(outs)


# ---------------------------------------------------------------- real data


def _pad_to_multiple(img: np.ndarray, m: int) -> np.ndarray:
    H, W = img.shape
    ph, pw = (-H) % m, (-W) % m
    return np.pad(img, ((0, ph), (0, pw)))


def prepare_nifti(
    clean_path,
    moving_path,
    out_dir,
    plane: str = "transverse",
    patient: str = "R0000",
    pad_multiple: int = 4,
    register: bool = True,
    min_foreground: float = 0.05,
    max_shift: int = 10,
) -> dict:
    """Real-volume preprocessing: read both NIfTI files, normalize each
    volume, extract ``plane`` slices, register every moving slice onto its
    clean counterpart, and write tensors plus ``manifest.csv`` (clean) and
    ``pairs.csv`` (clean vs registered motion-affected).

    Slices whose clean image has less than ``min_foreground`` nonzero pixels
    or no contrast are skipped.
    """
    clean = preprocess.normalize(dataio.read_nifti(clean_path).voxels)
    moving = preprocess.normalize(dataio.read_nifti(moving_path).voxels)
    if clean.ndim != 3 or moving.shape != clean.shape:
        raise UsageError(f"volume shapes differ or are not 3D: {clean.shape} vs {moving.shape}")
    _ensure_dir(os.path.join(out_dir, "clean"))
    _ensure_dir(os.path.join(out_dir, "corrupted"))
    manifest = os.path.join(out_dir, "manifest.csv")
    pairs = os.path.join(out_dir, "pairs.csv")
    clean_rows, pair_rows, poses = [], [], []
    for k in range(preprocess.n_slices(clean, plane)):
        c = preprocess.extract_plane(clean, plane, k)
        m = preprocess.extract_plane(moving, plane, k)
        if np.mean(c > 0) < min_foreground or np.ptp(c) == 0 or np.ptp(m) == 0:
            continue
        if register:
            p = preprocess.register_rigid(m, c, max_shift=max_shift)
            m = np.clip(preprocess.apply_rigid(m, p), 0.0, 1.0)
            poses.append((k, p))
        c = _pad_to_multiple(c, pad_multiple)
        m = _pad_to_multiple(m, pad_multiple)
        sid = f"{patient}_{plane[0]}{k:03d}"
        cp = os.path.join(out_dir, "clean", f"{sid}.mrtn")
        mp = os.path.join(out_dir, "corrupted", f"{sid}.mrtn")
        dataio.write_tensor(cp, c)
        dataio.write_tensor(mp, m)
        clean_rows.append({"id": sid, "patient": patient, "plane": plane, "slice": k, "path": _rel(cp, manifest), "seed": ""})
        pair_rows.append(
            {
                "id": sid,
                "patient": patient,
                "plane": plane,
                "slice": k,
                "pair": 0,
                "severity": "",
                "seed": "",
                "clean_path": _rel(cp, pairs),
                "corrupted_path": _rel(mp, pairs),
            }
        )
    if not clean_rows:
        raise UsageError("no usable slices in the volume pair")
    write_manifest(manifest, clean_rows, CLEAN_COLUMNS)
    write_manifest(pairs, pair_rows, PAIR_COLUMNS)
    return {"manifest": manifest, "pairs": pairs, "poses": poses}


# ---------------------------------------------------------------- experiment


_COMPANIONS = ("", ".loss.csv", ".audit.log")


def _cached(cache_dir, name: str, cfg: ExperimentConfig) -> str | None:
    """Path of a cached checkpoint trained under the same fingerprint, if any."""
    if cache_dir is None:
        return None
    path = os.path.join(cache_dir, f"{name}.mrck")
    if not all(os.path.isfile(path + suf) for suf in _COMPANIONS):
        return None
    try:
        _, meta = dataio.load_checkpoint(path, with_meta=True)
    except (OSError, dataio.FormatError):
        return None
    if meta.get("experiment") != cfg.fingerprint("ddpm" if name == "ddpm" else "unet"):
        return None
    return path


def _train_or_reuse(name, cfg, out_path, cache_dir, train) -> bool:
    """Copy a matching cached checkpoint to ``out_path`` or run ``train()``
    and store the result in the cache. Returns True on a cache hit."""
    hit = _cached(cache_dir, name, cfg)
    if hit is not None:
        for suf in _COMPANIONS:
            shutil.copyfile(hit + suf, out_path + suf)
        log.info("%s: reused %s", name, hit)
        return True
    train()
    if cache_dir is not None:
        _ensure_dir(cache_dir)
        for suf in _COMPANIONS:
            shutil.copyfile(out_path + suf, os.path.join(cache_dir, f"{name}.mrck{suf}"))
    return False


def run_experiment(cfg: ExperimentConfig, out_dir, n_patients: int | None = None, cache_dir=None, sweep: bool = True) -> dict:
    """Desk-scale phantom study from one config.

    Generates phantoms (one per patient), simulates paired data, trains the
    diffusion model on clean train images, trains the synthetic-pair U-Net
    (UNet Synth, mixed severities) and the matched-pair U-Net standing in
    for UNet Real (test severity only, independent simulator draws),
    corrects the test split with every method and writes metric records,
    the per-plane report and, if ``sweep``, the n-sweep.

    Parameters
    ----------
    cache_dir : path, optional
        Trained checkpoints are looked up here first and reused when their
        stored experiment fingerprint equals ``cfg.fingerprint(kind)``; fresh
        ones are copied in. Ignored when ``n_patients`` overrides the split
        total, since the data would differ.
    """
    total = n_patients or sum(cfg.splits.values())
    if n_patients is not None:
        cache_dir = None
    w = cfg.n_workers()
    out = {}
    manifest = phantom_gen(total, cfg.image_size, cfg.seed, os.path.join(out_dir, "data"), plane=cfg.plane)
    synth_pairs = simulate(manifest, os.path.join(out_dir, "synth"), cfg.train_severities, cfg.pairs_per_clean, cfg.seed, cfg.order, w)
    real_pairs = simulate(manifest, os.path.join(out_dir, "real"), cfg.severity, cfg.pairs_per_clean, cfg.seed + 1, cfg.order, w)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    _ensure_dir(ckpt_dir)
    ckpts = {k: os.path.join(ckpt_dir, f"{k}.mrck") for k in ("ddpm", "unet_synth", "unet_real")}
    jobs = {
        "ddpm": lambda: train_ddpm_cmd(cfg, manifest, ckpts["ddpm"]),
        "unet_synth": lambda: train_baseline_cmd(cfg, synth_pairs, ckpts["unet_synth"], label="UNet Synth"),
        "unet_real": lambda: train_baseline_cmd(cfg, real_pairs, ckpts["unet_real"], label="UNet Real"),
    }
    out["reused"] = [k for k, job in jobs.items() if _train_or_reuse(k, cfg, ckpts[k], cache_dir, job)]
    rec_dir = os.path.join(out_dir, "records")
    _ensure_dir(rec_dir)
    records = []
    records.append(evaluate_cmd(cfg, real_pairs, os.path.join(rec_dir, "uncorrected.csv"), "Uncorrected", "test"))
    for name, method, label in (
        ("unet_real", "unet", "UNet Real"),
        ("unet_synth", "unet", "UNet Synth"),
        ("diffusion", "ddpm", "Diffusion"),
    ):
        ck = ckpts["ddpm" if method == "ddpm" else name]
        corr = correct_cmd(cfg, ck, real_pairs, os.path.join(out_dir, "corrected", name), method, cfg.n, "test", label)
        records.append(evaluate_cmd(cfg, corr, os.path.join(rec_dir, f"{name}.csv")))
    out["report"] = report_cmd([os.path.join(rec_dir, f) for f in ("unet_real.csv", "unet_synth.csv", "diffusion.csv")], os.path.join(out_dir, "report"))
    if sweep:
        out["sweep"] = sweep_cmd(cfg, ckpts["ddpm"], real_pairs, os.path.join(out_dir, "sweep"), cfg.n_list, "test")
    out["records"] = records
    out["checkpoints"] = ckpts
    out["pairs"] = {"synth": synth_pairs, "real": real_pairs}
    out["manifest"] = manifest
    return out
