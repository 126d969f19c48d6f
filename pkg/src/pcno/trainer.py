"""Training loop, evaluation metrics, and checkpoints.

An epoch makes one pass over the observation samples and one pass over the
physics-only instances, as a seed-shuffled interleaving of mini-batches.
Observation batches minimize the data loss (plus, optionally, the physics
loss at the data resolution); physics batches minimize the physics loss at
their own resolution.  Everything is deterministic for a fixed seed.

Boundary series for the physics terms are read back from the raw encoding's
boundary channels, so the loss targets are exactly what the operator sees.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, no_grad, parameter_gradients
from .container import read_container, write_container
from .field_encoding import LazySample, NormStats, Sample, fit_norm_stats
from .gas_network import NetworkTopology
from .losses import BoundaryArrays, LossReport, LossWeights, data_loss, pde_loss
from .model import ModelParams, PcnoConfig, forward, init_params
from .transient_solver import GridSpec


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    model: PcnoConfig
    epochs: int = 300
    batch_data: int = 8
    batch_pde: int = 2
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 100
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    val_frac: float = 0.1
    checkpoint_every: int = 50
    pde_on_data: bool | None = None   # None: enabled iff physics batches exist

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_data < 1 or self.batch_pde < 1:
            raise ValueError("batch sizes must be >= 1")
        if not (0.0 <= self.val_frac < 1.0):
            raise ValueError("val_frac must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "epochs", "batch_data", "batch_pde", "lr", "lr_decay",
            "lr_decay_every", "seed", "val_frac", "checkpoint_every",
            "pde_on_data")}
        d["model"] = self.model.to_dict()
        d["weights"] = self.weights.to_dict()
        return d

    @staticmethod
    def from_dict(obj: dict) -> "TrainConfig":
        obj = dict(obj)
        model = PcnoConfig.from_dict(obj.pop("model"))
        weights = LossWeights.from_dict(obj.pop("weights"))
        return TrainConfig(model=model, weights=weights, **obj)


@dataclass
class _Prepared:
    """One sample, ready for batching.

    Materialized samples keep their normalized encoding; lazy ones rebuild it
    per batch from the scenario so large pools never sit in memory at once.
    """

    enc: list[np.ndarray] | None              # normalized (d_a, T, X_e)
    lazy: LazySample | None
    target: list[tuple[np.ndarray, np.ndarray]] | None
    flows: dict[int, np.ndarray]              # raw boundary series (T,)
    pressures: dict[int, np.ndarray]
    grid: GridSpec
    times: np.ndarray

    def encoding_regions(self, norm: NormStats) -> list[np.ndarray]:
        if self.enc is not None:
            return self.enc
        sample = self.lazy.materialize()
        return norm.normalize_encoding(sample.encoding).regions


def _prepare(samples: list, norm: NormStats) -> list[_Prepared]:
    prepared = []
    for s in samples:
        target = None
        if s.target is not None:
            target = [(m, p) for m, p in zip(s.target.M, s.target.P)]
        if isinstance(s, LazySample):
            times = s.grid.time_points(s.schedule.horizon)
            flows = {nid: s.schedule.flow_series(nid, times)
                     for nid in s.layout.demand_nodes}
            pressures = {nid: s.schedule.pressure_series(nid, times)
                         for nid in s.layout.source_nodes}
            prepared.append(_Prepared(enc=None, lazy=s, target=target,
                                      flows=flows, pressures=pressures,
                                      grid=s.grid, times=times))
            continue
        layout = s.encoding.layout
        raw0 = s.encoding.regions[0]
        flows = {nid: raw0[layout.demand_channel(nid), :, 0].copy()
                 for nid in layout.demand_nodes}
        pressures = {nid: raw0[layout.source_channel(nid), :, 0].copy()
                     for nid in layout.source_nodes}
        times = raw0[layout.t_channel, :, 0].copy()
        enc = list(norm.normalize_encoding(s.encoding).regions)
        prepared.append(_Prepared(enc=enc, lazy=None, target=target, flows=flows,
                                  pressures=pressures, grid=s.encoding.grid,
                                  times=times))
    return prepared


def _batch_encodings(batch: list[_Prepared], norm: NormStats) -> list[np.ndarray]:
    regions = [s.encoding_regions(norm) for s in batch]
    n_regions = len(regions[0])
    return [np.stack([r[e] for r in regions]) for e in range(n_regions)]


def _batch_bounds(batch: list[_Prepared]) -> BoundaryArrays:
    return BoundaryArrays(
        times=batch[0].times,
        flows={nid: np.stack([s.flows[nid] for s in batch])
               for nid in batch[0].flows},
        pressures={nid: np.stack([s.pressures[nid] for s in batch])
                   for nid in batch[0].pressures},
    )


def _batch_targets(batch: list[_Prepared]) -> list[tuple[np.ndarray, np.ndarray]]:
    n_regions = len(batch[0].target)
    return [(np.stack([s.target[e][0] for s in batch]),
             np.stack([s.target[e][1] for s in batch]))
            for e in range(n_regions)]


def _chunks(indices: np.ndarray, size: int) -> list[np.ndarray]:
    return [indices[i:i + size] for i in range(0, len(indices), size)]


@dataclass
class TrainResult:
    params: ModelParams
    norm: NormStats
    history: list[dict]
    best_val: float | None


def train(config: TrainConfig, data_samples: list[Sample],
          pde_samples: list[Sample], network: NetworkTopology,
          norm: NormStats | None = None, out_dir: str | None = None,
          log=None) -> TrainResult:
    """Fit the operator; returns the final parameters and the loss history.

    ``norm`` may be precomputed (mandatory when no data samples are given,
    since physics-only training still needs output scales).
    """
    if len(data_samples) + len(pde_samples) < 1:
        raise ValueError("need at least one data or physics sample")
    if norm is None:
        if not data_samples:
            raise ValueError("physics-only training needs precomputed norm stats")
        norm = fit_norm_stats(data_samples)

    rng = np.random.default_rng(config.seed)
    params = init_params(config.model, seed=config.seed)
    state = AdamState()
    pde_on_data = config.pde_on_data
    if pde_on_data is None:
        pde_on_data = len(pde_samples) > 0

    n_val = int(round(config.val_frac * len(data_samples)))
    val_set = _prepare(data_samples[:n_val], norm) if n_val else []
    train_data = _prepare(data_samples[n_val:], norm)
    train_pde = _prepare(pde_samples, norm)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("epoch,lr," + LossReport.csv_header() + ",val_flow_err,seconds\n")

    history: list[dict] = []
    best_val = None
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = config.lr * config.lr_decay ** (epoch // config.lr_decay_every)

        batches: list[tuple[str, np.ndarray]] = []
        if train_data:
            idx = rng.permutation(len(train_data))
            batches += [("data", c) for c in _chunks(idx, config.batch_data)]
        if train_pde:
            idx = rng.permutation(len(train_pde))
            batches += [("pde", c) for c in _chunks(idx, config.batch_pde)]
        order = rng.permutation(len(batches))

        sums = LossReport()
        counts = {"data": 0, "pde": 0}
        for bi in order:
            kind, chunk = batches[bi]
            pool = train_data if kind == "data" else train_pde
            batch = [pool[i] for i in chunk]
            grid = batch[0].grid
            encs = _batch_encodings(batch, norm)
            pred = forward(params, encs, norm=norm)

            report = LossReport()
            if kind == "data":
                loss = data_loss(pred, _batch_targets(batch), norm,
                                 config.weights.gamma1, config.weights.gamma2)
                report.data = loss.item()
                if pde_on_data:
                    bounds = _batch_bounds(batch)
                    physics, p_report = pde_loss(pred, network, bounds, grid,
                                                 config.weights)
                    loss = loss + physics
                    report = replace(p_report, data=report.data)
            else:
                bounds = _batch_bounds(batch)
                loss, report = pde_loss(pred, network, bounds, grid, config.weights)
            report.total = loss.item()

            if not math.isfinite(report.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}",
                    snapshot={
                        "epoch": epoch, "step": step, "kind": kind,
                        "batch_indices": chunk.tolist(),
                        "report": report.__dict__,
                        "lr": lr,
                    },
                )

            grads, _ = parameter_gradients(loss, params.as_mapping())
            step += 1
            adam_step(params.as_mapping(), grads, state, lr=lr, step=step)
            del loss, pred, encs, grads   # drop the tape before the next batch

            counts[kind] += 1
            for f in LossReport.CSV_FIELDS:
                setattr(sums, f, getattr(sums, f) + getattr(report, f))

        n_batches = max(1, counts["data"] + counts["pde"])
        epoch_report = LossReport(**{f: getattr(sums, f) / n_batches
                                     for f in LossReport.CSV_FIELDS})
        val_err = None
        if val_set:
            val_err = _mean_flow_error(params, norm, val_set)
            if best_val is None or val_err < best_val:
                best_val = val_err
                if out_dir:
                    save_checkpoint(os.path.join(out_dir, "best.ckpt"), params,
                                    norm, {"epoch": epoch, "val_flow_err": val_err,
                                           "train_config": config.to_dict()})
        seconds = time.perf_counter() - t0
        entry = {"epoch": epoch, "lr": lr, "seconds": seconds,
                 "val_flow_err": val_err,
                 **{f: getattr(epoch_report, f) for f in LossReport.CSV_FIELDS}}
        history.append(entry)
        if log:
            log(f"epoch {epoch:4d}  lr {lr:.2e}  total {epoch_report.total:.4e}"
                + (f"  val {val_err:.4f}" if val_err is not None else "")
                + f"  ({seconds:.1f}s)")
        if out_dir:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(f"{epoch},{lr:.6e},{epoch_report.csv_row()},"
                         f"{'' if val_err is None else f'{val_err:.6e}'},"
                         f"{seconds:.3f}\n")
            if (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"epoch{epoch + 1:05d}.ckpt"),
                                params, norm,
                                {"epoch": epoch, "train_config": config.to_dict()})

    if out_dir:
        save_checkpoint(os.path.join(out_dir, "last.ckpt"), params, norm,
                        {"epoch": config.epochs - 1,
                         "train_config": config.to_dict()})
    return TrainResult(params=params, norm=norm, history=history, best_val=best_val)


def _mean_flow_error(params: ModelParams, norm: NormStats,
                     prepared: list[_Prepared], batch: int = 8) -> float:
    errors = []
    with no_grad():
        for chunk in _chunks(np.arange(len(prepared)), batch):
            group = [prepared[i] for i in chunk]
            pred = forward(params, _batch_encodings(group, norm), norm=norm)
            targets = _batch_targets(group)
            for b in range(len(group)):
                pred_b = [(m.data[b], p.data[b]) for m, p in pred]
                true_b = [(t[0][b], t[1][b]) for t in targets]
                flow_err, _ = relative_l2(pred_b, true_b)
                errors.append(flow_err.mean())
    return float(np.mean(errors))


def relative_l2(pred: list[tuple[np.ndarray, np.ndarray]],
                true: list[tuple[np.ndarray, np.ndarray]]
                ) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise |pred - true| / RMS(true) for one sample.

    The normalizer is the per-quantity RMS of the true field over every
    region's grid.  Returns flat error arrays (flow, pressure).
    """
    flow_sq, pressure_sq, n_flow, n_pressure = 0.0, 0.0, 0, 0
    for m_true, p_true in true:
        flow_sq += float(np.sum(np.asarray(m_true) ** 2))
        n_flow += np.asarray(m_true).size
        pressure_sq += float(np.sum(np.asarray(p_true) ** 2))
        n_pressure += np.asarray(p_true).size
    flow_rms = math.sqrt(flow_sq / n_flow)
    pressure_rms = math.sqrt(pressure_sq / n_pressure)
    if flow_rms == 0.0 or pressure_rms == 0.0:
        raise ValueError("true field has zero RMS; relative error is undefined")
    flow_err, pressure_err = [], []
    for (m, p), (m_true, p_true) in zip(pred, true):
        flow_err.append(np.abs(np.asarray(m) - np.asarray(m_true)).ravel() / flow_rms)
        pressure_err.append(np.abs(np.asarray(p) - np.asarray(p_true)).ravel()
                            / pressure_rms)
    return np.concatenate(flow_err), np.concatenate(pressure_err)


@dataclass
class EvalReport:
    """Pointwise relative-error statistics per quantity and resolution."""

    resolutions: dict[str, dict]

    def to_json(self) -> str:
        return json.dumps({"resolutions": self.resolutions}, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        return EvalReport(resolutions=json.loads(text)["resolutions"])

    def flow_mean(self, tag: str) -> float:
        return self.resolutions[tag]["flow_mean"]

    def pressure_mean(self, tag: str) -> float:
        return self.resolutions[tag]["pressure_mean"]


def evaluate(params: ModelParams, norm: NormStats,
             test_sets: dict[str, list[Sample]], batch: int = 4) -> EvalReport:
    """Forward the operator over each test set and aggregate relative errors.

    Test sets may sit at any resolution the spectrum admits; parameters are
    used as-is (no reshaping).
    """
    out: dict[str, dict] = {}
    for tag, samples in test_sets.items():
        prepared = _prepare(samples, norm)
        flow_all, pressure_all = [], []
        for chunk in _chunks(np.arange(len(prepared)), batch):
            group = [prepared[i] for i in chunk]
            with no_grad():
                pred = forward(params, _batch_encodings(group, norm), norm=norm)
            targets = _batch_targets(group)
            for b in range(len(group)):
                pred_b = [(m.data[b], p.data[b]) for m, p in pred]
                true_b = [(t[0][b], t[1][b]) for t in targets]
                fe, pe = relative_l2(pred_b, true_b)
                flow_all.append(fe)
                pressure_all.append(pe)
        fe = np.concatenate(flow_all)
        pe = np.concatenate(pressure_all)
        out[tag] = {
            "flow_mean": float(fe.mean()), "flow_std": float(fe.std()),
            "pressure_mean": float(pe.mean()), "pressure_std": float(pe.std()),
            "n_samples": len(samples), "n_points": int(fe.size),
        }
    return EvalReport(resolutions=out)


# --- checkpoints -----------------------------------------------------------------

CHECKPOINT_KIND = "pcno-checkpoint"


def save_checkpoint(path, params: ModelParams, norm: NormStats,
                    extra: dict | None = None) -> None:
    manifest = {
        "kind": CHECKPOINT_KIND,
        "model_config": params.config.to_dict(),
        "norm_stats": norm.to_dict(),
    }
    if extra:
        manifest["meta"] = extra
    write_container(path, manifest, params.arrays())


def load_checkpoint(path) -> tuple[ModelParams, NormStats, dict]:
    manifest, tensors = read_container(path)
    if manifest.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path}: not a checkpoint container")
    config = PcnoConfig.from_dict(manifest["model_config"])
    params = ModelParams(config=config, tensors={
        name: Tensor(arr, requires_grad=True) for name, arr in tensors.items()
    })
    norm = NormStats.from_dict(manifest["norm_stats"])
    return params, norm, manifest
