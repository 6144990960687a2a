"""Imputation metrics, the mean-fill baseline, reports and ablation grids."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, InfeasibleError, ShapeError

log = logging.getLogger(__name__)


def _denorm(x, stats):
    if stats is None:
        return np.asarray(x, dtype=np.float64)
    mean = np.asarray(stats["mean"], dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(stats["std"], dtype=np.float64).reshape(-1, 1, 1)
    return np.asarray(x, dtype=np.float64) * std + mean


def mse(imputed, truth, region="unobserved", mask=None, stats=None) -> float:
    """Mean squared error over the unobserved entries or over everything.

    When ``stats`` (per-channel mean/std) is given, both inputs are treated as
    normalised and mapped back to physical units first.
    """
    a, b = _denorm(imputed, stats), _denorm(truth, stats)
    if a.shape != b.shape:
        raise ShapeError(f"imputed {a.shape} vs truth {b.shape}")
    if region == "all":
        return float(np.mean((a - b) ** 2))
    if region != "unobserved":
        raise ConfigError(f"region must be unobserved or all, got {region!r}")
    if mask is None:
        raise ConfigError("region='unobserved' needs the observation mask")
    sel = np.asarray(mask) == 0
    if sel.shape != a.shape:
        raise ShapeError(f"mask {sel.shape} vs field {a.shape}")
    if not sel.any():
        raise DomainError("no unobserved entries to score")
    return float(np.mean((a[sel] - b[sel]) ** 2))


def mean_fill(x_obs, mask, fill=0.0):
    """Baseline: observed values kept, everything else set to ``fill``
    (a per-channel mean, which is 0 for standardised data)."""
    x_obs = np.asarray(x_obs, dtype=np.float64)
    fill = np.asarray(fill, dtype=np.float64)
    if fill.ndim == 1:
        fill = fill.reshape(-1, 1, 1)
    return np.where(np.asarray(mask) == 1, x_obs, np.broadcast_to(fill, x_obs.shape))


# ---------------------------------------------------------------------------
# physics-based metrics


def _cx(a, dx):
    return (np.roll(a, -1, axis=-1) - np.roll(a, 1, axis=-1)) / (2 * dx)


def _cy(a, dy):
    return (np.roll(a, -1, axis=-2) - np.roll(a, 1, axis=-2)) / (2 * dy)


def shallow_water_residual(fields, f, g, H_depth, dx, dy, dt) -> float:
    """Mean squared residual of the linear rotating shallow-water equations.

    ``fields`` is (T, 3, H, W) with channels (u, v, h) on a periodic grid and
    frames ``dt`` apart.  Time and space derivatives are centered differences,
    so residuals are evaluated on frames 1 .. T-2.
    """
    x = np.asarray(fields, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (T, 3, H, W) fields, got {x.shape}")
    if x.shape[0] < 3:
        raise ConfigError("need at least 3 frames for centered time differences")
    dtf = (x[2:] - x[:-2]) / (2 * dt)
    u, v, h = x[1:-1, 0], x[1:-1, 1], x[1:-1, 2]
    r_u = dtf[:, 0] - (f * v - g * _cx(h, dx))
    r_v = dtf[:, 1] - (-f * u - g * _cy(h, dy))
    r_h = dtf[:, 2] + H_depth * (_cx(u, dx) + _cy(v, dy))
    return float(np.mean(np.stack([r_u, r_v, r_h]) ** 2))


def richardson_truncation(r_coarse, r_fine, order=4):
    """Leading truncation estimate of r_coarse from two spacings a factor 2 apart,
    assuming r scales as spacing**order."""
    return (r_coarse - r_fine) / (1.0 - 2.0 ** (-order))


def shift_periodic(u, shift_x):
    """Exact band-limited translation of a periodic field along its last axis:
    returns u(x - shift_x) with shift_x in grid cells."""
    u = np.asarray(u, dtype=np.float64)
    W = u.shape[-1]
    k = np.fft.fftfreq(W) * W
    phase = np.exp(-2j * np.pi * k * shift_x / W)
    if W % 2 == 0:
        # the Nyquist mode has no direction; keep it real
        phase[W // 2] = np.cos(np.pi * shift_x)
    return np.fft.ifft(np.fft.fft(u, axis=-1) * phase, axis=-1).real


def advection_forward_mse(imputed_initial, truth_sequence, beta, dt, length=1.0) -> float:
    """Transport the imputed initial frame with the exact shift and average the
    MSE against every frame of ``truth_sequence`` (T, C, H, W)."""
    truth = np.asarray(truth_sequence, dtype=np.float64)
    u0 = np.asarray(imputed_initial, dtype=np.float64)
    if u0.shape != truth.shape[1:]:
        raise ShapeError(f"initial frame {u0.shape} does not match sequence frames {truth.shape[1:]}")
    W = truth.shape[-1]
    errs = []
    for k in range(truth.shape[0]):
        shifted = shift_periodic(u0, beta * k * dt * W / length)
        errs.append(np.mean((shifted - truth[k]) ** 2))
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# reports


def fingerprint(config, manifest=None) -> str:
    blob = json.dumps({"config": config, "manifest": manifest}, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    metric: str
    values: list
    mean: float = float("nan")
    std: float = float("nan")
    fingerprint: str = ""
    label: str = ""
    seed_means: list = field(default_factory=list)

    def __post_init__(self):
        self.values = [float(v) for v in self.values]
        if self.values and np.isnan(self.mean):
            self.mean = float(np.mean(self.values))
        if self.seed_means and np.isnan(self.std):
            self.std = float(np.std(self.seed_means)) if len(self.seed_means) > 1 else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", self.metric])
        for i, v in enumerate(self.values):
            w.writerow([i, repr(v)])
        return buf.getvalue()

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("values")
        d["n"] = len(self.values)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def write(self, stem):
        with open(f"{stem}.csv", "w") as fh:
            fh.write(self.to_csv())
        with open(f"{stem}.json", "w") as fh:
            fh.write(self.to_json())


def adaptive_ctx_ratio(r_train, alpha_train, r_test) -> float:
    """Context ratio that keeps the model's input density at test time equal to
    the one it saw in training: (r_train * alpha_train) / r_test."""
    for name, v in (("r_train", r_train), ("alpha_train", alpha_train), ("r_test", r_test)):
        if not 0.0 < v <= 1.0:
            raise ConfigError(f"{name} must be in (0, 1], got {v}")
    ratio = r_train * alpha_train / r_test
    if ratio > 1.0:
        raise InfeasibleError(
            f"test observations ({r_test:.3g}) are sparser than the trained input ratio "
            f"({r_train * alpha_train:.3g}); required ctx ratio {ratio:.3g} > 1"
        )
    return ratio


def run_ablation(grid, base_config, runner, seeds=(0,), label_fn=str):
    """Evaluate ``runner(cell, base_config, seed) -> per-sample values`` on each cell.

    Every cell is run with the same seeds so only the swept variable changes.
    A failing cell is logged and reported with NaN values; the rest continue.
    Returns a list of EvalReport (one per cell) with std over seed means.
    """
    reports = []
    for cell in grid:
        values, seed_means, error = [], [], None
        for seed in seeds:
            try:
                v = list(runner(cell, base_config, seed))
            except Exception as exc:  # noqa: BLE001 - keep the grid going
                log.error("ablation cell %s seed %s failed: %s", cell, seed, exc)
                error = str(exc)
                break
            values += v
            seed_means.append(float(np.mean(v)))
        rep = EvalReport("mse", values if error is None else [], fingerprint=fingerprint(base_config),
                         label=label_fn(cell), seed_means=seed_means if error is None else [])
        if error is not None:
            rep.mean = float("nan")
        reports.append(rep)
    return reports


def ablation_table(reports) -> str:
    lines = ["label,mean,std,n"]
    for r in reports:
        lines.append(f"{r.label},{r.mean:.6g},{r.std:.6g},{len(r.values)}")
    return "\n".join(lines) + "\n"
