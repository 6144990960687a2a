"""Synthetic PDE trajectories, incomplete datasets, and their on-disk format.

Every generated sample is a (frames, channels, H, W) float64 array; 1-D
advection uses H = 1.  Three systems are available:

* advection    u_t + beta u_x = 0, evaluated exactly by shifting the initial
               condition (a short sum of Fourier modes)
* shallow_water linear rotating shallow water about a state of rest, centered
               differences in space and RK4 in time, channels (u, v, h)
* navier_stokes 2-D incompressible flow in vorticity form, pseudo-spectral with
               2/3-rule dealiasing and RK4, one vorticity channel

Field files: b"PFLD", u16 version, u8 dtype code, u8 ndim, ndim x u64 dims,
then the little-endian row-major payload.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, EmptyMaskError, GenerationError
from .masks import MaskSpec, sample_mask

# ---------------------------------------------------------------------------
# binary field format

MAGIC = b"PFLD"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}
_HEAD = struct.Struct("<4sHBB")


def encode_array(arr) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(np.dtype(arr.dtype.str.replace(">", "<")).newbyteorder("="))
    if code is None:
        raise ConfigError(f"unsupported dtype {arr.dtype} (f32, f64 or u8 only)")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return _HEAD.pack(MAGIC, VERSION, code, arr.ndim) + dims + payload


def _decode_one(buf, offset=0):
    if len(buf) - offset < _HEAD.size:
        raise ConfigError("truncated field header")
    magic, version, code, ndim = _HEAD.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ConfigError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ConfigError(f"unsupported field format version {version}")
    if code not in _DTYPES:
        raise ConfigError(f"unknown dtype code {code}")
    offset += _HEAD.size
    dims = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    dt = _DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - offset < n:
        raise ConfigError("truncated field payload")
    arr = np.frombuffer(buf, dtype=dt, count=n // dt.itemsize, offset=offset).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), offset + n


def decode_array(buf) -> np.ndarray:
    arr, end = _decode_one(buf)
    if end != len(buf):
        raise ConfigError("trailing bytes after field payload")
    return arr


def decode_array_stream(buf) -> list:
    out, off = [], 0
    while off < len(buf):
        arr, off = _decode_one(buf, off)
        out.append(arr)
    return out


def write_field(path, arr):
    with open(path, "wb") as fh:
        fh.write(encode_array(arr))


def read_field(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_array(fh.read())


# ---------------------------------------------------------------------------
# configuration

SYSTEMS = ("advection", "shallow_water", "navier_stokes")

_DEFAULT_PARAMS = {
    "advection": {"beta": [0.2, 1.0], "n_modes": 5, "max_wavenumber": 3, "length": 1.0},
    "shallow_water": {"f": [0.0, 2.0], "g": 1.0, "H_depth": [0.5, 1.5], "length": 1.0,
                      "frame_every": 4, "max_wavenumber": 2},
    "navier_stokes": {"nu": [1e-3, 5e-3], "peak_wavenumber": [2.0, 5.0], "forcing": 0.0,
                      "forcing_wavenumber": 4, "frame_every": 10, "length": 2 * np.pi},
}


@dataclass
class PdeConfig:
    system: str
    grid: tuple
    frames: int = 8
    dt: float = 0.05
    params: dict = field(default_factory=dict)
    n_samples: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r}")
        self.grid = tuple(int(g) for g in self.grid)
        if len(self.grid) == 1:
            if self.system != "advection":
                raise ConfigError("1-D grids are only supported for advection")
            self.grid = (1, self.grid[0])
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ConfigError(f"grid must be (H, W) or (N,), got {self.grid}")
        if self.frames < 1 or self.n_samples < 1 or self.dt <= 0:
            raise ConfigError("frames, n_samples and dt must be positive")
        unknown = set(self.params) - set(_DEFAULT_PARAMS[self.system])
        if unknown:
            raise ConfigError(f"unknown {self.system} parameters: {sorted(unknown)}")
        self.params = {**_DEFAULT_PARAMS[self.system], **self.params}
        if self.system == "navier_stokes":
            for n in self.grid:
                if n & (n - 1):
                    raise ConfigError(f"navier_stokes needs power-of-two grids, got {self.grid}")
        if self.system == "shallow_water":
            self._check_cfl()

    def _check_cfl(self):
        H, W = self.grid
        L = self.params["length"]
        depth = _range_hi(self.params["H_depth"])
        c = np.sqrt(self.params["g"] * depth)
        courant = self.dt * c * max(W / L, H / L)
        if courant >= 0.5:
            raise ConfigError(
                f"CFL violated: dt*sqrt(g*H)*max(1/dx,1/dy) = {courant:.3f} >= 0.5; reduce dt"
            )

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


def _range_hi(v):
    return max(v) if isinstance(v, (list, tuple)) else v


def _draw(v, rng):
    """A parameter is either fixed or a [lo, hi] uniform range."""
    if isinstance(v, (list, tuple)):
        lo, hi = v
        return float(rng.uniform(lo, hi))
    return float(v)


def sample_rng(seed, index, stream=0):
    return np.random.default_rng([int(seed), int(index), int(stream)])


# ---------------------------------------------------------------------------
# advection


def fourier_series(x, y, modes):
    """Evaluate sum_m a_m sin(2 pi (kx_m x + ky_m y) + phi_m) on the given grids."""
    out = np.zeros(np.broadcast(x, y).shape)
    for a, kx, ky, phi in modes:
        out += a * np.sin(2 * np.pi * (kx * x + ky * y) + phi)
    return out


def random_modes(rng, n_modes, kmax, two_d=True):
    n = int(rng.integers(1, n_modes + 1))
    modes = []
    for _ in range(n):
        kx = int(rng.integers(1, kmax + 1)) * (1 if rng.random() < 0.5 else -1)
        ky = int(rng.integers(-kmax, kmax + 1)) if two_d else 0
        modes.append((float(rng.uniform(0.2, 1.0)), kx, ky, float(rng.uniform(0, 2 * np.pi))))
    return modes


def advection_solution(modes, beta, times, grid, length=1.0):
    """Exact u(t, x, y) = u0(x - beta t, y) for a Fourier-mode initial condition."""
    H, W = grid
    x = np.arange(W) * length / W
    y = np.arange(H) * length / H if H > 1 else np.zeros(1)
    X, Y = np.meshgrid(x / length, y / length)
    frames = [fourier_series(X - beta * t / length, Y, modes) for t in times]
    return np.stack(frames)[:, None]


def gen_advection(config: PdeConfig, rng=None, index=None):
    p = config.params
    out, meta = [], []
    for i in _indices(config, index):
        r = rng if rng is not None else sample_rng(config.seed, i)
        beta = _draw(p["beta"], r)
        modes = random_modes(r, int(p["n_modes"]), int(p["max_wavenumber"]), two_d=config.grid[0] > 1)
        times = np.arange(config.frames) * config.dt
        out.append(advection_solution(modes, beta, times, config.grid, p["length"]))
        meta.append({"beta": beta})
    return out, meta


# ---------------------------------------------------------------------------
# shallow water


def _ddx(a, dx):
    return (np.roll(a, -1, axis=-1) - np.roll(a, 1, axis=-1)) / (2 * dx)


def _ddy(a, dy):
    return (np.roll(a, -1, axis=-2) - np.roll(a, 1, axis=-2)) / (2 * dy)


def shallow_water_rhs(state, f, g, depth, dx, dy):
    u, v, h = state
    return np.stack([
        f * v - g * _ddx(h, dx),
        -f * u - g * _ddy(h, dy),
        -depth * (_ddx(u, dx) + _ddy(v, dy)),
    ])


def rk4(rhs, y, dt):
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * dt * k1)
    k3 = rhs(y + 0.5 * dt * k2)
    k4 = rhs(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_shallow_water(state0, f, g, depth, dx, dy, dt, frames, frame_every):
    rhs = lambda s: shallow_water_rhs(s, f, g, depth, dx, dy)  # noqa: E731
    s = np.array(state0, dtype=np.float64)
    out = [s.copy()]
    for _ in range(frames - 1):
        for _ in range(frame_every):
            s = rk4(rhs, s, dt)
        out.append(s.copy())
    return np.stack(out)


def shallow_water_energy(fields, g, depth, dx, dy):
    """Per-frame 0.5 * sum(H (u^2 + v^2) + g h^2) dx dy."""
    u, v, h = fields[:, 0], fields[:, 1], fields[:, 2]
    return 0.5 * (depth * (u**2 + v**2) + g * h**2).sum(axis=(-2, -1)) * dx * dy


def gen_shallow_water(config: PdeConfig, rng=None, index=None):
    config._check_cfl()
    p = config.params
    H, W = config.grid
    L = p["length"]
    dx, dy = L / W, L / H
    out, meta = [], []
    for i in _indices(config, index):
        r = rng if rng is not None else sample_rng(config.seed, i)
        f, depth = _draw(p["f"], r), _draw(p["H_depth"], r)
        X, Y = np.meshgrid(np.arange(W) / W, np.arange(H) / H)
        modes = random_modes(r, 3, int(p["max_wavenumber"]))
        h0 = 0.1 * fourier_series(X, Y, modes)
        state = np.stack([np.zeros_like(h0), np.zeros_like(h0), h0])
        traj = integrate_shallow_water(state, f, p["g"], depth, dx, dy, config.dt, config.frames,
                                       int(p["frame_every"]))
        out.append(traj)
        meta.append({"f": f, "g": p["g"], "H_depth": depth, "dx": dx, "dy": dy,
                     "frame_dt": config.dt * int(p["frame_every"])})
    return out, meta


# ---------------------------------------------------------------------------
# Navier-Stokes (vorticity form)


class SpectralGrid:
    """Wavenumbers and operators on a periodic square-ish box of side ``length``."""

    def __init__(self, H, W, length=2 * np.pi):
        self.H, self.W = H, W
        self.kx = np.fft.fftfreq(W, d=length / (2 * np.pi * W))[None, :]
        self.ky = np.fft.fftfreq(H, d=length / (2 * np.pi * H))[:, None]
        self.k2 = self.kx**2 + self.ky**2
        self.inv_k2 = np.where(self.k2 > 0, 1.0 / np.where(self.k2 > 0, self.k2, 1.0), 0.0)
        nx = np.abs(np.fft.fftfreq(W) * W)[None, :]
        ny = np.abs(np.fft.fftfreq(H) * H)[:, None]
        self.dealias = (nx < W / 3.0) & (ny < H / 3.0)

    def velocity_hat(self, w_hat):
        psi_hat = w_hat * self.inv_k2          # lap psi = -w
        return 1j * self.ky * psi_hat, -1j * self.kx * psi_hat

    def divergence_hat(self, u_hat, v_hat):
        return 1j * self.kx * u_hat + 1j * self.ky * v_hat

    def kinetic_energy(self, w_hat):
        u_hat, v_hat = self.velocity_hat(w_hat)
        n = self.H * self.W
        return 0.5 * (np.abs(u_hat) ** 2 + np.abs(v_hat) ** 2).sum() / n**2

    def enstrophy(self, w_hat):
        return 0.5 * (np.abs(w_hat) ** 2).sum() / (self.H * self.W) ** 2


def vorticity_rhs(w_hat, grid: SpectralGrid, nu, forcing_hat):
    u_hat, v_hat = grid.velocity_hat(w_hat)
    u = tc.ifft2(u_hat).real
    v = tc.ifft2(v_hat).real
    wx = tc.ifft2(1j * grid.kx * w_hat).real
    wy = tc.ifft2(1j * grid.ky * w_hat).real
    adv_hat = tc.fft2(u * wx + v * wy) * grid.dealias
    return -adv_hat - nu * grid.k2 * w_hat + forcing_hat


def initial_vorticity(grid: SpectralGrid, k_peak, rng):
    k = np.sqrt(grid.k2)
    amp = (k / k_peak) ** 2 * np.exp(-((k / k_peak) ** 2))
    phase = np.exp(2j * np.pi * rng.random(k.shape))
    w = tc.ifft2(amp * phase * grid.dealias).real
    w_hat = tc.fft2(w - w.mean()) * grid.dealias
    w = tc.ifft2(w_hat).real
    return w_hat / np.sqrt((w**2).mean())


def integrate_navier_stokes(w0_hat, grid, nu, dt, frames, frame_every, forcing_hat=0.0):
    rhs = lambda wh: vorticity_rhs(wh, grid, nu, forcing_hat)  # noqa: E731
    w_hat = w0_hat
    w_max0 = np.abs(tc.ifft2(w0_hat).real).max()
    out = [tc.ifft2(w_hat).real]
    for _ in range(frames - 1):
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(frame_every):
                w_hat = rk4(rhs, w_hat, dt)
            w = tc.ifft2(w_hat).real
        w_max = np.abs(w).max()
        if not np.isfinite(w_max) or w_max > 1e3 * max(w_max0, 1e-12):
            raise GenerationError(f"vorticity blew up (max |w| {w_max:.3g} from {w_max0:.3g}); reduce dt")
        out.append(w)
    return np.stack(out)[:, None]


def gen_navier_stokes(config: PdeConfig, rng=None, index=None):
    p = config.params
    H, W = config.grid
    grid = SpectralGrid(H, W, p["length"])
    X, Y = np.meshgrid(np.arange(W) * p["length"] / W, np.arange(H) * p["length"] / H)
    kf = p["forcing_wavenumber"] * 2 * np.pi / p["length"]
    forcing = p["forcing"] * (np.sin(kf * (X + Y)) + np.cos(kf * (X + Y)))
    forcing_hat = tc.fft2(forcing) * grid.dealias
    out, meta = [], []
    for i in _indices(config, index):
        r = rng if rng is not None else sample_rng(config.seed, i)
        nu, k_peak = _draw(p["nu"], r), _draw(p["peak_wavenumber"], r)
        w0_hat = initial_vorticity(grid, k_peak, r)
        out.append(integrate_navier_stokes(w0_hat, grid, nu, config.dt, config.frames,
                                           int(p["frame_every"]), forcing_hat))
        meta.append({"nu": nu, "peak_wavenumber": k_peak})
    return out, meta


def _indices(config, index):
    if index is None:
        return range(config.n_samples)
    return [index] if np.isscalar(index) else index


GENERATORS = {
    "advection": gen_advection,
    "shallow_water": gen_shallow_water,
    "navier_stokes": gen_navier_stokes,
}


def _gen_chunk(args):
    config, idx = args
    return GENERATORS[config.system](config, index=idx)


def generate(config: PdeConfig, jobs: int = 1):
    """All samples of ``config``; each sample uses its own (seed, index) stream,
    so the result does not depend on ``jobs``."""
    if jobs <= 1:
        return GENERATORS[config.system](config)
    from concurrent.futures import ProcessPoolExecutor

    chunks = np.array_split(np.arange(config.n_samples), jobs)
    fields, meta = [], []
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        for f, m in ex.map(_gen_chunk, [(config, list(map(int, c))) for c in chunks if len(c)]):
            fields += f
            meta += m
    return fields, meta


# ---------------------------------------------------------------------------
# incomplete datasets


@dataclass
class IncompleteDataset:
    """Observed values (zero where unobserved), masks, and a manifest.

    ``truth`` holds the complete fields when they are known; it is only ever
    used for evaluation.
    """

    obs: np.ndarray
    masks: np.ndarray
    manifest: dict
    truth: np.ndarray | None = None

    def __len__(self):
        return self.obs.shape[0]

    @property
    def sample_shape(self):
        return self.obs.shape[1:]

    def normalized(self):
        """Observed entries standardised per channel; unobserved stay 0."""
        mean, std = channel_stats_arrays(self.manifest, self.obs.ndim)
        return ((self.obs - mean) / std) * self.masks

    def denormalize(self, x):
        mean, std = channel_stats_arrays(self.manifest, np.ndim(x))
        return x * std + mean

    def normalize(self, x):
        mean, std = channel_stats_arrays(self.manifest, np.ndim(x))
        return (x - mean) / std


def channel_stats_arrays(manifest, ndim=None):
    norm = manifest["normalization"]
    # channels sit third from the end in (..., C, H, W)
    mean = np.asarray(norm["mean"], dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(norm["std"], dtype=np.float64).reshape(-1, 1, 1)
    return mean, std


def observed_channel_stats(obs, masks):
    """Per-channel mean/std over observed entries of (N, T, C, H, W) arrays."""
    C = obs.shape[2]
    mean, std = [], []
    for c in range(C):
        vals = obs[:, :, c][masks[:, :, c] == 1]
        if vals.size == 0:
            mean.append(0.0)
            std.append(1.0)
            continue
        mean.append(float(vals.mean()))
        s = float(vals.std())
        std.append(s if s > 0 else 1.0)
    return {"mean": mean, "std": std}


def build_incomplete_dataset(fields, mask_spec: MaskSpec, rng, keep_truth=True, manifest=None):
    if len(fields) == 0:
        raise ConfigError("no fields to mask")
    truth = np.stack([np.asarray(f, dtype=np.float64) for f in fields])
    masks = np.empty(truth.shape, dtype=np.uint8)
    for i in range(truth.shape[0]):
        for _ in range(100):
            m = sample_mask(mask_spec, truth.shape[1:], rng)
            if m.any():
                break
        else:
            raise EmptyMaskError(f"sample {i}: 100 consecutive empty masks")
        masks[i] = m
    obs = truth * masks
    man = dict(manifest or {})
    man.update({
        "n_samples": int(truth.shape[0]),
        "sample_shape": list(truth.shape[1:]),
        "mask_spec": mask_spec.to_dict(),
        "observed_fraction": float(masks.mean()),
        "normalization": observed_channel_stats(obs, masks),
    })
    return IncompleteDataset(obs=obs, masks=masks, manifest=man, truth=truth if keep_truth else None)


def write_dataset(ds: IncompleteDataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for i in range(len(ds)):
        entry = {"obs": f"obs_{i:06d}.pfld", "mask": f"mask_{i:06d}.pfld"}
        write_field(os.path.join(out_dir, entry["obs"]), ds.obs[i])
        write_field(os.path.join(out_dir, entry["mask"]), ds.masks[i])
        if ds.truth is not None:
            entry["truth"] = f"truth_{i:06d}.pfld"
            write_field(os.path.join(out_dir, entry["truth"]), ds.truth[i])
        files.append(entry)
    man = dict(ds.manifest)
    man["files"] = files
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_dataset(path, with_truth=True) -> IncompleteDataset:
    with open(os.path.join(path, "manifest.json")) as fh:
        man = json.load(fh)
    files = man.pop("files")
    obs = np.stack([read_field(os.path.join(path, f["obs"])) for f in files])
    masks = np.stack([read_field(os.path.join(path, f["mask"])) for f in files])
    truth = None
    if with_truth and files and all("truth" in f for f in files):
        truth = np.stack([read_field(os.path.join(path, f["truth"])) for f in files])
    return IncompleteDataset(obs=obs, masks=masks, manifest=man, truth=truth)
