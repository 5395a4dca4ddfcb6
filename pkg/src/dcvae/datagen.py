"""Pendulum synthetic dataset: factors, observations, task labels, CSV I/O.

The generator follows a fixed causal graph: pendulum angle theta and light
angle phi are independent roots; shadow length and shadow position are
deterministic functions of (theta, phi) through a projection model. Raw
factors are normalized to [-1, 1] and mixed through a fixed injective
two-layer map to produce the observation vector. A spurious binary feature
can be appended to study distributional robustness.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractViolationError, ParseError, PreconditionError, RangeError

PIVOT_HEIGHT = 10.0
PENDULUM_LENGTH = 3.5
THETA_RANGE = (-45.0, 45.0)
PHI_RANGE = (50.0, 130.0)
FACTOR_NAMES = ("theta", "phi", "length", "position")
N_OBS_DEFAULT = 16
TRAIN_SIZE_DEFAULT = 5847
TEST_SIZE_DEFAULT = 1461

# mixer conditioning knobs; injectivity holds for any positive slope
_MIXER_SLOPE = 0.5
_MIXER_BIAS_SCALE = 0.1


def shadow_physics(theta_deg: float, phi_deg: float) -> tuple[float, float]:
    """Shadow length and position for pendulum angle theta and light angle phi.

    The pivot sits at (0, H); the ball hangs at (L sin theta, H - L cos theta).
    Parallel light at elevation phi sends a point (px, py) to ground
    coordinate px + py * cos(phi)/sin(phi). Length is the distance between
    the two ground points, position their midpoint.
    """
    phi_rad = math.radians(phi_deg)
    sin_phi = math.sin(phi_rad)
    if sin_phi <= 0.0:
        # light parallel to or under the ground: projection undefined
        raise PreconditionError(
            f"light elevation {phi_deg} deg has no ground projection")
    cot_phi = math.cos(phi_rad) / sin_phi
    theta_rad = math.radians(theta_deg)
    ball_x = PENDULUM_LENGTH * math.sin(theta_rad)
    ball_y = PIVOT_HEIGHT - PENDULUM_LENGTH * math.cos(theta_rad)
    proj_ball = ball_x + ball_y * cot_phi
    proj_pivot = PIVOT_HEIGHT * cot_phi
    length = abs(proj_ball - proj_pivot)
    position = 0.5 * (proj_ball + proj_pivot)
    return length, position


def factor_ranges() -> np.ndarray:
    """Per-factor (min, max) over the declared theta/phi domain, shape (4, 2).

    Length and position extrema come from the closed form
    length = L * |sin theta - cos theta * cot phi|: length reaches 0 at
    theta = 90 - phi (inside the domain) and its maximum at the domain
    corners; position is monotone in cot phi and, on the extreme phi faces,
    monotone in theta, so its extrema also sit at corners.
    """
    cot50 = math.cos(math.radians(50.0)) / math.sin(math.radians(50.0))
    s45 = math.sin(math.radians(45.0))
    c45 = math.cos(math.radians(45.0))
    l_max = PENDULUM_LENGTH * (s45 + c45 * cot50)
    p_max = 0.5 * (PENDULUM_LENGTH * s45
                   + (2.0 * PIVOT_HEIGHT - PENDULUM_LENGTH * c45) * cot50)
    return np.array([
        THETA_RANGE,
        PHI_RANGE,
        (0.0, l_max),
        (-p_max, p_max),
    ], dtype=np.float64)


def normalize_factors(xi_raw: np.ndarray, ranges: np.ndarray) -> np.ndarray:
    """Affine map per coordinate sending [min, max] to [-1, 1]."""
    xi_raw = np.asarray(xi_raw, dtype=np.float64)
    lo, hi = ranges[:, 0], ranges[:, 1]
    eps = 1e-9 * np.maximum(1.0, np.abs(hi - lo))  # roundoff headroom at bounds
    if np.any(xi_raw < lo - eps) or np.any(xi_raw > hi + eps):
        bad = int(np.argmax((xi_raw < lo - eps) | (xi_raw > hi + eps)))
        raise RangeError(
            f"factor '{FACTOR_NAMES[bad]}'={xi_raw[bad]} outside "
            f"[{lo[bad]}, {hi[bad]}]")
    xi_norm = 2.0 * (xi_raw - lo) / (hi - lo) - 1.0
    return np.clip(xi_norm, -1.0, 1.0)


class Mixer:
    """Fixed injective map from normalized factors to observations in R^16.

    Two layers, each a QR-orthogonalized Gaussian matrix followed by a
    gently sloped tanh; the first layer has full column rank, each tanh is
    strictly monotone and the second matrix is orthogonal, so the composite
    is injective on [-1, 1]^4.
    """

    def __init__(self, seed: int, n_factors: int = 4, n_obs: int = N_OBS_DEFAULT):
        rng = np.random.default_rng(seed)
        self.seed = int(seed)
        self.n_obs = n_obs
        self.w1 = _orthogonalize(rng.standard_normal((n_obs, n_obs)))[:, :n_factors]
        self.b1 = _MIXER_BIAS_SCALE * rng.standard_normal(n_obs)
        self.w2 = _orthogonalize(rng.standard_normal((n_obs, n_obs)))
        self.b2 = _MIXER_BIAS_SCALE * rng.standard_normal(n_obs)

    def __call__(self, xi_norm: np.ndarray) -> np.ndarray:
        xi_norm = np.asarray(xi_norm, dtype=np.float64)
        h = np.tanh(_MIXER_SLOPE * (xi_norm @ self.w1.T + self.b1))
        return np.tanh(_MIXER_SLOPE * (h @ self.w2.T + self.b2))


def _orthogonalize(g: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(g)
    # pin the sign convention so the mixer is platform-stable
    return q * np.sign(np.diagonal(r))


def mix_observation(xi_norm: np.ndarray, mixer_seed: int) -> np.ndarray:
    """Observation vector for one factor tuple; deterministic in the seed."""
    return Mixer(mixer_seed)(xi_norm)


def make_task_label(xi_norm: np.ndarray) -> int:
    """1 iff normalized pendulum angle and light angle are both positive."""
    return int(xi_norm[0] > 0.0 and xi_norm[1] > 0.0)


@dataclass
class FactorRecord:
    xi: np.ndarray           # raw (theta, phi, length, position)
    xi_norm: np.ndarray      # normalized to [-1, 1]
    y: np.ndarray            # label vector, equals xi_norm
    u: np.ndarray            # auxiliary variable, equals y by default
    task_label: int
    x: np.ndarray            # observation
    spurious: int | None = None


@dataclass
class DatasetMeta:
    factor_ranges: np.ndarray
    mixer_seed: int
    n_obs: int
    role: str


@dataclass
class DatasetSplit:
    records: list[FactorRecord]
    meta: DatasetMeta

    @property
    def role(self):
        return self.meta.role

    def __len__(self):
        return len(self.records)

    def arrays(self):
        """(X, Y, U, task, xi_norm) stacked over records."""
        x = np.stack([r.x for r in self.records]) if self.records else np.zeros((0, self.meta.n_obs))
        y = np.stack([r.y for r in self.records]) if self.records else np.zeros((0, 4))
        u = np.stack([r.u for r in self.records]) if self.records else np.zeros((0, 4))
        task = np.array([r.task_label for r in self.records], dtype=np.int64)
        xi_n = np.stack([r.xi_norm for r in self.records]) if self.records else np.zeros((0, 4))
        return x, y, u, task, xi_n

    def spurious_bits(self):
        bits = [r.spurious for r in self.records]
        if any(b is None for b in bits):
            return None
        return np.array(bits, dtype=np.int64)


_ROLE_IDS = {"train": 0, "test": 1}


def _record_from_factors(theta, phi, ranges, mixer):
    length, position = shadow_physics(theta, phi)
    xi = np.array([theta, phi, length, position], dtype=np.float64)
    xi_norm = normalize_factors(xi, ranges)
    y = xi_norm.copy()
    return FactorRecord(xi=xi, xi_norm=xi_norm, y=y, u=y.copy(),
                        task_label=make_task_label(xi_norm),
                        x=mixer(xi_norm))


def generate_split(n: int, seed: int, role: str = "train",
                   mixer_seed: int | None = None) -> DatasetSplit:
    """Sample n records with theta, phi independent uniform over their ranges.

    Per-record randomness derives from (seed, role, index), so train and
    test splits draw from disjoint streams while sharing the mixer.
    """
    if role not in _ROLE_IDS:
        raise ContractViolationError(f"unknown role {role!r}")
    mixer_seed = seed if mixer_seed is None else mixer_seed
    ranges = factor_ranges()
    mixer = Mixer(mixer_seed)
    role_id = _ROLE_IDS[role]

    def build(i: int) -> FactorRecord:
        rng = np.random.default_rng((seed, role_id, i))
        theta = rng.uniform(*THETA_RANGE)
        phi = rng.uniform(*PHI_RANGE)
        return _record_from_factors(theta, phi, ranges, mixer)

    workers = max(1, int(os.environ.get("DCVAE_THREADS", "1")))
    if workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(build, range(n)))
    else:
        records = [build(i) for i in range(n)]
    meta = DatasetMeta(factor_ranges=ranges, mixer_seed=mixer_seed,
                       n_obs=mixer.n_obs, role=role)
    return DatasetSplit(records=records, meta=meta)


def inject_spurious(split: DatasetSplit, align_ratio: float = 0.8,
                    seed: int = 0) -> DatasetSplit:
    """Append a +/-1 spurious feature to every observation.

    On the train role the bit agrees with the task label's sign with
    probability ``align_ratio``; on the test role it is an independent fair
    coin. The bit is appended twice (coordinates n, n+1) to strengthen the
    shortcut.
    """
    if not 0.0 < align_ratio <= 1.0:
        raise ContractViolationError("align_ratio must lie in (0, 1]")
    rng = np.random.default_rng((seed, 3, _ROLE_IDS[split.role]))
    out = []
    for r in split.records:
        sign = 2 * r.task_label - 1
        if split.role == "train":
            bit = sign if rng.random() < align_ratio else -sign
        else:
            bit = 1 if rng.random() < 0.5 else -1
        x = np.concatenate([r.x, [float(bit), float(bit)]])
        out.append(replace(r, x=x, spurious=int(bit)))
    meta = replace(split.meta, n_obs=split.meta.n_obs + 2)
    return DatasetSplit(records=out, meta=meta)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _columns(n_obs: int) -> list[str]:
    head = ["theta", "phi", "length", "position",
            "theta_n", "phi_n", "length_n", "position_n", "task", "spurious"]
    return head + [f"x{i}" for i in range(n_obs)]


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta")


def write_csv(split: DatasetSplit, path) -> None:
    """Write records plus a sidecar ``<path>.meta`` with the header values."""
    path = Path(path)
    cols = _columns(split.meta.n_obs)
    lines = [",".join(cols)]
    for r in split.records:
        fields = [repr(float(v)) for v in r.xi]
        fields += [repr(float(v)) for v in r.xi_norm]
        fields.append(str(int(r.task_label)))
        fields.append("" if r.spurious is None else str(int(r.spurious)))
        fields += [repr(float(v)) for v in r.x]
        lines.append(",".join(fields))
    path.write_text("\n".join(lines) + "\n")

    ranges_flat = ",".join(repr(float(v)) for v in split.meta.factor_ranges.reshape(-1))
    meta_lines = [
        f"factor_ranges={ranges_flat}",
        f"mixer_seed={split.meta.mixer_seed}",
        f"n_obs={split.meta.n_obs}",
        f"role={split.meta.role}",
    ]
    _meta_path(path).write_text("\n".join(meta_lines) + "\n")


def read_csv(path) -> DatasetSplit:
    """Read a split written by :func:`write_csv` (round-trip identity)."""
    path = Path(path)
    meta_file = _meta_path(path)
    if not meta_file.exists():
        raise ParseError(f"missing sidecar header file {meta_file}")
    meta_kv = {}
    for lineno, line in enumerate(meta_file.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError("expected key=value", line=lineno)
        key, value = line.split("=", 1)
        meta_kv[key.strip()] = value.strip()
    try:
        ranges = np.array([float(v) for v in meta_kv["factor_ranges"].split(",")],
                          dtype=np.float64).reshape(4, 2)
        meta = DatasetMeta(factor_ranges=ranges,
                           mixer_seed=int(meta_kv["mixer_seed"]),
                           n_obs=int(meta_kv["n_obs"]),
                           role=meta_kv["role"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad sidecar header: {exc}") from exc

    expected = _columns(meta.n_obs)
    records = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header.split(",") != expected:
            raise ParseError("unexpected column header", line=1)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != len(expected):
                raise ParseError(
                    f"expected {len(expected)} columns, got {len(fields)}",
                    line=lineno)
            try:
                xi = np.array([float(v) for v in fields[0:4]])
                xi_norm = np.array([float(v) for v in fields[4:8]])
                task = int(fields[8])
                spurious = None if fields[9] == "" else int(fields[9])
                x = np.array([float(v) for v in fields[10:]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from exc
            y = xi_norm.copy()
            records.append(FactorRecord(xi=xi, xi_norm=xi_norm, y=y, u=y.copy(),
                                        task_label=task, x=x, spurious=spurious))
    return DatasetSplit(records=records, meta=meta)
