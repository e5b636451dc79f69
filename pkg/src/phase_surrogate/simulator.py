"""Toy land-carbon box model with analytically known equilibria.

A world is a lat/lon grid of land cells.  Each cell carries static
parameters, per-vegetation-type traits, and layered soil pools.  Synthetic
6-hourly forcing drives a smooth flux response; net primary production is
routed into a linear chain of carbon pools integrated with monthly forward
Euler.  Because the chain is linear, every pool's equilibrium is the closed
form u/k, which makes the simulator usable as an exact oracle: surrogate
labels, restart validation, and long-spinup cross-checks all reduce to
comparisons against u/k.

Time layout: 6-hourly steps, 1460 per year.  Monthly aggregates use twelve
uniform 30-day months per year (each year's trailing 20 steps are ignored).
The 6-hourly series are never stored; they are regenerated on demand from
the world seed.

Per-cell work is embarrassingly parallel; everything here is vectorized
across cells and emitted in deterministic cell order.
"""

import dataclasses
import logging
import math

import numpy as np
from scipy.signal import lfilter

from . import blobio
from . import pipeline
from .errors import ConfigurationError, ContractError, RangeError

log = logging.getLogger(__name__)

N_PFT = 5
N_LAYERS = 9

# annual turnover rates, scaled per cell by the decomposition factor
K_FAST = 0.1
K_WOOD = 0.005
K_SLOW = 0.004

TROPICS_LAT = 23.0
TREND_RAMP_YEARS = 15.0
NUTRIENT_RAMP_YEARS = 50.0
EQUILIBRIUM_BAND = 1.0 / 200.0
OBS_NOISE = 0.005
AR1_RHO = 0.8

STEPS_PER_YEAR = pipeline.STEPS_PER_YEAR
STEPS_PER_DAY = 4

FORCING_BOUNDS = {
    "radiation": (0.0, 600.0),        # W/m2
    "precipitation": (0.0, 30.0),     # mm/day
    "pressure": (60000.0, 110000.0),  # Pa
    "humidity": (0.0, 0.05),          # kg/kg
    "temperature": (190.0, 340.0),    # K
}

PFT_POOLS = ("leaf_c", "froot_c", "deadcrootc", "deadstemc")
LAYER_POOLS = ("cwdc", "soil3c", "soil4c")
POOL_KEYS = PFT_POOLS + LAYER_POOLS
FAST_POOLS = ("leaf_c", "froot_c")
SLOW_POOLS = ("deadcrootc", "deadstemc", "cwdc", "soil3c", "soil4c")

K_GROUP = {"leaf_c": K_FAST, "froot_c": K_FAST,
           "deadcrootc": K_WOOD, "deadstemc": K_WOOD, "cwdc": K_WOOD,
           "soil3c": K_SLOW, "soil4c": K_SLOW}

GRID_PRESETS = {"coarse": (24, 48, 1.0), "fine": (48, 96, 0.5)}

# seed stream codes for the per-world RNG family
_SEED_LAND, _SEED_CELL, _SEED_POINT, _SEED_NOISE, _SEED_OBS = 1, 2, 3, 4, 7


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class GridSpec:
    n_lat: int
    n_lon: int
    resolution_deg: float
    land_fraction: float = 0.6

    def __post_init__(self):
        if self.n_lat < 2 or self.n_lon < 2:
            raise ConfigurationError("grid needs at least 2x2 cells")
        if self.resolution_deg <= 0:
            raise ConfigurationError("resolution_deg must be positive")
        if not 0.0 <= self.land_fraction <= 1.0:
            raise ConfigurationError("land_fraction must lie in [0, 1]")

    @property
    def lat_centers(self):
        step = 180.0 / self.n_lat
        return -90.0 + step * (np.arange(self.n_lat) + 0.5)

    @property
    def lon_centers(self):
        step = 360.0 / self.n_lon
        return -180.0 + step * (np.arange(self.n_lon) + 0.5)

    @property
    def spread_scale(self):
        # finer analog resolution exposes wider sub-grid heterogeneity
        return math.sqrt(1.0 / self.resolution_deg)


def grid_spec(name, land_fraction=0.6):
    if name not in GRID_PRESETS:
        raise ConfigurationError(f"unknown grid preset {name!r}; "
                                 f"choose from {sorted(GRID_PRESETS)}")
    n_lat, n_lon, res = GRID_PRESETS[name]
    return GridSpec(n_lat, n_lon, res, land_fraction)


# ---------------------------------------------------------------------------
# State containers
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class PoolState:
    """Carbon pools for a set of cells, gC/m2, float64."""
    leaf_c: np.ndarray
    froot_c: np.ndarray
    deadcrootc: np.ndarray
    deadstemc: np.ndarray
    cwdc: np.ndarray
    soil3c: np.ndarray
    soil4c: np.ndarray

    @classmethod
    def zeros(cls, n_cells, n_pft=N_PFT, n_layers=N_LAYERS):
        pft = lambda: np.zeros((n_cells, n_pft))
        lay = lambda: np.zeros((n_cells, n_layers))
        return cls(pft(), pft(), pft(), pft(), lay(), lay(), lay())

    def copy(self):
        return PoolState(**{k: getattr(self, k).copy() for k in POOL_KEYS})

    def select(self, idx):
        return PoolState(**{k: getattr(self, k)[idx].copy() for k in POOL_KEYS})

    def as_dict(self):
        return {k: getattr(self, k) for k in POOL_KEYS}


@dataclasses.dataclass
class CellParams:
    """Static per-cell parameters, arrays over land cells."""
    alpha: np.ndarray
    resp_frac: np.ndarray
    nutrient: np.ndarray
    decomp: np.ndarray
    texture: np.ndarray
    land_frac: np.ndarray
    pft_weight: np.ndarray
    sla: np.ndarray
    crootfrac: np.ndarray
    pft_code: np.ndarray
    deepest_valid_layer: np.ndarray
    alloc: np.ndarray
    deposit: np.ndarray


@dataclasses.dataclass
class ForcingPoints:
    lat: np.ndarray
    lon: np.ndarray
    trend: np.ndarray
    rad_scale: np.ndarray
    precip_scale: np.ndarray

    @property
    def n(self):
        return int(self.lat.shape[0])


@dataclasses.dataclass
class EquilibriumState:
    pools: PoolState
    tlai: np.ndarray
    gpp: np.ndarray
    ar: np.ndarray
    npp: np.ndarray


@dataclasses.dataclass
class SpinupResult:
    final: PoolState
    final_year_mean: PoolState
    monthly: list


@dataclasses.dataclass
class RestartReport:
    years: int
    window_years: int
    before: dict
    after: dict
    drift: dict
    cold_start_years: np.ndarray
    speedup: np.ndarray

    @property
    def speedup_min(self):
        return float(self.speedup.min())

    @property
    def speedup_median(self):
        return float(np.median(self.speedup))


@dataclasses.dataclass
class World:
    seed: int
    years: int
    grid: GridSpec
    land_idx: np.ndarray
    cell_lat: np.ndarray
    cell_lon: np.ndarray
    cell_point: np.ndarray
    params: CellParams
    points: ForcingPoints
    forcing_monthly: np.ndarray
    gbar_pre12: np.ndarray
    gbar_stat12: np.ndarray
    eq_pre: PoolState
    window_end: PoolState
    # derived: response means per window month and the final equilibrium
    gbar_month: np.ndarray = None
    eq_final: EquilibriumState = None

    @property
    def n_cells(self):
        return int(self.land_idx.shape[0])

    @property
    def n_pft(self):
        return int(self.params.pft_weight.shape[1])

    @property
    def n_layers(self):
        return int(self.params.deposit.shape[2])

    @property
    def months(self):
        return 12 * self.years


# ---------------------------------------------------------------------------
# Flux response
# ---------------------------------------------------------------------------

def response_g(temperature, precipitation, radiation):
    """Smooth positive flux response in (0, 1]: light saturation times
    moisture saturation times a thermal optimum at 290 K."""
    rad = np.asarray(radiation, dtype=np.float64)
    pre = np.asarray(precipitation, dtype=np.float64)
    tmp = np.asarray(temperature, dtype=np.float64)
    light = rad / (rad + 120.0)
    moisture = pre / (pre + 2.0)
    thermal = np.exp(-(((tmp - 290.0) / 26.0) ** 2))
    return light * moisture * thermal


def step_fluxes(forcing_month, params):
    """Monthly fluxes (gpp, ar, npp) in gC/m2/month from monthly-mean
    forcing.  npp is gpp - ar computed exactly; the autotrophic fraction
    lies in [1/2, 1) so the subtraction never rounds."""
    fm = np.asarray(forcing_month, dtype=np.float64)
    if fm.shape[-1] != len(pipeline.G1_FIELDS):
        raise ContractError(f"forcing_month needs {len(pipeline.G1_FIELDS)} "
                            "variables on the trailing axis")
    g = response_g(fm[..., 4], fm[..., 1], fm[..., 0])
    alpha = np.asarray(params.alpha, dtype=np.float64)
    p = np.asarray(getattr(params, "nutrient", 1.0), dtype=np.float64)
    r = np.asarray(params.resp_frac, dtype=np.float64)
    gpp = alpha * p * g / 12.0
    ar = r * gpp
    npp = gpp - ar
    return gpp, ar, npp


def _flux_from_gbar(gbar, alpha, resp_frac, nutrient):
    gpp = alpha * nutrient * gbar / 12.0
    ar = resp_frac * gpp
    npp = gpp - ar
    return gpp, ar, npp


# ---------------------------------------------------------------------------
# Synthetic forcing
# ---------------------------------------------------------------------------

def _seasonal_base(lat, frac, ramp, trend, rad_scale, precip_scale, step_in_day):
    """Deterministic 6-hourly base series for one forcing point."""
    a = abs(lat) / 90.0
    phase = 0.0 if lat >= 0 else 0.5
    season = np.cos(2.0 * np.pi * (frac - 0.54 - phase))
    diurnal = 4.0 * np.cos(2.0 * np.pi * (step_in_day / STEPS_PER_DAY) - np.pi)
    temperature = 302.0 - 49.0 * a ** 1.3 + (2.0 + 28.0 * a) * season + diurnal

    growth = 1.0 + trend * ramp
    rad_season = 1.0 + 0.42 * np.cos(2.0 * np.pi * (frac - 0.5 - phase))
    radiation = rad_scale * growth * 250.0 * max(0.22, math.cos(math.radians(lat))) * rad_season

    wet_season = 1.0 + 0.45 * np.cos(2.0 * np.pi * (frac - 0.18 - phase))
    itcz = 1.2 + 7.5 * math.exp(-(((abs(lat) - 12.0) / 26.0) ** 2))
    precipitation = precip_scale * growth * itcz * wet_season

    pressure = 96500.0 + 4500.0 * math.cos(math.radians(lat)) ** 2 \
        + 300.0 * np.cos(2.0 * np.pi * (frac - phase))
    humidity = 0.002 + 0.023 * np.exp(-(((temperature - 302.0) / 35.0) ** 2))
    return np.stack([radiation, precipitation, pressure, humidity, temperature], axis=-1)


def _point_base(point, j, years, ramp_value=None):
    """6-hourly base series [years*1460, 5] for forcing point j.  With
    ramp_value=None the trend ramps in over the first TREND_RAMP_YEARS;
    otherwise the ramp is held at the given constant."""
    steps = years * STEPS_PER_YEAR
    t = np.arange(steps, dtype=np.float64)
    frac = (t % STEPS_PER_YEAR) / STEPS_PER_YEAR
    if ramp_value is None:
        ramp = np.minimum((t / STEPS_PER_YEAR) / TREND_RAMP_YEARS, 1.0)
    else:
        ramp = np.full(steps, float(ramp_value))
    step_in_day = t % STEPS_PER_DAY
    return _seasonal_base(float(point.lat[j]), frac, ramp, float(point.trend[j]),
                          float(point.rad_scale[j]), float(point.precip_scale[j]),
                          step_in_day)


_OFFSET_SD = np.array([9.0, 0.35, 350.0, 0.0012, 1.2])
_NOISE_SD = np.array([16.0, 0.9, 250.0, 0.001, 2.2])


def _cell_offsets(seed, flat_idx, spread):
    rng = np.random.default_rng([seed, _SEED_NOISE, int(flat_idx), 0])
    return rng.standard_normal(5) * _OFFSET_SD * spread


def _cell_noise(seed, flat_idx, steps, spread):
    rng = np.random.default_rng([seed, _SEED_NOISE, int(flat_idx), 1])
    eps = rng.standard_normal((steps, 5)) * (_NOISE_SD * spread * math.sqrt(1.0 - AR1_RHO ** 2))
    return lfilter([1.0], [1.0, -AR1_RHO], eps, axis=0)


def _clip_bounds(series):
    out = series
    for i, name in enumerate(pipeline.G1_FIELDS):
        lo, hi = FORCING_BOUNDS[name]
        out[..., i] = np.clip(out[..., i], lo, hi)
    return out


def cell_forcing_series(world, cell, years=None):
    """Regenerate the 6-hourly forcing window [steps, 5] for one cell."""
    years = world.years if years is None else years
    j = int(world.cell_point[cell])
    base = _point_base(world.points, j, years)
    spread = world.grid.spread_scale
    flat = int(world.land_idx[cell])
    series = base + _cell_offsets(world.seed, flat, spread)
    series += _cell_noise(world.seed, flat, base.shape[0], spread)
    return _clip_bounds(series)


def _stationary_monthly(world_like, ramp_value):
    """Noise-free stationary-year monthly means [n_cells, 12, 5] with the
    trend ramp held constant."""
    points, seed = world_like["points"], world_like["seed"]
    spread = world_like["spread"]
    point_monthly = np.empty((points.n, 12, 5))
    for j in range(points.n):
        base = _point_base(points, j, 1, ramp_value=ramp_value)
        trimmed = pipeline.trim_to_months(base)
        point_monthly[j] = pipeline.aggregate_monthly(trimmed)
    cells = []
    for c, flat in enumerate(world_like["land_idx"]):
        off = _cell_offsets(seed, flat, spread)
        series = point_monthly[world_like["cell_point"][c]] + off
        cells.append(_clip_bounds(series.copy()))
    return np.stack(cells)


# ---------------------------------------------------------------------------
# World generation
# ---------------------------------------------------------------------------

def _land_indices(seed, grid):
    rng = np.random.default_rng([seed, _SEED_LAND, 0])
    lat = np.deg2rad(grid.lat_centers)[:, None]
    lon = np.deg2rad(grid.lon_centers)[None, :]
    field = np.zeros((grid.n_lat, grid.n_lon))
    for _ in range(4):
        fl, fo = rng.integers(1, 4, size=2)
        p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
        field += rng.uniform(0.5, 1.0) * np.cos(fl * lat + p1) * np.cos(fo * lon + p2)
    field += 0.35 * rng.standard_normal(field.shape)
    n_land = int(round(grid.land_fraction * field.size))
    if n_land < 1:
        raise ConfigurationError("land mask is empty; raise land_fraction")
    flat = field.ravel()
    chosen = np.argsort(flat, kind="stable")[::-1][:n_land]
    return np.sort(chosen)


def _spread_uniform(rng, lo, hi, scale, clip_lo=None, clip_hi=None, size=None):
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    vals = mid + rng.uniform(-1.0, 1.0, size=size) * half * scale
    if clip_lo is not None or clip_hi is not None:
        vals = np.clip(vals, clip_lo, clip_hi)
    return vals


def _draw_points(seed, grid):
    m_lat, m_lon = grid.n_lat // 2, grid.n_lon // 2
    dlat, dlon = 180.0 / m_lat, 360.0 / m_lon
    plat = -90.0 + (np.arange(m_lat) + 0.37) * dlat
    plon = -180.0 + (np.arange(m_lon) + 0.37) * dlon
    lat = np.repeat(plat, m_lon)
    lon = np.tile(plon, m_lat)
    s = grid.spread_scale
    n = lat.shape[0]
    trend = np.empty(n)
    rad_scale = np.empty(n)
    precip_scale = np.empty(n)
    for j in range(n):
        rng = np.random.default_rng([seed, _SEED_POINT, j])
        trend[j] = _spread_uniform(rng, -0.25, 0.25, s, -0.4, 0.4)
        rad_scale[j] = _spread_uniform(rng, 0.85, 1.15, s, 0.7, 1.3)
        precip_scale[j] = _spread_uniform(rng, 0.9, 1.1, s, 0.8, 1.2)
    return ForcingPoints(lat, lon, trend, rad_scale, precip_scale)


# Characteristic per-type profiles: grassy types (low index) are leafy
# with high specific leaf area, woody types (high index) are stem-heavy.
# Cells modulate these shared profiles instead of redrawing them, the way
# real vegetation types keep their identity across sites.
_PFT_BASE_WEIGHT = np.array([1.5, 1.2, 1.0, 0.8, 0.6])
_PFT_BASE_ALLOC = np.array([
    [0.34, 0.28, 0.045, 0.035, 0.30],
    [0.27, 0.24, 0.080, 0.090, 0.32],
    [0.20, 0.20, 0.130, 0.170, 0.30],
    [0.14, 0.16, 0.185, 0.245, 0.27],
    [0.10, 0.13, 0.230, 0.310, 0.23],
])
_PFT_BASE_SLA = np.array([0.030, 0.025, 0.020, 0.016, 0.012])


def _draw_cell_params(seed, grid, land_idx, cell_lat, n_pft, n_layers):
    n = land_idx.shape[0]
    s = grid.spread_scale
    alpha = np.empty(n)
    resp_frac = np.empty(n)
    nutrient = np.ones(n)
    decomp = np.empty(n)
    texture = np.empty(n)
    land_frac = np.empty(n)
    pft_weight = np.empty((n, n_pft))
    sla = np.empty((n, n_pft))
    crootfrac = np.empty((n, n_pft))
    alloc = np.empty((n, n_pft, 5))
    deposit = np.empty((n, 3, n_layers))
    layers = np.arange(n_layers, dtype=np.float64)
    for c, flat in enumerate(land_idx):
        rng = np.random.default_rng([seed, _SEED_CELL, int(flat)])
        alpha[c] = _spread_uniform(rng, 1600.0, 2400.0, s, 800.0, 3600.0)
        resp_frac[c] = _spread_uniform(rng, 0.86, 0.94, s, 0.84, 0.96)
        decomp[c] = _spread_uniform(rng, 0.65, 1.08, s, 0.55, 1.095)
        texture[c] = _spread_uniform(rng, 0.0, 1.0, s, 0.0, 1.0)
        land_frac[c] = _spread_uniform(rng, 0.55, 1.0, s, 0.05, 1.0)
        depletion = _spread_uniform(rng, 0.05, 0.45, s, 0.02, 0.6)
        if abs(cell_lat[c]) < TROPICS_LAT:
            nutrient[c] = 1.0 - depletion
        w = _PFT_BASE_WEIGHT[:n_pft] * rng.gamma(16.0, size=n_pft)
        pft_weight[c] = w / w.sum()
        sla[c] = _PFT_BASE_SLA[:n_pft] * _spread_uniform(
            rng, 0.85, 1.15, s, 0.6, 1.6, size=n_pft)
        crootfrac[c] = _spread_uniform(rng, 0.1, 0.6, s, 0.02, 0.9, size=n_pft)
        a = _PFT_BASE_ALLOC[:n_pft] * rng.gamma(25.0, size=(n_pft, 5))
        alloc[c] = a / a.sum(axis=1, keepdims=True)
        group = rng.gamma(5.0, size=3)
        z0 = _spread_uniform(rng, 3.0, 5.0, s, 2.5, 6.0, size=3)
        prof = group[:, None] * np.exp(-layers[None, :] / z0[:, None])
        deposit[c] = prof / prof.sum()
    pft_code = np.tile(np.arange(n_pft, dtype=np.int64), (n, 1))
    deepest = np.full(n, n_layers, dtype=np.int64)
    return CellParams(alpha, resp_frac, nutrient, decomp, texture, land_frac,
                      pft_weight, sla, crootfrac, pft_code, deepest, alloc, deposit)


def _window_monthly_forcing(seed, grid, years, land_idx, cell_point, points):
    """Monthly-mean forcing [n_cells, months, 5] over the simulated window."""
    months = 12 * years
    n = land_idx.shape[0]
    out = np.empty((n, months, 5))
    spread = grid.spread_scale
    order = np.argsort(cell_point, kind="stable")
    base_cache_j = -1
    base = None
    for c in order:
        j = int(cell_point[c])
        if j != base_cache_j:
            base = _point_base(points, j, years)
            base_cache_j = j
        flat = int(land_idx[c])
        series = base + _cell_offsets(seed, flat, spread)
        series = series + _cell_noise(seed, flat, base.shape[0], spread)
        series = _clip_bounds(series)
        out[c] = pipeline.aggregate_monthly(pipeline.trim_to_months(series))
    return out


def route_weights(params):
    """Fraction of cell NPP entering each pool: vegetation-type pools get
    weight x allocation, layered pools get the ground share times the
    deposition profile.  Weights sum to 1 per cell."""
    pw = params.pft_weight
    ground = (pw * params.alloc[:, :, 4]).sum(axis=1)
    return {
        "leaf_c": pw * params.alloc[:, :, 0],
        "froot_c": pw * params.alloc[:, :, 1],
        "deadcrootc": pw * params.alloc[:, :, 2],
        "deadstemc": pw * params.alloc[:, :, 3],
        "cwdc": ground[:, None] * params.deposit[:, 0],
        "soil3c": ground[:, None] * params.deposit[:, 1],
        "soil4c": ground[:, None] * params.deposit[:, 2],
    }


def kappa_annual(params):
    return {k: K_GROUP[k] * params.decomp for k in POOL_KEYS}


def advance_month(state, npp_month, route, kappa):
    """One forward-Euler month: C += (u - (k/12) C), clamped at zero.
    The state change equals the computed net flux exactly (pre-clamp)."""
    new = {}
    for key in POOL_KEYS:
        pool = getattr(state, key)
        u = npp_month[:, None] * route[key]
        kap = (kappa[key] / 12.0)[:, None]
        updated = pool + (u - kap * pool)
        new[key] = np.maximum(updated, 0.0)
    return PoolState(**new)


def _check_stability(kappa):
    worst = max(float(np.max(k)) for k in kappa.values()) / 12.0
    if worst >= 2.0:
        raise ConfigurationError(f"unstable monthly step: k*dt = {worst:.3f} >= 2")


def _gbar_of(forcing_monthly):
    return response_g(forcing_monthly[..., 4], forcing_monthly[..., 1],
                      forcing_monthly[..., 0])


def _schedule(world, year, month, idx):
    """Monthly response means and nutrient factor for a spin-up year.
    During the simulated window the nutrient factor is 1; afterwards the
    stationary climatology repeats and the factor phases in linearly."""
    if year < world.years:
        gbar = world.gbar_month[idx, 12 * year + month]
        p = np.ones(idx.shape[0])
    else:
        gbar = world.gbar_stat12[idx, month]
        frac = min(1.0, (year - world.years + 1) / NUTRIENT_RAMP_YEARS)
        p = 1.0 + (world.params.nutrient[idx] - 1.0) * frac
    return gbar, p


def spinup(world, years, initial=None, cells=None, record=False):
    """Monthly forward-Euler integration over the given number of years.

    Returns the final state, the mean state over the last simulated year,
    and, when record=True, the full monthly trajectory.
    """
    if years < 1:
        raise ConfigurationError("spinup needs years >= 1")
    idx = np.arange(world.n_cells) if cells is None else np.asarray(cells)
    params = _select_params(world.params, idx)
    route = route_weights(params)
    kappa = kappa_annual(params)
    _check_stability(kappa)
    state = PoolState.zeros(idx.shape[0], world.n_pft, world.n_layers) \
        if initial is None else initial.copy()
    alpha, r = params.alpha, params.resp_frac
    monthly = [] if record else None
    tail = []
    for m in range(12 * years):
        year, month = divmod(m, 12)
        gbar, p = _schedule(world, year, month, idx)
        _, _, npp = _flux_from_gbar(gbar, alpha, r, p)
        state = advance_month(state, npp, route, kappa)
        if record:
            monthly.append(state)
        if m >= 12 * (years - 1):
            tail.append(state)
    mean = PoolState(**{k: np.mean([getattr(s, k) for s in tail], axis=0)
                        for k in POOL_KEYS})
    return SpinupResult(final=state, final_year_mean=mean, monthly=monthly)


def _select_params(params, idx):
    return CellParams(**{f.name: getattr(params, f.name)[idx]
                         for f in dataclasses.fields(CellParams)})


def _equilibrium_from(gbar12, params):
    """Closed-form equilibria u/k for the stationary monthly climatology."""
    alpha, r, p = params.alpha, params.resp_frac, params.nutrient
    gpp_m, ar_m, npp_m = _flux_from_gbar(gbar12, alpha[:, None], r[:, None], p[:, None])
    gpp = 12.0 * gpp_m.mean(axis=1)
    ar = r * gpp
    npp = gpp - ar
    route = route_weights(params)
    kappa = kappa_annual(params)
    pools = {}
    for key in POOL_KEYS:
        pools[key] = (npp[:, None] * route[key]) / kappa[key][:, None]
    state = PoolState(**pools)
    tlai = params.sla * state.leaf_c
    return EquilibriumState(pools=state, tlai=tlai, gpp=gpp, ar=ar, npp=npp)


def analytic_equilibrium(world, cells=None):
    """Exact long-run equilibrium under the stationary end-of-window
    climatology with the nutrient factor fully phased in."""
    idx = np.arange(world.n_cells) if cells is None else np.asarray(cells)
    params = _select_params(world.params, idx)
    return _equilibrium_from(world.gbar_stat12[idx], params)


def cold_start_years(k):
    """Years for a zero-initialized pool to come within 0.5% of u/k."""
    return math.log(1.0 / EQUILIBRIUM_BAND) / k


def restart_run(initial, world, years=100, cells=None):
    """Integrate from a supplied state under constant stationary-mean
    forcing and report distances to the analytic equilibrium before and
    after, per-pool drift, and the effective speedup over a cold start."""
    if years < 1:
        raise ConfigurationError("restart_run needs years >= 1")
    idx = np.arange(world.n_cells) if cells is None else np.asarray(cells)
    params = _select_params(world.params, idx)
    route = route_weights(params)
    kappa = kappa_annual(params)
    _check_stability(kappa)
    eq = analytic_equilibrium(world, idx)
    _, _, npp_m12 = _flux_from_gbar(world.gbar_stat12[idx], params.alpha[:, None],
                                    params.resp_frac[:, None], params.nutrient[:, None])
    npp_const = npp_m12.mean(axis=1)

    state = initial.copy()
    before = _distance_report(state, eq.pools)
    for _ in range(12 * years):
        state = advance_month(state, npp_const, route, kappa)
    after = _distance_report(state, eq.pools)
    drift = _distance_report(state, initial, pools=SLOW_POOLS)

    k_slow = K_SLOW * params.decomp
    cold = np.log(1.0 / EQUILIBRIUM_BAND) / k_slow
    speedup = cold / float(world.years)
    report = RestartReport(years=years, window_years=world.years,
                           before=before, after=after, drift=drift,
                           cold_start_years=cold, speedup=speedup)
    return state, report


def _distance_report(state, reference, pools=POOL_KEYS):
    out = {}
    for key in pools:
        a = getattr(state, key)
        b = getattr(reference, key)
        denom = np.maximum(np.abs(b), 1e-30)
        rel = np.abs(a - b) / denom
        out[key] = {"median": float(np.median(rel)), "max": float(rel.max())}
    return out


# ---------------------------------------------------------------------------
# Construction entry point
# ---------------------------------------------------------------------------

def generate_world(seed, grid, years=20):
    """Build a fully specified world: land cells, parameters, forcing
    network, monthly forcing window, stationary climatologies, analytic
    equilibria, and the end-of-window pool state."""
    if not isinstance(grid, GridSpec):
        raise ConfigurationError("grid must be a GridSpec")
    if years < 1:
        raise ConfigurationError("years must be >= 1")
    land_idx = _land_indices(seed, grid)
    ilat, ilon = np.divmod(land_idx, grid.n_lon)
    cell_lat = grid.lat_centers[ilat]
    cell_lon = grid.lon_centers[ilon]

    points = _draw_points(seed, grid)
    cell_point = pipeline.kdtree_map(np.stack([cell_lat, cell_lon], axis=1),
                                     np.stack([points.lat, points.lon], axis=1))
    params = _draw_cell_params(seed, grid, land_idx, cell_lat, N_PFT, N_LAYERS)

    log.info("generating forcing for %d cells (%d points, %d years)",
             land_idx.shape[0], points.n, years)
    forcing_monthly = _window_monthly_forcing(seed, grid, years, land_idx,
                                              cell_point, points)
    world_like = {"points": points, "seed": seed, "spread": grid.spread_scale,
                  "land_idx": land_idx, "cell_point": cell_point}
    pre = _stationary_monthly(world_like, ramp_value=0.0)
    stat = _stationary_monthly(world_like, ramp_value=1.0)

    world = World(seed=int(seed), years=int(years), grid=grid,
                  land_idx=land_idx, cell_lat=cell_lat, cell_lon=cell_lon,
                  cell_point=cell_point, params=params, points=points,
                  forcing_monthly=forcing_monthly,
                  gbar_pre12=_gbar_of(pre), gbar_stat12=_gbar_of(stat),
                  eq_pre=None, window_end=None)
    world.gbar_month = _gbar_of(forcing_monthly)

    pre_params = dataclasses.replace(params, nutrient=np.ones(world.n_cells))
    world.eq_pre = _equilibrium_from(world.gbar_pre12, pre_params).pools
    world.eq_final = _equilibrium_from(world.gbar_stat12, params)
    world.window_end = spinup(world, years, initial=world.eq_pre.copy()).final
    return world


# ---------------------------------------------------------------------------
# Sample export
# ---------------------------------------------------------------------------

def export_samples(world, window_years=None):
    """One SampleRecord per cell: monthly forcing over the last
    window_years, static attributes, traits, end-of-window states with
    small observation noise, and exact equilibrium targets."""
    wy = world.years if window_years is None else int(window_years)
    if wy > world.years:
        raise RangeError(f"window of {wy} yr exceeds simulated span of "
                         f"{world.years} yr")
    if wy < 1:
        raise RangeError("window must cover at least 1 yr")
    months = 12 * wy
    eq = world.eq_final
    records = []
    for c in range(world.n_cells):
        p = world.params
        rng = np.random.default_rng([world.seed, _SEED_OBS, int(world.land_idx[c])])
        g1 = world.forcing_monthly[c, world.months - months:]
        g2 = np.array([world.cell_lat[c], world.cell_lon[c], p.land_frac[c],
                       p.alpha[c], p.resp_frac[c], p.nutrient[c],
                       p.decomp[c], p.texture[c]])
        g3 = np.stack([p.pft_weight[c], p.sla[c], p.crootfrac[c]], axis=1)
        w = world.window_end
        tlai_end = p.sla[c] * w.leaf_c[c]
        g4 = np.stack([w.leaf_c[c], w.froot_c[c], w.deadcrootc[c],
                       w.deadstemc[c], tlai_end], axis=1)
        g4 = g4 * (1.0 + OBS_NOISE * rng.standard_normal(g4.shape))
        g5 = np.stack([w.cwdc[c], w.soil3c[c], w.soil4c[c]], axis=1)
        g5 = g5 * (1.0 + OBS_NOISE * rng.standard_normal(g5.shape))
        targets = {
            "deadcrootc": eq.pools.deadcrootc[c].copy(),
            "deadstemc": eq.pools.deadstemc[c].copy(),
            "tlai": eq.tlai[c].copy(),
            "cwdc": eq.pools.cwdc[c].copy(),
            "soil3c": eq.pools.soil3c[c].copy(),
            "soil4c": eq.pools.soil4c[c].copy(),
            "gpp": float(eq.gpp[c]),
            "ar": float(eq.ar[c]),
            "npp": float(eq.npp[c]),
        }
        records.append(pipeline.SampleRecord(
            cell_id=int(world.land_idx[c]),
            lat=float(world.cell_lat[c]), lon=float(world.cell_lon[c]),
            pft_code=p.pft_code[c].copy(),
            deepest_valid_layer=int(p.deepest_valid_layer[c]),
            g1=g1.copy(), g2=g2, g3=g3,
            g4=np.maximum(g4, 0.0), g5=np.maximum(g5, 0.0),
            targets=targets))
    return records


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _pool_arrays(prefix, state):
    return {f"{prefix}.{k}": getattr(state, k) for k in POOL_KEYS}


def save_world(world, path):
    manifest = {
        "format": "world",
        "version": 1,
        "seed": world.seed,
        "years": world.years,
        "grid": {"n_lat": world.grid.n_lat, "n_lon": world.grid.n_lon,
                 "resolution_deg": world.grid.resolution_deg,
                 "land_fraction": world.grid.land_fraction},
        "n_cells": world.n_cells,
        "n_pft": world.n_pft,
        "n_layers": world.n_layers,
        "turnover": {"k_fast": K_FAST, "k_wood": K_WOOD, "k_slow": K_SLOW},
    }
    arrays = {
        "land_idx": world.land_idx.astype(np.float64),
        "cell_lat": world.cell_lat, "cell_lon": world.cell_lon,
        "cell_point": world.cell_point.astype(np.float64),
        "points.lat": world.points.lat, "points.lon": world.points.lon,
        "points.trend": world.points.trend,
        "points.rad_scale": world.points.rad_scale,
        "points.precip_scale": world.points.precip_scale,
        "forcing_monthly": world.forcing_monthly,
        "gbar_pre12": world.gbar_pre12, "gbar_stat12": world.gbar_stat12,
        "eq.tlai": world.eq_final.tlai,
        "eq.gpp": world.eq_final.gpp, "eq.ar": world.eq_final.ar,
        "eq.npp": world.eq_final.npp,
    }
    for f in dataclasses.fields(CellParams):
        arrays[f"params.{f.name}"] = getattr(world.params, f.name).astype(np.float64)
    arrays.update(_pool_arrays("eq_pre", world.eq_pre))
    arrays.update(_pool_arrays("eq", world.eq_final.pools))
    arrays.update(_pool_arrays("window", world.window_end))
    manifest["params"] = sorted(arrays)
    blobio.write_model_file(path, manifest, arrays)


def _pools_from(arrays, prefix):
    return PoolState(**{k: arrays[f"{prefix}.{k}"] for k in POOL_KEYS})


def load_world(path):
    manifest, arrays = blobio.read_model_file(path)
    if manifest.get("format") != "world":
        raise ContractError(f"{path} is not a world file")
    g = manifest["grid"]
    grid = GridSpec(g["n_lat"], g["n_lon"], g["resolution_deg"], g["land_fraction"])
    fields = {}
    for f in dataclasses.fields(CellParams):
        arr = arrays[f"params.{f.name}"]
        if f.name in ("pft_code", "deepest_valid_layer"):
            arr = arr.astype(np.int64)
        fields[f.name] = arr
    params = CellParams(**fields)
    points = ForcingPoints(arrays["points.lat"], arrays["points.lon"],
                           arrays["points.trend"], arrays["points.rad_scale"],
                           arrays["points.precip_scale"])
    world = World(seed=manifest["seed"], years=manifest["years"], grid=grid,
                  land_idx=arrays["land_idx"].astype(np.int64),
                  cell_lat=arrays["cell_lat"], cell_lon=arrays["cell_lon"],
                  cell_point=arrays["cell_point"].astype(np.int64),
                  params=params, points=points,
                  forcing_monthly=arrays["forcing_monthly"],
                  gbar_pre12=arrays["gbar_pre12"],
                  gbar_stat12=arrays["gbar_stat12"],
                  eq_pre=_pools_from(arrays, "eq_pre"),
                  window_end=_pools_from(arrays, "window"))
    world.gbar_month = _gbar_of(world.forcing_monthly)
    world.eq_final = EquilibriumState(pools=_pools_from(arrays, "eq"),
                                      tlai=arrays["eq.tlai"],
                                      gpp=arrays["eq.gpp"], ar=arrays["eq.ar"],
                                      npp=arrays["eq.npp"])
    return world


def load_restart_state(world, path):
    """Read a restart file and validate it against the world; fast pools
    start from zero since the file carries only slow pools.  Returns the
    initial PoolState and the stored tlai diagnostic."""
    cell_ids, pools, n_pft, n_layers = blobio.read_restart(path)
    if n_pft != world.n_pft or n_layers != world.n_layers:
        raise ContractError("restart dimensions do not match the world")
    pos = {int(cid): i for i, cid in enumerate(cell_ids)}
    want = [int(v) for v in world.land_idx]
    missing = [cid for cid in want if cid not in pos]
    if missing:
        raise ContractError(f"restart file is missing {len(missing)} cells "
                            f"(first: {missing[:3]})")
    order = np.array([pos[cid] for cid in want])
    state = PoolState.zeros(world.n_cells, world.n_pft, world.n_layers)
    for key in ("deadcrootc", "deadstemc", "cwdc", "soil3c", "soil4c"):
        vals = pools[key][order].astype(np.float64)
        if not np.all(np.isfinite(vals)) or vals.min() < 0:
            raise ContractError(f"restart pool {key} must be finite and "
                                "non-negative")
        setattr(state, key, vals)
    return state, pools["tlai"][order].astype(np.float64)


def export_restart(world, pools, path):
    """Write predicted slow pools as a restart file in world cell order.
    ``pools`` maps each restart pool name to a [n_cells, width] array."""
    arrays = {k: np.asarray(pools[k], dtype=np.float64) for k in blobio.RESTART_POOLS}
    blobio.write_restart(path, world.land_idx, arrays, world.n_pft, world.n_layers)
