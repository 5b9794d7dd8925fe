"""Downlink channel model: path loss, shadowing, fast fading, per-subcarrier rates.

The cell is a disk with the base station at the origin. Each user has a
position, a heading and a speed; large-scale loss follows a log-distance law
plus lognormal shadowing, and small-scale fading is a unit-mean Rayleigh
power gain drawn per (user, subcarrier). SNR per subcarrier is converted to
an achievable rate either through gap-adjusted Shannon capacity or through a
discrete modulation/coding table.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

GAP_MODES = ("multiply", "divide")
RATE_MODES = ("shannon-gap", "mcs-table")


def dbm_to_watts(dbm):
    return 10.0 ** ((dbm - 30.0) / 10.0)


def db_to_linear(db):
    return 10.0 ** (db / 10.0)


def snr_gap_factor(ber_target):
    """SNR gap for a target uncoded BER: -ln(5*BER)/1.5.

    Positive for BER below 0.2; raises for BER at or above that boundary's
    complement where the log would go non-negative.
    """
    if not 0.0 < ber_target < 0.2:
        raise ValueError(
            f"ber_target must lie in (0, 0.2), got {ber_target!r}"
        )
    return -math.log(5.0 * ber_target) / 1.5


def subcarrier_snr(gain_power, tx_power_per_sc_w, noise_per_sc_w, gap, gap_mode="multiply"):
    """Effective SNR of one subcarrier from its power gain.

    ``multiply`` applies the gap as a multiplicative factor on g*P/N;
    ``divide`` applies the conventional SNR-gap reading g*P/(N*gap).
    Broadcasts over numpy arrays.
    """
    if gap_mode not in GAP_MODES:
        raise ValueError(f"unknown gap_mode {gap_mode!r}")
    raw = gain_power * tx_power_per_sc_w / noise_per_sc_w
    if gap_mode == "multiply":
        return gap * raw
    return raw / gap


def default_mcs_table():
    """(snr_threshold, bits_per_symbol_per_hz) rows for QPSK..64QAM, rates 1/2..7/8.

    Thresholds are the SNR at which gap-adjusted Shannon efficiency reaches
    each entry's spectral efficiency, so the table quantizes the continuous
    curve from below.
    """
    bits = {"qpsk": 2, "16qam": 4, "32qam": 5, "64qam": 6}
    code_rates = (0.5, 2.0 / 3.0, 0.75, 7.0 / 8.0)
    effs = sorted({b * r for b in bits.values() for r in code_rates})
    return [(2.0 ** eff - 1.0, eff) for eff in effs]


def rate_from_snr(eta, delta_f_hz, rate_mode="shannon-gap", mcs_table=None):
    """Achievable rate in bit/s for effective SNR ``eta`` on one subcarrier.

    shannon-gap: log2(1 + eta) * delta_f. mcs-table: largest table spectral
    efficiency whose threshold is <= eta, times delta_f (0 below the first
    threshold). Broadcasts over arrays of eta.
    """
    if delta_f_hz <= 0:
        raise ValueError("delta_f_hz must be positive")
    if rate_mode == "shannon-gap":
        return np.log2(1.0 + eta) * delta_f_hz
    if rate_mode == "mcs-table":
        if not mcs_table:
            raise ValueError("mcs-table rate mode requires a non-empty table")
        thresholds = np.array([row[0] for row in mcs_table])
        effs = np.array([row[1] for row in mcs_table])
        order = np.argsort(thresholds)
        thresholds, effs = thresholds[order], effs[order]
        idx = np.searchsorted(thresholds, eta, side="right")
        eff = np.where(idx > 0, effs[np.maximum(idx - 1, 0)], 0.0)
        return eff * delta_f_hz
    raise ValueError(f"unknown rate_mode {rate_mode!r}")


def path_loss_db(distance_m, ref_db=38.4, exponent_coeff=20.0):
    """Log-distance path loss: ref + coeff*log10(d), d in metres."""
    return ref_db + exponent_coeff * np.log10(distance_m)


@dataclass
class ChannelParams:
    """Cell- and PHY-level parameters.

    ``tx_power_dbm`` and ``noise_power_dbm`` are totals over the whole band;
    per-subcarrier power and noise are these divided by ``num_subcarriers``.
    """

    bandwidth_hz: float = 1.024e6
    num_subcarriers: int = 256
    tx_power_dbm: float = 43.0
    noise_power_dbm: float = -108.0
    ber_target: float = 1e-4
    path_loss_ref_db: float = 38.4
    path_loss_exponent_coeff: float = 20.0
    shadowing_sigma_db: float = 8.0
    cell_radius_m: float = 1000.0
    gap_mode: str = "multiply"
    rate_mode: str = "shannon-gap"
    mcs_table: list = None
    min_distance_m: float = 10.0
    shadow_decorrelation_m: float = 50.0
    speed_mean_mps: float = 20.0
    speed_std_mps: float = 2.24
    heading_epoch_mean_s: float = 10.0
    fading_rho: float = 0.0  # slot-to-slot Gauss-Markov coefficient; 0 = i.i.d.

    def __post_init__(self):
        if self.num_subcarriers < 1:
            raise ValueError("num_subcarriers must be >= 1")
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth_hz must be positive")
        if not 0.0 < self.ber_target < 0.2:
            raise ValueError("ber_target must lie in (0, 0.2)")
        if self.gap_mode not in GAP_MODES:
            raise ValueError(f"gap_mode must be one of {GAP_MODES}")
        if self.rate_mode not in RATE_MODES:
            raise ValueError(f"rate_mode must be one of {RATE_MODES}")
        if self.rate_mode == "mcs-table" and self.mcs_table is None:
            self.mcs_table = default_mcs_table()
        if not 0.0 < self.min_distance_m <= self.cell_radius_m:
            raise ValueError("min_distance_m must lie in (0, cell_radius_m]")
        if not 0.0 <= self.fading_rho < 1.0:
            raise ValueError("fading_rho must lie in [0, 1)")

    @property
    def delta_f_hz(self):
        return self.bandwidth_hz / self.num_subcarriers

    @property
    def tx_power_per_sc_w(self):
        return dbm_to_watts(self.tx_power_dbm) / self.num_subcarriers

    @property
    def noise_per_sc_w(self):
        return dbm_to_watts(self.noise_power_dbm) / self.num_subcarriers

    @property
    def gap(self):
        return snr_gap_factor(self.ber_target)


@dataclass
class UserChannelState:
    """Mobility and propagation state of one user."""

    position_m: np.ndarray
    speed_mps: float
    heading_rad: float
    path_loss_db: float
    shadowing_db: float
    fading_gains: np.ndarray  # length-K power gains |H|^2
    distance_since_shadow_m: float = 0.0
    fading_field: np.ndarray = None  # complex taps backing the power gains

    @property
    def distance_m(self):
        return float(np.hypot(self.position_m[0], self.position_m[1]))


@dataclass
class RateMatrix:
    """Per-slot achievable rates, one row per user, one column per subcarrier."""

    rates_bps: np.ndarray
    slot_index: int = 0


def _draw_speed(params, rng):
    # Gaussian around the configured mean, truncated at zero.
    while True:
        s = rng.normal(params.speed_mean_mps, params.speed_std_mps)
        if s > 0.0:
            return s


def _draw_position(params, rng):
    # Uniform over the annulus between min_distance and the cell radius.
    r = math.sqrt(
        rng.uniform(params.min_distance_m ** 2, params.cell_radius_m ** 2)
    )
    theta = rng.uniform(0.0, 2.0 * math.pi)
    return np.array([r * math.cos(theta), r * math.sin(theta)])


def _draw_fading_field(params, rng):
    k = params.num_subcarriers
    return (rng.standard_normal(k) + 1j * rng.standard_normal(k)) / math.sqrt(2.0)


def initial_user_state(params, rng):
    """Fresh user uniformly placed in the cell with drawn speed/heading/gains."""
    pos = _draw_position(params, rng)
    field = _draw_fading_field(params, rng)
    d = max(float(np.hypot(*pos)), params.min_distance_m)
    return UserChannelState(
        position_m=pos,
        speed_mps=_draw_speed(params, rng),
        heading_rad=rng.uniform(0.0, 2.0 * math.pi),
        path_loss_db=float(path_loss_db(d, params.path_loss_ref_db,
                                        params.path_loss_exponent_coeff)),
        shadowing_db=float(rng.normal(0.0, params.shadowing_sigma_db)),
        fading_gains=np.abs(field) ** 2,
        fading_field=field,
    )


def update_user_channel(state, params, slot_dt_s, rng):
    """Advance one user by one slot: move, reflect, refresh loss terms.

    Heading changes occur on cell-edge reflection and at memoryless epochs
    (the per-step change probability 1 - exp(-dt/mean) is exactly the
    exponential-epoch model); speed is redrawn with the heading. Shadowing is
    redrawn only after the user has moved a decorrelation distance. A zero
    time step returns the state unchanged without consuming randomness.
    """
    if slot_dt_s == 0.0:
        return state
    pos = state.position_m + state.speed_mps * slot_dt_s * np.array(
        [math.cos(state.heading_rad), math.sin(state.heading_rad)]
    )
    heading = state.heading_rad
    speed = state.speed_mps
    r = float(np.hypot(*pos))
    if r > params.cell_radius_m:
        pos = pos * (params.cell_radius_m / r)
        inward = math.atan2(-pos[1], -pos[0])
        heading = inward + rng.uniform(-math.pi / 2.0, math.pi / 2.0)
        speed = _draw_speed(params, rng)
    elif rng.random() < -math.expm1(-slot_dt_s / params.heading_epoch_mean_s):
        heading = rng.uniform(0.0, 2.0 * math.pi)
        speed = _draw_speed(params, rng)

    moved = state.speed_mps * slot_dt_s
    dist_accum = state.distance_since_shadow_m + moved
    shadow = state.shadowing_db
    if dist_accum >= params.shadow_decorrelation_m:
        shadow = float(rng.normal(0.0, params.shadowing_sigma_db))
        dist_accum = 0.0

    rho = params.fading_rho
    fresh = _draw_fading_field(params, rng)
    if rho > 0.0 and state.fading_field is not None:
        field = rho * state.fading_field + math.sqrt(1.0 - rho * rho) * fresh
    else:
        field = fresh

    d = max(float(np.hypot(*pos)), params.min_distance_m)
    return replace(
        state,
        position_m=pos,
        speed_mps=speed,
        heading_rad=heading,
        path_loss_db=float(path_loss_db(d, params.path_loss_ref_db,
                                        params.path_loss_exponent_coeff)),
        shadowing_db=shadow,
        fading_gains=np.abs(field) ** 2,
        fading_field=field,
        distance_since_shadow_m=dist_accum,
    )


def build_rate_matrix(users, params, slot_index=0):
    """Compose gains -> SNR -> rate for every (user, subcarrier) pair."""
    if not users:
        raise ValueError("need at least one user")
    gains = np.vstack([
        u.fading_gains * db_to_linear(-(u.path_loss_db - u.shadowing_db))
        for u in users
    ])
    eta = subcarrier_snr(gains, params.tx_power_per_sc_w, params.noise_per_sc_w,
                         params.gap, params.gap_mode)
    rates = rate_from_snr(eta, params.delta_f_hz, params.rate_mode, params.mcs_table)
    return RateMatrix(rates_bps=np.asarray(rates, dtype=float), slot_index=slot_index)


class CellChannel:
    """Vectorized channel evolution for all users in a cell.

    Keeps per-user mobility state in flat arrays and advances every user in
    lockstep once per slot; numerically it applies the same formulas as the
    single-user operations above. Mobility and shadowing draws come from
    per-user streams (index = user id) so user trajectories do not depend on
    population ordering; the fast-fading block is drawn from one dedicated
    stream as a single batch per slot.
    """

    def __init__(self, params, num_users, seed_seq):
        self.params = params
        self.n = num_users
        children = seed_seq.spawn(num_users + 1)
        self.user_rngs = [np.random.default_rng(s) for s in children[:num_users]]
        self.fading_rng = np.random.default_rng(children[num_users])
        k = params.num_subcarriers

        self.pos = np.empty((num_users, 2))
        self.speed = np.empty(num_users)
        self.heading = np.empty(num_users)
        self.shadow_db = np.empty(num_users)
        self.since_shadow = np.zeros(num_users)
        self.next_epoch_s = np.empty(num_users)
        self.now_s = 0.0
        for i, rng in enumerate(self.user_rngs):
            self.pos[i] = _draw_position(params, rng)
            self.speed[i] = _draw_speed(params, rng)
            self.heading[i] = rng.uniform(0.0, 2.0 * math.pi)
            self.shadow_db[i] = rng.normal(0.0, params.shadowing_sigma_db)
            self.next_epoch_s[i] = rng.exponential(params.heading_epoch_mean_s)
        if params.fading_rho > 0.0:
            self.field = (
                self.fading_rng.standard_normal((num_users, k))
                + 1j * self.fading_rng.standard_normal((num_users, k))
            ) / math.sqrt(2.0)
        else:
            self.field = None
        self._gain_scale = params.tx_power_per_sc_w / params.noise_per_sc_w
        if params.gap_mode == "multiply":
            self._gain_scale *= params.gap
        else:
            self._gain_scale /= params.gap
        self._shannon = params.rate_mode == "shannon-gap"
        if not self._shannon:
            table = sorted(params.mcs_table)
            self._mcs_thresholds = np.array([row[0] for row in table])
            self._mcs_effs = np.array([row[1] for row in table])

    def _refresh_user(self, i, reflect):
        rng = self.user_rngs[i]
        if reflect:
            self.pos[i] *= self.params.cell_radius_m / np.hypot(*self.pos[i])
            inward = math.atan2(-self.pos[i][1], -self.pos[i][0])
            self.heading[i] = inward + rng.uniform(-math.pi / 2.0, math.pi / 2.0)
        else:
            self.heading[i] = rng.uniform(0.0, 2.0 * math.pi)
        self.speed[i] = _draw_speed(self.params, rng)
        self.next_epoch_s[i] = self.now_s + rng.exponential(
            self.params.heading_epoch_mean_s)

    def advance(self, dt_s):
        """Move users, refresh shadowing/fading, return the (N, K) rate matrix."""
        p = self.params
        if dt_s > 0.0:
            self.now_s += dt_s
            self.pos[:, 0] += self.speed * dt_s * np.cos(self.heading)
            self.pos[:, 1] += self.speed * dt_s * np.sin(self.heading)
            radius_sq = self.pos[:, 0] ** 2 + self.pos[:, 1] ** 2
            out = radius_sq > p.cell_radius_m ** 2
            if out.any():
                for i in np.nonzero(out)[0]:
                    self._refresh_user(i, True)
            due = self.next_epoch_s <= self.now_s
            if due.any():
                for i in np.nonzero(due)[0]:
                    if not out[i]:
                        self._refresh_user(i, False)
            self.since_shadow += self.speed * dt_s
            stale = self.since_shadow >= p.shadow_decorrelation_m
            if stale.any():
                for i in np.nonzero(stale)[0]:
                    self.shadow_db[i] = self.user_rngs[i].normal(
                        0.0, p.shadowing_sigma_db)
                    self.since_shadow[i] = 0.0

        k = p.num_subcarriers
        rho = p.fading_rho
        if rho > 0.0:
            fresh = (
                self.fading_rng.standard_normal((self.n, k))
                + 1j * self.fading_rng.standard_normal((self.n, k))
            ) / math.sqrt(2.0)
            self.field = rho * self.field + math.sqrt(1.0 - rho * rho) * fresh
            fading = np.abs(self.field) ** 2
        else:
            # |CN(0,1)|^2 is exactly unit-mean exponential
            fading = self.fading_rng.exponential(1.0, (self.n, k))

        d2 = np.maximum(self.pos[:, 0] ** 2 + self.pos[:, 1] ** 2,
                        p.min_distance_m ** 2)
        loss_db = p.path_loss_ref_db + (0.5 * p.path_loss_exponent_coeff) \
            * np.log10(d2)
        large_scale = 10.0 ** ((self.shadow_db - loss_db) * 0.1)
        eta = fading * (large_scale * self._gain_scale)[:, None]
        if self._shannon:
            return np.log1p(eta) * (p.delta_f_hz / math.log(2.0))
        idx = np.searchsorted(self._mcs_thresholds, eta, side="right")
        eff = np.where(idx > 0, self._mcs_effs[np.maximum(idx - 1, 0)], 0.0)
        return eff * p.delta_f_hz
