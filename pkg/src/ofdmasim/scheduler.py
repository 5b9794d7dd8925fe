"""Subcarrier scheduling: exponential-rule priorities, weighted allocation,
and the adaptive best-effort weight controller.

Two schemes are provided. The adaptive scheme gives every best-effort user a
common scheduling weight and assigns each subcarrier to the contender with
the greatest weighted rate (priority * rate for QoS users, weight * rate for
best-effort); the weight is steered slot by slot to hold the measured QoS
delay near a target. The sequential scheme is the conventional two-pass
rule: cover all QoS backlog first in exponential-priority order, then hand
the leftover subcarriers to the best-effort user with the highest raw rate.
"""

import math
from dataclasses import dataclass, field

import numpy as np

EXPONENT_CLAMP = 50.0


class AllocationError(ValueError):
    """No eligible user is available to receive subcarriers."""


def delay_urgency(max_drop_prob, lifetime_s):
    """Urgency rate of a QoS class: -ln(max_drop_prob) / lifetime."""
    if not 0.0 < max_drop_prob < 1.0:
        raise ValueError("max_drop_prob must lie in (0, 1)")
    if lifetime_s <= 0.0:
        raise ValueError("lifetime_s must be positive")
    return -math.log(max_drop_prob) / lifetime_s


@dataclass
class QosPriority:
    user_id: int
    urgency: float
    hol_delay_s: float
    priority: float


def exp_rule_priorities(urgency, hol_delay_s):
    """Exponential-rule priorities for the given urgency/HOL-delay vectors.

    priority_i = u_i * exp((u_i*h_i - m) / (1 + sqrt(m))) with m the mean of
    u_i*h_i over the supplied users. Callers pass only users that are in
    contention (non-empty queues). The exponent is clamped to +/-50.
    """
    urgency = np.asarray(urgency, dtype=float)
    hol = np.asarray(hol_delay_s, dtype=float)
    if urgency.size == 0:
        return np.empty(0)
    uh = urgency * hol
    mean_uh = uh.mean()
    exponent = np.clip((uh - mean_uh) / (1.0 + math.sqrt(mean_uh)),
                       -EXPONENT_CLAMP, EXPONENT_CLAMP)
    return urgency * np.exp(exponent)


@dataclass
class SchedulerInput:
    """Per-slot view of the system handed to the allocation routines.

    Users are indexed 0..N-1; ties in every argmax resolve to the lowest
    index. ``priority`` entries are meaningful only where ``is_qos`` holds
    and the user is eligible.
    """

    rates_bps: np.ndarray        # (N, K)
    is_qos: np.ndarray           # (N,) bool
    priority: np.ndarray         # (N,) float
    backlog_bits: np.ndarray     # (N,) float
    slot_s: float = 1.0

    def __post_init__(self):
        self.rates_bps = np.asarray(self.rates_bps, dtype=float)
        self.is_qos = np.asarray(self.is_qos, dtype=bool)
        self.priority = np.asarray(self.priority, dtype=float)
        self.backlog_bits = np.asarray(self.backlog_bits, dtype=float)
        n = self.rates_bps.shape[0]
        if not (self.is_qos.shape == self.priority.shape
                == self.backlog_bits.shape == (n,)):
            raise ValueError("per-user arrays must all have length N")

    @property
    def num_users(self):
        return self.rates_bps.shape[0]

    @property
    def num_subcarriers(self):
        return self.rates_bps.shape[1]

    def eligible(self):
        """QoS users need queued data to contend; best-effort always contends."""
        return np.where(self.is_qos, self.backlog_bits > 0.0, True)


@dataclass
class Allocation:
    """One slot's subcarrier ownership: assignment[k] is the owner of k."""

    assignment: np.ndarray
    objective_value: float

    def subcarriers_of(self, user_id):
        return np.nonzero(self.assignment == user_id)[0]

    def be_set(self, is_qos):
        """Subcarriers owned by best-effort users, as a frozenset of indices."""
        return frozenset(np.nonzero(~is_qos[self.assignment])[0].tolist())


def _weights(inp, be_weight):
    w = np.where(inp.is_qos[:, None], inp.priority[:, None], be_weight) * inp.rates_bps
    w[~inp.eligible()] = -1.0  # below any valid weight; rates are >= 0
    return w


def objective_of(assignment, inp, be_weight):
    """Value of the combined weighted-rate objective for a given assignment."""
    cols = np.arange(inp.num_subcarriers)
    per_user_weight = np.where(inp.is_qos, inp.priority, be_weight)
    return float(np.sum(per_user_weight[assignment] * inp.rates_bps[assignment, cols]))


def allocate_with_weight(inp, be_weight):
    """Optimal allocation for a fixed best-effort weight.

    Each subcarrier independently goes to the eligible user with the
    greatest weighted rate, which maximizes the combined objective over all
    partitions; ties go to the lowest user index.
    """
    if be_weight < 0.0:
        raise ValueError("be_weight must be non-negative")
    if not inp.eligible().any():
        raise AllocationError("no eligible user for any subcarrier")
    w = _weights(inp, be_weight)
    assignment = np.argmax(w, axis=0)
    return Allocation(assignment=assignment,
                      objective_value=objective_of(assignment, inp, be_weight))


def check_optimality_conditions(alloc, inp, be_weight, rtol=1e-9):
    """Exchange-argument conditions an optimal allocation must satisfy.

    For a subcarrier held by QoS user k, every best-effort user l must obey
    priority_k * r_k >= weight * r_l; for one held by best-effort user m,
    every QoS user j must obey weight * r_m >= priority_j * r_j. Conditions
    are cross-multiplied so zero rates need no special casing, and compared
    up to a relative tie tolerance. Only eligible users participate.
    Returns a list of (subcarrier, owner, challenger) violations.
    """
    eligible = inp.eligible()
    qos_idx = np.nonzero(inp.is_qos & eligible)[0]
    be_idx = np.nonzero(~inp.is_qos & eligible)[0]
    violations = []
    for k in range(inp.num_subcarriers):
        owner = alloc.assignment[k]
        own_w = (inp.priority[owner] if inp.is_qos[owner] else be_weight) \
            * inp.rates_bps[owner, k]
        challengers = be_idx if inp.is_qos[owner] else qos_idx
        for c in challengers:
            other_w = (inp.priority[c] if inp.is_qos[c] else be_weight) \
                * inp.rates_bps[c, k]
            if own_w < other_w * (1.0 - rtol) - 1e-30:
                violations.append((k, int(owner), int(c)))
    return violations


def allocate_capped(inp, be_weight):
    """Weighted allocation with QoS backlog capping.

    Sweeps subcarriers in descending order of their best weighted rate; once
    the subcarriers already granted to a QoS user can serve its whole
    backlog this slot, the user leaves contention so capacity is not
    stranded on drained queues. Best-effort users are never capped.
    """
    if be_weight < 0.0:
        raise ValueError("be_weight must be non-negative")
    if not inp.eligible().any():
        raise AllocationError("no eligible user for any subcarrier")
    w = _weights(inp, be_weight)
    assignment = np.argmax(w, axis=0)

    # Fast path: no QoS winner exceeds its backlog, so no cap binds.
    cols = np.arange(inp.num_subcarriers)
    granted = np.bincount(
        assignment, weights=inp.rates_bps[assignment, cols] * inp.slot_s,
        minlength=inp.num_users,
    )
    capped = inp.is_qos & (granted > inp.backlog_bits) & (inp.backlog_bits > 0.0)
    if not capped.any():
        return Allocation(assignment=assignment,
                          objective_value=objective_of(assignment, inp, be_weight))

    w = w.copy()
    order = np.argsort(-w.max(axis=0), kind="stable")
    credit = np.zeros(inp.num_users)
    assignment = np.empty(inp.num_subcarriers, dtype=int)
    # Winners are computed in bulk and refreshed lazily: only a user hitting
    # its cap invalidates the remaining columns' precomputed argmax.
    winners = np.argmax(w, axis=0)
    rates = inp.rates_bps
    backlog = inp.backlog_bits
    slot_s = inp.slot_s
    for pos in range(order.size):
        k = order[pos]
        winner = winners[k]
        assignment[k] = winner
        if inp.is_qos[winner]:
            credit[winner] += rates[winner, k] * slot_s
            if credit[winner] >= backlog[winner]:
                w[winner, :] = -1.0
                rest = order[pos + 1:]
                if rest.size:
                    stale = rest[winners[rest] == winner]
                    if stale.size:
                        winners[stale] = np.argmax(w[:, stale], axis=0)
    return Allocation(assignment=assignment,
                      objective_value=objective_of(assignment, inp, be_weight))


def schedule_slot_sequential(inp):
    """Two-pass zero-delay-constraint scheme.

    Pass 1 walks subcarriers in descending order of their best QoS weighted
    rate, assigning each to its best still-contending QoS user; a user
    leaves contention once its granted subcarriers cover its backlog for
    this slot. Pass 2 gives every leftover subcarrier to the best-effort
    user with the highest raw rate.
    """
    eligible = inp.eligible()
    qos_active = inp.is_qos & eligible
    be_mask = ~inp.is_qos & eligible
    n, k_total = inp.rates_bps.shape
    assignment = np.full(k_total, -1, dtype=int)

    if qos_active.any():
        wq = np.where(qos_active[:, None], inp.priority[:, None] * inp.rates_bps, -1.0)
        order = np.argsort(-wq.max(axis=0), kind="stable")
        credit = np.zeros(n)
        remaining = int(qos_active.sum())
        winners = np.argmax(wq, axis=0)
        for pos in range(order.size):
            if remaining == 0:
                break
            k = order[pos]
            winner = winners[k]
            if wq[winner, k] <= 0.0:
                continue  # nobody still contending can use this subcarrier
            assignment[k] = winner
            credit[winner] += inp.rates_bps[winner, k] * inp.slot_s
            if credit[winner] >= inp.backlog_bits[winner]:
                wq[winner, :] = -1.0
                remaining -= 1
                rest = order[pos + 1:]
                if rest.size:
                    stale = rest[winners[rest] == winner]
                    if stale.size:
                        winners[stale] = np.argmax(wq[:, stale], axis=0)

    leftover = np.nonzero(assignment < 0)[0]
    if leftover.size:
        if be_mask.any():
            rates_be = np.where(be_mask[:, None], inp.rates_bps, -1.0)
            assignment[leftover] = np.argmax(rates_be[:, leftover], axis=0)
        elif eligible.any():
            rates_any = np.where(eligible[:, None], inp.rates_bps, -1.0)
            assignment[leftover] = np.argmax(rates_any[:, leftover], axis=0)
        else:
            raise AllocationError("no eligible user for any subcarrier")
    return Allocation(assignment=assignment,
                      objective_value=objective_of(assignment, inp, 0.0))


@dataclass
class BeWeightController:
    """Adaptive best-effort scheduling weight.

    State machine over slots: initialization measures the mean QoS priority
    and starts the weight at mean/init_divisor with a fresh step; each
    subsequent slot compares the measured QoS delay against the target and
    either grows the weight by one step, backs it off by two steps while
    shrinking the step, or schedules a re-initialization.
    """

    target_delay_s: float = 0.5
    init_divisor: int = 10           # divides the measured mean priority
    step_shrink: int = 2             # step divisor on each back-off
    delay_slack: float = 0.2         # relaxation factor above the target
    initial_step: float = None       # absolute step; None derives from ratio
    initial_step_ratio: float = 0.1  # step as a fraction of the initial weight
    fallback_weight: float = 1.0     # used when no QoS priority is measurable
    # Anti-windup recovery: after this many consecutive under-target updates
    # with the measured delay still below regrow_threshold x target, the step
    # doubles back toward its initial value, so back-off streaks cannot
    # permanently exhaust the step while far from equilibrium. Near the
    # target the step only shrinks, tightening the hover. 0 disables
    # regrowth, which is the literal three-branch rule.
    step_regrow_after: int = 8
    regrow_threshold: float = 0.5
    weight: float = 0.0
    step: float = 0.0
    initialized: bool = False
    _streak: int = field(default=0, repr=False, compare=False)
    _step_cap: float = field(default=0.0, repr=False, compare=False)

    def __post_init__(self):
        if self.init_divisor < 1 or self.step_shrink < 1:
            raise ValueError("init_divisor and step_shrink must be positive integers")
        if not 0.0 < self.delay_slack <= 1.0:
            raise ValueError("delay_slack must lie in (0, 1]")
        if self.target_delay_s <= 0.0:
            raise ValueError("target_delay_s must be positive")
        if self.step_regrow_after < 0:
            raise ValueError("step_regrow_after must be non-negative")

    def initialize(self, qos_priorities):
        """Start (or restart) the weight from the current mean QoS priority."""
        arr = np.asarray(qos_priorities, dtype=float)
        if arr.size:
            self.weight = float(arr.mean()) / self.init_divisor
        else:
            self.weight = self.fallback_weight
        if self.initial_step is not None:
            self.step = self.initial_step
        else:
            self.step = max(self.weight, self.fallback_weight) * self.initial_step_ratio
        self._step_cap = self.step
        self._streak = 0
        self.initialized = True

    def update(self, measured_delay_s):
        """One update of the three-branch rule against the target delay."""
        if not self.initialized:
            raise ValueError("controller must be initialized before updating")
        if measured_delay_s < 0.0:
            raise ValueError("measured_delay_s must be non-negative")
        if measured_delay_s <= self.target_delay_s:
            self.weight += self.step
            if measured_delay_s < self.target_delay_s * self.regrow_threshold:
                self._streak += 1
                if (self.step_regrow_after
                        and self._streak % self.step_regrow_after == 0
                        and self.step < self._step_cap):
                    self.step = min(self.step * 2.0, self._step_cap)
            else:
                self._streak = 0
        elif measured_delay_s <= self.target_delay_s * (1.0 + self.delay_slack):
            self.weight = max(0.0, self.weight - 2.0 * self.step)
            self.step /= self.step_shrink
            self._streak = 0
        else:
            # Re-initialize on the next update with freshly measured priorities.
            self.initialized = False
            self._streak = 0


def schedule_slot_adaptive(inp, controller, measured_delay_s, backlog_cap=True):
    """Weight update followed by allocation, as run once per slot.

    On an uninitialized controller (first slot, or the slot after the
    controller demanded a restart) the weight is re-derived from the current
    eligible QoS priorities instead of updated; a restart demanded by this
    slot's update leaves the weight untouched until the next slot.
    """
    if controller.initialized:
        controller.update(measured_delay_s)
    else:
        eligible_qos = inp.is_qos & inp.eligible()
        controller.initialize(inp.priority[eligible_qos])
    if backlog_cap:
        alloc = allocate_capped(inp, controller.weight)
    else:
        alloc = allocate_with_weight(inp, controller.weight)
    return alloc
