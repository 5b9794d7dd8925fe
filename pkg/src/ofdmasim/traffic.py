"""Traffic sources and per-user packet queues.

Three source types are modelled: ON/OFF packet voice, variable-rate
streaming whose per-state rate follows a truncated exponential law, and an
always-backlogged best-effort source. Queues are FIFO with arrival
timestamps; packets of the delay-sensitive classes carry a deadline and are
dropped once it passes.
"""

import math
from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.optimize import brentq


class TrafficClass(Enum):
    VOIP = "voip"
    STREAMING = "streaming"
    BEST_EFFORT = "best_effort"


@dataclass(frozen=True)
class ClassProfile:
    """QoS envelope of one traffic class."""

    traffic_class: TrafficClass
    lifetime_s: float  # max packet delay; inf for best effort
    max_drop_prob: float
    is_qos: bool

    def __post_init__(self):
        if self.is_qos and not 0.0 < self.max_drop_prob < 1.0:
            raise ValueError("max_drop_prob must lie in (0, 1) for QoS classes")


DEFAULT_PROFILES = {
    TrafficClass.VOIP: ClassProfile(TrafficClass.VOIP, 0.08, 0.05, True),
    TrafficClass.STREAMING: ClassProfile(TrafficClass.STREAMING, 1.0, 0.05, True),
    TrafficClass.BEST_EFFORT: ClassProfile(
        TrafficClass.BEST_EFFORT, math.inf, 0.0, False
    ),
}


@dataclass(frozen=True)
class Packet:
    size_bits: float
    arrival_s: float
    deadline_s: float

    def __post_init__(self):
        if self.size_bits <= 0:
            raise ValueError("size_bits must be positive")
        if self.deadline_s <= self.arrival_s:
            raise ValueError("deadline must be after arrival")


class PacketQueue:
    """FIFO queue with partial-service of the head packet and drop accounting.

    Counters are cumulative over the queue's lifetime; at any instant
    arrived_bits == served_bits + dropped_bits + backlog_bits.
    """

    def __init__(self):
        self._pkts = deque()
        self.head_served_bits = 0.0
        self.backlog_bits = 0.0
        self.arrived_pkts = 0
        self.arrived_bits = 0.0
        self.served_pkts = 0
        self.served_bits = 0.0
        self.dropped_pkts = 0
        self.dropped_bits = 0.0
        self.delay_sum_s = 0.0

    def __len__(self):
        return len(self._pkts)

    def push(self, pkt):
        self._pkts.append(pkt)
        self.arrived_pkts += 1
        self.arrived_bits += pkt.size_bits
        self.backlog_bits += pkt.size_bits

    def head_of_line_delay(self, now_s):
        """Age of the oldest queued packet; 0 when empty."""
        if not self._pkts:
            return 0.0
        return now_s - self._pkts[0].arrival_s

    def drop_expired(self, now_s):
        """Remove every packet whose deadline has passed; returns (count, bits).

        Only the unserved remainder of a partially transmitted head counts as
        dropped bits. Deadlines are non-decreasing in FIFO order for a fixed
        per-class lifetime, so scanning from the head suffices.
        """
        dropped = 0
        dropped_bits = 0.0
        while self._pkts and self._pkts[0].deadline_s < now_s:
            pkt = self._pkts.popleft()
            remainder = pkt.size_bits - self.head_served_bits
            self.head_served_bits = 0.0
            self.backlog_bits -= remainder
            dropped += 1
            dropped_bits += remainder
        if not self._pkts:
            self.backlog_bits = 0.0  # absorb float drift from partial service
        self.dropped_pkts += dropped
        self.dropped_bits += dropped_bits
        return dropped, dropped_bits

    def serve_bits(self, budget_bits, now_s):
        """Drain head-of-line packets until the bit budget is exhausted.

        Returns (served_bits, departure_delays). A packet departs when its
        last bit is served; a partially served head persists across calls.
        """
        if budget_bits < 0:
            raise ValueError("budget_bits must be non-negative")
        served = 0.0
        delays = []
        while self._pkts and budget_bits > 0.0:
            head = self._pkts[0]
            need = head.size_bits - self.head_served_bits
            if budget_bits >= need:
                self._pkts.popleft()
                self.head_served_bits = 0.0
                budget_bits -= need
                served += need
                delay = now_s - head.arrival_s
                delays.append(delay)
                self.served_pkts += 1
                self.delay_sum_s += delay
            else:
                self.head_served_bits += budget_bits
                served += budget_bits
                budget_bits = 0.0
        self.served_bits += served
        self.backlog_bits -= served
        if not self._pkts:
            self.backlog_bits = 0.0  # absorb float drift from partial service
        return served, delays


def truncated_exp_mean(beta, span):
    """Mean of Exp(beta) conditioned on values <= span."""
    return beta - span * math.exp(-span / beta) / -math.expm1(-span / beta)


def calibrate_streaming_beta(rate_min_bps=64e3, rate_max_bps=256e3,
                             rate_mean_bps=180e3):
    """Solve for the exponential scale that gives the target truncated mean.

    The supported state-rate law is exponential in shape, truncated to
    [rate_min, rate_max]. A target mean below the midpoint anchors the
    density at the minimum rate (decaying upward); above the midpoint the
    density is anchored at the maximum rate (decaying downward), which is the
    only way an exponential truncated to the interval can average there.
    Returns (beta, anchor) with anchor in {"low", "high"}.
    """
    span = rate_max_bps - rate_min_bps
    if span <= 0:
        raise ValueError("rate_max_bps must exceed rate_min_bps")
    if not rate_min_bps < rate_mean_bps < rate_max_bps:
        raise ValueError("rate_mean_bps must lie strictly inside the range")
    mid = rate_min_bps + span / 2.0
    if rate_mean_bps <= mid:
        target = rate_mean_bps - rate_min_bps
        anchor = "low"
    else:
        target = rate_max_bps - rate_mean_bps
        anchor = "high"
    beta = brentq(lambda b: truncated_exp_mean(b, span) - target,
                  1e-9 * span, 1e9 * span, xtol=1e-9 * span)
    return beta, anchor


def _draw_truncated_exp(beta, span, rng, size=None):
    # Inverse CDF of Exp(beta) conditioned on <= span; exact, no rejection.
    u = rng.random(size)
    return -beta * np.log1p(-u * -math.expm1(-span / beta))


class VoipSource:
    """ON/OFF voice source: fixed-size packets at a fixed cadence while ON."""

    def __init__(self, rate_bps=32e3, mean_on_s=1.0, mean_off_s=1.5,
                 packet_size_bits=320.0, lifetime_s=0.08):
        self.rate_bps = rate_bps
        self.mean_on_s = mean_on_s
        self.mean_off_s = mean_off_s
        self.packet_size_bits = packet_size_bits
        self.packet_interval_s = packet_size_bits / rate_bps
        self.lifetime_s = lifetime_s
        self.state_on = None
        self.state_end_s = None

    def _start(self, now_s, rng):
        # Stationary initial state: ON with probability on/(on+off).
        self.state_on = rng.random() < self.mean_on_s / (self.mean_on_s + self.mean_off_s)
        self.state_end_s = now_s + rng.exponential(
            self.mean_on_s if self.state_on else self.mean_off_s
        )
        self._next_emit_s = now_s if self.state_on else math.inf

    def step(self, queue, now_s, dt_s, rng):
        """Advance across [now, now+dt), enqueueing packets emitted inside it."""
        if dt_s <= 0:
            raise ValueError("dt_s must be positive")
        if self.state_on is None:
            self._start(now_s, rng)
        end = now_s + dt_s
        while True:
            boundary = min(self.state_end_s, end)
            if self.state_on:
                while self._next_emit_s < boundary:
                    t = self._next_emit_s
                    queue.push(Packet(self.packet_size_bits, t, t + self.lifetime_s))
                    self._next_emit_s = t + self.packet_interval_s
            if self.state_end_s >= end:
                break
            t0 = self.state_end_s
            self.state_on = not self.state_on
            self.state_end_s = t0 + rng.exponential(
                self.mean_on_s if self.state_on else self.mean_off_s
            )
            self._next_emit_s = t0 if self.state_on else math.inf

    def pregenerate(self, horizon_s, rng):
        """All packet arrival times in [0, horizon) as one array."""
        times = []
        now = 0.0
        on = rng.random() < self.mean_on_s / (self.mean_on_s + self.mean_off_s)
        while now < horizon_s:
            dur = rng.exponential(self.mean_on_s if on else self.mean_off_s)
            if on:
                end = min(now + dur, horizon_s)
                n = int(math.ceil((end - now) / self.packet_interval_s - 1e-12))
                if n > 0:
                    times.append(now + self.packet_interval_s * np.arange(n))
            now += dur
            on = not on
        times = np.concatenate(times) if times else np.empty(0)
        return times[times < horizon_s]


class StrSource:
    """Streaming source: exponential state holding times, per-state rate drawn
    from a truncated exponential, fixed-size packets at the state's cadence."""

    def __init__(self, mean_state_s=0.160, rate_min_bps=64e3, rate_max_bps=256e3,
                 rate_mean_bps=180e3, packet_size_bits=1280.0, lifetime_s=1.0):
        self.mean_state_s = mean_state_s
        self.rate_min_bps = rate_min_bps
        self.rate_max_bps = rate_max_bps
        self.rate_mean_bps = rate_mean_bps
        self.packet_size_bits = packet_size_bits
        self.lifetime_s = lifetime_s
        self.beta, self.anchor = calibrate_streaming_beta(
            rate_min_bps, rate_max_bps, rate_mean_bps
        )
        self.current_rate_bps = None
        self.state_end_s = None

    def draw_rate(self, rng, size=None):
        span = self.rate_max_bps - self.rate_min_bps
        off = _draw_truncated_exp(self.beta, span, rng, size)
        if self.anchor == "low":
            return self.rate_min_bps + off
        return self.rate_max_bps - off

    def _enter_state(self, now_s, rng):
        self.current_rate_bps = float(self.draw_rate(rng))
        self.state_end_s = now_s + rng.exponential(self.mean_state_s)
        self._next_emit_s = now_s + self.packet_size_bits / self.current_rate_bps

    def step(self, queue, now_s, dt_s, rng):
        if dt_s <= 0:
            raise ValueError("dt_s must be positive")
        if self.current_rate_bps is None:
            self._enter_state(now_s, rng)
        end = now_s + dt_s
        while True:
            boundary = min(self.state_end_s, end)
            while self._next_emit_s < boundary:
                t = self._next_emit_s
                queue.push(Packet(self.packet_size_bits, t, t + self.lifetime_s))
                self._next_emit_s = t + self.packet_size_bits / self.current_rate_bps
            if self.state_end_s >= end:
                break
            self._enter_state(self.state_end_s, rng)

    def pregenerate(self, horizon_s, rng):
        times = []
        now = 0.0
        while now < horizon_s:
            rate = float(self.draw_rate(rng))
            dur = rng.exponential(self.mean_state_s)
            end = min(now + dur, horizon_s)
            interval = self.packet_size_bits / rate
            n = int((end - now) / interval)
            if n > 0:
                times.append(now + interval * np.arange(1, n + 1))
            now += dur
        times = np.concatenate(times) if times else np.empty(0)
        return times[times < horizon_s]


class BeSource:
    """Full-buffer source: tops the queue back up to a large backlog."""

    def __init__(self, packet_size_bits=12000.0, min_backlog_bits=1.0e6):
        self.packet_size_bits = packet_size_bits
        self.min_backlog_bits = min_backlog_bits

    def step(self, queue, now_s, dt_s=None, rng=None):
        while queue.backlog_bits < self.min_backlog_bits:
            queue.push(Packet(self.packet_size_bits, now_s, math.inf))
