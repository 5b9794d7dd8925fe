"""Slot-loop simulation driver and metric aggregation.

Each slot runs a fixed phase order: channel update, traffic arrivals,
expiry drops, priority computation, scheduling, service, metrics. One run is
strictly sequential (the weight controller carries state across slots);
independent runs differ only by spawned RNG streams.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import CellChannel, ChannelParams
from .scheduler import (
    BeWeightController,
    SchedulerInput,
    allocate_capped,
    allocate_with_weight,
    delay_urgency,
    exp_rule_priorities,
    schedule_slot_adaptive,
    schedule_slot_sequential,
)
from .traffic import BeSource, PacketQueue, StrSource, VoipSource

SCHEDULERS = ("adaptive", "sequential")


@dataclass(frozen=True)
class VoipParams:
    rate_bps: float = 32e3
    mean_on_s: float = 1.0
    mean_off_s: float = 1.5
    packet_size_bits: float = 320.0
    lifetime_s: float = 0.08
    max_drop_prob: float = 0.05


@dataclass(frozen=True)
class StreamingParams:
    mean_state_s: float = 0.160
    rate_min_bps: float = 64e3
    rate_max_bps: float = 256e3
    rate_mean_bps: float = 180e3
    packet_size_bits: float = 1280.0
    lifetime_s: float = 1.0
    max_drop_prob: float = 0.05


@dataclass(frozen=True)
class BeParams:
    packet_size_bits: float = 12000.0
    min_backlog_bits: float = 1.0e6


@dataclass
class SimConfig:
    """Everything one simulation needs; users are indexed VoIP first, then
    streaming, then best-effort, which also fixes argmax tie-breaking."""

    num_voip: int = 10
    num_streaming: int = 8
    num_best_effort: int = 20
    slot_s: float = 0.000125
    num_slots: int = 200_000
    num_runs: int = 10
    seed: int = 1
    warmup_slots: int = 10_000
    scheduler: str = "adaptive"
    channel: ChannelParams = field(default_factory=ChannelParams)
    voip: VoipParams = field(default_factory=VoipParams)
    streaming: StreamingParams = field(default_factory=StreamingParams)
    best_effort: BeParams = field(default_factory=BeParams)
    controller: BeWeightController = field(default_factory=BeWeightController)
    control_interval_s: float = 0.1   # weight-update cadence; 0 = every slot
    # First initialization waits until the traffic mix is representative; a
    # weight measured off the first few arrivals lands far from equilibrium
    # and the first transient then dominates the whole run.
    controller_start_s: float = 0.5
    # Delay measurement feeding the controller:
    #   drain      - queued bits of the monitored classes divided by their
    #                service rate over the last control interval (a Little's
    #                law estimate; responds within one interval of the weight
    #                crossing its equilibrium),
    #   hol        - queue-age statistic (monitor_stat) of monitored users,
    #   departures - moving average over departed-packet delays.
    monitor_mode: str = "drain"
    monitor_classes: tuple = ("voip", "streaming")
    monitor_stat: str = "max"         # hol mode: "max" or "mean" over users
    monitor_cap_factor: float = 2.5   # delay-estimate cap, x target
    monitor_lead_s: float = 1.0       # lead horizon on rising readings
    ewma_alpha: float = 0.3           # upward gain, per update (or completion)
    ewma_alpha_down: float = 0.45     # downward gain; None = symmetric
    monitor_counts_drops: bool = True  # departures mode: fold drops at lifetime
    backlog_cap: bool = True
    trace_stride: int = 1
    check_conservation: bool = False

    def __post_init__(self):
        if self.num_slots < 1:
            raise ValueError("num_slots must be >= 1")
        if self.slot_s <= 0:
            raise ValueError("slot_s must be positive")
        if self.num_users < 1:
            raise ValueError("need at least one user")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"scheduler must be one of {SCHEDULERS}")
        if not 0.0 < self.ewma_alpha <= 1.0:
            raise ValueError("ewma_alpha must lie in (0, 1]")
        if not 0 <= self.warmup_slots < self.num_slots:
            raise ValueError("warmup_slots must lie in [0, num_slots)")
        if self.num_runs < 1:
            raise ValueError("num_runs must be >= 1")
        if self.control_interval_s < 0:
            raise ValueError("control_interval_s must be non-negative")
        if self.controller_start_s < 0:
            raise ValueError("controller_start_s must be non-negative")
        if self.monitor_mode not in ("drain", "hol", "departures"):
            raise ValueError("monitor_mode must be 'drain', 'hol' or 'departures'")
        if self.monitor_cap_factor <= 1.0:
            raise ValueError("monitor_cap_factor must exceed 1")
        if isinstance(self.monitor_classes, str):
            self.monitor_classes = (self.monitor_classes,)
        self.monitor_classes = tuple(self.monitor_classes)
        for klass in self.monitor_classes:
            if klass not in ("voip", "streaming"):
                raise ValueError("monitor_classes entries must be QoS classes")
        if not self.monitor_classes:
            raise ValueError("monitor_classes must name at least one class")
        if self.monitor_stat not in ("max", "mean"):
            raise ValueError("monitor_stat must be 'max' or 'mean'")

    @property
    def control_interval_slots(self):
        return max(1, int(round(self.control_interval_s / self.slot_s)))

    @property
    def num_users(self):
        return self.num_voip + self.num_streaming + self.num_best_effort

    def user_classes(self):
        """Per-user class labels in index order."""
        return (["voip"] * self.num_voip
                + ["streaming"] * self.num_streaming
                + ["be"] * self.num_best_effort)


def desk_channel():
    """Reduced cell for desk-scale experiments.

    An eighth of the full-scale band and subcarrier count with transmit and
    noise power scaled alike, so every per-subcarrier quantity (spacing,
    power, noise, SNR distribution) matches the full-scale cell while total
    capacity shrinks enough for the configured user populations to span the
    whole light-load-to-congestion range.
    """
    return ChannelParams(bandwidth_hz=128e3, num_subcarriers=32,
                         tx_power_dbm=34.0, noise_power_dbm=-117.0)


def desk_config(**overrides):
    """Desk-scale defaults: 10 VoIP, 8 streaming, 20 best-effort users."""
    cfg = SimConfig(channel=desk_channel())
    return replace(cfg, **overrides) if overrides else cfg


def full_scale_config(**overrides):
    """Full-scale cell (1.024 MHz, 256 subcarriers) and run sizes."""
    cfg = SimConfig(channel=ChannelParams(), num_slots=2_000_000, num_runs=100)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class SlotMetrics:
    slot_index: int
    be_weight: float
    qos_ewma_delay_s: float
    served_bits: dict
    departures: dict
    delay_sums: dict
    drops: dict
    be_served_bits: float


@dataclass
class RunMetrics:
    """Aggregated outcome of one run (or the mean over several runs)."""

    voip_delay_s: float
    streaming_delay_s: float
    qos_delay_s: float
    voip_drop_rate: float
    streaming_drop_rate: float
    be_throughput_bps: float
    final_ewma_delay_s: float
    steady_ewma_delay_s: float
    convergence_slot: object  # int or None
    weight_trace: np.ndarray
    ewma_trace: np.ndarray
    num_slots: int
    slot_s: float
    warmup_slots: int
    seed: int
    counters: dict
    conservation_max_error: float
    runs: list = field(default_factory=list)


class _DelayMonitor:
    """Exponentially weighted moving average of the delay signal, seeded at 0.

    Smoothing may be asymmetric: a small upward gain absorbs transient
    starvation spikes (a sustained overload still accumulates and reaches the
    controller's restart threshold) while a larger downward gain releases the
    reading as soon as queues drain. ``led_value`` adds a one-sided lead term
    so a steadily rising delay trips the controller's thresholds before the
    raw average gets there; a threshold rule with any response lag otherwise
    overshoots its equilibrium by lag times climb rate.
    """

    __slots__ = ("alpha_up", "alpha_down", "lead", "value", "led_value")

    def __init__(self, alpha_up, alpha_down=None, lead=0.0):
        self.alpha_up = alpha_up
        self.alpha_down = alpha_down if alpha_down is not None else alpha_up
        self.lead = lead
        self.value = 0.0
        self.led_value = 0.0

    def fold(self, delay_s):
        prev = self.value
        alpha = self.alpha_up if delay_s > prev else self.alpha_down
        self.value = prev + alpha * (delay_s - prev)
        rise = self.value - prev
        self.led_value = self.value + (self.lead * rise if rise > 0.0 else 0.0)


class _UserState:
    __slots__ = ("user_id", "klass", "is_qos", "queue", "lifetime_s",
                 "arrival_times", "arrival_ptr", "packet_bits", "source", "hol")

    def __init__(self, user_id, klass, is_qos, lifetime_s, packet_bits):
        self.user_id = user_id
        self.klass = klass
        self.is_qos = is_qos
        self.queue = PacketQueue()
        self.lifetime_s = lifetime_s
        self.packet_bits = packet_bits
        self.arrival_times = None
        self.arrival_ptr = 0
        self.source = None
        self.hol = 0.0


def _build_users(cfg, rngs):
    from .traffic import Packet  # local to keep the hot loop import-free

    users = []
    horizon = cfg.num_slots * cfg.slot_s
    uid = 0
    for _ in range(cfg.num_voip):
        u = _UserState(uid, "voip", True, cfg.voip.lifetime_s,
                       cfg.voip.packet_size_bits)
        src = VoipSource(cfg.voip.rate_bps, cfg.voip.mean_on_s, cfg.voip.mean_off_s,
                         cfg.voip.packet_size_bits, cfg.voip.lifetime_s)
        u.arrival_times = src.pregenerate(horizon, rngs[uid])
        users.append(u)
        uid += 1
    for _ in range(cfg.num_streaming):
        u = _UserState(uid, "streaming", True, cfg.streaming.lifetime_s,
                       cfg.streaming.packet_size_bits)
        src = StrSource(cfg.streaming.mean_state_s, cfg.streaming.rate_min_bps,
                        cfg.streaming.rate_max_bps, cfg.streaming.rate_mean_bps,
                        cfg.streaming.packet_size_bits, cfg.streaming.lifetime_s)
        u.arrival_times = src.pregenerate(horizon, rngs[uid])
        users.append(u)
        uid += 1
    for _ in range(cfg.num_best_effort):
        u = _UserState(uid, "be", False, math.inf, cfg.best_effort.packet_size_bits)
        u.source = BeSource(cfg.best_effort.packet_size_bits,
                            cfg.best_effort.min_backlog_bits)
        users.append(u)
        uid += 1
    return users


def simulate_run(cfg, seed_seq):
    """Execute one full run and aggregate its metrics."""
    from .traffic import Packet

    n = cfg.num_users
    children = seed_seq.spawn(2)
    channel = CellChannel(cfg.channel, n, children[0])
    traffic_rngs = [np.random.default_rng(s) for s in children[1].spawn(n)]
    users = _build_users(cfg, traffic_rngs)

    is_qos = np.array([u.is_qos for u in users])
    urgency = np.zeros(n)
    for u in users:
        if u.klass == "voip":
            urgency[u.user_id] = delay_urgency(cfg.voip.max_drop_prob,
                                               cfg.voip.lifetime_s)
        elif u.klass == "streaming":
            urgency[u.user_id] = delay_urgency(cfg.streaming.max_drop_prob,
                                               cfg.streaming.lifetime_s)
    urgency_list = urgency.tolist()

    controller = replace(cfg.controller)
    mode = cfg.monitor_mode
    lead_folds = (cfg.monitor_lead_s / cfg.control_interval_s
                  if mode != "departures" and cfg.control_interval_s > 0 else 0.0)
    monitor = _DelayMonitor(cfg.ewma_alpha, cfg.ewma_alpha_down, lead_folds)
    drain_cap = cfg.monitor_cap_factor * cfg.controller.target_delay_s
    adaptive = cfg.scheduler == "adaptive"
    dt = cfg.slot_s
    warm = cfg.warmup_slots
    ctrl_interval = cfg.control_interval_slots
    ctrl_start = int(round(cfg.controller_start_s / dt))
    interval_served = 0.0  # monitored-class bits served since last update
    interval_drop_age = 0.0  # worst implied age from drops since last update
    prio_sum = 0.0  # time-averaged mean eligible priority, for initialization
    prio_samples = 0
    qos_users = [u for u in users if u.is_qos]
    be_users = [u for u in users if not u.is_qos]
    monitored = [u for u in qos_users if u.klass in cfg.monitor_classes]
    monitored_count = max(1, len(monitored))
    monitor_max = cfg.monitor_stat == "max"
    for u in be_users:
        u.source.step(u.queue, 0.0)

    weight_trace = np.empty(cfg.num_slots)
    ewma_trace = np.empty(cfg.num_slots)
    col_idx = np.arange(cfg.channel.num_subcarriers)
    priority = np.zeros(n)
    backlog = np.zeros(n)

    # post-warmup accumulators
    departs = {"voip": 0, "streaming": 0}
    delay_sum = {"voip": 0.0, "streaming": 0.0}
    drops = {"voip": 0, "streaming": 0}
    arrivals = {"voip": 0, "streaming": 0}
    be_bits = 0.0
    conservation_err = 0.0

    for slot in range(cfg.num_slots):
        now = slot * dt
        end = now + dt
        post = slot >= warm

        rates = channel.advance(dt)

        # arrivals: feed pregenerated QoS packets, keep best-effort topped up
        for u in qos_users:
            times = u.arrival_times
            ptr = u.arrival_ptr
            cnt = 0
            while ptr < times.size and times[ptr] < end:
                t = times[ptr]
                u.queue.push(Packet(u.packet_bits, t, t + u.lifetime_s))
                ptr += 1
                cnt += 1
            u.arrival_ptr = ptr
            if post and cnt:
                arrivals[u.klass] += cnt
        for u in be_users:
            u.source.step(u.queue, now)

        # expiry drops
        for u in qos_users:
            dropped, _bits = u.queue.drop_expired(now)
            if dropped:
                if u.klass in cfg.monitor_classes:
                    if mode == "departures" and cfg.monitor_counts_drops:
                        for _ in range(dropped):
                            monitor.fold(u.lifetime_s)
                    elif mode == "hol":
                        # a drop proves the worst delay exceeded the lifetime
                        interval_drop_age = max(interval_drop_age,
                                                1.05 * u.lifetime_s)
                if post:
                    drops[u.klass] += dropped

        # priorities over eligible QoS users (tiny sets; plain math is faster)
        priority[:] = 0.0
        eligible_ids = []
        uhs = []
        for u in qos_users:
            b = u.queue.backlog_bits
            backlog[u.user_id] = b
            if b > 0.0:
                # packets that arrive later within this slot have age 0 for now
                h = now - u.queue._pkts[0].arrival_s
                if h < 0.0:
                    h = 0.0
                u.hol = h
                eligible_ids.append(u.user_id)
                uhs.append(urgency_list[u.user_id] * h)
            else:
                u.hol = 0.0
        if eligible_ids:
            mean_uh = sum(uhs) / len(uhs)
            denom = 1.0 + math.sqrt(mean_uh)
            psum = 0.0
            for i, uid in enumerate(eligible_ids):
                e = (uhs[i] - mean_uh) / denom
                if e > 50.0:
                    e = 50.0
                elif e < -50.0:
                    e = -50.0
                p = urgency_list[uid] * math.exp(e)
                priority[uid] = p
                psum += p
            prio_sum += psum / len(eligible_ids)
            prio_samples += 1
        if slot % ctrl_interval == 0 and mode != "departures":
            if mode == "drain":
                queued = sum(u.queue.backlog_bits for u in monitored)
                if interval_served > 0.0:
                    rate = interval_served / (ctrl_interval * dt)
                    estimate = min(queued / rate, drain_cap)
                elif queued > 0.0:
                    estimate = drain_cap
                else:
                    estimate = 0.0
                monitor.fold(estimate)
                interval_served = 0.0
            else:
                if monitor_max:
                    stat = max((u.hol for u in monitored), default=0.0)
                else:
                    stat = sum(u.hol for u in monitored) / monitored_count
                monitor.fold(min(max(stat, interval_drop_age), drain_cap))
                interval_drop_age = 0.0

        inp = SchedulerInput(rates_bps=rates, is_qos=is_qos, priority=priority,
                             backlog_bits=backlog, slot_s=dt)
        if adaptive:
            if slot % ctrl_interval == 0 and slot >= ctrl_start:
                if controller.initialized:
                    controller.update(monitor.led_value)
                else:
                    # initialize from the time-averaged mean eligible
                    # priority; the instantaneous mean is far too volatile
                    measured = ([prio_sum / prio_samples]
                                if prio_samples else [])
                    controller.initialize(measured)
                # keep the average fresh: a restart uses the last interval
                prio_sum = 0.0
                prio_samples = 0
            if cfg.backlog_cap:
                alloc = allocate_capped(inp, controller.weight)
            else:
                alloc = allocate_with_weight(inp, controller.weight)
        else:
            alloc = schedule_slot_sequential(inp)

        # service: each user's budget is the summed rate of its subcarriers
        owner_rates = rates[alloc.assignment, col_idx]
        budgets = np.bincount(alloc.assignment, weights=owner_rates, minlength=n) * dt
        slot_be_bits = 0.0
        for uid in np.nonzero(budgets > 0.0)[0]:
            u = users[uid]
            if not u.queue._pkts:
                continue
            served, delays = u.queue.serve_bits(budgets[uid], end)
            if u.is_qos:
                if u.klass in cfg.monitor_classes:
                    if mode == "departures":
                        for d in delays:
                            monitor.fold(d)
                    else:
                        interval_served += served
                if post and delays:
                    departs[u.klass] += len(delays)
                    delay_sum[u.klass] += sum(delays)
            else:
                slot_be_bits += served
        if post:
            be_bits += slot_be_bits

        weight_trace[slot] = controller.weight if adaptive else 0.0
        ewma_trace[slot] = monitor.value

        if cfg.check_conservation:
            for u in users:
                q = u.queue
                err = abs(q.arrived_bits - q.served_bits - q.dropped_bits
                          - q.backlog_bits)
                if err > conservation_err:
                    conservation_err = err

    measured_time = (cfg.num_slots - warm) * dt
    qos_departs = departs["voip"] + departs["streaming"]
    qos_delay_sum = delay_sum["voip"] + delay_sum["streaming"]
    tail = max(min(10_000, cfg.num_slots), cfg.num_slots // 5)
    stride = max(1, cfg.trace_stride)

    counters = {}
    for klass in ("voip", "streaming", "be"):
        members = [u for u in users if u.klass == klass]
        counters[klass] = {
            "arrived_bits": sum(u.queue.arrived_bits for u in members),
            "served_bits": sum(u.queue.served_bits for u in members),
            "dropped_bits": sum(u.queue.dropped_bits for u in members),
            "backlog_bits": sum(u.queue.backlog_bits for u in members),
        }

    return RunMetrics(
        voip_delay_s=(delay_sum["voip"] / departs["voip"]
                      if departs["voip"] else math.nan),
        streaming_delay_s=(delay_sum["streaming"] / departs["streaming"]
                           if departs["streaming"] else math.nan),
        qos_delay_s=qos_delay_sum / qos_departs if qos_departs else math.nan,
        voip_drop_rate=(drops["voip"] / arrivals["voip"]
                        if arrivals["voip"] else 0.0),
        streaming_drop_rate=(drops["streaming"] / arrivals["streaming"]
                             if arrivals["streaming"] else 0.0),
        be_throughput_bps=be_bits / measured_time,
        final_ewma_delay_s=float(ewma_trace[-1]),
        steady_ewma_delay_s=float(ewma_trace[-tail:].mean()),
        convergence_slot=detect_convergence(weight_trace, 0.10, 10_000),
        weight_trace=weight_trace[::stride].copy(),
        ewma_trace=ewma_trace[::stride].copy(),
        num_slots=cfg.num_slots,
        slot_s=cfg.slot_s,
        warmup_slots=warm,
        seed=cfg.seed,
        counters=counters,
        conservation_max_error=conservation_err,
    )


_SCALAR_METRICS = (
    "voip_delay_s", "streaming_delay_s", "qos_delay_s", "voip_drop_rate",
    "streaming_drop_rate", "be_throughput_bps", "final_ewma_delay_s",
    "steady_ewma_delay_s",
)


def run_simulation(config):
    """Run ``config.num_runs`` independent runs and average their metrics.

    Deterministic for a fixed seed: run i uses the i-th spawn of the
    config's seed sequence, with users re-placed and all streams redrawn.
    Returns the averaged RunMetrics; individual runs are kept in ``.runs``.
    """
    root = np.random.SeedSequence(config.seed)
    runs = [simulate_run(config, s) for s in root.spawn(config.num_runs)]
    if config.num_runs == 1:
        only = runs[0]
        only.runs = runs
        return only
    agg = replace(runs[0])
    for name in _SCALAR_METRICS:
        setattr(agg, name, float(np.mean([getattr(r, name) for r in runs])))
    agg.weight_trace = np.mean([r.weight_trace for r in runs], axis=0)
    agg.ewma_trace = np.mean([r.ewma_trace for r in runs], axis=0)
    agg.convergence_slot = detect_convergence(agg.weight_trace, 0.10, 10_000)
    agg.conservation_max_error = max(r.conservation_max_error for r in runs)
    agg.counters = {
        klass: {key: float(np.mean([r.counters[klass][key] for r in runs]))
                for key in runs[0].counters[klass]}
        for klass in runs[0].counters
    }
    agg.runs = runs
    return agg


def detect_convergence(trajectory, tolerance_band, hold_slots):
    """Earliest index from which the trace stays within the band of its final
    value through the end, provided that settled stretch spans at least
    ``hold_slots`` samples; None when the trace never settles that long."""
    traj = np.asarray(trajectory, dtype=float)
    if traj.size == 0:
        raise ValueError("trajectory must be non-empty")
    final = traj[-1]
    tol = tolerance_band * abs(final)
    bad = np.nonzero(np.abs(traj - final) > tol)[0]
    start = int(bad[-1]) + 1 if bad.size else 0
    if traj.size - start >= hold_slots:
        return start
    return None
