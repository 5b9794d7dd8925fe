"""Configuration files and result persistence.

Configs are INI files (key/value under sections). Any key left out falls
back to the desk-scale default, and loading always makes it possible to echo
the fully resolved config back out, so that a rerun from the echoed file
reproduces the original exactly. Results go to CSV files whose first line is
a schema comment.
"""

import configparser
import csv
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .channel import ChannelParams
from .scheduler import BeWeightController
from .sim import BeParams, SimConfig, StreamingParams, VoipParams, desk_channel

SWEEP_SCHEMA = "ofdmasim.sweep.v1"
TRACE_SCHEMA = "ofdmasim.lambda_trace.v1"
RUN_SCHEMA = "ofdmasim.run.v1"

SWEEP_VARIABLES = ("streaming_users", "voip_users", "be_users")


class ConfigError(Exception):
    """A config file failed to parse or violated an invariant."""


@dataclass
class ExperimentSpec:
    """A sweep over one population variable, run for each scheduler."""

    base: SimConfig
    variable: str
    values: list
    schedulers: list
    output_dir: str = "."

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ConfigError(f"sweep variable must be one of {SWEEP_VARIABLES}")
        if not self.values:
            raise ConfigError("sweep values must be non-empty")
        if sorted(self.values) != list(self.values):
            raise ConfigError("sweep values must be sorted ascending")
        for s in self.schedulers:
            if s not in ("adaptive", "sequential"):
                raise ConfigError(f"unknown scheduler {s!r} in sweep")

    def config_for(self, value, scheduler):
        attr = {"streaming_users": "num_streaming", "voip_users": "num_voip",
                "be_users": "num_best_effort"}[self.variable]
        return replace(self.base, **{attr: int(value), "scheduler": scheduler})


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text, key):
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _section_into(parser, section, spec_fields, caster):
    out = {}
    if not parser.has_section(section):
        return out
    known = {f.name for f in spec_fields}
    for key, raw in parser.items(section):
        name = caster.get("rename", {}).get(key, key)
        if name not in known:
            raise ConfigError(f"[{section}] has unknown key {key!r}")
        ftype = next(f.type for f in spec_fields if f.name == name)
        try:
            if ftype in ("bool", bool):
                out[name] = _parse_bool(raw, key)
            elif ftype in ("int", int):
                out[name] = int(raw)
            elif ftype in ("float", float):
                out[name] = float(raw)
            else:
                out[name] = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return out


_CHANNEL_RENAME = {"subcarriers": "num_subcarriers"}
_SIM_KEYS = {
    "scheduler": str, "slot_s": float, "slots": int, "runs": int, "seed": int,
    "warmup_slots": int, "trace_stride": int,
}
_SIM_RENAME = {"slots": "num_slots", "runs": "num_runs"}
_CTRL_EXTRA = {"ewma_alpha": float, "monitor_counts_drops": bool,
               "backlog_cap": bool, "control_interval_s": float,
               "monitor_mode": str, "monitor_stat": str,
               "controller_start_s": float, "monitor_cap_factor": float,
               "ewma_alpha_down": float, "monitor_lead_s": float}


def load_config(path):
    """Parse an INI config into a SimConfig, or an ExperimentSpec when a
    [sweep] section is present. Raises ConfigError with file/field context."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    try:
        kwargs = {}
        if parser.has_section("sim"):
            for key, raw in parser.items("sim"):
                if key not in _SIM_KEYS:
                    raise ConfigError(f"[sim] has unknown key {key!r}")
                name = _SIM_RENAME.get(key, key)
                try:
                    kwargs[name] = _SIM_KEYS[key](raw)
                except ValueError as exc:
                    raise ConfigError(f"[sim] {key}: {exc}") from exc
        if parser.has_section("users"):
            rename = {"voip": "num_voip", "streaming": "num_streaming",
                      "best_effort": "num_best_effort"}
            for key, raw in parser.items("users"):
                if key not in rename:
                    raise ConfigError(f"[users] has unknown key {key!r}")
                try:
                    kwargs[rename[key]] = int(raw)
                except ValueError as exc:
                    raise ConfigError(f"[users] {key}: {exc}") from exc

        chan_kwargs = _section_into(parser, "channel", fields(ChannelParams),
                                    {"rename": _CHANNEL_RENAME})
        base_channel = desk_channel()
        kwargs["channel"] = (replace(base_channel, **chan_kwargs)
                             if chan_kwargs else base_channel)

        for section, cls, cfg_field in (("voip", VoipParams, "voip"),
                                        ("streaming", StreamingParams, "streaming"),
                                        ("best_effort", BeParams, "best_effort")):
            sec_kwargs = _section_into(parser, section, fields(cls), {})
            if sec_kwargs:
                kwargs[cfg_field] = replace(cls(), **sec_kwargs)

        ctrl_kwargs = {}
        extra = {}
        if parser.has_section("controller"):
            ctrl_fields = {f.name: f.type for f in fields(BeWeightController)}
            for key, raw in parser.items("controller"):
                try:
                    if key == "monitor_classes":
                        extra[key] = tuple(
                            v.strip() for v in raw.split(",") if v.strip())
                    elif key in _CTRL_EXTRA:
                        caster = _CTRL_EXTRA[key]
                        extra[key] = (_parse_bool(raw, key) if caster is bool
                                      else caster(raw))
                    elif key in ("weight", "step", "initialized", "initial_step") \
                            or key.startswith("_"):
                        raise ConfigError(
                            f"[controller] {key} is run state, not configuration")
                    elif key in ctrl_fields:
                        ftype = ctrl_fields[key]
                        ctrl_kwargs[key] = (int(raw) if ftype in ("int", int)
                                            else float(raw))
                    else:
                        raise ConfigError(f"[controller] has unknown key {key!r}")
                except ValueError as exc:
                    raise ConfigError(f"[controller] {key}: {exc}") from exc
        kwargs["controller"] = BeWeightController(**ctrl_kwargs)
        kwargs.update(extra)

        try:
            cfg = SimConfig(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

        if not parser.has_section("sweep"):
            return cfg

        variable = parser.get("sweep", "variable", fallback="streaming_users").strip()
        raw_values = parser.get("sweep", "values", fallback=None)
        if raw_values is None:
            raise ConfigError("[sweep] requires a 'values' key")
        values = _parse_values(raw_values)
        raw_scheds = parser.get("sweep", "schedulers",
                                fallback="adaptive, sequential")
        schedulers = [s.strip() for s in raw_scheds.split(",") if s.strip()]
        outdir = parser.get("sweep", "output_dir", fallback=".").strip()
        for key, _ in parser.items("sweep"):
            if key not in ("variable", "values", "schedulers", "output_dir"):
                raise ConfigError(f"[sweep] has unknown key {key!r}")
        return ExperimentSpec(base=cfg, variable=variable, values=values,
                              schedulers=schedulers, output_dir=outdir)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_values(text):
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"bad range {text!r}, expected start:stop[:step]")
        try:
            start, stop = int(parts[0]), int(parts[1])
            step = int(parts[2]) if len(parts) == 3 else 1
        except ValueError as exc:
            raise ConfigError(f"bad range {text!r}: {exc}") from exc
        if step <= 0 or stop < start:
            raise ConfigError(f"bad range {text!r}")
        return list(range(start, stop + 1, step))
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad values list {text!r}: {exc}") from exc


def write_resolved_config(cfg, path, sweep=None):
    """Echo a fully resolved config (every default made explicit) to INI."""
    lines = ["# resolved configuration; reloading this file reproduces the run", ""]
    lines += ["[sim]"]
    lines += [f"scheduler = {cfg.scheduler}",
              f"slot_s = {_fmt(cfg.slot_s)}",
              f"slots = {cfg.num_slots}",
              f"runs = {cfg.num_runs}",
              f"seed = {cfg.seed}",
              f"warmup_slots = {cfg.warmup_slots}",
              f"trace_stride = {cfg.trace_stride}", ""]
    lines += ["[users]",
              f"voip = {cfg.num_voip}",
              f"streaming = {cfg.num_streaming}",
              f"best_effort = {cfg.num_best_effort}", ""]
    lines += ["[channel]"]
    for f in fields(ChannelParams):
        if f.name == "mcs_table":
            continue  # expressed through rate_mode; table is code-defined
        val = getattr(cfg.channel, f.name)
        name = "subcarriers" if f.name == "num_subcarriers" else f.name
        lines.append(f"{name} = {_fmt(val)}")
    lines.append("")
    for section, obj in (("voip", cfg.voip), ("streaming", cfg.streaming),
                         ("best_effort", cfg.best_effort)):
        lines.append(f"[{section}]")
        for f in fields(type(obj)):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        lines.append("")
    lines += ["[controller]"]
    for name in ("target_delay_s", "init_divisor", "step_shrink", "delay_slack",
                 "initial_step_ratio", "fallback_weight", "step_regrow_after"):
        lines.append(f"{name} = {_fmt(getattr(cfg.controller, name))}")
    lines += [f"control_interval_s = {_fmt(cfg.control_interval_s)}",
              f"controller_start_s = {_fmt(cfg.controller_start_s)}",
              f"monitor_mode = {cfg.monitor_mode}",
              f"monitor_stat = {cfg.monitor_stat}",
              f"monitor_cap_factor = {_fmt(cfg.monitor_cap_factor)}",
              f"monitor_lead_s = {_fmt(cfg.monitor_lead_s)}",
              "monitor_classes = " + ",".join(cfg.monitor_classes),
              f"ewma_alpha = {_fmt(cfg.ewma_alpha)}",
              f"ewma_alpha_down = {_fmt(cfg.ewma_alpha_down)}",
              f"monitor_counts_drops = {_fmt(cfg.monitor_counts_drops)}",
              f"backlog_cap = {_fmt(cfg.backlog_cap)}", ""]
    if sweep is not None:
        lines += ["[sweep]",
                  f"variable = {sweep.variable}",
                  "values = " + ",".join(str(v) for v in sweep.values),
                  "schedulers = " + ",".join(sweep.schedulers),
                  f"output_dir = {sweep.output_dir}", ""]
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
    return path


def _num(x):
    if x is None:
        return ""
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return format(x, ".10g")


SWEEP_COLUMNS = ("sweep_value", "scheduler", "voip_delay_s", "str_delay_s",
                 "be_throughput_bps", "voip_drop_rate", "str_drop_rate")


def write_sweep_csv(rows, path):
    """One row per (sweep value, scheduler); header-only file for no rows.

    Each row is (sweep_value, scheduler_name, RunMetrics).
    """
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={SWEEP_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for value, scheduler, m in rows:
            writer.writerow([
                value, scheduler, _num(m.voip_delay_s), _num(m.streaming_delay_s),
                _num(m.be_throughput_bps), _num(m.voip_drop_rate),
                _num(m.streaming_drop_rate),
            ])
    return path


def write_lambda_trace(weight_trace, ewma_trace, path, stride=1, normalize=False,
                       slot_offset=0):
    """Per-slot weight/delay trace; normalization divides by the final weight."""
    w = np.asarray(weight_trace, dtype=float)
    e = np.asarray(ewma_trace, dtype=float)
    if normalize and w.size and w[-1] != 0.0:
        w = w / w[-1]
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={TRACE_SCHEMA} normalized={'true' if normalize else 'false'}\n")
        writer = csv.writer(fh)
        writer.writerow(("slot", "lambda", "qos_ewma_delay"))
        for i in range(0, w.size, stride):
            writer.writerow((slot_offset + i, _num(float(w[i])), _num(float(e[i]))))
    return path


RUN_COLUMNS = ("scheduler", "voip_delay_s", "str_delay_s", "qos_delay_s",
               "voip_drop_rate", "str_drop_rate", "be_throughput_bps",
               "final_ewma_delay_s", "convergence_slot")


def write_run_csv(metrics, scheduler, path):
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={RUN_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(RUN_COLUMNS)
        writer.writerow([
            scheduler, _num(metrics.voip_delay_s), _num(metrics.streaming_delay_s),
            _num(metrics.qos_delay_s), _num(metrics.voip_drop_rate),
            _num(metrics.streaming_drop_rate), _num(metrics.be_throughput_bps),
            _num(metrics.final_ewma_delay_s),
            "" if metrics.convergence_slot is None else metrics.convergence_slot,
        ])
    return path


def plot_sweep(rows, outdir):
    """Delay and throughput figures for a sweep; returns the file paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_sched = {}
    for value, scheduler, m in rows:
        by_sched.setdefault(scheduler, []).append((value, m))
    paths = []
    fig, ax = plt.subplots()
    for scheduler, pts in by_sched.items():
        xs = [v for v, _ in pts]
        ax.plot(xs, [m.voip_delay_s for _, m in pts], marker="o",
                label=f"{scheduler} voip")
        ax.plot(xs, [m.streaming_delay_s for _, m in pts], marker="s",
                label=f"{scheduler} streaming")
    ax.set_xlabel("streaming users")
    ax.set_ylabel("average packet delay (s)")
    ax.legend()
    p = f"{outdir}/sweep_delay.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots()
    for scheduler, pts in by_sched.items():
        xs = [v for v, _ in pts]
        ax.plot(xs, [m.be_throughput_bps / 1e6 for _, m in pts], marker="o",
                label=scheduler)
    ax.set_xlabel("streaming users")
    ax.set_ylabel("best-effort throughput (Mbit/s)")
    ax.legend()
    p = f"{outdir}/sweep_throughput.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths


def plot_traces(traces, outdir, name="lambda_convergence"):
    """Normalized weight traces on one axis; traces is {label: array}."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots()
    for label, trace in traces.items():
        t = np.asarray(trace, dtype=float)
        if t.size and t[-1] != 0.0:
            t = t / t[-1]
        ax.plot(t, label=label, linewidth=0.8)
    ax.set_xlabel("slot")
    ax.set_ylabel("normalized best-effort weight")
    ax.legend()
    p = f"{outdir}/{name}.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return [p]
