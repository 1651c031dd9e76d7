"""Batch command-line entry points.

Commands consume flat ``key = value`` config files (with ``include``
support), run fully seeded, and emit machine-readable JSON/CSV next to
any human-readable output so downstream tooling never parses logs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path

import click
import numpy as np

from . import channel, session
from .errors import ConfigurationError, ProtocolError
from .fixtures import load_fixture
from .keyrate import (SecurityParams, SourceConfig, asymptotic_rate,
                      finite_size_rate)
from .source import generate_sequence

__all__ = ["main", "read_config"]


def read_config(path) -> dict[str, str]:
    """Parse a flat key=value config file.

    Lines are ``key = value``; ``#`` starts a comment; ``include FILE``
    splices another config (relative to the including file), earlier
    values being overridden by later ones.
    """
    out: dict[str, str] = {}
    path = Path(path)
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            out.update(read_config(path.parent / line.split(None, 1)[1]))
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _source_from_config(cfg: dict[str, str]) -> SourceConfig:
    fields = {f.name for f in dataclasses.fields(SourceConfig)}
    kwargs = {k: float(v) for k, v in cfg.items() if k in fields}
    return SourceConfig(mu=kwargs.pop("mu", 0.5), nu=kwargs.pop("nu", 0.05), **kwargs)


def _security_from_config(cfg: dict[str, str]) -> SecurityParams:
    fields = {f.name for f in dataclasses.fields(SecurityParams)}
    kwargs = {k: float(v) for k, v in cfg.items() if k in fields}
    return SecurityParams(**kwargs)


def _receiver_from_config(cfg: dict[str, str]) -> channel.ReceiverModel:
    fields = {f.name for f in dataclasses.fields(channel.ReceiverModel)}
    kwargs = {k: float(v) for k, v in cfg.items() if k in fields}
    return channel.ReceiverModel(**kwargs)


def _slug(fixture: str) -> str:
    return Path(fixture).name.removesuffix(".json")


def _out_dir(out) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


@click.group()
def main():
    """Decoy-state BB84 post-processing and channel-simulation toolbox."""


@main.command()
@click.argument("fixture")
@click.option("--config", type=click.Path(exists=True), default=None,
              help="Optional overrides for the security block.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="Directory for the JSON report.")
def keyrate(fixture, config, seed, out):
    """Evaluate secure-rate bounds for a bundled or on-disk fixture."""
    cfg, stats, sec = load_fixture(fixture)
    if config:
        sec = dataclasses.replace(sec, **{
            k: float(v) for k, v in read_config(config).items()
            if k in {f.name for f in dataclasses.fields(SecurityParams)}})
    result = finite_size_rate(cfg, stats, sec)
    report = {
        "fixture": fixture,
        "seed": seed,
        "q1_lower_bound": result.q1_lb,
        "e1_upper_bound": result.e1_ub,
        "asymptotic_rate_per_pulse": result.r_inf,
        "asymptotic_rate_bits_per_s": result.r_inf * cfg.pulse_rate,
        "finite_rate_per_pulse": result.r_finite,
        "final_length_bits": result.final_length_bits,
    }
    click.echo(f"Q1 lower bound:        {result.q1_lb:.6e}")
    click.echo(f"E1 upper bound:        {result.e1_ub * 100:.4f} %")
    click.echo(f"Asymptotic rate:       {result.r_inf * cfg.pulse_rate:.4g} bits/s")
    click.echo(f"Finite rate:           {result.r_finite:.6e} per pulse")
    click.echo(f"Final secure length:   {result.final_length_bits} bits")
    if out:
        path = _out_dir(out) / f"keyrate_{_slug(fixture)}.json"
        path.write_text(json.dumps(report, indent=2))
        click.echo(f"wrote {path}")


@main.command()
@click.option("--config", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def simulate(config, seed, out):
    """Drive the source through a loss profile and record detections."""
    conf = read_config(config)
    cfg = _source_from_config(conf)
    rx = _receiver_from_config(conf)
    duration = float(conf.get("duration_s", "1"))
    out = _out_dir(out)
    if "profile_csv" in conf:
        profile = channel.LossProfile.from_csv(
            Path(config).parent / conf["profile_csv"])
    else:
        profile = channel.LossProfile.fixed(float(conf.get("loss_db", "40")),
                                            duration)
    if duration <= 0 or profile.duration_s <= 0:
        (out / "summary.csv").write_text("t_s,loss_db,raw_rate_hz\n")
        click.echo("empty run (zero duration)")
        return
    n_pulses = int(cfg.pulse_rate * profile.duration_s)
    seq = generate_sequence(seed, n_pulses,
                            fractions=(cfg.k_mu, cfg.k_nu, cfg.k_vac),
                            intrinsic_qber=rx.intrinsic_qber)
    offset = int(round(float(conf.get("offset_ns", "0")) * 6.4))
    run = channel.simulate_run(seq, profile, rx, seed=seed + 1, cfg=cfg,
                               offset_ticks=offset)
    det = session.BobDetections.from_run(run)
    session.store_detections(out / "detections.qtag", det)

    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_s", "loss_db", "raw_rate_hz"])
        seconds = run.tags // channel.TICKS_PER_SECOND
        counts = np.bincount(seconds[run.tags >= 0],
                             minlength=int(profile.duration_s))
        for t in range(int(profile.duration_s)):
            writer.writerow([t, f"{profile.loss_at(t):.3f}", int(counts[t])])
    meta = {"seed": seed, "pulses": n_pulses, "offset_ticks": offset,
            "detections": int(det.tags.size), "config": conf}
    (out / "run.json").write_text(json.dumps(meta, indent=2))
    click.echo(f"{det.tags.size} detections over {profile.duration_s:.0f} s "
               f"-> {out}")


@main.command(name="session")
@click.option("--config", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def session_cmd(config, seed, out):
    """Simulate a link and run the full two-party post-processing."""
    conf = read_config(config)
    cfg = _source_from_config(conf)
    sec = _security_from_config(conf)
    rx = _receiver_from_config(conf)
    out = _out_dir(out)
    duration = float(conf.get("duration_s", "1"))
    profile = channel.LossProfile.fixed(float(conf.get("loss_db", "40")), duration)
    n_pulses = int(cfg.pulse_rate * duration)
    seq = generate_sequence(seed, n_pulses,
                            fractions=(cfg.k_mu, cfg.k_nu, cfg.k_vac),
                            intrinsic_qber=rx.intrinsic_qber)
    offset = int(round(float(conf.get("offset_ns", "0")) * 6.4))
    run = channel.simulate_run(seq, profile, rx, seed=seed + 1, cfg=cfg,
                               offset_ticks=offset)
    det = session.BobDetections.from_run(run)
    scfg = session.SessionConfig(
        source=cfg, security=sec,
        window_ns=rx.window_ns,
        block_size=int(conf.get("block_size", "2048")),
        pa_length_policy=conf.get("pa_length_policy", "finite"),
        seed=seed,
    )
    try:
        a_key, b_key, a_rep, b_rep = session.run_session_pair(seq, det, scfg)
    except ProtocolError as exc:
        (out / "abort.txt").write_text(f"state={exc.state}\nreason={exc}\n")
        click.echo(f"session aborted in state {exc.state}: {exc}")
        return
    (out / "alice.key").write_bytes(a_key)
    (out / "bob.key").write_bytes(b_key)
    for rep in (a_rep, b_rep):
        with open(out / f"resources_{rep.role}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kind", "name", "value"])
            for name, val in sorted(rep.bytes_sent.items()):
                writer.writerow(["bytes_sent", name, val])
            for name, val in sorted(rep.bytes_received.items()):
                writer.writerow(["bytes_received", name, val])
            for name, val in sorted(rep.processing_time_s.items()):
                writer.writerow(["time_s", name, f"{val:.6f}"])
            writer.writerow(["memory", "peak_estimate", rep.peak_memory_estimate])
    click.echo(f"final key {len(a_key) * 8} bits, identical: {a_key == b_key}")


@main.command(name="finite-curve")
@click.argument("fixture")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--decades", default="8:16", show_default=True,
              help="log10 pulse range lo:hi")
@click.option("--points-per-decade", type=int, default=8, show_default=True)
def finite_curve(fixture, config, seed, out, decades, points_per_decade):
    """Tabulate finite/asymptotic rate ratio versus pulses sent."""
    cfg, stats, sec = load_fixture(fixture)
    out = _out_dir(out)
    r_inf = asymptotic_rate(cfg, stats, sec)
    path = out / f"finite_curve_{_slug(fixture)}.csv"
    if r_inf <= 0.0:
        path.write_text("pulses_sent,finite_over_asymptotic\n")
        click.echo("asymptotic rate is zero: no curve")
        return
    lo, hi = (float(x) for x in decades.split(":"))
    grid = np.logspace(lo, hi, int((hi - lo) * points_per_decade) + 1)
    rows = []
    crossing = None
    for pulses in grid:
        ratio = _ratio_at(cfg, stats, sec, pulses, r_inf)
        rows.append((pulses, ratio))
        if crossing is None and ratio >= 0.8:
            crossing = pulses
    if crossing is not None and rows[0][1] < 0.8:
        # refine by bisection between the straddling grid points
        lo_p = grid[max(int(np.searchsorted(grid, crossing)) - 1, 0)]
        hi_p = crossing
        for _ in range(40):
            mid = math.sqrt(lo_p * hi_p)
            if _ratio_at(cfg, stats, sec, mid, r_inf) >= 0.8:
                hi_p = mid
            else:
                lo_p = mid
        crossing = hi_p
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pulses_sent", "finite_over_asymptotic"])
        for pulses, ratio in rows:
            writer.writerow([f"{pulses:.6e}", f"{ratio:.6f}"])
    if crossing is None:
        click.echo("ratio never reaches 0.8 on this grid")
    else:
        click.echo(f"0.8 crossing at {crossing:.3e} pulses")
    (out / f"finite_curve_{_slug(fixture)}.json").write_text(json.dumps(
        {"fixture": fixture, "seed": seed,
         "crossing_pulses": crossing}, indent=2))


def _ratio_at(cfg, stats, sec, pulses, r_inf):
    scale = pulses / max(stats.pulses_sent, 1)
    scaled = dataclasses.replace(
        stats,
        n_mu=max(int(stats.n_mu * scale), 1),
        n_nu=max(int(stats.n_nu * scale), 1),
        n_vac=max(int(stats.n_vac * scale), 1),
        pulses_sent=int(pulses),
        sigma_q_mu=stats.sigma_q_mu / math.sqrt(scale),
        sigma_q_nu=stats.sigma_q_nu / math.sqrt(scale),
        sigma_e_mu=stats.sigma_e_mu / math.sqrt(scale),
        sigma_e_nu=stats.sigma_e_nu / math.sqrt(scale),
        sigma_y0=stats.sigma_y0 / math.sqrt(scale),
    )
    return finite_size_rate(cfg, scaled, sec).r_finite / r_inf


@main.command(name="pass-select")
@click.option("--config", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def pass_select(config, seed, out):
    """Map a theoretical pass profile onto measured per-second losses."""
    conf = read_config(config)
    base = Path(config).parent
    measured = channel.LossProfile.from_csv(base / conf["measured_csv"])
    theory = channel.LossProfile.from_csv(base / conf["theory_csv"],
                                          kind="theoretical_pass")
    window = int(conf.get("smoothing_window_s", "5"))
    smoothed = channel.smooth_profile(measured.loss_db, window)
    mapping = channel.select_pass_blocks(smoothed, theory.loss_db)
    out = _out_dir(out)
    with open(out / "block_mapping.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theory_t_s", "measured_t_s",
                         "theory_loss_db", "measured_smoothed_db"])
        for i, j in enumerate(mapping):
            writer.writerow([i, int(j), f"{theory.loss_db[i]:.3f}",
                             f"{smoothed[j]:.3f}"])
    click.echo(f"mapped {mapping.size} seconds -> {out / 'block_mapping.csv'}")


@main.command()
@click.argument("fixtures", nargs=-1, required=True)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None)
def combine(fixtures, config, seed, out):
    """Pool the statistics of several passes and evaluate the key."""
    loaded = [load_fixture(name) for name in fixtures]
    sec = loaded[0][2]
    cfg, stats = channel.combine_passes([(c, s) for c, s, _ in loaded])
    result = finite_size_rate(cfg, stats, sec)
    click.echo(f"pooled pulses: {stats.pulses_sent}")
    click.echo(f"finite rate:   {result.r_finite:.6e} per pulse")
    click.echo(f"final length:  {result.final_length_bits} bits")
    if out:
        path = _out_dir(out) / "combine.json"
        path.write_text(json.dumps({
            "fixtures": list(fixtures), "seed": seed,
            "pooled_pulses": stats.pulses_sent,
            "finite_rate_per_pulse": result.r_finite,
            "final_length_bits": result.final_length_bits}, indent=2))
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
