"""Command-line front end.

    spdcbell interference-scan --config run.json --out results/
    spdcbell bell-scan --seed 7 --out results/
    spdcbell histogram --out results/
    spdcbell calibrate-conventions --out results/
    spdcbell replay --input results/clicks_post.csv --out replay/

The config is a JSON file whose keys carry their units. Anything left out
takes the defaults in ``DEFAULT_CONFIG``; the fully resolved config is
written next to the results. Outputs are assembled in memory and written
only after the whole command has succeeded.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import formats
from .analysis import (
    BELL_THETA_T,
    MEASURED_PAIRS,
    ScanData,
    bootstrap_sigma_S,
    calibrate_conventions,
    chsh_S,
    default_convention,
    fit_sinusoid,
    subtract_accidentals,
    visibility,
)
from .bench import (
    DETECTORS,
    AnalyzerSetting,
    BenchConfig,
    DetectorConfig,
    analyze_clicks,
    background_run,
    bell_pair_rate,
    calibrate_accidentals,
    run_point,
    simulate_clicks,
    start_stop_histogram,
)
from .seeding import derive_rng, derive_seed
from .source import MAPS, SourceConfig, compensate, generate_fluorescence, generate_pair_stream

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 2711,
    "workers": 1,
    "source": {
        "pump_power_mw": 10.0,
        "pair_rate_per_mw": bell_pair_rate() / 10.0,
        "crystal_length_mm": 10.0,
        "walkoff_ps_per_mm": 0.3,
        "compensator_length_mm": None,
        "fluorescence_rate_per_mw": 1000.0,
        "aperture_diameter_mm": 1.0,
        "filter_bandwidth_nm": 1.0,
        "indistinguishability_map": "hydrothermal",
    },
    "bench": {
        "coincidence_window_ns": 70.0,
        "path_transmission": 0.4,
        "mix_p": None,
        "triplet_phase_rad": None,
        "offset_T_rad": None,
        "offset_R_rad": None,
        "mirrored_T": None,
        "mirrored_R": None,
        "detector": {
            "efficiency": 0.525,
            "dark_rate_per_s": 50.0,
            "dead_time_ns": 50.0,
            "pulse_width_ns": 35.0,
            "jitter_ns": 0.3,
        },
        "detector_overrides": {},
    },
    "calibration": {"stray_rate_per_s": 2.0e5, "duration_s": 1.0},
    "interference": {
        "theta_T_rad": [0.0, math.pi / 8],
        "point_duration_s": 1.0,
        "aperture_sweep_mm": None,
    },
    "bell": {
        "theta_T_rad": list(BELL_THETA_T),
        "theta_R_rad": None,
        "n_theta_R": 32,
        "point_duration_s": 10.0,
        "mix_p": 0.93,
        "bootstrap_draws": 200,
    },
    "histogram": {"duration_s": 0.1, "bin_width_ps": 0.1, "span_ns": 0.01, "jitter_ns": 0.0},
    "conventions": {"resolution_rad": math.pi / 16},
}

_NULLABLE = {("source", "compensator_length_mm"), ("bench", "mix_p"), ("bench", "triplet_phase_rad"),
             ("bench", "offset_T_rad"), ("bench", "offset_R_rad"), ("bench", "mirrored_T"),
             ("bench", "mirrored_R"), ("interference", "aperture_sweep_mm"), ("bell", "theta_R_rad")}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(where)}")
        if isinstance(base[key], dict) and key != "detector_overrides":
            if not isinstance(value, dict):
                raise ConfigError(f"{'.'.join(where)} must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            if value is None and where not in _NULLABLE:
                raise ConfigError(f"{'.'.join(where)} may not be null")
            out[key] = value
    return out


def load_config(path: str | None, seed: int | None = None, workers: int | None = None) -> dict:
    user: dict = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be an object")
    cfg = _merge(DEFAULT_CONFIG, user)
    if seed is not None:
        cfg["seed"] = seed
    if workers is not None:
        cfg["workers"] = workers
    validate(cfg)
    return cfg


@dataclass
class Resolved:
    source: SourceConfig
    bench: BenchConfig
    imap: Any


def _num(value, where, lo=None, positive=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"{where} must be a finite number")
    if positive and value <= 0:
        raise ConfigError(f"{where} must be positive")
    if lo is not None and value < lo:
        raise ConfigError(f"{where} must be >= {lo}")
    return float(value)


def _angles(value, where, allow_empty=False):
    if not isinstance(value, list) or (not value and not allow_empty):
        raise ConfigError(f"{where} must be a non-empty list of angles")
    return [_num(v, where) for v in value]


def validate(cfg: dict) -> None:
    if isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    if isinstance(cfg["workers"], bool) or not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ConfigError("workers must be a positive integer")
    if cfg["source"]["indistinguishability_map"] not in MAPS:
        raise ConfigError(f"source.indistinguishability_map must be one of {sorted(MAPS)}")
    for key in ("point_duration_s",):
        _num(cfg["interference"][key], f"interference.{key}", lo=0)
        _num(cfg["bell"][key], f"bell.{key}", positive=True)
    _angles(cfg["interference"]["theta_T_rad"], "interference.theta_T_rad")
    if cfg["interference"]["aperture_sweep_mm"] is not None:
        for a in cfg["interference"]["aperture_sweep_mm"]:
            _num(a, "interference.aperture_sweep_mm", positive=True)
    tt = _angles(cfg["bell"]["theta_T_rad"], "bell.theta_T_rad")
    for t in BELL_THETA_T:
        if not any(abs(t - x) < 1e-9 for x in tt):
            raise ConfigError("bell.theta_T_rad must include 0 and pi/8")
    if cfg["bell"]["theta_R_rad"] is not None:
        tr = _angles(cfg["bell"]["theta_R_rad"], "bell.theta_R_rad")
        if len(tr) < 6 or any(b <= a for a, b in zip(tr, tr[1:])):
            raise ConfigError("bell.theta_R_rad needs >= 6 strictly increasing angles")
    n = cfg["bell"]["n_theta_R"]
    if isinstance(n, bool) or not isinstance(n, int) or n < 6:
        raise ConfigError("bell.n_theta_R must be an integer >= 6")
    b = cfg["bell"]["bootstrap_draws"]
    if isinstance(b, bool) or not isinstance(b, int) or b < 0:
        raise ConfigError("bell.bootstrap_draws must be a nonnegative integer")
    _num(cfg["bell"]["mix_p"], "bell.mix_p", lo=0)
    h = cfg["histogram"]
    _num(h["duration_s"], "histogram.duration_s", lo=0)
    _num(h["bin_width_ps"], "histogram.bin_width_ps", positive=True)
    _num(h["span_ns"], "histogram.span_ns", positive=True)
    _num(h["jitter_ns"], "histogram.jitter_ns", lo=0)
    _num(cfg["calibration"]["stray_rate_per_s"], "calibration.stray_rate_per_s", positive=True)
    _num(cfg["calibration"]["duration_s"], "calibration.duration_s", positive=True)
    _num(cfg["conventions"]["resolution_rad"], "conventions.resolution_rad", positive=True)
    for d in cfg["bench"]["detector_overrides"]:
        if d not in DETECTORS:
            raise ConfigError(f"bench.detector_overrides: unknown detector {d}")
    try:
        resolve(cfg, mix_p=0.5)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _detector(params: dict) -> DetectorConfig:
    unknown = set(params) - set(DEFAULT_CONFIG["bench"]["detector"])
    if unknown:
        raise ConfigError(f"unknown detector keys {sorted(unknown)}")
    return DetectorConfig(efficiency=params["efficiency"], dark_rate=params["dark_rate_per_s"],
                          dead_time_ns=params["dead_time_ns"], pulse_width_ns=params["pulse_width_ns"],
                          jitter_ns=params["jitter_ns"])


def resolve(cfg: dict, mix_p: float | None = None, use_beam_splitter: bool = True,
            seed: int | None = None, duration_s: float = 1.0, jitter_ns: float | None = None) -> Resolved:
    s = dict(cfg["source"])
    imap = MAPS[s.pop("indistinguishability_map")]
    source = SourceConfig(**s, duration_s=duration_s, seed=cfg["seed"] if seed is None else seed)
    b = cfg["bench"]
    conv = default_convention()

    def pick(key, fallback):
        return fallback if b[key] is None else b[key]

    dets = {}
    for d in DETECTORS:
        params = dict(b["detector"])
        params.update(b["detector_overrides"].get(d, {}))
        if jitter_ns is not None:
            params["jitter_ns"] = jitter_ns
        dets[d] = _detector(params)
    if mix_p is None:
        mix_p = pick("mix_p", imap.p(source.aperture_diameter_mm, source.filter_bandwidth_nm))
    bench = BenchConfig(
        use_beam_splitter=use_beam_splitter,
        settingT=AnalyzerSetting(0.0, pick("offset_T_rad", conv.offset_T), pick("mirrored_T", conv.mirrored_T)),
        settingR=AnalyzerSetting(0.0, pick("offset_R_rad", conv.offset_R), pick("mirrored_R", conv.mirrored_R)),
        coincidence_window_ns=b["coincidence_window_ns"],
        detectors=dets,
        triplet_phase=pick("triplet_phase_rad", conv.phase),
        mix_p=float(mix_p),
        path_transmission=b["path_transmission"],
    )
    return Resolved(source, bench, imap)


# --- point execution ----------------------------------------------------------


def _run_task(task):
    bench, source = task
    r = run_point(bench, source)
    return r.singles, r.coincidences, r.duration_s


def _run_all(tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_task, tasks))


def _calibration(cfg: dict, res: Resolved, tag: str):
    seed = derive_seed(cfg["seed"], tag, "calibration")
    c = cfg["calibration"]
    bg = background_run(res.bench, res.source.with_(seed=seed), c["stray_rate_per_s"], c["duration_s"])
    return calibrate_accidentals(res.bench, bg)


def _calibration_rows(cal):
    return [[k, v.window_ns, v.sigma_window_ns, v.coincidences, v.rate_a, v.rate_b, v.duration_s]
            for k, v in cal.items()]


CAL_COLUMNS = ["pair", "window_ns", "sigma_window_ns", "coincidences", "rate_a_per_s", "rate_b_per_s", "duration_s"]


def _report(items: dict) -> str:
    return "".join(f"{k}: {formats.fmt(v) if not isinstance(v, str) else v}\n" for k, v in items.items())


def _config_text(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


# --- commands -----------------------------------------------------------------


def cmd_interference_scan(cfg: dict) -> dict[str, str]:
    ic = cfg["interference"]
    thetas = ic["theta_T_rad"]
    base = resolve(cfg, use_beam_splitter=False)
    apertures = ic["aperture_sweep_mm"] or [base.source.aperture_diameter_mm]
    cal = _calibration(cfg, base, "interference")["TT_TR"]

    tasks, keys = [], []
    for ia, ap in enumerate(apertures):
        src = base.source.with_(aperture_diameter_mm=ap)
        p = base.imap.p(ap, src.filter_bandwidth_nm) if cfg["bench"]["mix_p"] is None else cfg["bench"]["mix_p"]
        for it, th in enumerate(thetas):
            bench = base.bench.with_(mix_p=p).with_thetas(theta_T=th)
            point = src.with_(duration_s=ic["point_duration_s"], seed=derive_seed(cfg["seed"], "interference", ia, it))
            tasks.append((bench, point))
            keys.append((ia, ap, p, it, th))
    results = _run_all(tasks, cfg["workers"])

    rows, summary_rows = [], []
    summary: dict[str, Any] = {"command": "interference-scan", "seed": cfg["seed"],
                               "effective_window_ns": cal.window_ns}
    net: dict[tuple[int, int], float] = {}
    for (ia, ap, p, it, th), (singles, coinc, dur) in zip(keys, results):
        acc, _ = cal.predict(singles["TT"] / dur, singles["TR"] / dur) if dur > 0 else (0.0, 0.0)
        c = coinc["TT_TR"]
        c_net = max(c - acc * dur, 0.0)
        net[(ia, it)] = c_net
        rows.append([ap, p, th, c, acc * dur, c_net, singles["TT"], singles["TR"], dur])
    i0 = next((i for i, t in enumerate(thetas) if abs(t) < 1e-12), None)
    i8 = next((i for i, t in enumerate(thetas) if abs(t - math.pi / 8) < 1e-12), None)
    for ia, ap in enumerate(apertures):
        p = keys[ia * len(thetas)][2]
        if i0 is None or i8 is None:
            continue
        try:
            v, sv = visibility(net[(ia, i0)], net[(ia, i8)])
        except ValueError:
            v, sv = float("nan"), float("nan")
        summary_rows.append([ap, p, v, sv])
        summary[f"V_aperture_{formats.fmt(ap)}mm"] = f"{formats.fmt(v)} +/- {formats.fmt(sv)}"
    header = {"seed": cfg["seed"], "filter_bandwidth_nm": base.source.filter_bandwidth_nm}
    files = {
        "config_resolved.json": _config_text(cfg),
        "interference.csv": formats.render_table(header, ["aperture_mm", "p", "theta_T_rad", "coincidences",
                                                          "accidentals_est", "coincidences_net", "singles_TT",
                                                          "singles_TR", "duration_s"], rows),
        "visibility.csv": formats.render_table(header, ["aperture_mm", "p", "V", "sigma_V"], summary_rows),
        "summary.txt": _report(summary),
    }
    return files


def default_theta_R(n: int) -> list[float]:
    return [k * math.pi / 16 for k in range(n)]


def cmd_bell_scan(cfg: dict) -> dict[str, str]:
    bc = cfg["bell"]
    mix = cfg["bench"]["mix_p"] if cfg["bench"]["mix_p"] is not None else bc["mix_p"]
    base = resolve(cfg, mix_p=mix, use_beam_splitter=True)
    thetas_T = bc["theta_T_rad"]
    thetas_R = bc["theta_R_rad"] or default_theta_R(bc["n_theta_R"])
    cal = _calibration(cfg, base, "bell")

    tasks = []
    for it, tt in enumerate(thetas_T):
        for ir, tr in enumerate(thetas_R):
            src = base.source.with_(duration_s=bc["point_duration_s"], seed=derive_seed(cfg["seed"], "bell", it, ir))
            tasks.append((base.bench.with_thetas(tt, tr), src))
    results = _run_all(tasks, cfg["workers"])

    files: dict[str, str] = {"config_resolved.json": _config_text(cfg)}
    scans, subtracted = {}, {}
    nR = len(thetas_R)
    for it, tt in enumerate(thetas_T):
        chunk = results[it * nR:(it + 1) * nR]
        dur = np.array([r[2] for r in chunk])
        singles = {d: np.array([r[0][d] for r in chunk], dtype=float) for d in DETECTORS}
        rates, sigmas = {}, {}
        for pair in MEASURED_PAIRS:
            a, b = pair.split("_")
            ra, rb = singles[a].sum() / dur.sum(), singles[b].sum() / dur.sum()
            rates[pair], sigmas[pair] = cal[pair].predict(ra, rb)
        scan = ScanData(np.array(thetas_R), {p: np.array([r[1][p] for r in chunk], dtype=float)
                                             for p in MEASURED_PAIRS},
                        dur, theta_T=tt, accidental_rate=rates, accidental_sigma=sigmas, seed=cfg["seed"])
        scans[tt] = scan
        subtracted[tt] = subtract_accidentals(scan)
        files[f"scan_raw_T{it}.csv"] = formats.scan_text(scan)
        files[f"scan_sub_T{it}.csv"] = formats.scan_text(subtracted[tt])

    fits = {tt: (fit_sinusoid(s, "TT_RT"), fit_sinusoid(s, "TR_RR")) for tt, s in subtracted.items()}
    bell_fits = {tt: f for tt, f in fits.items() if any(abs(tt - x) < 1e-9 for x in BELL_THETA_T)}
    result = chsh_S(bell_fits)
    if bc["bootstrap_draws"] > 0:
        result.sigma_S_bootstrap = bootstrap_sigma_S(subtracted, result, bc["bootstrap_draws"],
                                                     derive_rng(cfg["seed"], "bootstrap"))
    all_fits = [f for pair in fits.values() for f in pair]
    curve_theta = np.linspace(0.0, 2 * math.pi, 257)
    files["fits.csv"] = formats.fits_text(all_fits)
    files["fit_curves.csv"] = formats.fit_curves_text(all_fits, curve_theta)
    files["accidental_calibration.csv"] = formats.render_table({"seed": cfg["seed"]}, CAL_COLUMNS,
                                                               _calibration_rows(cal))
    report: dict[str, Any] = {
        "command": "bell-scan",
        "seed": cfg["seed"],
        "mix_p": base.bench.mix_p,
        "offset_T_rad": base.bench.settingT.frame_offset,
        "offset_R_rad": base.bench.settingR.frame_offset,
        "mirrored_T": str(base.bench.settingT.mirrored),
        "mirrored_R": str(base.bench.settingR.mirrored),
        "triplet_phase_rad": base.bench.triplet_phase,
        "S": result.S,
        "sigma_S": result.sigma_S,
        "sigma_S_bootstrap": result.sigma_S_bootstrap if result.sigma_S_bootstrap is not None else "n/a",
    }
    for (tt, tr), ev in sorted(result.E.items()):
        report[f"E({tt:.6f},{tr:.6f})"] = f"{formats.fmt(ev.E)} +/- {formats.fmt(ev.sigma)}"
    for f in all_fits:
        report[f"visibility_{f.pair}_thetaT_{f.theta_T:.6f}"] = (
            f"{formats.fmt(f.visibility)} +/- {formats.fmt(f.visibility_sigma)}")
    files["report.txt"] = _report(report)
    return files


def cmd_histogram(cfg: dict) -> dict[str, str]:
    h = cfg["histogram"]
    res = resolve(cfg, use_beam_splitter=False, duration_s=h["duration_s"],
                  seed=derive_seed(cfg["seed"], "histogram"), jitter_ns=h["jitter_ns"])
    bench = res.bench.with_thetas(theta_T=0.0)
    files: dict[str, str] = {"config_resolved.json": _config_text(cfg)}
    summary: dict[str, Any] = {"command": "histogram", "seed": cfg["seed"],
                               "walkoff_half_span_ps": res.source.walkoff_ps_per_mm * res.source.crystal_length_mm / 2}
    for label, compensated in (("pre", False), ("post", True)):
        clicks, _ = simulate_clicks(bench, res.source, compensated=compensated)
        # start on the idler (V, TR) detector, stop on the signal (H, TT) detector
        hist = start_stop_histogram(clicks["TR"], clicks["TT"], h["bin_width_ps"], h["span_ns"])
        files[f"histogram_{label}.csv"] = formats.histogram_text(
            hist, {"start": "TR", "stop": "TT", "compensated": compensated})
        files[f"clicks_{label}.csv"] = formats.clicks_text(clicks)
        summary[f"{label}_entries"] = hist.total
        summary[f"{label}_mean_ps"] = hist.mean() if hist.total else "n/a"
        lo, hi = hist.support()
        summary[f"{label}_support_ps"] = f"[{formats.fmt(lo)}, {formats.fmt(hi)}]" if hist.total else "n/a"
    pairs = generate_pair_stream(res.source)
    files["events_post.csv"] = formats.events_text(compensate(pairs, res.source), generate_fluorescence(res.source))
    files["summary.txt"] = _report(summary)
    return files


def cmd_calibrate_conventions(cfg: dict) -> dict[str, str]:
    conv = calibrate_conventions(resolution=cfg["conventions"]["resolution_rad"])
    report = {"command": "calibrate-conventions", "offset_T_rad": conv.offset_T, "offset_R_rad": conv.offset_R,
              "mirrored_T": str(conv.mirrored_T), "mirrored_R": str(conv.mirrored_R),
              "triplet_phase_rad": conv.phase, "S": conv.S}
    return {"config_resolved.json": _config_text(cfg), "conventions.txt": _report(report)}


def cmd_replay(cfg: dict, input_path: str) -> dict[str, str]:
    try:
        clicks = formats.read_clicks(input_path)
    except (OSError, ValueError, IndexError, KeyError) as exc:
        raise ConfigError(f"cannot read click stream {input_path}: {exc}") from exc
    res = analyze_clicks(clicks, cfg["bench"]["coincidence_window_ns"])
    report: dict[str, Any] = {"command": "replay", "input": str(input_path), "duration_s": res.duration_s}
    for d in DETECTORS:
        report[f"singles_{d}"] = res.singles[d]
    for k, v in res.coincidences.items():
        report[f"coincidences_{k}"] = v
    h = cfg["histogram"]
    hist = start_stop_histogram(clicks["TR"], clicks["TT"], h["bin_width_ps"], h["span_ns"])
    return {
        "replay_report.txt": _report(report),
        "replay_histogram.csv": formats.histogram_text(hist, {"start": "TR", "stop": "TT"}),
    }


COMMANDS = {
    "interference-scan": cmd_interference_scan,
    "bell-scan": cmd_bell_scan,
    "histogram": cmd_histogram,
    "calibrate-conventions": cmd_calibrate_conventions,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spdcbell", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["replay"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--workers", type=int, help="parallel scan points")
        if name == "replay":
            p.add_argument("--input", required=True, help="click stream CSV to re-analyse")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "replay":
            files = cmd_replay(cfg, args.input)
        else:
            files = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
