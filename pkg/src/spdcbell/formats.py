"""Plain-text exchange formats.

Every file starts with an optional header block of ``# key: value`` lines
(values JSON-encoded) followed by a CSV table with a column-name row.
Floats are written with ``repr`` so that reading a file back is lossless.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .analysis import ScanData, SinusoidFit
from .bench import DETECTORS, Channel, ClickStream, Histogram
from .source import PairStream, PhotonStream

POLS = ("H", "V")


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if x.is_integer() and abs(x) < 2**53:
            return str(int(x))
        return repr(x)
    return str(x)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot encode {type(obj)}")


def render_table(header: Mapping[str, Any], columns: list[str], rows) -> str:
    buf = io.StringIO()
    for k, v in header.items():
        buf.write(f"# {k}: {json.dumps(v, default=_json_default, sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(x) for x in row])
    return buf.getvalue()


def read_table(path) -> tuple[dict[str, Any], list[str], list[list[str]]]:
    header: dict[str, Any] = {}
    lines = Path(path).read_text().splitlines()
    body = []
    for line in lines:
        if line.startswith("#") and not body:
            key, _, value = line[1:].strip().partition(":")
            header[key.strip()] = json.loads(value.strip())
        elif line.strip():
            body.append(line)
    if not body:
        raise ValueError(f"{path}: no column row")
    reader = csv.reader(body)
    columns = next(reader)
    return header, columns, list(reader)


# --- scans --------------------------------------------------------------------


def write_scan(path, scan: ScanData, extra_header: Mapping[str, Any] | None = None) -> None:
    Path(path).write_text(scan_text(scan, extra_header))


def scan_text(scan: ScanData, extra_header: Mapping[str, Any] | None = None) -> str:
    header: dict[str, Any] = {"theta_T_rad": scan.theta_T, "subtracted": scan.subtracted, "seed": scan.seed}
    for pair in scan.pairs:
        header[f"accidental_rate_{pair}_per_s"] = scan.accidental_rate.get(pair, 0.0)
        header[f"accidental_sigma_{pair}_per_s"] = scan.accidental_sigma.get(pair, 0.0)
    if extra_header:
        header.update(extra_header)
    cols = ["theta_R_rad"] + [f"counts_{p}" for p in scan.pairs] + ["duration_s"]
    pieces = [scan.theta_R] + [scan.counts[p] for p in scan.pairs] + [scan.duration_s]
    if scan.variances is not None:
        cols += [f"var_{p}" for p in scan.pairs]
        pieces += [scan.variance(p) for p in scan.pairs]
    if scan.floored is not None:
        cols += [f"floored_{p}" for p in scan.pairs]
        pieces += [scan.floored[p] for p in scan.pairs]
    rows = [[piece[i] for piece in pieces] for i in range(len(scan))]
    return render_table(header, cols, rows)


def read_scan(path) -> ScanData:
    header, cols, rows = read_table(path)
    data = {c: [r[i] for r in rows] for i, c in enumerate(cols)}
    pairs = [c[len("counts_"):] for c in cols if c.startswith("counts_")]

    def num(c):
        return np.array([float(x) for x in data[c]], dtype=float)

    variances = {p: num(f"var_{p}") for p in pairs} if f"var_{pairs[0]}" in data else None
    floored = ({p: np.array([x == "1" for x in data[f"floored_{p}"]]) for p in pairs}
               if f"floored_{pairs[0]}" in data else None)
    return ScanData(
        theta_R=num("theta_R_rad"),
        counts={p: num(f"counts_{p}") for p in pairs},
        duration_s=num("duration_s"),
        theta_T=float(header.get("theta_T_rad", 0.0)),
        accidental_rate={p: float(header.get(f"accidental_rate_{p}_per_s", 0.0)) for p in pairs},
        accidental_sigma={p: float(header.get(f"accidental_sigma_{p}_per_s", 0.0)) for p in pairs},
        variances=variances,
        floored=floored,
        subtracted=bool(header.get("subtracted", False)),
        seed=header.get("seed"),
    )


def write_fits(path, fits: list[SinusoidFit], header: Mapping[str, Any] | None = None) -> None:
    Path(path).write_text(fits_text(fits, header))


def fits_text(fits: list[SinusoidFit], header: Mapping[str, Any] | None = None) -> str:
    cols = ["theta_T_rad", "pair", "A", "B", "delta_rad", "sigma_A", "sigma_B", "sigma_delta",
            "visibility", "sigma_visibility", "chi2", "dof"]
    rows = [[f.theta_T, f.pair, f.A, f.B, f.delta, *f.sigmas, f.visibility, f.visibility_sigma, f.chi2, f.dof]
            for f in fits]
    return render_table(header or {}, cols, rows)


def write_fit_curves(path, fits: list[SinusoidFit], theta: np.ndarray,
                     header: Mapping[str, Any] | None = None) -> None:
    Path(path).write_text(fit_curves_text(fits, theta, header))


def fit_curves_text(fits: list[SinusoidFit], theta: np.ndarray, header: Mapping[str, Any] | None = None) -> str:
    cols = ["theta_R_rad"] + [f"fit_{f.pair}_thetaT_{f.theta_T:.6f}" for f in fits]
    values = [f(theta) for f in fits]
    rows = [[theta[i]] + [v[i] for v in values] for i in range(len(theta))]
    return render_table(header or {}, cols, rows)


# --- event, click and histogram streams --------------------------------------

EVENT_COLUMNS = ["time_ps", "kind", "z_origin_mm", "signal_offset_ps", "idler_offset_ps", "pol_a", "pol_b"]


def write_events(path, pairs: PairStream, fluorescence: PhotonStream | None = None,
                 header: Mapping[str, Any] | None = None) -> None:
    Path(path).write_text(events_text(pairs, fluorescence, header))


def events_text(pairs: PairStream, fluorescence: PhotonStream | None = None,
                header: Mapping[str, Any] | None = None) -> str:
    """Pairs and fluorescence photons, merged in time order."""
    rows = [(t, 0, i) for i, t in enumerate(pairs.t_pair)]
    if fluorescence is not None:
        rows += [(t, 1, i) for i, t in enumerate(fluorescence.t)]
    rows.sort()
    out = []
    for t, kind, i in rows:
        if kind == 0:
            out.append([t, "pair", pairs.z_origin[i], pairs.t_signal_offset[i], pairs.t_idler_offset[i], "H", "V"])
        else:
            out.append([t, "fluorescence", "", "", "", POLS[int(fluorescence.pol[i])], ""])
    h = {"duration_s": pairs.duration_s, "compensated": pairs.compensated}
    h.update(header or {})
    return render_table(h, EVENT_COLUMNS, out)


def read_events(path) -> tuple[PairStream, PhotonStream]:
    header, cols, rows = read_table(path)
    dur = float(header.get("duration_s", 0.0))
    prs = [r for r in rows if r[1] == "pair"]
    fl = [r for r in rows if r[1] == "fluorescence"]
    pairs = PairStream(*(np.array([float(r[k]) for r in prs]) for k in (0, 2, 3, 4)),
                       duration_s=dur, compensated=bool(header.get("compensated", False)))
    photons = PhotonStream(np.array([float(r[0]) for r in fl]),
                           np.array([POLS.index(r[5]) for r in fl], dtype=np.int8), duration_s=dur)
    return pairs, photons


def write_clicks(path, clicks: ClickStream, header: Mapping[str, Any] | None = None) -> None:
    Path(path).write_text(clicks_text(clicks, header))


def clicks_text(clicks: ClickStream, header: Mapping[str, Any] | None = None) -> str:
    h = {"duration_s": clicks.duration_s}
    h.update(header or {})
    return render_table(h, ["time_ps", "detector", "tag"], ([r.t, r.detector, r.tag] for r in clicks.records()))


def read_clicks(path) -> ClickStream:
    header, cols, rows = read_table(path)
    chans = {}
    for d in DETECTORS:
        sel = [r for r in rows if r[1] == d]
        t = np.array([float(r[0]) for r in sel])
        tag = np.array([int(r[2]) for r in sel], dtype=np.int64)
        order = np.argsort(t, kind="stable")
        chans[d] = Channel(t[order], tag[order])
    return ClickStream(chans, float(header.get("duration_s", 0.0)))


def write_histogram(path, hist: Histogram, header: Mapping[str, Any] | None = None) -> None:
    Path(path).write_text(histogram_text(hist, header))


def histogram_text(hist: Histogram, header: Mapping[str, Any] | None = None) -> str:
    h = {"bin_width_ps": hist.bin_width_ps}
    h.update(header or {})
    return render_table(h, ["bin_center_ps", "count"], zip(hist.centers_ps, hist.counts))


def read_histogram(path) -> Histogram:
    header, cols, rows = read_table(path)
    w = float(header["bin_width_ps"])
    if not rows:
        return Histogram(np.zeros(0), np.zeros(0, dtype=np.int64), w)
    centers = np.array([float(r[0]) for r in rows])
    counts = np.array([int(r[1]) for r in rows], dtype=np.int64)
    # start_stop_histogram grids are integer multiples of the bin width;
    # rebuilding them that way keeps a read-write cycle bit-exact
    k = np.round(centers / w - 0.5)
    if np.allclose(centers / w - 0.5, k, rtol=0, atol=1e-6) and np.all(np.diff(k) == 1):
        edges = np.arange(k[0], k[-1] + 2, dtype=float) * w
    else:
        edges = np.append(centers - w / 2, centers[-1] + w / 2)
    return Histogram(edges, counts, w)
