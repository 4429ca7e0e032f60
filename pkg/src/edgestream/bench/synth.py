"""Deterministic ELEC-shaped CSV generator, so runs need no external dataset."""
from __future__ import annotations

import csv
import datetime as dt
import io

import numpy as np

from ..model import ELEC_SCHEMA

ELEC_ROWS = 45_312
START = dt.date(1996, 5, 7)


def synth_rows(n: int, seed: int = 7):
    """Yield ``n`` rows as tuples of python values in ELEC attribute order."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    i = np.arange(n)
    period = (i % 48) + 1
    days = i // 48
    # five normalised measurements; demand follows a daily curve plus noise
    curve = 0.5 + 0.25 * np.sin(2 * np.pi * (period - 12) / 48)
    nsw_demand = np.clip(curve + rng.normal(0.0, 0.12, n), 0.0, 1.0)
    vic_demand = np.clip(curve + rng.normal(0.0, 0.15, n), 0.0, 1.0)
    nsw_price = np.clip(rng.gamma(4.0, 0.015, n), 0.0, 1.0)
    vic_price = np.clip(rng.gamma(4.0, 0.0008, n), 0.0, 1.0)
    transfer = rng.uniform(0.0, 1.0, n)
    for k in range(n):
        d = START + dt.timedelta(days=int(days[k]))
        yield (d.isoformat(), int(d.isoweekday()), int(period[k]), float(nsw_price[k]),
               float(nsw_demand[k]), float(vic_price[k]), float(vic_demand[k]), float(transfer[k]))


def synth_csv_text(n: int, seed: int = 7) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ELEC_SCHEMA.names)
    for row in synth_rows(n, seed):
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def synth_elec(n: int, seed: int = 7, path=None) -> str:
    """Write ``n`` synthetic rows to ``path`` (or return the text when no path)."""
    text = synth_csv_text(n, seed)
    if path is None:
        return text
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return str(path)
