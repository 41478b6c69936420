"""Small helpers shared across modules: id ordering, CSV writing, rounding."""

import csv
import io
import math
from pathlib import Path


def id_key(tweet_or_user_id):
    """Sort key for opaque ids: numeric ids in numeric order, then strings."""
    s = str(tweet_or_user_id)
    if s.isdigit():
        return (0, len(s), s)
    return (1, 0, s)


def fmt(value, ndigits=6):
    """Render a number for CSV output with fixed rounding.

    ``None`` and NaN become the empty string so that missing cells stay
    visibly empty rather than printing ``nan``.
    """
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    v = float(value)
    if math.isnan(v):
        return ""
    r = round(v, ndigits)
    if r == 0:
        r = 0.0  # no "-0.0"
    return f"{r:.{ndigits}f}"


def write_csv(path, header, rows):
    """Write rows with LF line endings; every cell goes through ``fmt``."""
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    n = 0
    for row in rows:
        w.writerow([c if isinstance(c, str) else fmt(c) for c in row])
        n += 1
    path.write_text(buf.getvalue(), encoding="utf-8")
    return n


def read_csv(path, required):
    """Read a headed CSV and check that the ``required`` columns exist."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        return list(reader)


def round_half_up(x):
    return int(math.floor(x + 0.5))
