"""Event-stream parsing and perimeter filtering.

Events are newline-delimited JSON records::

    {"id": "7", "uid": "a", "ts": 100, "kind": "quote", "ref": "3"}

``ref`` is required for retweets and quotes and forbidden for originals.
"""

import enum
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from ._util import read_csv


class EventKind(str, enum.Enum):
    ORIGINAL = "original"
    RETWEET = "retweet"
    QUOTE = "quote"


@dataclass(frozen=True)
class TweetEvent:
    tweet_id: str
    user_id: str
    timestamp: int
    kind: EventKind
    ref_tweet_id: Optional[str] = None

    def __post_init__(self):
        needs_ref = self.kind is not EventKind.ORIGINAL
        if needs_ref and self.ref_tweet_id is None:
            raise ValueError("missing ref_tweet_id")
        if not needs_ref and self.ref_tweet_id is not None:
            raise ValueError("original tweet must not carry ref_tweet_id")


class ParseError(ValueError):
    """A malformed record in an events file."""

    def __init__(self, lineno, reason):
        self.lineno = lineno
        self.reason = reason
        super().__init__(f"line {lineno}: {reason}")


@dataclass
class ParseStats:
    n_events: int = 0
    n_blank: int = 0
    n_skipped: int = 0
    errors: list = field(default_factory=list)


def _event_from_record(rec):
    if not isinstance(rec, dict):
        raise ValueError("record is not an object")
    for key in ("id", "uid", "ts", "kind"):
        if key not in rec:
            raise ValueError(f"missing field {key!r}")
    ts = rec["ts"]
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise ValueError("ts must be an integer")
    try:
        kind = EventKind(rec["kind"])
    except ValueError:
        raise ValueError(f"unknown kind {rec['kind']!r}") from None
    ref = rec.get("ref")
    if ref is not None and not isinstance(ref, str):
        raise ValueError("ref must be a string")
    if not isinstance(rec["id"], str) or not isinstance(rec["uid"], str):
        raise ValueError("id and uid must be strings")
    return TweetEvent(rec["id"], rec["uid"], ts, kind, ref)


def iter_events(lines: Iterable, lenient=False, stats=None):
    """Yield events from an iterable of lines (``str`` or ``bytes``).

    Blank lines are skipped and counted. A malformed record raises
    :class:`ParseError` unless ``lenient`` is set, in which case it is
    skipped and recorded in ``stats``.
    """
    stats = stats if stats is not None else ParseStats()
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            stats.n_blank += 1
            continue
        try:
            ev = _event_from_record(json.loads(line))
            if ev.tweet_id in seen:
                raise ValueError(f"duplicate tweet id {ev.tweet_id!r}")
        except ValueError as exc:  # JSONDecodeError is a ValueError
            err = ParseError(lineno, str(exc))
            if not lenient:
                raise err from None
            stats.n_skipped += 1
            stats.errors.append(err)
            continue
        seen.add(ev.tweet_id)
        stats.n_events += 1
        yield ev


def parse_events(source, lenient=False, stats=None):
    """Parse events from a path (``str``/``Path``), a ``bytes`` payload, or an iterable of lines."""
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return list(iter_events(fh, lenient, stats))
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(bytes(source))  # splits on b"\n" only, unlike str.splitlines
    return list(iter_events(source, lenient, stats))


def serialize_event(ev: TweetEvent) -> str:
    rec = {"id": ev.tweet_id, "uid": ev.user_id, "ts": ev.timestamp, "kind": ev.kind.value}
    if ev.ref_tweet_id is not None:
        rec["ref"] = ev.ref_tweet_id
    return json.dumps(rec, separators=(",", ":"), ensure_ascii=False)


def serialize_events(events) -> str:
    return "".join(serialize_event(ev) + "\n" for ev in events)


@dataclass(frozen=True)
class UserStats:
    user_id: str
    follower_count: int
    tweet_count_window: int
    lang_share: float

    def __post_init__(self):
        if self.follower_count < 0 or self.tweet_count_window < 0:
            raise ValueError(f"{self.user_id}: negative count")
        if not (0.0 <= self.lang_share <= 1.0):
            raise ValueError(f"{self.user_id}: lang_share {self.lang_share} outside [0, 1]")


@dataclass(frozen=True)
class PerimeterConfig:
    """Perimeter thresholds.

    ``follower_threshold=None`` recomputes the (lower) median follower count
    of the input users; an integer pins it, e.g. 195 for the original
    collection. Users must be strictly above it.
    """

    min_tweets: int = 5
    follower_threshold: Optional[int] = None
    min_lang_share: float = 0.15

    def __post_init__(self):
        if self.min_tweets < 0:
            raise ValueError("min_tweets must be >= 0")
        if not (0.0 <= self.min_lang_share <= 1.0):
            raise ValueError("min_lang_share must lie in [0, 1]")


def lower_median(values):
    vals = sorted(values)
    if not vals:
        raise ValueError("median of empty input")
    return vals[(len(vals) - 1) // 2]


def apply_perimeter(users, cfg: PerimeterConfig = PerimeterConfig()):
    """Return the set of user ids passing the activity, visibility and language filters."""
    users = list(users)
    if cfg.follower_threshold is None:
        if not users:
            raise ValueError("median follower threshold needs at least one user")
        threshold = lower_median(u.follower_count for u in users)
    else:
        threshold = cfg.follower_threshold
    return {
        u.user_id
        for u in users
        if u.tweet_count_window >= cfg.min_tweets
        and u.follower_count > threshold
        and u.lang_share >= cfg.min_lang_share
    }


def read_user_stats(path):
    rows = read_csv(path, ["user_id", "follower_count", "tweet_count", "lang_share"])
    out = []
    for i, r in enumerate(rows, start=2):
        try:
            share = float(r["lang_share"])
            if not math.isfinite(share):
                raise ValueError("non-finite lang_share")
            out.append(UserStats(r["user_id"], int(r["follower_count"]), int(r["tweet_count"]), share))
        except ValueError as exc:
            raise ValueError(f"{path}:{i}: {exc}") from None
    return out
