"""The live scarecrow loop: frames in, threat events and deterrence out.

Frames come from a directory of PPM files or a manifest (a stand-in for
a camera). Per-frame detections are debounced through K-of-M hysteresis
into per-class events; a policy maps each class to a threat tier and an
action; deterrence commands rotate modes per class under a cooldown so
animals do not acclimate to a single stimulus. Everything that happens
is appended to a JSONL event log by a single writer.

Stages run concurrently with a bounded hand-off queue between ingest and
detection. Under overload the queue drops the oldest frame first: for
deterrence, a fresh frame beats a complete history.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from queue import SimpleQueue
from typing import IO, Iterator, Mapping, Sequence

import numpy as np

from .alerts import AlertSink
from .backbone import Detector, Image
from .multibox import Detection

logger = logging.getLogger(__name__)

TIERS = ("predator", "wild_herbivore", "domestic", "unknown")
ACTIONS = ("deter_high", "deter_low", "log_only", "ignore")
DETER_ACTIONS = ("deter_high", "deter_low")

DETER_DURATIONS_S = {"deter_high": 10.0, "deter_low": 3.0}


class PpmError(ValueError):
    """Raised for malformed PPM frame data."""


class PolicyError(ValueError):
    """Raised for invalid policy configuration."""


# ---------------------------------------------------------------------------
# PPM frames


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data):
        c = data[pos]
        if c in b" \t\r\n":
            pos += 1
        elif c == ord("#"):
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(data) and data[pos] not in b" \t\r\n":
        pos += 1
    if start == pos:
        raise PpmError("unexpected end of PPM header")
    return data[start:pos], pos


def read_ppm(data: bytes) -> Image:
    """Parse a binary P6 PPM into an Image with [0, 1] intensities."""
    magic, pos = _next_token(data, 0)
    if magic != b"P6":
        raise PpmError(f"bad magic {magic!r}, expected b'P6'")
    fields = []
    for name in ("width", "height", "maxval"):
        token, pos = _next_token(data, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise PpmError(f"{name} is not an integer: {token!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PpmError(f"invalid dimensions {width}x{height}")
    if not 1 <= maxval <= 65535:
        raise PpmError(f"maxval {maxval} outside [1, 65535]")
    if pos >= len(data):
        raise PpmError("missing whitespace after maxval")
    pos += 1  # single whitespace byte separates header from samples

    bytes_per_sample = 1 if maxval < 256 else 2
    need = width * height * 3 * bytes_per_sample
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise PpmError(f"truncated pixel data: need {need} bytes, have {len(payload)}")
    dtype = np.uint8 if bytes_per_sample == 1 else ">u2"
    samples = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    return Image(pixels=samples.reshape(height, width, 3) / maxval)


def write_ppm(img: Image) -> bytes:
    """Serialize an Image as a maxval-255 binary P6 PPM."""
    header = f"P6\n{img.width} {img.height}\n255\n".encode()
    samples = np.rint(img.pixels * 255.0).astype(np.uint8)
    return header + samples.tobytes()


@dataclass(frozen=True)
class Frame:
    """One frame of the stream; timestamps are synthetic (index / fps)."""

    index: int
    timestamp_ms: int
    image: Image | None


def frame_source(path: str | Path, fps: float = 10.0) -> Iterator[Frame]:
    """Yield frames from a directory of ``*.ppm`` or a manifest file.

    Directories serve their PPM files in lexicographic order; a manifest
    is a newline-delimited list of paths (relative entries resolve
    against the manifest's directory) and overrides that order.
    Unreadable entries are skipped with a warning but still consume
    their frame index, like a camera dropping a corrupt frame.
    """
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {fps}")
    root = Path(path)
    if root.is_dir():
        entries = sorted(root.glob("*.ppm"))
    elif root.is_file():
        entries = []
        for line in root.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            p = Path(line)
            entries.append(p if p.is_absolute() else root.parent / p)
    else:
        raise FileNotFoundError(f"frame source {path} is neither directory nor manifest")

    interval_ms = 1000.0 / fps
    for index, entry in enumerate(entries):
        try:
            image = read_ppm(entry.read_bytes())
        except (OSError, PpmError) as exc:
            logger.warning("skipping unreadable frame %s: %s", entry, exc)
            continue
        yield Frame(index=index, timestamp_ms=round(index * interval_ms), image=image)


# ---------------------------------------------------------------------------
# Policy


@dataclass(frozen=True)
class Taxonomy:
    """Class label -> threat tier; unlisted labels fall back to unknown."""

    tiers: Mapping[str, str]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tiers", dict(self.tiers))
        for label, tier in self.tiers.items():
            if tier not in TIERS:
                raise PolicyError(f"unknown tier {tier!r} for class {label!r}")

    def tier_of(self, label: str) -> str:
        return self.tiers.get(label, "unknown")

    @classmethod
    def default(cls) -> "Taxonomy":
        return cls(tiers={"lion": "predator", "cheetah": "predator", "cat": "domestic"})


DEFAULT_TIER_ACTIONS = {
    "predator": "deter_high",
    "wild_herbivore": "deter_low",
    "domestic": "ignore",
    "unknown": "log_only",
}


@dataclass(frozen=True)
class PolicyConfig:
    """Threat policy: taxonomy, actions, hysteresis, deterrence scheduling."""

    taxonomy: Taxonomy = field(default_factory=Taxonomy.default)
    tier_actions: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_TIER_ACTIONS))
    score_threshold: float = 0.5
    k: int = 3
    m: int = 5
    m_clear: int = 5
    cooldown_s: float = 60.0
    deterrent_modes: tuple[str, ...] = ("siren", "strobe", "ultrasonic")

    def __post_init__(self) -> None:
        object.__setattr__(self, "tier_actions", dict(self.tier_actions))
        object.__setattr__(self, "deterrent_modes", tuple(self.deterrent_modes))
        problems = self.problems()
        if problems:
            raise PolicyError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        for tier in TIERS:
            if tier not in self.tier_actions:
                out.append(f"tier_actions missing tier {tier!r}")
        for tier, action in self.tier_actions.items():
            if tier not in TIERS:
                out.append(f"tier_actions has unknown tier {tier!r}")
            if action not in ACTIONS:
                out.append(f"unknown action {action!r} for tier {tier!r}")
        if not 0.0 <= self.score_threshold <= 1.0:
            out.append(f"score_threshold {self.score_threshold} outside [0, 1]")
        if not 1 <= self.k <= self.m:
            out.append(f"hysteresis requires 1 <= k <= m, got k={self.k}, m={self.m}")
        if self.m_clear < 1:
            out.append(f"m_clear must be >= 1, got {self.m_clear}")
        if self.cooldown_s < 0:
            out.append(f"cooldown_s must be >= 0, got {self.cooldown_s}")
        if not self.deterrent_modes:
            out.append("need at least one deterrent mode")
        return out

    @classmethod
    def from_json(cls, text: str) -> "PolicyConfig":
        """Parse the policy file schema (all keys optional, defaults apply)."""
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise PolicyError(f"policy is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise PolicyError("policy root must be a JSON object")
        hysteresis = data.get("hysteresis", {})
        kwargs = {}
        if "taxonomy" in data:
            kwargs["taxonomy"] = Taxonomy(tiers=data["taxonomy"])
        if "tier_actions" in data:
            kwargs["tier_actions"] = data["tier_actions"]
        if "score_threshold" in data:
            kwargs["score_threshold"] = float(data["score_threshold"])
        if "k" in hysteresis:
            kwargs["k"] = int(hysteresis["k"])
        if "m" in hysteresis:
            kwargs["m"] = int(hysteresis["m"])
        if "m_clear" in hysteresis:
            kwargs["m_clear"] = int(hysteresis["m_clear"])
        if "cooldown_s" in data:
            kwargs["cooldown_s"] = float(data["cooldown_s"])
        if "deterrent_modes" in data:
            kwargs["deterrent_modes"] = tuple(data["deterrent_modes"])
        return cls(**kwargs)


def decide_action(policy: PolicyConfig, label: str) -> tuple[str, str]:
    """Resolve a class label to its (tier, action) under the policy."""
    tier = policy.taxonomy.tier_of(label)
    return tier, policy.tier_actions[tier]


# ---------------------------------------------------------------------------
# Events and hysteresis


@dataclass
class MonitorEvent:
    """A debounced per-class threat event with its policy decision."""

    event_id: int
    label: str
    tier: str
    action: str
    first_frame: int
    last_frame: int
    peak_score: float
    status: str = "open"


@dataclass(frozen=True)
class DeterrenceCommand:
    mode: str
    label: str
    issued_ms: int
    duration_s: float


class _ClassState:
    __slots__ = ("window", "miss_streak", "event")

    def __init__(self, m: int):
        self.window: deque[tuple[int, float | None]] = deque(maxlen=m)
        self.miss_streak = 0
        self.event: MonitorEvent | None = None


class HysteresisTracker:
    """K-of-M presence debouncing per class.

    An event opens for a class once at least K of the last M processed
    frames contained it (first_frame is the earliest hit still in the
    window) and closes after ``m_clear`` consecutive misses (last_frame
    stays at the final hit). Class state resets when its event closes,
    so reopening needs K fresh hits. At most one open event per class.
    """

    def __init__(self, policy: PolicyConfig):
        self.policy = policy
        self._states: dict[str, _ClassState] = {}
        self._next_id = 1

    def open_events(self) -> list[MonitorEvent]:
        return [st.event for st in self._states.values() if st.event is not None]

    def update(
        self, frame_index: int, detections: Sequence[Detection]
    ) -> tuple[list[MonitorEvent], list[MonitorEvent]]:
        """Advance one frame; returns (opened, closed) events."""
        best: dict[str, float] = {}
        for det in detections:
            if det.score > best.get(det.label, -1.0):
                best[det.label] = det.score

        opened: list[MonitorEvent] = []
        closed: list[MonitorEvent] = []
        for label in sorted(set(self._states) | set(best)):
            st = self._states.get(label)
            if st is None:
                st = self._states[label] = _ClassState(self.policy.m)
            score = best.get(label)
            st.window.append((frame_index, score))

            if st.event is None:
                hits = [(f, s) for f, s in st.window if s is not None]
                if len(hits) >= self.policy.k:
                    tier, action = decide_action(self.policy, label)
                    event = MonitorEvent(
                        event_id=self._next_id,
                        label=label,
                        tier=tier,
                        action=action,
                        first_frame=hits[0][0],
                        last_frame=hits[-1][0],
                        peak_score=max(s for _, s in hits),
                    )
                    self._next_id += 1
                    st.event = event
                    st.miss_streak = 0
                    opened.append(event)
                elif not hits:
                    del self._states[label]  # nothing pending for this class
            else:
                if score is not None:
                    st.miss_streak = 0
                    st.event.last_frame = frame_index
                    st.event.peak_score = max(st.event.peak_score, score)
                else:
                    st.miss_streak += 1
                    if st.miss_streak >= self.policy.m_clear:
                        st.event.status = "closed"
                        closed.append(st.event)
                        del self._states[label]
        return opened, closed

    def close_all(self) -> list[MonitorEvent]:
        """Force-close open events (end of stream)."""
        closed = []
        for label in sorted(self._states):
            event = self._states[label].event
            if event is not None:
                event.status = "closed"
                closed.append(event)
        self._states.clear()
        return closed


class DeterrenceScheduler:
    """Round-robin deterrent modes per class under a cooldown.

    Mode rotation counters acclimation: a class never gets the same
    stimulus twice in a row (given >1 configured modes), and repeated
    events within the cooldown window emit nothing.
    """

    def __init__(self, policy: PolicyConfig):
        self.policy = policy
        self._last_issued_ms: dict[str, int] = {}
        self._rotation: dict[str, int] = {}

    def schedule(self, event: MonitorEvent, now_ms: int) -> DeterrenceCommand | None:
        if event.action not in DETER_ACTIONS:
            return None
        last = self._last_issued_ms.get(event.label)
        if last is not None and now_ms - last < self.policy.cooldown_s * 1000.0:
            return None
        position = self._rotation.get(event.label, 0)
        mode = self.policy.deterrent_modes[position % len(self.policy.deterrent_modes)]
        self._rotation[event.label] = position + 1
        self._last_issued_ms[event.label] = now_ms
        return DeterrenceCommand(
            mode=mode,
            label=event.label,
            issued_ms=now_ms,
            duration_s=DETER_DURATIONS_S[event.action],
        )


# ---------------------------------------------------------------------------
# Pipeline plumbing


class DropOldestQueue:
    """Bounded hand-off queue that drops its oldest item when full."""

    def __init__(self, maxsize: int = 8):
        if maxsize < 1:
            raise ValueError(f"maxsize must be >= 1, got {maxsize}")
        self._items: deque = deque()
        self._maxsize = maxsize
        self._cond = threading.Condition()
        self._closed = False
        self.dropped = 0

    def put(self, item) -> None:
        with self._cond:
            if len(self._items) >= self._maxsize:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self._cond.notify()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def get(self):
        """Next item, or None once closed and drained."""
        with self._cond:
            while not self._items and not self._closed:
                self._cond.wait()
            if self._items:
                return self._items.popleft()
            return None


def event_record(kind: str, event: MonitorEvent, ts_ms: int) -> dict:
    return {
        "ts_ms": ts_ms,
        "kind": kind,
        "event_id": event.event_id,
        "class": event.label,
        "tier": event.tier,
        "action": event.action,
        "peak_score": event.peak_score,
        "first_frame": event.first_frame,
        "last_frame": event.last_frame,
    }


def command_record(cmd: DeterrenceCommand, event: MonitorEvent) -> dict:
    return {
        "ts_ms": cmd.issued_ms,
        "kind": "command",
        "event_id": event.event_id,
        "class": cmd.label,
        "tier": event.tier,
        "action": event.action,
        "mode": cmd.mode,
    }


class EventLog:
    """Single-writer JSONL event log."""

    def __init__(self, target: str | Path | IO[str] | None):
        self._own = isinstance(target, (str, Path))
        self._fh: IO[str] | None = (
            open(target, "w") if self._own else target  # type: ignore[arg-type]
        )

    def write(self, record: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.flush()
            if self._own:
                self._fh.close()


def emit_alert(sink: AlertSink, event: MonitorEvent, ts_ms: int) -> str:
    """Deliver one alert for an event; returns 'delivered' or 'spooled'."""
    return sink.deliver(event_record("alert", event, ts_ms))


@dataclass
class PipelineConfig:
    source: str | Path
    detector: Detector
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    sink: AlertSink | None = None
    log: str | Path | IO[str] | None = None
    fps: float = 10.0
    queue_depth: int = 8
    pace: bool = True  # sleep to hold the frame interval (camera simulation)


@dataclass
class PipelineResult:
    exit_code: int
    frames_processed: int
    frames_dropped: int
    events_opened: int
    events_closed: int
    commands_issued: int
    alerts_dispatched: int
    processed_indices: tuple[int, ...] = ()


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """Ingest -> detect -> hysteresis -> policy -> {schedule, alert, log}.

    The ingest stage paces frames at the configured fps and hands them
    to the detection stage through a bounded drop-oldest queue, so a
    slow detector sees fresh frames and the dropped-frame counter grows
    instead of latency. End-of-stream (or interrupt) force-closes open
    events and flushes the log; alert delivery runs on its own thread
    with writes to the sink serialized there.
    """
    tracker = HysteresisTracker(cfg.policy)
    scheduler = DeterrenceScheduler(cfg.policy)
    log = EventLog(cfg.log)
    frames = DropOldestQueue(cfg.queue_depth)
    stop = threading.Event()

    def ingest() -> None:
        try:
            interval = 1.0 / cfg.fps
            start = time.monotonic()
            for frame in frame_source(cfg.source, cfg.fps):
                if stop.is_set():
                    break
                if cfg.pace:
                    delay = start + frame.index * interval - time.monotonic()
                    if delay > 0:
                        time.sleep(delay)
                frames.put(frame)
        except Exception as exc:
            logger.error("frame source failed: %s", exc)
        finally:
            frames.close()

    alerts_q: SimpleQueue = SimpleQueue()

    def deliver_alerts() -> None:
        while True:
            payload = alerts_q.get()
            if payload is None:
                return
            sink = cfg.sink
            assert sink is not None
            sink.deliver(payload)

    ingest_thread = threading.Thread(target=ingest, name="ingest", daemon=True)
    alert_thread = threading.Thread(target=deliver_alerts, name="alerts", daemon=True)
    ingest_thread.start()
    alert_thread.start()

    processed: list[int] = []
    opened_total = closed_total = commands = alerts = 0
    exit_code = 0
    try:
        while True:
            frame = frames.get()
            if frame is None:
                break
            try:
                detections = cfg.detector.detect(frame.image, frame.index)
            except Exception as exc:
                logger.warning("frame %d failed detection: %s", frame.index, exc)
                continue
            eligible = [
                d
                for d in detections
                if d.score >= cfg.policy.score_threshold
                and decide_action(cfg.policy, d.label)[1] != "ignore"
            ]
            opened, closed = tracker.update(frame.index, eligible)
            for event in opened:
                opened_total += 1
                log.write(event_record("opened", event, frame.timestamp_ms))
                command = scheduler.schedule(event, frame.timestamp_ms)
                if command is not None:
                    commands += 1
                    log.write(command_record(command, event))
                if cfg.sink is not None:
                    alerts += 1
                    alerts_q.put(event_record("alert", event, frame.timestamp_ms))
                    log.write(event_record("alert", event, frame.timestamp_ms))
            for event in closed:
                closed_total += 1
                log.write(event_record("closed", event, frame.timestamp_ms))
            processed.append(frame.index)
    except KeyboardInterrupt:
        logger.info("interrupted; shutting down cleanly")
        stop.set()
    finally:
        stop.set()
        last_ts = round(processed[-1] * 1000.0 / cfg.fps) if processed else 0
        for event in tracker.close_all():
            closed_total += 1
            log.write(event_record("closed", event, last_ts))
        alerts_q.put(None)
        alert_thread.join(timeout=30.0)
        ingest_thread.join(timeout=30.0)
        log.close()

    return PipelineResult(
        exit_code=exit_code,
        frames_processed=len(processed),
        frames_dropped=frames.dropped,
        events_opened=opened_total,
        events_closed=closed_total,
        commands_issued=commands,
        alerts_dispatched=alerts,
        processed_indices=tuple(processed),
    )
