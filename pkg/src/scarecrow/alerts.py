"""Alert delivery sinks: stdout, file, and webhook with retry + spool.

Webhook delivery is at-least-once: a payload that cannot be POSTed after
the backoff schedule (0.5 s, 1 s, 2 s between attempts) is appended to a
JSONL spool file on disk, from which :meth:`WebhookSink.replay_spool`
can deliver it later. Delivery never raises into the pipeline.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Protocol, TextIO

import requests

logger = logging.getLogger(__name__)

DELIVERED = "delivered"
SPOOLED = "spooled"

DEFAULT_BACKOFFS = (0.5, 1.0, 2.0)


class AlertSink(Protocol):
    def deliver(self, payload: dict) -> str:
        """Deliver one alert payload; returns 'delivered' or 'spooled'."""
        ...


class StdoutSink:
    """Appends one JSON line per alert to standard output."""

    def __init__(self, stream: TextIO | None = None):
        self.stream = stream if stream is not None else sys.stdout

    def deliver(self, payload: dict) -> str:
        self.stream.write(json.dumps(payload) + "\n")
        self.stream.flush()
        return DELIVERED


class FileSink:
    """Appends one JSON line per alert to a file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def deliver(self, payload: dict) -> str:
        with self.path.open("a") as f:
            f.write(json.dumps(payload) + "\n")
        return DELIVERED


class WebhookSink:
    """POSTs alerts as JSON, retrying with backoff, spooling on failure.

    ``sleep`` and ``post`` are injectable for tests; the defaults are
    ``time.sleep`` and ``requests.post``.
    """

    def __init__(
        self,
        url: str,
        spool_path: str | Path,
        timeout_s: float = 2.0,
        backoffs: tuple[float, ...] = DEFAULT_BACKOFFS,
        sleep: Callable[[float], None] = time.sleep,
        post: Callable[..., "requests.Response"] | None = None,
    ):
        self.url = url
        self.spool_path = Path(spool_path)
        self.timeout_s = timeout_s
        self.backoffs = tuple(backoffs)
        self._sleep = sleep
        self._post = post if post is not None else requests.post

    def _attempt(self, payload: dict) -> bool:
        try:
            resp = self._post(self.url, json=payload, timeout=self.timeout_s)
            return 200 <= resp.status_code < 300
        except requests.RequestException:
            return False

    def deliver(self, payload: dict) -> str:
        if self._attempt(payload):
            return DELIVERED
        for backoff in self.backoffs:
            self._sleep(backoff)
            if self._attempt(payload):
                return DELIVERED
        self._spool(payload)
        logger.warning("alert delivery to %s failed after retries; spooled", self.url)
        return SPOOLED

    def _spool(self, payload: dict) -> None:
        self.spool_path.parent.mkdir(parents=True, exist_ok=True)
        with self.spool_path.open("a") as f:
            f.write(json.dumps(payload) + "\n")

    def spooled_payloads(self) -> list[dict]:
        if not self.spool_path.exists():
            return []
        with self.spool_path.open() as f:
            return [json.loads(line) for line in f if line.strip()]

    def replay_spool(self) -> tuple[int, int]:
        """Re-deliver spooled payloads; failures are re-spooled.

        Returns (delivered, remaining).
        """
        pending = self.spooled_payloads()
        if not pending:
            return (0, 0)
        self.spool_path.unlink()
        delivered = 0
        for payload in pending:
            if self.deliver(payload) == DELIVERED:
                delivered += 1
        return (delivered, len(pending) - delivered)


def make_sink(spec: str, spool_path: str | Path | None = None) -> AlertSink:
    """Build a sink from a CLI spec: 'stdout', an http(s) URL, or a file path."""
    if spec == "stdout":
        return StdoutSink()
    if spec.startswith("http://") or spec.startswith("https://"):
        if spool_path is None:
            spool_path = Path("alert_spool.jsonl")
        return WebhookSink(spec, spool_path)
    return FileSink(spec)
