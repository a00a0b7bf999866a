"""Profiled latency model for decode and prefill.

``tpot(b, c)`` is bilinear in a (batch size, context length) table with flat
extrapolation outside it. Decode integration sums ``tpot`` over one tick per
output token. Because interpolation is linear in the two neighbouring batch
rows, a run of ticks at fixed batch size collapses to two prefix-sum
differences, which is what makes planning over many actor counts cheap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass
class LatencyProfile:
    batch_grid: np.ndarray      # (B,) increasing batch sizes
    context_grid: np.ndarray    # (C,) increasing context lengths in tokens
    tpot_table: np.ndarray      # (B, C) seconds per output token
    prefill_tokens: np.ndarray  # (P,) increasing batch token counts
    prefill_seconds: np.ndarray  # (P,) seconds for one prefill pass
    rho: float = 1.0            # dollars per GPU-second
    gpus_per_actor: int = 2
    max_context: int = 4096     # prefix sums are tabulated up to here
    _rows: np.ndarray = field(init=False, repr=False)
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.batch_grid = np.asarray(self.batch_grid, dtype=float)
        self.context_grid = np.asarray(self.context_grid, dtype=float)
        self.tpot_table = np.asarray(self.tpot_table, dtype=float)
        self.prefill_tokens = np.asarray(self.prefill_tokens, dtype=float)
        self.prefill_seconds = np.asarray(self.prefill_seconds, dtype=float)
        b, c = self.batch_grid, self.context_grid
        if self.tpot_table.shape != (len(b), len(c)):
            raise ConfigError(f"tpot table shape {self.tpot_table.shape} != ({len(b)}, {len(c)})")
        if len(b) == 0 or len(c) == 0 or np.any(np.diff(b) <= 0) or np.any(np.diff(c) <= 0):
            raise ConfigError("tpot grids must be non-empty and strictly increasing")
        if np.any(self.tpot_table <= 0):
            raise ConfigError("tpot must be positive everywhere")
        if np.any(np.diff(self.tpot_table, axis=0) < 0) or np.any(np.diff(self.tpot_table, axis=1) < 0):
            raise ConfigError("tpot must be non-decreasing in batch size and context length")
        if len(self.prefill_tokens) == 0 or np.any(np.diff(self.prefill_tokens) <= 0):
            raise ConfigError("prefill grid must be non-empty and strictly increasing")
        if np.any(self.prefill_seconds < 0) or np.any(np.diff(self.prefill_seconds) < 0):
            raise ConfigError("prefill time must be non-negative and non-decreasing")
        if self.rho <= 0:
            raise ConfigError("rho must be positive")
        if self.gpus_per_actor < 1:
            raise ConfigError("gpus_per_actor must be >= 1")
        ctx = np.arange(self.max_context + 1, dtype=float)
        self._rows = np.stack([np.interp(ctx, c, row) for row in self.tpot_table])
        self._cum = np.concatenate([np.zeros((len(b), 1)), np.cumsum(self._rows, axis=1)], axis=1)
        self._row_list = [r.tolist() for r in self._rows]

    # -- batch interpolation weights

    def _weights(self, b):
        """Lower row index and upper-row weight for batch size(s) ``b``."""
        grid = self.batch_grid
        b = np.clip(np.asarray(b, dtype=float), grid[0], grid[-1])
        if len(grid) == 1:
            return np.zeros(b.shape, dtype=np.int64), np.zeros(b.shape)
        lo = np.clip(np.searchsorted(grid, b, side="right") - 1, 0, len(grid) - 2)
        w = (b - grid[lo]) / (grid[lo + 1] - grid[lo])
        return lo, w

    def tpot(self, batch_size: int, context_len: int) -> float:
        lo, w = self._weights(batch_size)
        lo, w = int(lo), float(w)
        c = min(max(int(context_len), 0), self.max_context)
        hi = min(lo + 1, len(self.batch_grid) - 1)
        return (1.0 - w) * self._row_list[lo][c] + w * self._row_list[hi][c]

    def _row_cum(self, rows, x):
        x = np.maximum(np.asarray(x, dtype=np.int64), 0)
        inside = np.minimum(x, self.max_context + 1)
        over = x - inside
        return self._cum[rows, inside] + over * self._rows[rows, self.max_context]

    def decode_sum(self, batch_size, ctx_start, ctx_end):
        """Sum of ``tpot(batch_size, c)`` for integer ``c`` in ``[ctx_start, ctx_end)``.

        Vectorised over all three arguments.
        """
        lo, w = self._weights(batch_size)
        hi = np.minimum(lo + 1, len(self.batch_grid) - 1)
        s_lo = self._row_cum(lo, ctx_end) - self._row_cum(lo, ctx_start)
        s_hi = self._row_cum(hi, ctx_end) - self._row_cum(hi, ctx_start)
        return (1.0 - w) * s_lo + w * s_hi

    def prefill_time(self, tokens: float) -> float:
        if tokens <= 0:
            return 0.0
        if tokens <= self.prefill_tokens[-1]:
            return float(np.interp(tokens, self.prefill_tokens, self.prefill_seconds))
        return self._prefill_extrapolate(tokens)

    def _prefill_extrapolate(self, tokens: float) -> float:
        # linear beyond the table using the last segment's slope
        t, s = self.prefill_tokens, self.prefill_seconds
        if len(t) == 1:
            return float(s[0] * tokens / t[0])
        slope = (s[-1] - s[-2]) / (t[-1] - t[-2])
        return float(s[-1] + slope * (tokens - t[-1]))

    # -- construction helpers

    @classmethod
    def analytic(cls, base: float = 0.015, per_seq: float = 2e-5, per_kv_token: float = 2e-8,
                 prefill_base: float = 0.02, prefill_per_token: float = 5e-5, rho: float = 1.0,
                 gpus_per_actor: int = 2, max_batch: int = 1024, max_context: int = 4096) -> "LatencyProfile":
        """Table sampled from ``base + per_seq*b + per_kv_token*b*c``, a
        memory-bound decode shape (weights plus KV reads per step)."""
        bs = np.array([1, 8, 32, 64, 128, 256, 512, max_batch], dtype=float)
        bs = np.unique(bs[bs <= max_batch])
        cs = np.array([0, 256, 512, 1024, 2048, max_context], dtype=float)
        cs = np.unique(cs[cs <= max_context])
        table = base + per_seq * bs[:, None] + per_kv_token * bs[:, None] * cs[None, :]
        pt = np.array([1, 1024, 8192, 65536, 524288], dtype=float)
        ps = prefill_base + prefill_per_token * pt
        return cls(bs, cs, table, pt, ps, rho=rho, gpus_per_actor=gpus_per_actor, max_context=max_context)

    @classmethod
    def constant(cls, seconds: float, rho: float = 1.0, gpus_per_actor: int = 1,
                 prefill_seconds: float = 0.0, max_context: int = 4096) -> "LatencyProfile":
        return cls(np.array([1.0]), np.array([0.0]), np.array([[seconds]]),
                   np.array([1.0]), np.array([prefill_seconds]), rho=rho,
                   gpus_per_actor=gpus_per_actor, max_context=max_context)

    def to_dict(self) -> dict:
        return {
            "tpot": {"batch": self.batch_grid.tolist(), "context": self.context_grid.tolist(),
                     "seconds": self.tpot_table.tolist()},
            "prefill": {"tokens": self.prefill_tokens.tolist(), "seconds": self.prefill_seconds.tolist()},
            "rho": self.rho,
            "gpus_per_actor": self.gpus_per_actor,
            "max_context": self.max_context,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LatencyProfile":
        try:
            return cls(
                obj["tpot"]["batch"], obj["tpot"]["context"], obj["tpot"]["seconds"],
                obj["prefill"]["tokens"], obj["prefill"]["seconds"],
                rho=float(obj.get("rho", 1.0)), gpus_per_actor=int(obj.get("gpus_per_actor", 2)),
                max_context=int(obj.get("max_context", 4096)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed latency profile: {exc}") from None

    @classmethod
    def load(cls, path) -> "LatencyProfile":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"profile file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
