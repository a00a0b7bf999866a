"""History-based response-length prediction.

Each prompt keeps a ring of its last ``window`` observed mean lengths. The
estimate is an EWMA over that ring seeded at the oldest entry; prompts with
no history fall back to the length of their reference answer.
"""

from __future__ import annotations

import json
import zlib
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError
from .workload import DEFAULT_MAX_RESPONSE_LEN, Prompt


class LengthHistory:
    def __init__(self, window: int = 1, alpha: float = 0.5, max_response_len: int = DEFAULT_MAX_RESPONSE_LEN):
        if window < 1:
            raise ConfigError(f"window must be >= 1, got {window}")
        if not 0.0 < alpha <= 1.0:
            raise ConfigError(f"ewma alpha must lie in (0, 1], got {alpha}")
        self.window = window
        self.alpha = alpha
        self.max_response_len = max_response_len
        self._obs: dict[str, deque] = {}
        self.last_step: int | None = None

    def observe(self, step_idx: int, prompt_id: str, lengths: Iterable[int]) -> "LengthHistory":
        lengths = list(lengths)
        if not lengths:
            raise ValueError(f"no lengths observed for prompt {prompt_id!r}")
        for ln in lengths:
            if not 1 <= ln <= self.max_response_len:
                raise ValueError(f"length {ln} for prompt {prompt_id!r} outside [1, {self.max_response_len}]")
        ring = self._obs.get(prompt_id)
        if ring is None:
            ring = self._obs[prompt_id] = deque(maxlen=self.window)
        ring.append(sum(lengths) / len(lengths))
        self.last_step = step_idx
        return self

    def observe_step(self, step) -> "LengthHistory":
        for pid in step.scheduled_prompts:
            self.observe(step.step_idx, pid, step.actual_lengths[pid])
        return self

    def observations(self, prompt_id: str) -> list[float]:
        return list(self._obs.get(prompt_id, ()))

    def snapshot(self) -> "LengthHistory":
        snap = LengthHistory(self.window, self.alpha, self.max_response_len)
        snap._obs = {k: deque(v, maxlen=self.window) for k, v in self._obs.items()}
        snap.last_step = self.last_step
        return snap

    def _clamp(self, x: float) -> float:
        return min(max(x, 1.0), float(self.max_response_len))

    def predict(self, prompt: Prompt) -> float:
        ring = self._obs.get(prompt.id)
        if not ring:
            return self._clamp(float(prompt.ground_truth_len))
        it = iter(ring)
        est = next(it)
        for o in it:
            est = self.alpha * o + (1.0 - self.alpha) * est
        return self._clamp(est)

    def predict_batch(self, prompts: Iterable[Prompt]) -> dict[str, float]:
        return {p.id: self.predict(p) for p in prompts}

    # persistence for warm restarts

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "alpha": self.alpha,
            "max_response_len": self.max_response_len,
            "last_step": self.last_step,
            "observations": {k: list(v) for k, v in self._obs.items()},
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "LengthHistory":
        h = cls(int(obj["window"]), float(obj["alpha"]), int(obj["max_response_len"]))
        h.last_step = obj.get("last_step")
        for k, v in obj["observations"].items():
            h._obs[k] = deque((float(x) for x in v), maxlen=h.window)
        return h

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "LengthHistory":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class NoiseModel:
    """Emulates a less accurate external predictor.

    Lengths are bucketed into ``bucket_width``-token bins. With probability
    ``bucket_accuracy`` the prediction stays in its bin; otherwise it is moved
    by a whole number of bins to a uniformly chosen different bin. Draws are
    keyed on ``(seed, step, prompt id)`` so they do not depend on call order.
    """

    bucket_accuracy: float = 1.0
    bucket_width: int = 128
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.bucket_accuracy <= 1.0:
            raise ConfigError(f"bucket_accuracy must lie in [0, 1], got {self.bucket_accuracy}")
        if self.bucket_width < 1:
            raise ConfigError("bucket_width must be >= 1")


IDENTITY_NOISE = NoiseModel()


def predict_noisy(history: LengthHistory, prompt: Prompt, noise: NoiseModel | None, step_idx: int = 0) -> float:
    est = history.predict(prompt)
    if noise is None or noise.bucket_accuracy >= 1.0:
        return est
    key = zlib.crc32(prompt.id.encode())
    rng = np.random.default_rng([noise.seed, step_idx & 0xFFFFFFFF, key])
    if rng.random() < noise.bucket_accuracy:
        return est
    n_buckets = -(-history.max_response_len // noise.bucket_width)
    cur = min(int((est - 1) // noise.bucket_width), n_buckets - 1)
    if n_buckets < 2:
        return est
    other = int(rng.integers(0, n_buckets - 1))
    if other >= cur:
        other += 1
    return history._clamp(est + (other - cur) * noise.bucket_width)


def predict_lengths(history: LengthHistory, prompts: Iterable[Prompt], noise: NoiseModel | None = None,
                    step_idx: int = 0) -> dict[str, float]:
    if noise is None or noise.bucket_accuracy >= 1.0:
        return history.predict_batch(prompts)
    return {p.id: predict_noisy(history, p, noise, step_idx) for p in prompts}
