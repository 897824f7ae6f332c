"""Phase-wise execution modes and trajectory generation.

A mode fixes the numeric path of each inference phase:

    baseline16   high-precision prompt pass, high-precision decoding
    uniform_fp4  4-bit prompt pass,          4-bit decoding
    mixquant     4-bit prompt pass,          high-precision decoding
    p16d4        high-precision prompt pass, 4-bit decoding

``generate`` composes exactly ``prefill(prefill_precision)`` followed by
repeated ``decode_step(decode_precision)``; the first generated token is
sampled from the prompt pass's final-position logits.  Every step stores the
full log-probability vector in float32.

Trajectory dump format (line-delimited text): one header line

    mode=<m> sampler=<greedy|temperature> temperature=<t|-> seed=<s|->
    max_new=<n> stop=<id|-> digest=<16 hex> prompt=<comma ids>

(single line; shown wrapped) followed by one line per step

    step=<i> token=<id> top8=<id>:<logp>,...

with steps 1-based, the top-8 pairs in descending probability (ties by
ascending token id) and log-probabilities in shortest round-trip decimal of
their float32 value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np

from .errors import ContextOverflowError, NonFiniteError
from .model import (
    KvCache,
    ModelWeights,
    Precision,
    decode_step,
    prefill,
)
from .rng import SplitMix64


class ExecutionMode(Enum):
    BASELINE16 = "baseline16"
    UNIFORM_FP4 = "uniform_fp4"
    MIX_QUANT = "mixquant"
    P16D4 = "p16d4"

    @property
    def prefill_precision(self) -> Precision:
        return _MODE_PRECISIONS[self][0]

    @property
    def decode_precision(self) -> Precision:
        return _MODE_PRECISIONS[self][1]

    @classmethod
    def from_name(cls, name: str) -> "ExecutionMode":
        key = name.strip().lower().replace("-", "_")
        for mode in cls:
            if mode.value == key:
                return mode
        raise ValueError(f"unknown execution mode: {name!r}")


_MODE_PRECISIONS = {
    ExecutionMode.BASELINE16: (Precision.HIGH, Precision.HIGH),
    ExecutionMode.UNIFORM_FP4: (Precision.NVFP4, Precision.NVFP4),
    ExecutionMode.MIX_QUANT: (Precision.NVFP4, Precision.HIGH),
    ExecutionMode.P16D4: (Precision.HIGH, Precision.NVFP4),
}


@dataclass(frozen=True)
class SamplerSpec:
    """Decoding strategy. Greedy is deterministic; temperature sampling is
    deterministic given its seed (which it requires)."""

    strategy: str = "greedy"
    temperature: float = 1.0
    seed: Optional[int] = None
    max_new_tokens: int = 16
    stop_token: Optional[int] = None

    def __post_init__(self):
        if self.strategy not in ("greedy", "temperature"):
            raise ValueError(f"unknown sampling strategy {self.strategy!r}")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be nonnegative")
        if self.seed is not None:
            # the generator state is 64-bit; normalize so the recorded seed
            # is the one actually used
            object.__setattr__(self, "seed", self.seed & 0xFFFFFFFFFFFFFFFF)
        if self.strategy == "temperature":
            if not self.temperature > 0:
                raise ValueError("temperature must be positive")
            if self.seed is None:
                raise ValueError("temperature sampling requires a seed")


@dataclass
class Trajectory:
    prompt: List[int]
    tokens: List[int] = field(default_factory=list)
    logprobs: List[np.ndarray] = field(default_factory=list)
    mode: str = ""
    sampler: Optional[SamplerSpec] = None
    config_digest: int = 0


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def _sampling_logits(logits: np.ndarray, sampler: SamplerSpec) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise NonFiniteError("logits must be finite")
    if sampler.strategy == "temperature":
        arr = arr / np.float32(sampler.temperature)
    return arr


def decode_distribution(logits: np.ndarray, sampler: SamplerSpec,
                        rng: Optional[SplitMix64] = None):
    """Pick the next token and return it with the normalized probabilities.

    Softmax is computed in float32 with max subtraction.  Greedy takes the
    argmax, lowest id on exact ties.  Temperature divides the logits by t
    and samples by inverse CDF over ascending token ids using one uniform
    draw from the pinned generator.
    """
    arr = _sampling_logits(logits, sampler)
    shifted = arr - arr.max()
    e = np.exp(shifted)
    probs = e / e.sum()
    if sampler.strategy == "greedy":
        token = int(np.argmax(arr))
    else:
        if rng is None:
            raise ValueError("temperature sampling requires a generator")
        cdf = np.cumsum(probs.astype(np.float64))
        u = rng.next_float() * cdf[-1]
        token = int(np.searchsorted(cdf, u, side="right"))
        token = min(token, arr.size - 1)
    return token, probs


def run_decode_loop(
    weights: ModelWeights,
    kv: KvCache,
    first_logits: np.ndarray,
    decode_precision: Precision,
    sampler: SamplerSpec,
    prompt: List[int],
    mode_label: str,
) -> Trajectory:
    """Autoregressive decoding from already-computed first-step logits.

    Shared verbatim by the in-process engine and the decode worker so both
    produce identical trajectories from identical inputs.
    """
    traj = Trajectory(
        prompt=list(prompt),
        mode=mode_label,
        sampler=sampler,
        config_digest=weights.config.digest(),
    )
    rng = SplitMix64(sampler.seed) if sampler.strategy == "temperature" else None
    logits = first_logits
    for step in range(sampler.max_new_tokens):
        token, _ = decode_distribution(logits, sampler, rng)
        traj.tokens.append(token)
        traj.logprobs.append(_log_softmax(_sampling_logits(logits, sampler)))
        if sampler.stop_token is not None and token == sampler.stop_token:
            break
        if step + 1 < sampler.max_new_tokens:
            logits = decode_step(weights, kv, token, decode_precision)
    return traj


def generate(
    weights: ModelWeights,
    prompt,
    mode: ExecutionMode,
    sampler: SamplerSpec,
) -> Trajectory:
    """Full generation: prompt pass at the mode's prefill precision, then
    decoding at its decode precision, greedy ties to the lowest token id."""
    prompt = [int(t) for t in prompt]
    cfg = weights.config
    if len(prompt) > cfg.max_seq_len:
        raise ContextOverflowError(
            f"prompt length {len(prompt)} exceeds max_seq_len {cfg.max_seq_len}",
            position=len(prompt) - 1,
        )
    need = len(prompt) + max(sampler.max_new_tokens - 1, 0)
    if need > cfg.max_seq_len:
        raise ContextOverflowError(
            f"generation would reach position {need - 1}, past max_seq_len "
            f"{cfg.max_seq_len}",
            position=need - 1,
        )
    result = prefill(weights, prompt, mode.prefill_precision)
    return run_decode_loop(
        weights,
        result.kv,
        result.logits,
        mode.decode_precision,
        sampler,
        prompt,
        mode.value,
    )


def _fmt_float(v) -> str:
    return repr(float(v))


def render_trajectory(traj: Trajectory) -> str:
    s = traj.sampler or SamplerSpec()
    # the engine divides by float32(t), so the header shows that value
    temp = _fmt_float(np.float32(s.temperature)) if s.strategy == "temperature" \
        else "-"
    seed = str(s.seed) if s.seed is not None else "-"
    stop = str(s.stop_token) if s.stop_token is not None else "-"
    lines = [
        f"mode={traj.mode} sampler={s.strategy} temperature={temp} seed={seed} "
        f"max_new={s.max_new_tokens} stop={stop} "
        f"digest={traj.config_digest:016x} "
        f"prompt={','.join(str(t) for t in traj.prompt)}"
    ]
    for i, (token, lp) in enumerate(zip(traj.tokens, traj.logprobs), start=1):
        order = np.argsort(-lp, kind="stable")[:8]
        pairs = ",".join(f"{int(t)}:{_fmt_float(np.float32(lp[t]))}" for t in order)
        lines.append(f"step={i} token={token} top8={pairs}")
    return "\n".join(lines) + "\n"


def parse_trajectory_dump(text: str) -> dict:
    """Header fields, token sequence and top-8 pairs from a dump."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty trajectory dump")
    header = {}
    for item in lines[0].split():
        key, _, value = item.partition("=")
        header[key] = value
    tokens = []
    top8 = []
    for line in lines[1:]:
        fields = dict(item.partition("=")[::2] for item in line.split())
        tokens.append(int(fields["token"]))
        pairs = []
        if fields.get("top8"):
            for pair in fields["top8"].split(","):
                tid, _, lp = pair.partition(":")
                pairs.append((int(tid), float(lp)))
        top8.append(pairs)
    prompt = [int(t) for t in header.get("prompt", "").split(",") if t != ""]
    return {"header": header, "prompt": prompt, "tokens": tokens, "top8": top8}
