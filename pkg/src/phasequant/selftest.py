"""Fast oracle-backed self checks, one pass/fail line per suite.

A condensed version of the property suites in the test tree, runnable from
the command line without a test framework.  Each suite compares the
implementation against an independent oracle (exhaustive grid search,
float64 products, a monolithic generation run) on seeded random data.
"""

from __future__ import annotations

import io

import numpy as np

from . import analysis, disagg, formats
from . import gemm as qg
from . import quantizer as qz
from .engine import ExecutionMode, SamplerSpec, generate, render_trajectory
from .model import (
    AttentionRecord,
    ModelConfig,
    identity_quantizer,
    init_model,
    prefill,
)


def _nearest_fp4_oracle(x: np.ndarray) -> np.ndarray:
    mags = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
    v = np.clip(np.abs(x.astype(np.float64)), 0.0, 6.0)
    dist = np.abs(v[:, None] - mags[None, :])
    best = dist.min(axis=1, keepdims=True)
    tied = dist == best
    # Among tied candidates (always adjacent) prefer the even-mantissa index.
    pick = np.where(tied, np.arange(8) % 2, 2)
    idx = np.argmin(pick, axis=1)
    return np.where(np.signbit(x), idx + 8, idx).astype(np.uint8)


def _suite_formats() -> bool:
    codes = np.arange(16, dtype=np.uint8)
    if not np.array_equal(formats.encode_fp4(formats.decode_fp4(codes)), codes):
        return False
    ok_codes = np.array([c for c in range(256) if not formats.E4M3_IS_NAN[c]],
                        dtype=np.uint8)
    if not np.array_equal(
        formats.encode_e4m3(formats.decode_e4m3(ok_codes)), ok_codes
    ):
        return False
    rng = np.random.default_rng(7)
    x = rng.uniform(-9.0, 9.0, size=100_000).astype(np.float32)
    return bool(np.array_equal(formats.encode_fp4(x), _nearest_fp4_oracle(x)))


def _suite_quantizer() -> bool:
    row = np.full((1, 16), 3.0, dtype=np.float32)
    cfg = qz.QuantConfig(policy=qz.TensorScalePolicy.UNIT)
    qt = qz.quantize(row, cfg)
    if float(formats.decode_e4m3(qt.block_scales)[0, 0]) != 0.5:
        return False
    if not np.all(formats.decode_fp4(qt.codes) == 6.0):
        return False
    if not np.all(qz.dequantize(qt) == 3.0):
        return False
    rng = np.random.default_rng(11)
    x = rng.normal(size=(8, 64)).astype(np.float32)
    q1 = qz.quantize(x, cfg)
    q2 = qz.quantize(qz.dequantize(q1), cfg)
    return (
        np.array_equal(q1.codes, q2.codes)
        and np.array_equal(q1.block_scales, q2.block_scales)
        and q1.tensor_scale == q2.tensor_scale
    )


def _suite_qgemm() -> bool:
    rng = np.random.default_rng(13)
    for _ in range(20):
        m, n = rng.integers(1, 9, size=2)
        k = 16 * int(rng.integers(1, 9))
        a = qz.quantize(rng.normal(size=(m, k)).astype(np.float32))
        w = qz.quantize(rng.normal(size=(n, k)).astype(np.float32))
        got = qg.qgemm(a, w)
        if not np.array_equal(got, qg.qgemm_mirror(a, w)):
            return False
        ref = qg.reference_gemm(qz.dequantize(a), qz.dequantize(w))
        scale = max(np.abs(ref).max(), 1e-30)
        if np.abs(got - ref).max() / scale > 1e-5:
            return False
    return True


def _toy_model(seed: int):
    cfg = ModelConfig(
        vocab_size=64, d_model=32, n_layers=1, n_heads=2, max_seq_len=64,
        ffn_hidden=64, seed=seed,
    )
    return init_model(cfg)


def _suite_identity_collapse() -> bool:
    weights = _toy_model(3)
    prompt = [1, 5, 9, 2]
    sampler = SamplerSpec(max_new_tokens=8)
    with identity_quantizer():
        dumps = {
            mode: render_trajectory(generate(weights, prompt, mode, sampler))
            for mode in ExecutionMode
        }
    texts = {d.split("\n", 1)[1] for d in dumps.values()}
    return len(texts) == 1


def _suite_disagg() -> bool:
    weights = _toy_model(5)
    prompt = [2, 4, 6]
    result = prefill(weights, prompt, ExecutionMode.MIX_QUANT.prefill_precision)
    blob = disagg.serialize_kv(result.kv, weights.config.digest(), prompt)
    parsed = disagg.deserialize_kv(blob)
    for layer in range(weights.config.n_layers):
        if not np.array_equal(parsed.keys[layer], result.kv.keys[layer][:3]):
            return False
    corrupted = bytearray(blob)
    corrupted[len(corrupted) // 2] ^= 0x40
    try:
        disagg.deserialize_kv(bytes(corrupted))
    except disagg.BlobIntegrityError:
        return True
    return False


def _suite_analysis() -> bool:
    rows = np.full((1, 1, 8), 1.0 / 8.0, dtype=np.float32)
    record = AttentionRecord(query_position=7, rows=rows)
    report = analysis.topk_mass(record, [2, 8])
    if abs(report.mean_per_k[0] - 0.25) > 1e-9:
        return False
    if abs(report.mean_per_k[1] - 1.0) > 1e-6:
        return False
    cfg = ModelConfig(
        vocab_size=16, d_model=32, n_layers=1, n_heads=2, max_seq_len=16,
        ffn_hidden=64, seed=1,
    )
    report = analysis.cost_model(cfg, 8, 4, ExecutionMode.MIX_QUANT, 1.0)
    return report.modeled_prefill_speedup == 1.0


_SUITES = (
    ("formats", _suite_formats),
    ("quantizer", _suite_quantizer),
    ("qgemm", _suite_qgemm),
    ("identity-collapse", _suite_identity_collapse),
    ("disagg", _suite_disagg),
    ("analysis", _suite_analysis),
)


def run_selftest(out: io.TextIOBase) -> int:
    failures = 0
    for name, fn in _SUITES:
        try:
            ok = fn()
        except Exception as exc:  # a crashed suite is a failed suite
            out.write(f"FAIL {name} ({exc})\n")
            failures += 1
            continue
        if ok:
            out.write(f"ok {name}\n")
        else:
            out.write(f"FAIL {name}\n")
            failures += 1
    return 0 if failures == 0 else 1
