import numpy as np
import pytest

from conftest import rel_logits_err, toy_config, toy_weights
from phasequant.errors import ConfigError, ContextOverflowError
from phasequant.model import (
    KvCache,
    ModelConfig,
    Precision,
    decode_step,
    full_forward_logits,
    identity_quantizer,
    init_model,
    load_model,
    prefill,
    save_model,
)


class TestConfig:
    def test_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=16, d_model=24, n_layers=1, n_heads=2,
                        max_seq_len=8, seed=0)
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=16, d_model=32, n_layers=1, n_heads=2,
                        ffn_hidden=40, max_seq_len=8, seed=0)
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=16, d_model=32, n_layers=1, n_heads=3,
                        max_seq_len=8, seed=0)

    def test_defaults(self):
        cfg = ModelConfig(vocab_size=16, d_model=32, n_layers=1, n_heads=2,
                          max_seq_len=8, seed=0)
        assert cfg.head_dim == 16
        assert cfg.ffn_hidden == 128
        assert cfg.rope_base == 10000.0

    def test_digest_covers_every_field(self):
        base = toy_config(0)
        assert base.digest() == toy_config(0).digest()
        assert base.digest() != toy_config(1).digest()
        assert base.digest() != toy_config(0, vocab_size=65).digest()  # not %16
        assert base.digest() != toy_config(0, rope_base=500.0).digest()

    def test_digest_hash_known_vectors(self):
        from phasequant.model import fnv1a64

        # published FNV-1a 64 test vectors
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8


class TestInit:
    def test_same_seed_bit_identical(self):
        a = init_model(toy_config(3))
        b = init_model(toy_config(3))
        assert np.array_equal(a.embedding, b.embedding)
        for la, lb in zip(a.layers, b.layers):
            for name in ("attn_q", "attn_k", "attn_v", "attn_out",
                         "mlp_gate", "mlp_up", "mlp_down"):
                assert np.array_equal(getattr(la, name), getattr(lb, name))

    def test_adjacent_seeds_differ(self):
        a = init_model(toy_config(3))
        b = init_model(toy_config(4))
        assert not np.array_equal(a.embedding, b.embedding)

    def test_gains_are_ones_and_scale_is_002(self):
        w = init_model(toy_config(5))
        assert (w.final_norm_gain == 1.0).all()
        assert (w.layers[0].attn_norm_gain == 1.0).all()
        assert abs(float(w.embedding.std()) - 0.02) < 0.002

    def test_shadow_rebuild_bit_identical(self):
        w = toy_weights(6)
        first = w.shadow(0, "attn_q")
        w.drop_shadows()
        second = w.shadow(0, "attn_q")
        assert np.array_equal(first.codes, second.codes)
        assert np.array_equal(first.block_scales, second.block_scales)
        assert first.tensor_scale == second.tensor_scale


class TestPrefillDecode:
    def test_empty_prompt_rejected(self, weights):
        with pytest.raises(ValueError):
            prefill(weights, [], Precision.HIGH)

    def test_overflow_rejected(self, weights):
        too_long = [1] * (weights.config.max_seq_len + 1)
        with pytest.raises(ContextOverflowError) as err:
            prefill(weights, too_long, Precision.HIGH)
        assert err.value.position == weights.config.max_seq_len

    def test_decode_overflow(self, weights):
        kv = prefill(weights, [1] * weights.config.max_seq_len,
                     Precision.HIGH).kv
        with pytest.raises(ContextOverflowError):
            decode_step(weights, kv, 2, Precision.HIGH)

    def test_prefill_deterministic(self, weights):
        toks = [1, 4, 9, 16, 25]
        a = prefill(weights, toks, Precision.HIGH)
        b = prefill(weights, toks, Precision.HIGH)
        assert np.array_equal(a.logits, b.logits)
        a4 = prefill(weights, toks, Precision.NVFP4)
        b4 = prefill(weights, toks, Precision.NVFP4)
        assert np.array_equal(a4.logits, b4.logits)

    def test_single_token_prefill_matches_argmax_contract(self, weights):
        res = prefill(weights, [7], Precision.HIGH)
        assert res.logits.shape == (weights.config.vocab_size,)
        assert np.isfinite(res.logits).all()

    def test_kv_written_in_float32_every_mode(self, weights):
        toks = [3, 1, 4, 1, 5]
        for prec in Precision:
            kv = prefill(weights, toks, prec).kv
            assert kv.length == 5
            for layer in range(weights.config.n_layers):
                assert kv.keys[layer].dtype == np.float32
                assert kv.values[layer].dtype == np.float32

    def test_kv_layout_identical_across_modes(self, weights):
        toks = [3, 1, 4]
        shapes = set()
        for prec in Precision:
            kv = prefill(weights, toks, prec).kv
            shapes.add(tuple(k.shape for k in kv.keys))
        assert len(shapes) == 1

    def test_decode_can_consume_any_prefills_cache(self, weights):
        toks = [2, 7, 1]
        for pre_prec in Precision:
            kv = prefill(weights, toks, pre_prec).kv
            for dec_prec in Precision:
                logits = decode_step(weights, kv.copy(), 5, dec_prec)
                assert logits.shape == (weights.config.vocab_size,)
                assert np.isfinite(logits).all()


class TestTeacherForcing:
    @pytest.mark.parametrize("seed,L,extra", [(0, 12, 6), (1, 20, 4)])
    def test_prefill_then_decode_matches_full_forward(self, seed, L, extra):
        w = toy_weights(seed)
        rng = np.random.default_rng(seed)
        toks = list(rng.integers(0, w.config.vocab_size, size=L + extra))
        full = full_forward_logits(w, toks, Precision.HIGH)
        res = prefill(w, toks[:L], Precision.HIGH, return_all_logits=True)
        for pos in range(L):
            assert rel_logits_err(res.all_logits[pos], full[pos]) <= 1e-5
        kv = res.kv
        for pos in range(L, L + extra):
            logits = decode_step(w, kv, toks[pos], Precision.HIGH)
            assert rel_logits_err(logits, full[pos]) <= 1e-5

    def test_greedy_pick_consistent_at_l1(self, weights):
        res = prefill(weights, [9], Precision.HIGH)
        full = full_forward_logits(weights, [9], Precision.HIGH)
        assert int(np.argmax(res.logits)) == int(np.argmax(full[0]))


class TestCausality:
    @pytest.mark.parametrize("prec", list(Precision))
    def test_prefix_kv_bit_unchanged(self, prec, weights):
        rng = np.random.default_rng(9)
        toks = list(rng.integers(0, weights.config.vocab_size, size=14))
        kv1 = prefill(weights, toks, prec).kv
        changed = list(toks)
        changed[8] = (changed[8] + 1) % weights.config.vocab_size
        kv2 = prefill(weights, changed, prec).kv
        for layer in range(weights.config.n_layers):
            assert np.array_equal(kv1.keys[layer][:8], kv2.keys[layer][:8])
            assert np.array_equal(kv1.values[layer][:8], kv2.values[layer][:8])
        assert not np.array_equal(kv1.keys[0][8], kv2.keys[0][8])


class TestAttentionRecording:
    def test_rows_are_distributions(self, weights):
        toks = [5, 3, 8, 1, 2, 13, 21]
        res = prefill(weights, toks, Precision.HIGH, record_attention=True)
        rows = res.attention.rows
        cfg = weights.config
        assert rows.shape == (cfg.n_layers, cfg.n_heads, len(toks))
        assert (rows >= 0).all()
        assert np.abs(rows.sum(axis=-1) - 1.0).max() <= 1e-5
        assert res.attention.query_position == len(toks) - 1


class TestIdentityQuantizer:
    def test_nvfp4_collapses_to_high(self, weights):
        toks = [11, 7, 2, 30]
        with identity_quantizer():
            a = prefill(weights, toks, Precision.NVFP4)
            b = prefill(weights, toks, Precision.HIGH)
            assert np.array_equal(a.logits, b.logits)
            for layer in range(weights.config.n_layers):
                assert np.array_equal(
                    a.kv.keys[layer][:4], b.kv.keys[layer][:4]
                )

    def test_real_nvfp4_differs(self, weights):
        toks = [11, 7, 2, 30]
        a = prefill(weights, toks, Precision.NVFP4)
        b = prefill(weights, toks, Precision.HIGH)
        assert not np.array_equal(a.logits, b.logits)


class TestForwardBlock:
    def test_zero_hidden_rmsnorm_returns_zeros(self):
        from phasequant.model import _rmsnorm

        x = np.zeros((3, 32), np.float32)
        out = _rmsnorm(x, np.ones(32, np.float32))
        assert (out == 0.0).all()

    def test_zero_hidden_input_gives_position_independent_output(self, weights):
        # norm-of-zero yields zeros, so with no biases every sublayer emits
        # zeros and the residual output equals the (zero) constant everywhere
        from phasequant.model import forward_block

        cfg = weights.config
        kv = KvCache(cfg)
        x = np.zeros((5, cfg.d_model), np.float32)
        out = forward_block(weights, 0, x, kv, np.arange(5), Precision.HIGH)
        assert (out == 0.0).all()

    def test_position_cache_mismatch_rejected(self, weights):
        from phasequant.model import forward_block

        cfg = weights.config
        kv = KvCache(cfg)
        x = np.zeros((2, cfg.d_model), np.float32)
        with pytest.raises(ValueError):
            forward_block(weights, 0, x, kv, np.arange(3, 5), Precision.HIGH)
        with pytest.raises(ValueError):
            forward_block(weights, 0, x, kv, np.array([0, 2]), Precision.HIGH)

    def test_high_path_deterministic(self, weights):
        from phasequant.model import forward_block

        cfg = weights.config
        rng = np.random.default_rng(31)
        x = rng.normal(size=(4, cfg.d_model)).astype(np.float32)
        outs = []
        for _ in range(2):
            kv = KvCache(cfg)
            outs.append(
                forward_block(weights, 0, x.copy(), kv, np.arange(4),
                              Precision.HIGH)
            )
        assert np.array_equal(outs[0], outs[1])

    def test_identity_quantizer_matches_high_per_block(self, weights):
        from phasequant.model import forward_block

        cfg = weights.config
        rng = np.random.default_rng(32)
        x = rng.normal(size=(3, cfg.d_model)).astype(np.float32)
        kv_high = KvCache(cfg)
        high = forward_block(weights, 1, x.copy(), kv_high, np.arange(3),
                             Precision.HIGH)
        with identity_quantizer():
            kv_q = KvCache(cfg)
            low = forward_block(weights, 1, x.copy(), kv_q, np.arange(3),
                                Precision.NVFP4)
        assert np.array_equal(high, low)


class TestWeightFile:
    def test_round_trip_bit_exact(self, tmp_path):
        w = toy_weights(21)
        path = str(tmp_path / "m.mxqw")
        save_model(w, path)
        back = load_model(path)
        assert back.config == w.config
        assert np.array_equal(back.embedding, w.embedding)
        for la, lb in zip(w.layers, back.layers):
            for name in ("attn_norm_gain", "attn_q", "attn_k", "attn_v",
                         "attn_out", "mlp_norm_gain", "mlp_gate", "mlp_up",
                         "mlp_down"):
                assert np.array_equal(getattr(la, name), getattr(lb, name))
        assert np.array_equal(back.final_norm_gain, w.final_norm_gain)

    def test_header_layout(self, tmp_path):
        w = toy_weights(22)
        path = str(tmp_path / "m.mxqw")
        save_model(w, path)
        raw = open(path, "rb").read()
        assert raw[:4] == b"MXQW"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:16], "little") == w.config.digest()

    def test_corrupt_digest_rejected(self, tmp_path):
        w = toy_weights(23)
        path = str(tmp_path / "m.mxqw")
        save_model(w, path)
        raw = bytearray(open(path, "rb").read())
        raw[8] ^= 0xFF
        open(path, "wb").write(bytes(raw))
        with pytest.raises(ValueError):
            load_model(path)

    def test_loaded_model_runs_identically(self, tmp_path):
        w = toy_weights(24)
        path = str(tmp_path / "m.mxqw")
        save_model(w, path)
        back = load_model(path)
        toks = [1, 2, 3, 4]
        for prec in Precision:
            assert np.array_equal(
                prefill(w, toks, prec).logits, prefill(back, toks, prec).logits
            )


class TestChunkedPrefill:
    def test_appended_chunk_continues_cache(self, weights):
        toks = [4, 8, 15, 16, 23, 42]
        res_a = prefill(weights, toks[:4], Precision.HIGH)
        res_b = prefill(weights, toks[4:], Precision.HIGH, kv=res_a.kv)
        assert res_b.kv.length == 6
        one_shot = prefill(weights, toks, Precision.HIGH)
        assert rel_logits_err(res_b.logits, one_shot.logits) <= 1e-5
