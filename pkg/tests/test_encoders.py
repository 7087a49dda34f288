import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trimodal import tensor as T
from trimodal.encoders import (
    AudioHead,
    EncoderConfig,
    ImageHead,
    TextHead,
    Vocabulary,
    encode_audio,
    encode_image,
    encode_text,
    tokenize,
    tokenize_batch,
)
from trimodal.errors import ConfigurationError, ContractError, DimensionError
from trimodal.tensor import no_grad


class TestTokenizer:
    def test_vocabulary_layout(self):
        v = Vocabulary()
        assert v.size == len(v) == 99 and v.pad_id == 0
        assert v.id_of("é") == v.unk_id

    def test_tokenize_lowercases_and_pads(self):
        v = Vocabulary()
        ids = tokenize("Ab", v, 6)
        np.testing.assert_array_equal(ids, [v.bos_id, v.id_of("a"), v.id_of("b"), v.eos_id, 0, 0])

    def test_clipped_sequence_drops_eos(self):
        v = Vocabulary()
        ids = tokenize("abcdef", v, 4)
        assert v.eos_id not in ids and ids[-1] == v.id_of("c")

    @given(st.text(max_size=120), st.integers(2, 80))
    @settings(max_examples=60)
    def test_always_fixed_length(self, text, n):
        ids = tokenize(text, Vocabulary(), n)
        assert ids.shape == (n,) and ids[0] == Vocabulary().bos_id


def unit_norms(x):
    return np.linalg.norm(x.values, axis=1)


class TestTextHead:
    def test_unit_output_and_case_insensitive(self, tiny_cfg):
        head = TextHead(tiny_cfg, np.random.default_rng(0))
        with no_grad():
            out = head.encode_texts(["Hum", "hum", "buzz"])
        np.testing.assert_allclose(unit_norms(out), 1.0)
        np.testing.assert_array_equal(out.values[0], out.values[1])
        assert not np.allclose(out.values[0], out.values[2])

    def test_padding_does_not_leak(self, tiny_cfg):
        head = TextHead(tiny_cfg, np.random.default_rng(0))
        cfg_long = EncoderConfig(**{**tiny_cfg.__dict__, "context_len": 8})
        ids = tokenize_batch(["ab"], head.vocab, cfg_long.context_len)
        with no_grad():
            base = head(ids).values
            # pad positions carry no content; editing a pad embedding row changes nothing
            head.token_embedding.values[head.vocab.pad_id] += 5.0
            after = head(ids).values
        np.testing.assert_allclose(base, after)

    def test_input_checks(self, tiny_cfg):
        head = TextHead(tiny_cfg, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            head(np.zeros((1, 3), dtype=np.int64))
        with pytest.raises(ContractError):
            head(np.zeros((1, tiny_cfg.context_len), dtype=np.int64))
        with pytest.raises(ContractError):
            head(np.full((1, tiny_cfg.context_len), 500))


class TestImageHead:
    def test_constant_image_gives_uniform_attention(self, tiny_cfg):
        head = ImageHead(tiny_cfg, np.random.default_rng(0))
        with no_grad():
            out, attn = head(np.full((2, 3, 8, 8), 0.3), return_attention=True)
        np.testing.assert_allclose(attn.values, 1.0 / attn.shape[1])
        np.testing.assert_allclose(unit_norms(out), 1.0)

    def test_shape_check(self, tiny_cfg):
        with pytest.raises(DimensionError):
            ImageHead(tiny_cfg, np.random.default_rng(0))(np.zeros((1, 3, 9, 9)))


class TestAudioHead:
    def test_width_is_mean_and_variance(self, tiny_cfg):
        head = AudioHead(tiny_cfg, np.random.default_rng(0))
        # 4 bands -> 2 -> 1 rows; 4 channels; two statistics
        assert head.width == 2 * 4 * 1
        assert head.proj.shape == (8, tiny_cfg.embed_dim)

    def test_gain_invariance(self, tiny_cfg, rng):
        head = AudioHead(tiny_cfg, rng)
        x = rng.standard_normal((2, 1, 400))
        with no_grad():
            a = head(x).values
            b = head(x * 10.0).values
        # exact up to the log epsilon
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_stereo_averaged_in_log_domain(self, tiny_cfg, rng):
        head = AudioHead(tiny_cfg, rng)
        x = rng.standard_normal((1, 1, 400))
        with no_grad():
            mono = head(x).values
            dual = head(np.concatenate([x, x], axis=1)).values
        np.testing.assert_allclose(mono, dual, atol=1e-12)

    def test_mode_switch_keeps_trunk(self, tiny_cfg, rng):
        head = AudioHead(tiny_cfg, rng, mode="logits")
        trunk = {k: v.values.copy() for k, v in head.parameters().items() if "classifier" not in k}
        with no_grad():
            assert head(rng.standard_normal((2, 1, 400))).shape == (2, 3)
        head.replace_final_layer("embedding", rng)
        assert "audio.classifier.weight" not in head.parameters()
        for k, v in trunk.items():
            np.testing.assert_array_equal(head.parameters()[k].values, v)
        with pytest.raises(ConfigurationError):
            head.encode_spectrogram(np.zeros((1, 1, 4, 7)), "logits")

    def test_logits_need_class_count(self, rng):
        from trimodal.gradcheck import tiny_config
        with pytest.raises(ConfigurationError):
            AudioHead(tiny_config(n_classes=None), rng, mode="logits")
        with pytest.raises(ConfigurationError):
            AudioHead(tiny_config(), rng, mode="regression")

    def test_band_count_checked(self, tiny_cfg, rng):
        with pytest.raises(DimensionError):
            AudioHead(tiny_cfg, rng).encode_spectrogram(np.zeros((1, 1, 5, 7)))

    def test_freeze_blocks_gradients(self, tiny_cfg, rng):
        head = AudioHead(tiny_cfg, rng)
        head.freeze()
        out = head(rng.standard_normal((2, 1, 400)))
        assert not out.requires_grad
        head.unfreeze()
        T.backward(T.sum(head(rng.standard_normal((2, 1, 400)))))
        assert head.bank.fc.grad is not None


def test_functional_wrappers(tiny_cfg, rng):
    text = TextHead(tiny_cfg, rng)
    image = ImageHead(tiny_cfg, rng)
    audio = AudioHead(tiny_cfg, rng)
    with no_grad():
        assert encode_text(tokenize_batch(["a"], text.vocab, 8), text).shape == (1, 6)
        assert encode_image(np.zeros((1, 3, 8, 8)), image).shape == (1, 6)
        specs = audio.spectrogram(rng.standard_normal((1, 1, 400)))
        assert encode_audio(specs, audio).shape == (1, 6)


def test_embed_dim_validated():
    with pytest.raises(ConfigurationError):
        EncoderConfig(embed_dim=0)
