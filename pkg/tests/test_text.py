import math

import numpy as np
import pytest
import torch

from wrel.errors import ConfigError
from wrel.params import rng_for
from wrel.text import BOS, EOS, PAD, TextEncoder, Vocabulary, tokenize

from conftest import random_sequence


@pytest.fixture()
def small_vocab():
    return Vocabulary.build(["circle square", "the red circle in the top-left"])


class TestVocabulary:
    def test_pad_is_zero_and_specials_fixed(self, small_vocab):
        assert small_vocab.token_to_id["<pad>"] == 0
        assert small_vocab.token_to_id["<unk>"] == 1

    def test_unknown_token_maps_to_unk(self, small_vocab):
        assert small_vocab.lookup("zeppelin") == 1

    def test_json_roundtrip(self, small_vocab, tmp_path):
        small_vocab.save(tmp_path / "vocab.json")
        loaded = Vocabulary.load(tmp_path / "vocab.json")
        assert loaded.token_to_id == small_vocab.token_to_id

    def test_non_injective_mapping_rejected(self):
        with pytest.raises(ConfigError):
            Vocabulary({"<pad>": 0, "<unk>": 1, "<bos>": 1, "<eos>": 3})


class TestTokenize:
    def test_single_word_framing_and_padding(self, small_vocab):
        ids, attn = tokenize("circle", small_vocab, 8)
        assert ids[0] == BOS and ids[2] == EOS
        assert ids[1] == small_vocab.lookup("circle")
        assert list(ids[3:]) == [PAD] * 5
        assert list(attn) == [1, 1, 1, 0, 0, 0, 0, 0]

    def test_exact_fit_has_full_attention(self, small_vocab):
        ids, attn = tokenize("the red circle in the top-left", small_vocab, 8)
        assert attn.sum() == 8 and ids[-1] == EOS

    def test_overflow_truncates(self, small_vocab):
        ids, attn = tokenize("the red circle in the top-left corner", small_vocab, 8)
        assert attn.sum() == 8
        assert ids[-1] == EOS  # EOS survives truncation

    def test_empty_expression_rejected(self, small_vocab):
        with pytest.raises(ConfigError):
            tokenize("   ", small_vocab, 8)

    def test_min_length_enforced(self, small_vocab):
        with pytest.raises(ConfigError):
            tokenize("circle", small_vocab, 2)


class TestEmbed:
    def test_pad_rows_are_zero(self, encoder):
        ids = np.array([BOS, 5, EOS, PAD, PAD], dtype=np.int64)
        attn = np.array([1, 1, 1, 0, 0], dtype=np.int8)
        seq = encoder.embed(ids, attn)
        assert torch.all(seq.x[3:] == 0)
        assert torch.all(seq.x[:3] != 0)

    def test_same_ids_same_embeddings(self, encoder):
        ids = np.array([BOS, 4, 5, EOS], dtype=np.int64)
        attn = np.ones(4, dtype=np.int8)
        a = encoder.embed(ids, attn).x
        b = encoder.embed(ids, attn).x
        assert torch.equal(a, b)

    def test_out_of_range_id_rejected(self, encoder):
        ids = np.array([BOS, 10_000, EOS], dtype=np.int64)
        with pytest.raises(ConfigError):
            encoder.embed(ids, np.ones(3, dtype=np.int8))

    def test_table_gradient_matches_finite_differences(self, encoder):
        ids = np.array([BOS, 4, 5, EOS, PAD], dtype=np.int64)
        attn = np.array([1, 1, 1, 1, 0], dtype=np.int8)
        readout = torch.from_numpy(rng_for(0, "readout").normal(size=(5, 32)))

        def scalar():
            return (encoder.embed(ids, attn).x * readout).sum()

        loss = scalar()
        loss.backward()
        grad = encoder.emb.grad.clone()
        h = 1e-6
        for i, j in ((4, 0), (5, 17), (4, 31)):
            with torch.no_grad():
                encoder.emb[i, j] += h
                up = scalar().item()
                encoder.emb[i, j] -= 2 * h
                down = scalar().item()
                encoder.emb[i, j] += h
            numeric = (up - down) / (2 * h)
            assert math.isclose(numeric, grad[i, j].item(), rel_tol=1e-4, abs_tol=1e-9)


class TestEncode:
    def test_masked_positions_do_not_influence_output(self, encoder):
        rng = rng_for(7, "mask-sound")
        for _ in range(25):
            seq = random_sequence(encoder, rng)
            base = encoder.encode(seq)
            noise = torch.from_numpy(rng.normal(size=seq.x.shape))
            masked = torch.from_numpy((seq.attn == 0).astype(np.float64)).unsqueeze(-1)
            perturbed = type(seq)(x=seq.x + noise * masked, attn=seq.attn)
            assert torch.equal(encoder.encode(perturbed), base)  # bitwise

    def test_single_token_degenerate_attention(self, encoder):
        ids = np.array([5], dtype=np.int64)
        attn = np.array([1], dtype=np.int8)
        seq = encoder.embed(ids, attn)
        r = encoder.encode(seq)
        from wrel.text import _positions
        xp = seq.x[0] + _positions(1, encoder.dim)[0]
        manual = (xp @ encoder.wv) @ encoder.wo + encoder.bo
        assert torch.allclose(r, manual, atol=1e-12, rtol=0)

    def test_all_masked_rejected(self, encoder):
        seq = encoder.embed(np.zeros(4, dtype=np.int64), np.zeros(4, dtype=np.int8))
        with pytest.raises(ConfigError):
            encoder.encode(seq)

    def test_output_dim_is_fixed_across_lengths(self, encoder):
        rng = rng_for(3, "shapes")
        for length in (1, 4, 16, 32):
            seq = random_sequence(encoder, rng, length)
            assert encoder.encode(seq).shape == (encoder.out_dim,)

    def test_gradient_wrt_inputs_matches_finite_differences(self, encoder):
        rng = rng_for(11, "encode-grad")
        for _ in range(10):
            seq = random_sequence(encoder, rng)
            direction = torch.from_numpy(rng.normal(size=seq.x.shape))
            direction *= torch.from_numpy((seq.attn == 1).astype(np.float64)).unsqueeze(-1)
            x = seq.x.detach().requires_grad_(True)

            def norm_sq(xv):
                return (encoder.encode_batch(
                    xv.unsqueeze(0),
                    torch.from_numpy(seq.attn.astype(np.int64)).unsqueeze(0))[0] ** 2).sum()

            loss = norm_sq(x)
            (grad,) = torch.autograd.grad(loss, x)
            analytic = (grad * direction).sum().item()
            h = 1e-6
            up = norm_sq(x.detach() + h * direction).item()
            down = norm_sq(x.detach() - h * direction).item()
            numeric = (up - down) / (2 * h)
            assert math.isclose(numeric, analytic, rel_tol=1e-4, abs_tol=1e-8)
