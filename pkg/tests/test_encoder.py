"""Vocabulary, input layouts, the transformer forward pass, [CLS] attention and checkpoints."""

from dataclasses import replace

import numpy as np
import pytest
import torch

from dense_prf.encoder import (
    CLS_ID,
    PAD_ID,
    SEP_ID,
    SPECIAL_TOKENS,
    UNK_ID,
    ModelConfig,
    PrfEncoder,
    Vocabulary,
    build_doc_input,
    build_prf_input,
    build_query_input,
    build_vocab,
    clone_encoder,
    cls_attention,
    encode,
    encode_batch,
    init_encoder,
    load_checkpoint,
    save_checkpoint,
    tokenize,
)
from dense_prf.errors import CorruptIndexError


# ------------------------------
# Vocabulary / tokenize
# ------------------------------
class TestVocabulary:
    def test_min_count(self):
        vocab = build_vocab(["a a b"], min_count=2)
        assert vocab.tokens == SPECIAL_TOKENS + ("a",)

    def test_single_token(self):
        vocab = build_vocab(["x"])
        assert vocab.tokens == SPECIAL_TOKENS + ("x",)
        assert vocab.id_of("x") == 4

    def test_frequency_then_lexicographic(self):
        vocab = build_vocab(["b a a", "c"])
        assert vocab.tokens[4:] == ("a", "b", "c")

    def test_deterministic(self, bench):
        texts = [d.text for d in bench.corpus]
        assert build_vocab(texts).tokens == build_vocab(list(reversed(texts))).tokens

    def test_empty_corpus(self):
        with pytest.raises(ValueError, match="empty corpus"):
            build_vocab(["", "  "])

    def test_save_load(self, tmp_path, vocab):
        assert Vocabulary.load(vocab.save(tmp_path / "vocab.txt")).tokens == vocab.tokens

    def test_specials_required(self):
        with pytest.raises(ValueError, match="must start with"):
            Vocabulary(("a", "b"))


class TestTokenize:
    def test_lowercases(self):
        vocab = build_vocab(["un fao"])
        assert tokenize("UN FAO", vocab) == [vocab.id_of("un"), vocab.id_of("fao")]

    def test_unknown(self):
        assert tokenize("zzzz", build_vocab(["un fao"])) == [UNK_ID]

    def test_punctuation(self):
        vocab = build_vocab(["what is un fao"])
        text = "what is un fao?"
        by_word = [i for w in ("what", "is", "un", "fao") for i in tokenize(w, vocab)]
        assert tokenize(text, vocab) == by_word

    def test_empty(self, vocab):
        assert tokenize("", vocab) == []


# ------------------------------
# Layouts
# ------------------------------
class TestLayouts:
    def test_query_input(self):
        seq = build_query_input([10, 11], max_len=8, query_budget=4)
        assert seq.ids == (CLS_ID, 10, 11, SEP_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID)
        assert seq.attention_mask == (1, 1, 1, 1, 0, 0, 0, 0)

    def test_query_budget_truncates_tail(self):
        seq = build_query_input([10, 11, 12, 13, 14], max_len=16, query_budget=3)
        assert seq.ids[: seq.length] == (CLS_ID, 10, 11, 12, SEP_ID)

    def test_query_round_trip(self):
        q = list(range(10, 40))
        seq = build_query_input(q, max_len=32, query_budget=24)
        content = [i for i in seq.ids if i not in (CLS_ID, SEP_ID, PAD_ID)]
        assert content == q[:24]

    def test_empty_query(self):
        with pytest.raises(ValueError, match="empty"):
            build_query_input([], max_len=8)

    def test_prf_k0_equals_query_input(self):
        inp = build_prf_input([10, 11], [], max_len=16, query_budget=4)
        assert inp.seq == build_query_input([10, 11], max_len=16, query_budget=4)
        assert inp.k == 0

    def test_prf_ample_budget(self):
        inp = build_prf_input([10], [[20], [30]], max_len=7, query_budget=4)
        assert inp.seq.ids == (CLS_ID, 10, SEP_ID, 20, SEP_ID, 30, SEP_ID)
        assert inp.query_span == (1, 2)
        assert inp.doc_spans == ((3, 4), (5, 6))

    def test_prf_truncates_document_tail(self):
        inp = build_prf_input([10, 11], [[20, 21, 22], [30, 31]], max_len=8, query_budget=4)
        assert inp.seq.ids == (CLS_ID, 10, 11, SEP_ID, 20, 21, SEP_ID, SEP_ID)
        assert inp.query_span == (1, 3)
        assert inp.doc_spans == ((4, 6), (7, 7))

    def test_prf_too_small(self):
        with pytest.raises(ValueError, match="cannot hold"):
            build_prf_input([10, 11], [[20], [30], [40]], max_len=6, query_budget=4)

    def test_prf_spans_partition(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            q = list(rng.integers(10, 50, size=rng.integers(1, 6)))
            docs = [list(rng.integers(10, 50, size=rng.integers(0, 8))) for _ in range(rng.integers(0, 5))]
            max_len = int(rng.integers(2 + len(q) + len(docs), 40))
            inp = build_prf_input(q, docs, max_len=max_len, query_budget=8)
            n = inp.seq.length
            spans = (inp.query_span,) + inp.doc_spans
            covered = [p for a, b in spans for p in range(a, b)]
            content = [p for p in range(n) if inp.seq.ids[p] not in (CLS_ID, SEP_ID)]
            assert covered == content
            # every span is closed by the [SEP] right after it
            assert all(inp.seq.ids[b] == SEP_ID for _, b in spans)
            assert inp.seq.ids[n - 1] == SEP_ID
            # the overall tail is cut: the kept document tokens are a prefix of the concatenation
            kept = [inp.seq.ids[p] for a, b in inp.doc_spans for p in range(a, b)]
            assert kept == [t for d in docs for t in d][: len(kept)]

    def test_doc_input(self):
        seq = build_doc_input([20, 21, 22], max_len=4)
        assert seq.ids == (CLS_ID, 20, 21, SEP_ID)
        assert build_doc_input([], max_len=4).ids == (CLS_ID, SEP_ID, PAD_ID, PAD_ID)


# ------------------------------
# Model
# ------------------------------
def _layer_norm(x, ln):
    w, b = ln.weight.detach().numpy(), ln.bias.detach().numpy()
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * w + b


def _linear(x, lin):
    return x @ lin.weight.detach().numpy().T + lin.bias.detach().numpy()


def _reference_forward(model, ids, with_attention=False):
    """Plain numpy forward pass of an unpadded sequence, one layer at a time."""
    cfg = model.cfg
    t = len(ids)
    x = model.tok_emb.weight.detach().numpy()[ids] + model.pos_emb.weight.detach().numpy()[:t]
    attention = []
    for layer in model.layers:
        h = _layer_norm(x, layer.ln_attn)
        q, k, v = _linear(h, layer.query), _linear(h, layer.key), _linear(h, layer.value)
        heads, attention = [], []
        for i in range(cfg.num_heads):
            sl = slice(i * cfg.head_dim, (i + 1) * cfg.head_dim)
            logits = q[:, sl] @ k[:, sl].T / np.sqrt(cfg.head_dim)
            w = np.exp(logits - logits.max(-1, keepdims=True))
            w /= w.sum(-1, keepdims=True)
            attention.append(w)
            heads.append(w @ v[:, sl])
        x = x + _linear(np.concatenate(heads, axis=-1), layer.out)
        x = x + _linear(np.tanh(_linear(_layer_norm(x, layer.ln_ff), layer.ff_in)), layer.ff_out)
    emb = _linear(_layer_norm(x[0], model.ln_final), model.head)
    return (emb, attention) if with_attention else emb


def _randomize(model, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.3)
    return model


class TestModel:
    def test_matches_reference(self, tiny_model_cfg):
        for layers in (1, 2):
            cfg = replace(tiny_model_cfg, num_layers=layers)
            model = _randomize(init_encoder(cfg))
            seq = build_query_input([5, 9, 7, 6], cfg.max_len, cfg.query_budget)
            expected = _reference_forward(model, list(seq.ids[: seq.length]))
            np.testing.assert_allclose(encode(model, seq), expected, rtol=1e-10, atol=1e-12)

    def test_embedding_shape_and_dtype(self, tiny_model):
        emb = encode(tiny_model, build_query_input([5, 6], 24, 6))
        assert emb.shape == (8,)
        assert emb.dtype == np.float64
        assert np.isfinite(emb).all()

    def test_padding_invariance(self, tiny_model):
        short = build_query_input([5, 6], 24, 6)
        long = build_prf_input([5, 6], [[7, 8, 9, 10, 11, 12]], 24, 6)
        alone = encode(tiny_model, short)
        batched = encode_batch(tiny_model, [short, long])[0]
        np.testing.assert_allclose(alone, batched, rtol=0, atol=1e-12)

    def test_prf_k0_is_bit_identical(self, tiny_model):
        a = encode(tiny_model, build_prf_input([5, 6, 7], [], 24, 6))
        b = encode(tiny_model, build_query_input([5, 6, 7], 24, 6))
        assert a.tobytes() == b.tobytes()

    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError, match="divisible"):
            PrfEncoder(ModelConfig(vocab_size=10, num_heads=3, model_dim=8))

    def test_seeded_init(self, tiny_model_cfg):
        a, b = init_encoder(tiny_model_cfg), init_encoder(tiny_model_cfg)
        for (name, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(x, y), name

    def test_clone_is_independent(self, tiny_model):
        copy = clone_encoder(tiny_model)
        with torch.no_grad():
            copy.head.bias.add_(1.0)
        assert not torch.equal(copy.head.bias, tiny_model.head.bias)

    def test_too_long_sequence(self, tiny_model):
        seq = build_query_input([5] * 30, max_len=40, query_budget=30)
        with pytest.raises(ValueError, match="max_len"):
            encode(tiny_model, seq)


class TestClsAttention:
    def test_sums_to_num_heads(self, tiny_model):
        inp = build_prf_input([5, 6], [[7, 8], [9]], 24, 6)
        attn = cls_attention(tiny_model, inp)
        n = inp.seq.length
        assert attn.values.shape == (24,)
        assert (attn.values >= 0).all()
        assert attn.values[:n].sum() == pytest.approx(tiny_model.cfg.num_heads, abs=1e-6)
        assert (attn.values[n:] == 0).all()

    def test_random_models_and_inputs(self, tiny_model_cfg):
        rng = np.random.default_rng(11)
        v = tiny_model_cfg.vocab_size
        for seed in range(100):
            model = init_encoder(tiny_model_cfg, seed)
            query = rng.integers(4, v, size=int(rng.integers(1, 5))).tolist()
            docs = [rng.integers(4, v, size=int(rng.integers(0, 6))).tolist() for _ in range(int(rng.integers(0, 4)))]
            inp = build_prf_input(query, docs, tiny_model_cfg.max_len, tiny_model_cfg.query_budget)
            attn = cls_attention(model, inp)
            assert attn.values[: inp.seq.length].sum() == pytest.approx(tiny_model_cfg.num_heads, abs=1e-6)
            filler = build_prf_input([4] * 4, [[5] * 6] * 3, tiny_model_cfg.max_len, tiny_model_cfg.query_budget)
            np.testing.assert_allclose(encode(model, inp), encode_batch(model, [inp, filler])[0], rtol=0, atol=1e-6)

    def test_heads_match_reference_softmax(self, tiny_model_cfg):
        for layers in (1, 2):
            cfg = replace(tiny_model_cfg, num_layers=layers)
            model = _randomize(init_encoder(cfg), seed=layers)
            inp = build_prf_input([5, 9], [[7, 8, 6], [10]], cfg.max_len, cfg.query_budget)
            n = inp.seq.length
            _, expected = _reference_forward(model, list(inp.seq.ids[:n]), with_attention=True)
            attn = cls_attention(model, inp)
            for h in range(cfg.num_heads):
                np.testing.assert_allclose(attn.head_weights[h, :n], expected[h][0], rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(attn.values[:n], sum(w[0] for w in expected), rtol=1e-10, atol=1e-12)

    def test_uniform_when_keys_are_zero(self, tiny_model):
        with torch.no_grad():
            tiny_model.layers[-1].key.weight.zero_()
            tiny_model.layers[-1].key.bias.zero_()
        inp = build_prf_input([5, 6], [[7, 8, 9]], 24, 6)
        attn = cls_attention(tiny_model, inp)
        n = inp.seq.length
        np.testing.assert_allclose(attn.values[:n], tiny_model.cfg.num_heads / n, rtol=1e-12)

    def test_head_decomposition(self, tiny_model):
        inp = build_prf_input([5, 6], [[7, 8]], 24, 6)
        attn = cls_attention(tiny_model, inp)
        assert attn.num_heads == 2
        np.testing.assert_allclose(attn.head_weights.sum(axis=0), attn.values)
        np.testing.assert_allclose(attn.head_weights.sum(axis=1), [1.0, 1.0], atol=1e-12)
        per_head = np.einsum("ht,htd->hd", attn.head_weights, attn.head_values)
        np.testing.assert_allclose(per_head.reshape(-1), attn.context, atol=1e-12)


# ------------------------------
# Checkpoints
# ------------------------------
class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_model):
        path = save_checkpoint(_randomize(tiny_model), tmp_path / "m.ckpt", {"phase": "prf", "k": 3})
        loaded, meta = load_checkpoint(path)
        assert loaded.cfg == tiny_model.cfg
        assert meta == {"k": "3", "phase": "prf"}
        for (name, x), (_, y) in zip(tiny_model.state_dict().items(), loaded.state_dict().items()):
            assert torch.equal(x, y), name
        seq = build_query_input([5, 6], 24, 6)
        assert encode(loaded, seq).tobytes() == encode(tiny_model, seq).tobytes()

    def test_corrupt(self, tmp_path, tiny_model):
        path = save_checkpoint(tiny_model, tmp_path / "m.ckpt")
        data = bytearray(path.read_bytes())
        data[-20] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptIndexError, match="checksum"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"hello world, definitely not a model")
        with pytest.raises(CorruptIndexError, match="magic"):
            load_checkpoint(path)

    def test_meta_with_newline(self, tmp_path, tiny_model):
        with pytest.raises(ValueError, match="key=value"):
            save_checkpoint(tiny_model, tmp_path / "m.ckpt", {"note": "a\nb"})
