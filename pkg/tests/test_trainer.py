"""Loss, gradients, negative sampling, checkpoint selection and short training runs."""

import json
import math
import zlib
from dataclasses import replace

import numpy as np
import pytest
import torch

from dense_prf.analysis.geometry import geometry_at
from dense_prf.encoder import ModelConfig, clone_encoder, init_encoder, tokenize
from dense_prf.errors import DimensionMismatchError, MissingEmbeddingError, TrainingDivergedError
from dense_prf.evaluation import Qrels
from dense_prf.index import ScoredHit, build_index
from dense_prf.retrieval import RetrievalContext, RunList, embed_corpus, first_pass, retrieve_all, tokenize_corpus
from dense_prf.trainer import (
    TrainConfig,
    TrainingExample,
    batch_layout,
    batch_nll,
    gradient_check,
    loss_gradient,
    make_examples,
    nll_loss,
    prf_batch_loss,
    sample_negatives,
    select_best_checkpoint,
    train,
)


def _run(tag, ranked):
    return RunList(tag, {q: [ScoredHit(d, float(-r), r) for r, d in enumerate(docs, start=1)]
                         for q, docs in ranked.items()})


# ------------------------------
# Loss
# ------------------------------
class TestNllLoss:
    def test_equal_scores(self):
        assert nll_loss([1.0, 0.0], [1.0, 0.0], [[1.0, 0.0]] * 3) == pytest.approx(math.log(4))

    def test_hand_value(self):
        expected = math.log(math.e ** 2 + math.e + 1) - 2
        assert nll_loss([1.0, 0.0], [2.0, 0.0], [[1.0, 0.0], [0.0, 0.0]]) == pytest.approx(expected, rel=1e-12)

    def test_confident(self):
        assert nll_loss([1.0], [50.0], [[0.0]]) < 1e-8

    def test_no_overflow(self):
        assert nll_loss([1.0], [1000.0], [[999.0]]) == pytest.approx(math.log1p(math.exp(-1)))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            nll_loss([1.0, 0.0], [1.0, 0.0, 0.0], [[1.0, 0.0]])

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(0)
        q, docs = rng.standard_normal((1, 4)), rng.standard_normal((5, 4))
        loss = batch_nll(torch.tensor(q), torch.tensor(docs), torch.tensor([2]), torch.zeros((1, 5), dtype=torch.bool))
        expected = nll_loss(q[0], docs[2], np.delete(docs, 2, axis=0))
        assert float(loss) == pytest.approx(expected, rel=1e-12)

    def test_gradient_wrt_query(self):
        q = torch.tensor([[0.3, -0.2]], dtype=torch.float64, requires_grad=True)
        docs = torch.tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5]], dtype=torch.float64)
        batch_nll(q, docs, torch.tensor([0]), torch.zeros((1, 3), dtype=torch.bool)).backward()
        p = torch.softmax(q.detach() @ docs.T, dim=1)
        expected = (p @ docs - docs[0]).numpy()
        np.testing.assert_allclose(q.grad.numpy(), expected, rtol=1e-12)

    def test_negative_order_does_not_matter(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            dim, m = int(rng.integers(1, 9)), int(rng.integers(1, 12))
            q, dp, dm = rng.standard_normal(dim), rng.standard_normal(dim), rng.standard_normal((m, dim))
            shuffled = dm[rng.permutation(m)]
            assert nll_loss(q, dp, shuffled) == pytest.approx(nll_loss(q, dp, dm), rel=1e-12, abs=1e-12)

            docs = np.vstack([dp, dm])
            perm = rng.permutation(m + 1)
            none = torch.zeros((1, m + 1), dtype=torch.bool)
            a = batch_nll(torch.tensor(q[None]), torch.tensor(docs), torch.tensor([0]), none)
            b = batch_nll(torch.tensor(q[None]), torch.tensor(docs[perm]), torch.tensor([int(np.argmin(perm))]), none)
            assert float(b) == pytest.approx(float(a), rel=1e-12, abs=1e-12)

    def test_extra_negative_never_lowers_loss(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            dim, m = int(rng.integers(1, 9)), int(rng.integers(0, 10))
            q, dp = rng.standard_normal(dim), rng.standard_normal(dim)
            dm = rng.standard_normal((m, dim)) * 3
            extra = rng.standard_normal((1, dim)) * 3
            more = np.vstack([dm, extra])
            assert nll_loss(q, dp, more) >= nll_loss(q, dp, dm) - 1e-12

            def batch(negs):
                docs = torch.tensor(np.vstack([dp, negs]))
                return float(batch_nll(torch.tensor(q[None]), docs, torch.tensor([0]),
                                       torch.zeros((1, len(docs)), dtype=torch.bool)))

            assert batch(more) >= batch(dm) - 1e-12


class TestBatchLayout:
    def _batch(self):
        return [TrainingExample("q1", (5,), "a", ("x",)), TrainingExample("q2", (6,), "c", ("b",))]

    def test_in_batch_excludes_other_relevant(self):
        qrels = Qrels({"q1": {"a": 2, "b": 1}, "q2": {"c": 2}})
        columns, target, exclude = batch_layout(self._batch(), qrels, in_batch=True)
        assert columns == ["a", "x", "c", "b"]
        assert target.tolist() == [0, 2]
        assert exclude.tolist() == [[False, False, False, True], [False, False, False, False]]

    def test_without_sharing(self):
        _, _, exclude = batch_layout(self._batch(), None, in_batch=False)
        assert exclude.tolist() == [[False, False, True, True], [True, True, False, False]]

    def test_positive_cannot_be_negative(self):
        with pytest.raises(ValueError, match="also a negative"):
            TrainingExample("q1", (5,), "a", ("a",))


# ------------------------------
# Negatives / selection
# ------------------------------
class TestSampleNegatives:
    def test_forced(self):
        run = _run("r", {"q1": ["p", "n1", "n2", "n3"]})
        qrels = Qrels({"q1": {"p": 2}})
        negs = sample_negatives(run, qrels, n=3, seed=1)
        assert sorted(negs["q1"]) == ["n1", "n2", "n3"]

    def test_deterministic(self):
        run = _run("r", {"q1": [f"d{i}" for i in range(50)], "q2": [f"d{i}" for i in range(50, 0, -1)]})
        qrels = Qrels({"q1": {"d0": 1}, "q2": {"d7": 2}})
        a = sample_negatives(run, qrels, n=5, seed=9)
        assert a == sample_negatives(run, qrels, n=5, seed=9)
        assert "d0" not in a["q1"] and "d7" not in a["q2"]
        assert len(set(a["q1"])) == 5

    def test_per_query_seeded_draw(self):
        ranked = [f"d{i:02d}" for i in range(30)]
        run = _run("r", {"q17": ranked, "q3": ranked[::-1]})
        qrels = Qrels({"q17": {"d04": 2, "d11": 1, "d12": 0}})
        cand = [d for d in ranked if d not in ("d04", "d11")]
        rng = np.random.default_rng([42, zlib.crc32(b"q17")])
        expected = [cand[i] for i in rng.permutation(len(cand))[:8]]
        negs = sample_negatives(run, qrels, n=8, seed=42)
        assert negs["q17"] == expected
        assert "d12" in cand
        # a query's draw does not depend on the other queries in the run
        assert sample_negatives(run.subset(["q17"]), qrels, n=8, seed=42)["q17"] == expected
        assert sample_negatives(run, qrels, n=8, seed=43)["q17"] != expected

    def test_respects_depth(self):
        run = _run("r", {"q1": [f"d{i}" for i in range(20)]})
        negs = sample_negatives(run, Qrels({"q1": {}}), n=4, seed=0, depth=4)
        assert sorted(negs["q1"]) == ["d0", "d1", "d2", "d3"]

    def test_pads_from_corpus(self):
        run = _run("r", {"q1": ["p", "n1"]})
        qrels = Qrels({"q1": {"p": 2, "r": 1}})
        negs = sample_negatives(run, qrels, n=3, seed=0, corpus_ids=["p", "n1", "r", "x", "y"])
        assert negs["q1"][0] == "n1"
        assert sorted(negs["q1"]) == ["n1", "x", "y"]

    def test_too_few_without_corpus(self):
        with pytest.raises(ValueError, match="no corpus"):
            sample_negatives(_run("r", {"q1": ["p", "n1"]}), Qrels({"q1": {"p": 2}}), n=3, seed=0)


class TestSelectBest:
    def test_highest(self):
        assert select_best_checkpoint([(1, 0.10), (2, 0.30), (3, 0.25)]) == (2, 0.30)

    def test_tie_goes_to_earlier(self):
        assert select_best_checkpoint([(1, 0.2), (2, 0.2)]) == (1, 0.2)

    def test_empty(self):
        with pytest.raises(ValueError):
            select_best_checkpoint([])


# ------------------------------
# PRF setup on the tiny collection
# ------------------------------
@pytest.fixture
def prf_setup(bench, vocab, tiny_model_cfg):
    baseline = init_encoder(tiny_model_cfg)
    doc_tokens = tokenize_corpus(bench.corpus, vocab)
    index = build_index(embed_corpus(baseline, doc_tokens))
    queries = bench.queries["train"] + bench.queries["dev"]
    fp = retrieve_all(queries, lambda text: first_pass(text, baseline, index, 30, vocab), "first_pass")
    ctx = RetrievalContext(vocab=vocab, doc_tokens=doc_tokens, index=index, baseline=baseline, first_pass=fp)
    return ctx


class TestMakeExamples:
    def test_positives_are_top_grade(self, bench, prf_setup):
        negs = sample_negatives(prf_setup.first_pass, bench.qrels, 2, 0, depth=30)
        examples = make_examples(bench.queries["train"], bench.qrels, prf_setup, negs, k=2)
        assert examples
        for ex in examples:
            assert bench.qrels.grade(ex.query_id, ex.positive_doc_id) == 2
            assert list(ex.prf_doc_ids) == prf_setup.first_pass.doc_ids(ex.query_id, 2)
            assert all(bench.qrels.grade(ex.query_id, d) < 1 for d in ex.negative_doc_ids)

    def test_k0_has_no_feedback(self, bench, prf_setup):
        negs = sample_negatives(prf_setup.first_pass, bench.qrels, 2, 0, depth=30)
        examples = make_examples(bench.queries["train"], bench.qrels, prf_setup, negs, k=0)
        assert all(ex.prf_doc_ids == () for ex in examples)


class TestGradients:
    def _tiny_check_setup(self, bench, vocab):
        cfg = ModelConfig(vocab_size=len(vocab), num_layers=1, num_heads=2, model_dim=8, ff_dim=16,
                          max_len=16, query_budget=4, seed=11)
        model = init_encoder(cfg)
        doc_tokens = {d.doc_id: tokenize(d.text, vocab)[:3] for d in bench.corpus}
        batch = []
        for q in bench.queries["train"][:2]:
            pos = bench.qrels.relevant(q.query_id, 2)[0]
            negs = tuple(d for d in doc_tokens if bench.qrels.grade(q.query_id, d) < 1)[:2]
            batch.append(TrainingExample(q.query_id, tuple(tokenize(q.text, vocab)), pos, negs,
                                         tuple(list(doc_tokens)[:2])))
        needed = {d for ex in batch for d in (ex.positive_doc_id,) + ex.negative_doc_ids}
        index = build_index(embed_corpus(init_encoder(cfg, seed=12), {d: doc_tokens[d] for d in needed}))
        return model, batch, index, doc_tokens

    def test_finite_differences(self, bench, vocab):
        model, batch, index, doc_tokens = self._tiny_check_setup(bench, vocab)
        result = gradient_check(model, batch, index, doc_tokens, bench.qrels)
        assert result.checked == sum(p.numel() for p in model.parameters())
        assert result.max_rel_error <= 1e-4, result.worst

    def test_only_prf_encoder_receives_gradients(self, bench, prf_setup):
        ctx = prf_setup
        prf = clone_encoder(ctx.baseline)
        negs = sample_negatives(ctx.first_pass, bench.qrels, 2, 0, depth=30)
        batch = make_examples(bench.queries["train"], bench.qrels, ctx, negs, k=2)[:4]
        before = ctx.index.matrix.tobytes()
        grads = loss_gradient(prf, batch, ctx.index, ctx.doc_tokens, bench.qrels)
        assert set(grads) == {name for name, _ in prf.named_parameters()}
        assert any(np.abs(g).sum() > 0 for g in grads.values())
        assert all(p.grad is None for p in ctx.baseline.parameters())
        assert ctx.index.matrix.tobytes() == before

    def test_missing_document_embedding(self, bench, prf_setup):
        ex = TrainingExample("q", (5, 6), "no-such-doc", ())
        with pytest.raises(MissingEmbeddingError, match="no-such-doc"):
            prf_batch_loss(prf_setup.baseline, [ex], prf_setup.index, prf_setup.doc_tokens)


# ------------------------------
# Training runs
# ------------------------------
SHORT = TrainConfig(k=2, negatives=2, batch_size=4, total_steps=3, eval_interval=2, log_interval=1,
                    negative_depth=10, learning_rate=0.005, seed=5)


class TestTrain:
    def test_prf_phase(self, tmp_path, bench, prf_setup):
        ctx = prf_setup
        negs = sample_negatives(ctx.first_pass, bench.qrels, SHORT.negatives, SHORT.seed, depth=SHORT.negative_depth,
                                corpus_ids=list(ctx.doc_tokens))
        examples = make_examples(bench.queries["train"], bench.qrels, ctx, negs, SHORT.k)
        baseline_state = {k: v.clone() for k, v in ctx.baseline.state_dict().items()}
        index_bytes = ctx.index.matrix.tobytes()

        result = train("prf", clone_encoder(ctx.baseline), SHORT, examples, ctx, bench.queries["dev"], bench.qrels,
                       log_path=tmp_path / "log.jsonl", snapshot_dir=tmp_path / "snaps")

        assert [s for s, _ in result.evals] == [0, 2, 3]
        assert (result.best_step, result.best_mrr) == select_best_checkpoint(result.evals)
        assert math.isfinite(result.final_loss)
        assert ctx.index.matrix.tobytes() == index_bytes
        for name, value in ctx.baseline.state_dict().items():
            assert torch.equal(value, baseline_state[name]), name
        assert sorted(p.name for p in (tmp_path / "snaps").iterdir()) == [
            "step_000000.ckpt", "step_000002.ckpt", "step_000003.ckpt"]

        records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in records if r["kind"] == "loss"] == [1, 2, 3]
        evals = [r for r in records if r["kind"] == "eval"]
        assert evals[0]["loss"] is None
        assert set(evals[0]["geometry"]) >= {"query_dot", "relevant_dot", "irrelevant_dot"}
        assert evals[0]["group_attention"]["num_queries"] == len(bench.queries["dev"])

    def test_logged_geometry_uses_irrelevant_depth(self, tmp_path, bench, prf_setup):
        ctx = prf_setup
        negs = sample_negatives(ctx.first_pass, bench.qrels, 2, 5, depth=10, corpus_ids=list(ctx.doc_tokens))
        examples = make_examples(bench.queries["train"], bench.qrels, ctx, negs, SHORT.k)
        cfg = replace(SHORT, total_steps=1, eval_interval=1)
        train("prf", clone_encoder(ctx.baseline), cfg, examples, ctx, bench.queries["dev"], bench.qrels,
              log_path=tmp_path / "log.jsonl", irrelevant_depth=1)
        first = json.loads((tmp_path / "log.jsonl").read_text().splitlines()[0])
        expected = geometry_at(0, clone_encoder(ctx.baseline), ctx, bench.queries["dev"], bench.qrels, SHORT.k,
                               irrelevant_depth=1)
        assert first["step"] == 0
        assert first["geometry"] == expected.to_dict()
        default = geometry_at(0, clone_encoder(ctx.baseline), ctx, bench.queries["dev"], bench.qrels, SHORT.k)
        assert default.to_dict() != expected.to_dict()

    def test_non_finite_loss_aborts(self, tmp_path, monkeypatch, bench, prf_setup):
        ctx = prf_setup
        negs = sample_negatives(ctx.first_pass, bench.qrels, 2, 5, depth=10, corpus_ids=list(ctx.doc_tokens))
        examples = make_examples(bench.queries["train"], bench.qrels, ctx, negs, 2)
        real_loss, calls = prf_batch_loss, []

        def loss_then_nan(*args, **kwargs):
            calls.append(1)
            loss = real_loss(*args, **kwargs)
            return loss if len(calls) == 1 else loss * float("nan")

        monkeypatch.setattr("dense_prf.trainer.prf_batch_loss", loss_then_nan)
        cfg = replace(SHORT, eval_interval=1)
        with pytest.raises(TrainingDivergedError, match="step 2"):
            train("prf", clone_encoder(ctx.baseline), cfg, examples, ctx, bench.queries["dev"], bench.qrels,
                  log_path=tmp_path / "log.jsonl", snapshot_dir=tmp_path / "snaps")
        # the step-0 snapshot predates any update; nothing is written once the loss diverges
        assert sorted(p.name for p in (tmp_path / "snaps").iterdir()) == ["step_000000.ckpt", "step_000001.ckpt"]
        records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert max(r["step"] for r in records) == 1

    def test_diverges_before_any_snapshot(self, tmp_path, monkeypatch, bench, prf_setup):
        ctx = prf_setup
        negs = sample_negatives(ctx.first_pass, bench.qrels, 2, 5, depth=10, corpus_ids=list(ctx.doc_tokens))
        examples = make_examples(bench.queries["train"], bench.qrels, ctx, negs, 2)
        real_loss = prf_batch_loss
        monkeypatch.setattr("dense_prf.trainer.prf_batch_loss",
                            lambda *a, **kw: real_loss(*a, **kw) * float("inf"))
        with pytest.raises(TrainingDivergedError, match="step 1"):
            train("prf", clone_encoder(ctx.baseline), SHORT, examples, ctx, bench.queries["dev"], bench.qrels,
                  snapshot_dir=tmp_path / "snaps")
        assert [p.name for p in (tmp_path / "snaps").iterdir()] == ["step_000000.ckpt"]

    def test_reproducible(self, bench, prf_setup):
        ctx = prf_setup
        negs = sample_negatives(ctx.first_pass, bench.qrels, 2, 5, depth=10, corpus_ids=list(ctx.doc_tokens))
        examples = make_examples(bench.queries["train"], bench.qrels, ctx, negs, 2)
        a = train("prf", clone_encoder(ctx.baseline), SHORT, examples, ctx, bench.queries["dev"], bench.qrels)
        b = train("prf", clone_encoder(ctx.baseline), SHORT, examples, ctx, bench.queries["dev"], bench.qrels)
        assert a.evals == b.evals
        for (name, x), (_, y) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
            assert torch.equal(x, y), name

    def test_baseline_phase(self, bench, prf_setup):
        ctx = replace(prf_setup, index=None, first_pass=None)
        run = prf_setup.first_pass
        negs = sample_negatives(run, bench.qrels, 2, 0, depth=10, corpus_ids=list(ctx.doc_tokens))
        examples = make_examples(bench.queries["train"], bench.qrels, ctx, negs, 0)
        cfg = replace(SHORT, k=0)
        result = train("baseline", init_encoder(ctx.baseline.cfg), cfg, examples, ctx,
                       bench.queries["dev"], bench.qrels)
        assert len(result.evals) == 3
        assert 0.0 <= result.best_mrr <= 1.0

    def test_prf_needs_index(self, bench, prf_setup):
        ctx = replace(prf_setup, index=None)
        ex = [TrainingExample("q", (5,), "a", ())]
        with pytest.raises(ValueError, match="frozen document index"):
            train("prf", clone_encoder(prf_setup.baseline), SHORT, ex, ctx, [], bench.qrels)

    def test_unknown_phase(self, bench, prf_setup):
        with pytest.raises(ValueError, match="phase"):
            train("joint", prf_setup.baseline, SHORT, [TrainingExample("q", (5,), "a", ())], prf_setup, [],
                  bench.qrels)
