import json
import math

import numpy as np
import pytest

from vfalign.data import Modality, Split
from vfalign.encoders import forward, init
from vfalign.evaluation import (EvalConfig, InsufficientIdentities, SplitView, average_precisions,
                                embed_split, evaluate_all, evaluate_view, export_embeddings,
                                generate_matching_queries, generate_queries,
                                generate_retrieval_queries, generate_verification_pairs,
                                match_accuracy, matching_scores, read_embeddings, retrieval_map,
                                run_matching, score, similarity_matrix, split_view,
                                verification_auc)
from vfalign.rng import Rng
from vfalign.synth import SynthConfig, generate

from oracles import auc_pairs, average_precision_loops, match_accuracy_loops


def one_hot_view(n_ids=12, per=3, attr=None):
    """Oracle embeddings: every sample is its identity's one-hot vector."""
    ids = np.repeat(np.arange(n_ids), per)
    emb = np.eye(n_ids)[ids]
    attr = np.arange(n_ids) % 2 if attr is None else attr
    return SplitView(emb, ids, emb.copy(), ids.copy(), attr)


def random_view(n_ids=20, per=4, D=6, seed=0):
    rng = np.random.default_rng(seed)
    ids = np.repeat(np.arange(n_ids), per)
    return SplitView(rng.normal(size=(len(ids), D)), ids, rng.normal(size=(len(ids), D)), ids.copy(),
                     rng.integers(0, 2, n_ids))


def binomial_3sigma(p, n):
    return 3 * math.sqrt(p * (1 - p) / n)


class TestScore:
    def test_examples(self):
        assert score([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0, abs=1e-15)
        assert score([1, 0], [0, 5]) == 0.0
        assert score([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
        assert score([1, 0], [1, 1]) == pytest.approx(0.7071068, abs=1e-7)

    def test_zero_norm(self):
        with pytest.raises(ValueError):
            score([0, 0], [1, 0])
        with pytest.raises(ValueError):
            similarity_matrix(np.zeros((1, 2)), np.ones((1, 2)))

    def test_matrix_agrees(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        S = similarity_matrix(a, b)
        for i in range(4):
            for j in range(5):
                assert S[i, j] == pytest.approx(score(a[i], b[j]), abs=1e-15)
        np.testing.assert_array_equal(similarity_matrix(a, b, "dot"), a @ b.T)


class TestMetrics:
    def test_auc_examples(self):
        assert verification_auc([0.9], [0.1]) == 1.0
        assert verification_auc([0.5, 0.5], [0.5]) == 0.5
        assert verification_auc([0.8, 0.4], [0.6, 0.2]) == 0.75
        with pytest.raises(ValueError):
            verification_auc([], [0.1])

    def test_ap_examples(self):
        assert retrieval_map([[0.9, 0.1]], [[True, False]]) == 1.0
        assert retrieval_map([[0.1, 0.9]], [[True, False]]) == 0.5
        ap = average_precisions([[0.9, 0.7, 0.5, 0.3]], [[True, False, True, False]])
        assert ap[0] == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)
        assert ap[0] == pytest.approx(0.8333, abs=1e-4)
        with pytest.raises(ValueError):
            retrieval_map([[0.3, 0.2]], [[False, False]])

    def test_ap_ties_keep_gallery_order(self):
        assert retrieval_map([[0.5, 0.5]], [[False, True]]) == 0.5
        assert retrieval_map([[0.5, 0.5]], [[True, False]]) == 1.0

    def test_matching_ties_are_misses(self):
        assert match_accuracy([[0.5, 0.5], [0.6, 0.4]], [0, 0]) == 0.5
        with pytest.raises(ValueError):
            match_accuracy([[1.0]], [0])
        with pytest.raises(ValueError):
            match_accuracy([[1.0, 0.0]], [2])

    def test_against_oracles(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for trial in range(100):
            # a third of the sets use coarse scores so ties are common
            quant = trial % 3 == 0
            draw = (lambda *s: np.round(rng.uniform(size=s), 1)) if quant else (lambda *s: rng.normal(size=s))
            pos, neg = draw(int(rng.integers(1, 15))), draw(int(rng.integers(1, 15)))
            worst = max(worst, abs(verification_auc(pos, neg) - auc_pairs(pos, neg)))

            Q, G = int(rng.integers(1, 6)), int(rng.integers(2, 9))
            S = draw(Q, G)
            rel = rng.uniform(size=(Q, G)) < 0.4
            rel[np.arange(Q), rng.integers(0, G, Q)] = True
            ref = np.mean([average_precision_loops(list(S[q]), list(rel[q])) for q in range(Q)])
            worst = max(worst, abs(retrieval_map(S, rel) - ref))

            p = rng.integers(0, G, Q)
            worst = max(worst, abs(match_accuracy(S, p) - match_accuracy_loops(S.tolist(), p.tolist())))
        assert worst < 1e-12

    def test_two_way_matching_is_pairwise(self):
        rng = np.random.default_rng(5)
        pos, neg = rng.normal(size=500), rng.normal(size=500)
        scores = np.where(np.arange(500)[:, None] % 2 == 0, np.c_[pos, neg], np.c_[neg, pos])
        acc = match_accuracy(scores, np.arange(500) % 2)
        assert acc == np.mean(pos > neg)


class TestChance:
    @pytest.mark.parametrize("n", [2, 3, 5, 10])
    def test_random_scores(self, n):
        rng = np.random.default_rng(n)
        Q = 20_000
        acc = match_accuracy(rng.uniform(size=(Q, n)), rng.integers(0, n, Q))
        assert abs(acc - 1 / n) < binomial_3sigma(1 / n, Q)

    def test_random_auc(self):
        rng = np.random.default_rng(0)
        P = Nn = 5000
        auc = verification_auc(rng.uniform(size=P), rng.uniform(size=Nn))
        sigma = math.sqrt((P + Nn + 1) / (12 * P * Nn))  # Mann-Whitney null
        assert abs(auc - 0.5) < 3 * sigma


class TestQueries:
    def test_minimal_instance(self):
        view = SplitView(np.eye(2), np.array([0, 1]), np.eye(2), np.array([0, 1]), np.array([0, 1]))
        q = generate_matching_queries(view, "V-F", "U", 2, Rng(0), EvalConfig(queries_per_probe=3))
        assert sorted(set(q.probe.tolist())) == [0, 1]
        for probe, gal, pos in zip(q.probe, q.gallery, q.positive):
            assert gal[pos] == probe and sorted(gal) == [0, 1]

    @pytest.mark.parametrize("direction", ["V-F", "F-V"])
    def test_structure(self, direction):
        view = random_view()
        n = 5
        q = generate_matching_queries(view, direction, "U", n, Rng(1))
        probe_ids = (view.voice_ids if direction == "V-F" else view.face_ids)[q.probe]
        gal_ids = (view.face_ids if direction == "V-F" else view.voice_ids)[q.gallery]
        assert len(q) == len(view.voice_ids) * 20
        assert np.all(gal_ids[np.arange(len(q)), q.positive] == probe_ids)
        # exactly one positive and distinct distractor identities
        assert np.all((gal_ids == probe_ids[:, None]).sum(axis=1) == 1)
        assert all(len(set(row)) == n for row in gal_ids)

    def test_restricted_galleries_share_attribute(self):
        view = random_view(seed=3)
        for direction in ("V-F", "F-V"):
            q = generate_matching_queries(view, direction, "G", 4, Rng(2))
            probe_ids = (view.voice_ids if direction == "V-F" else view.face_ids)[q.probe]
            gal_ids = (view.face_ids if direction == "V-F" else view.voice_ids)[q.gallery]
            assert np.all(view.attribute[gal_ids] == view.attribute[probe_ids][:, None])
            pairs = generate_verification_pairs(view, direction, "G", Rng(3))
            cand_ids = (view.face_ids if direction == "V-F" else view.voice_ids)[pairs.candidate]
            probe_ids = (view.voice_ids if direction == "V-F" else view.face_ids)[pairs.probe]
            assert np.all(view.attribute[cand_ids] == view.attribute[probe_ids])
            assert np.array_equal(cand_ids == probe_ids, pairs.label)

    def test_distractors_uniform(self):
        view = random_view(n_ids=6, per=1)
        q = generate_matching_queries(view, "V-F", "U", 2, Rng(4), EvalConfig(queries_per_probe=3000))
        gal_ids = view.face_ids[q.gallery]
        neg = gal_ids[np.arange(len(q)), 1 - q.positive]
        probe_ids = view.voice_ids[q.probe]
        counts = np.bincount(neg[probe_ids == 0], minlength=6)[1:]
        assert counts.min() > 3000 / 5 * 0.85 and counts.max() < 3000 / 5 * 1.15
        assert abs(np.mean(q.positive) - 0.5) < 0.02

    def test_insufficient(self):
        attr = np.array([0, 0, 1, 1, 1])
        view = one_hot_view(5, 1, attr)
        with pytest.raises(InsufficientIdentities):
            generate_matching_queries(view, "V-F", "G", 3, Rng(0))
        generate_matching_queries(view, "V-F", "G", 2, Rng(0))
        with pytest.raises(InsufficientIdentities):
            generate_matching_queries(one_hot_view(1, 2, np.array([0])), "V-F", "U", 2, Rng(0))

    def test_deterministic(self):
        view = random_view()
        for protocol in ("matching", "verification", "retrieval"):
            a = generate_queries(view, protocol, "F-V", "U", Rng(9), n=3)
            b = generate_queries(view, protocol, "F-V", "U", Rng(9), n=3)
            assert all(np.array_equal(getattr(a, f), getattr(b, f))
                       for f in ("probe", "gallery", "candidate", "label", "gallery_ids") if hasattr(a, f))

    def test_query_budget_cap(self):
        view = random_view()
        q = generate_matching_queries(view, "V-F", "U", 2, Rng(0), EvalConfig(max_queries=100))
        assert len(q) == 100
        r = generate_retrieval_queries(view, "V-F", "U", Rng(0), EvalConfig(max_queries=7))
        assert len(r) == 7


class TestReport:
    def test_oracle_embeddings_are_perfect(self):
        report = evaluate_view(one_hot_view(), Rng(0), EvalConfig(queries_per_probe=5))
        assert set(report.metrics) == {f"{t}/{d}/{r}" for t in ("matching", "verification", "retrieval")
                                       for d in ("V-F", "F-V") for r in ("U", "G")}
        assert all(v == 1.0 for v in report.metrics.values())
        assert all(acc == 1.0 for acc in report.curve["V-F/U"].values())
        assert sorted(report.curve["V-F/U"]) == list(range(2, 11))

    def test_restricted_curve_absent_without_support(self):
        # six identities per attribute value: 1:7 and up cannot be restricted
        report = evaluate_view(one_hot_view(12, 2), Rng(0), EvalConfig(queries_per_probe=2))
        curve = report.curve["F-V/G"]
        assert all(curve[n] == 1.0 for n in range(2, 7))
        assert all(curve[n] is None for n in range(7, 11))
        assert report.curve["F-V/U"][10] == 1.0

    def test_untrained_encoder_is_at_chance(self):
        ds = generate(SynthConfig(M=600, samples_per_identity_per_modality=10, frac_personalized=0.0, seed=2))
        params = init({"d_in": 64, "H": 32, "D": 16, "M": 3}, Rng(5))
        view = embed_split(params, ds, Split.TEST)
        q = generate_matching_queries(view, "V-F", "U", 2, Rng(6))
        acc = run_matching(similarity_matrix(view.voice, view.face), q)
        # queries repeat probes, so use the number of distinct probe samples as the effective count
        assert abs(acc - 0.5) < binomial_3sigma(0.5, len(view.voice_ids))

    def test_symmetric_model_symmetric_metrics(self):
        # shared projection and zero noise: voice and face observations of an identity coincide
        ds = generate(SynthConfig(M=300, samples_per_identity_per_modality=4, frac_personalized=0.0,
                                  noise_easy=1e-300, noise_hard=2e-300, seed=4))
        view = split_view(ds, Split.TEST)
        Z = np.stack([i.latent for i in ds.identities])
        view = SplitView(Z[view.face_ids] + 0.3 * np.random.default_rng(0).normal(size=(len(view.face_ids), 16)),
                         view.face_ids,
                         Z[view.voice_ids] + 0.3 * np.random.default_rng(1).normal(size=(len(view.voice_ids), 16)),
                         view.voice_ids, view.attribute)
        report = evaluate_view(view, Rng(0))
        for task in ("matching", "verification", "retrieval"):
            assert report.metrics[f"{task}/V-F/U"] == pytest.approx(report.metrics[f"{task}/F-V/U"], abs=0.03)

    def test_json_deterministic_and_csv(self, tmp_path):
        ds = generate(SynthConfig(M=100, samples_per_identity_per_modality=3, seed=1))
        params = init({"d_in": 64, "H": 8, "D": 4, "M": 5}, Rng(1))
        a = evaluate_all(params, ds, Split.TEST, Rng(3))
        b = evaluate_all(params, ds, Split.TEST, Rng(3))
        assert a.to_json() == b.to_json()
        paths = a.write(tmp_path / "report.json")
        assert json.loads(paths[0].read_text())["metrics"] == a.metrics
        assert sorted(p.name for p in paths[1:]) == [f"report_curve_{d}_{r}.csv" for d in ("F-V", "V-F")
                                                    for r in ("G", "U")]
        lines = (tmp_path / "report_curve_V-F_U.csv").read_text().splitlines()
        assert lines[0] == "n,acc" and len(lines) == 10
        assert all(0 <= v <= 1 for v in a.metrics.values() if v is not None)

    def test_counts_match_queries(self):
        view = random_view()
        report = evaluate_view(view, Rng(0), EvalConfig(queries_per_probe=2))
        q = generate_matching_queries(view, "V-F", "U", 2, Rng(0).child("matching/V-F/U/2"),
                                      EvalConfig(queries_per_probe=2))
        assert report.counts["matching/V-F/U"] == len(q)
        assert report.metrics["matching/V-F/U"] == match_accuracy(
            matching_scores(similarity_matrix(view.voice, view.face), q), q.positive)


class TestExport:
    def test_rows_and_exactness(self, tmp_path):
        ds = generate(SynthConfig(M=60, samples_per_identity_per_modality=3, seed=7))
        params = init({"d_in": 64, "H": 8, "D": 4, "M": 5}, Rng(2))
        n = export_embeddings(params, ds, Split.TEST, tmp_path / "a.csv")
        members = ds.split_ids(Split.TEST)
        expected = np.isin(ds.face_ids, members).sum() + np.isin(ds.voice_ids, members).sum()
        assert n == expected
        ids, mods, emb = read_embeddings(tmp_path / "a.csv")
        view = split_view(ds, Split.TEST)
        nf = len(view.face_ids)
        np.testing.assert_array_equal(emb[:nf], forward(params, view.face, Modality.FACE)[0])
        np.testing.assert_array_equal(emb[nf:], forward(params, view.voice, Modality.VOICE)[0])
        assert mods[:nf] == ["face"] * nf and list(ids[:nf]) == list(view.face_ids)
        export_embeddings(params, ds, Split.TEST, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
